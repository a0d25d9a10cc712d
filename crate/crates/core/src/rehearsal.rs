//! Rehearsal buffer construction (k-means sampling), intra-modal mixup and
//! the feature-distillation loss.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use coss_numerics::{lit, Element, Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{invalid, io_err, Error, Result};
use crate::model::{Frozen, FrozenTeacher, Keep, Model};
use crate::pretext::{apply_text_mask, sample_text_mask, sample_visual_mask, MaskPlan, TEXT_MASK_RATIO, VISUAL_MASK_RATIO};
use crate::rng::{round_half_up, Rng};
use crate::tokenizers::{Modality, TokenBatch, Tokenizer, Tokens};

// ------------------------------------------------------------------ buffer

/// One retained raw sample. Only the sample itself is kept; it is
/// re-tokenized whenever it is replayed.
#[derive(Clone, Debug, PartialEq)]
pub struct BufferEntry {
    pub stage: usize,
    pub dataset: String,
    pub modality: Modality,
    pub index: usize,
    pub path: String,
    /// Distance to the cluster centroid; `None` for random selection.
    pub distance: Option<f64>,
    pub sample: Sample,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RehearsalBuffer {
    entries: Vec<BufferEntry>,
}

impl RehearsalBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    /// Appends the selected samples of a finished stage.
    pub fn extend_from(&mut self, stage: usize, dataset: &Dataset, selection: &[Selected]) {
        for s in selection {
            self.entries.push(BufferEntry {
                stage,
                dataset: dataset.name.clone(),
                modality: dataset.modality,
                index: s.index,
                path: dataset.sample_ref(s.index),
                distance: s.distance,
                sample: dataset.samples[s.index].clone(),
            });
        }
    }

    /// Entries grouped by source dataset, in order of first appearance.
    pub fn groups(&self) -> Vec<(String, Modality, Vec<&BufferEntry>)> {
        let mut groups: Vec<(String, Modality, Vec<&BufferEntry>)> = Vec::new();
        for e in &self.entries {
            match groups.iter_mut().find(|(name, _, _)| *name == e.dataset) {
                Some(g) => g.2.push(e),
                None => groups.push((e.dataset.clone(), e.modality, vec![e])),
            }
        }
        groups
    }

    /// Tab-separated manifest: stage, modality, sample path, distance.
    pub fn manifest(&self) -> String {
        let mut out = String::from("stage\tmodality\tpath\tdistance\n");
        for e in &self.entries {
            let d = e.distance.map_or_else(|| "-".to_string(), |d| format!("{d:.6}"));
            writeln!(out, "{}\t{}\t{}\t{d}", e.stage, e.modality, e.path).unwrap();
        }
        out
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        fs::write(path, self.manifest()).map_err(io_err(path))
    }
}

/// Parsed manifest row.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub stage: usize,
    pub modality: Modality,
    pub path: String,
    pub distance: Option<f64>,
}

pub fn parse_buffer_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Invalid(format!("buffer manifest line {}: {line:?}", i + 1));
        if f.len() != 4 {
            return Err(bad());
        }
        let modality = serde_json::from_value(serde_json::Value::String(f[1].to_string())).map_err(|_| bad())?;
        rows.push(ManifestEntry {
            stage: f[0].parse().map_err(|_| bad())?,
            modality,
            path: f[2].to_string(),
            distance: if f[3] == "-" { None } else { Some(f[3].parse().map_err(|_| bad())?) },
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------- sampling

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig { max_iter: 100, tol: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    /// Clusters per stage as a fraction of the stage's sample count.
    pub cluster_fraction: f64,
    /// Samples kept per cluster.
    pub per_cluster: usize,
    pub kmeans: KMeansConfig,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { cluster_fraction: 0.01, per_cluster: 5, kmeans: KMeansConfig::default() }
    }
}

impl SamplingConfig {
    /// Config whose retained fraction is `ratio` with the default per-cluster count.
    pub fn for_ratio(ratio: f64, per_cluster: usize) -> Self {
        SamplingConfig { cluster_fraction: ratio / per_cluster as f64, per_cluster, ..Default::default() }
    }

    pub fn clusters(&self, n: usize) -> usize {
        round_half_up(self.cluster_fraction * n as f64).max(1).min(n)
    }
}

/// Mean-pooled final encoder outputs (CLS included) for every sample,
/// computed without masking. Rows follow dataset order.
pub fn extract_embeddings<F: Element>(
    model: &Model<F>,
    tokenizer: &Tokenizer,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    if dataset.is_empty() {
        return invalid(format!("cannot embed empty dataset {}", dataset.name));
    }
    let chunks: Vec<&[Sample]> = dataset.samples.chunks(batch_size.max(1)).collect();
    let pooled: Vec<Vec<Vec<f64>>> = chunks
        .par_iter()
        .map(|chunk| {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let batch: TokenBatch<F> = tokenizer.batch(dataset.modality, &refs)?;
            let mut g = Graph::new();
            let enc = model.backbone.encode(&mut g, &Frozen(&model.params), &batch, &Keep::all(batch.n, batch.len))?;
            Ok(mean_pool(g.value(enc.hidden)))
        })
        .collect::<Result<_>>()?;
    Ok(pooled.into_iter().flatten().collect())
}

/// `[N, S, d]` → N rows of the mean over S.
pub fn mean_pool<F: Element>(hidden: &Tensor<F>) -> Vec<Vec<f64>> {
    let s = hidden.shape();
    let (n, len, d) = (s[0], s[1], s[2]);
    (0..n)
        .map(|i| {
            let mut row = vec![0.0; d];
            for t in 0..len {
                for (j, r) in row.iter_mut().enumerate() {
                    *r += hidden.data()[(i * len + t) * d + j].to_f64().unwrap();
                }
            }
            row.iter_mut().for_each(|r| *r /= len as f64);
            row
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub centroids: Vec<Vec<f64>>,
    /// Nearest centroid of each row (lowest index on ties).
    pub assignments: Vec<usize>,
    /// Sum of squared distances after each assignment step.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centroids.iter().enumerate() {
        let d = sq_dist(x, mu);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans(points: &[Vec<f64>], k: usize, cfg: &KMeansConfig, rng: &mut Rng) -> Result<Clustering> {
    let n = points.len();
    if k == 0 || k > n {
        return invalid(format!("cannot form {k} clusters from {n} points"));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return invalid("embedding rows differ in length");
    }

    let mut centroids = vec![points[rng.gen_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }

    let mut assignments = vec![0; n];
    let mut objective = Vec::new();
    let mut iterations = 0;
    for _ in 0..cfg.max_iter {
        iterations += 1;
        let mut obj = 0.0;
        let mut dists = vec![0.0; n];
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            assignments[i] = c;
            dists[i] = d;
            obj += d;
        }
        objective.push(obj);

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignments) {
            counts[c] += 1;
            sums[c].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        let mut taken = vec![false; n];
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let next = if counts[c] > 0 {
                sums[c].iter().map(|s| s / counts[c] as f64).collect()
            } else {
                // reseed with the point farthest from its own centroid
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .unwrap_or(0);
                taken[far] = true;
                dists[far] = 0.0;
                points[far].clone()
            };
            shift = shift.max(sq_dist(&next, &centroids[c]).sqrt());
            centroids[c] = next;
        }
        if shift < cfg.tol {
            break;
        }
    }
    for (i, p) in points.iter().enumerate() {
        assignments[i] = nearest(p, &centroids).0;
    }
    Ok(Clustering { centroids, assignments, objective, iterations })
}

/// A chosen sample and its distance to the centroid of its cluster.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Selected {
    pub index: usize,
    pub distance: Option<f64>,
}

/// The `k` members nearest to each centroid (lower index on ties), merged
/// and sorted by index.
pub fn select_buffer_samples(points: &[Vec<f64>], clustering: &Clustering, k: usize) -> Vec<Selected> {
    let mut members: Vec<Vec<(f64, usize)>> = vec![Vec::new(); clustering.centroids.len()];
    for (i, (p, &c)) in points.iter().zip(&clustering.assignments).enumerate() {
        members[c].push((sq_dist(p, &clustering.centroids[c]).sqrt(), i));
    }
    let mut chosen: Vec<Selected> = members
        .into_iter()
        .flat_map(|mut m| {
            m.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            m.into_iter().take(k).map(|(d, index)| Selected { index, distance: Some(d) })
        })
        .collect();
    chosen.sort_by_key(|s| s.index);
    chosen.dedup_by_key(|s| s.index);
    chosen
}

/// Uniform random subset of `round(ratio·n)` indices, sorted.
pub fn random_selection(n: usize, ratio: f64, rng: &mut Rng) -> Vec<Selected> {
    let count = round_half_up(ratio * n as f64).min(n);
    let mut idx: Vec<usize> = rand::seq::index::sample(rng, n, count).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|index| Selected { index, distance: None }).collect()
}

// ------------------------------------------------------------------- mixup

/// Binary token mixup of an id grid: each position takes the original id
/// where `lambda` is set, else the id of the shuffled partner row.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMix {
    pub ids: Vec<u32>,
    pub lambda: Vec<bool>,
    pub permutation: Vec<usize>,
    pub threshold: f64,
}

/// `λ ⊙ b + (1 − λ) ⊙ b′` for integer ids.
pub fn binary_mix(b: &[u32], b_prime: &[u32], lambda: &[bool]) -> Vec<u32> {
    b.iter().zip(b_prime).zip(lambda).map(|((&x, &y), &l)| if l { x } else { y }).collect()
}

/// Rows of `[N, ...]` data reordered by `perm`.
fn shuffle_rows<T: Copy>(data: &[T], n: usize, perm: &[usize]) -> Vec<T> {
    let row = data.len() / n.max(1);
    perm.iter().flat_map(|&p| data[p * row..(p + 1) * row].iter().copied()).collect()
}

pub fn binary_mixup(ids: &[u32], n: usize, rng: &mut Rng) -> BinaryMix {
    let mut permutation: Vec<usize> = (0..n).collect();
    permutation.shuffle(rng);
    let threshold: f64 = rng.gen();
    let lambda: Vec<bool> = (0..ids.len()).map(|_| rng.gen::<f64>() >= threshold).collect();
    let partner = shuffle_rows(ids, n, &permutation);
    BinaryMix { ids: binary_mix(ids, &partner, &lambda), lambda, permutation, threshold }
}

/// Convex per-sample blend of a real-valued batch with a shuffled copy.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinualMix<F> {
    pub data: Tensor<F>,
    pub lambda: Vec<f64>,
    pub permutation: Vec<usize>,
}

/// `λ_i · b_i + (1 − λ_i) · b′_i` with λ broadcast over each sample.
pub fn continual_mix<F: Element>(b: &Tensor<F>, b_prime: &Tensor<F>, lambda: &[f64]) -> Tensor<F> {
    let n = lambda.len();
    let row = b.len() / n.max(1);
    let mut out = b.clone();
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        let l = lit::<F>(lambda[k / row]);
        *v = l * *v + (F::one() - l) * b_prime.data()[k];
    }
    out
}

pub fn continual_mixup<F: Element>(b: &Tensor<F>, rng: &mut Rng) -> ContinualMix<F> {
    let n = b.shape()[0];
    let mut permutation: Vec<usize> = (0..n).collect();
    permutation.shuffle(rng);
    let lambda: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
    let partner = Tensor::new(b.shape().to_vec(), shuffle_rows(b.data(), n, &permutation)).unwrap();
    ContinualMix { data: continual_mix(b, &partner, &lambda), lambda, permutation }
}

/// Applies the modality's mixup to a token batch.
pub fn mix_batch<F: Element>(batch: &TokenBatch<F>, rng: &mut Rng) -> TokenBatch<F> {
    match &batch.tokens {
        Tokens::Text { ids, .. } => {
            let mix = binary_mixup(ids, batch.n, rng);
            TokenBatch::from_ids(mix.ids, batch.n, batch.len).unwrap()
        }
        Tokens::Visual { patches, grid } => {
            let mix = continual_mixup(patches, rng);
            TokenBatch::from_patches(batch.modality, mix.data, grid.clone()).unwrap()
        }
    }
}

// ------------------------------------------------------------ distillation

/// Masked inputs for one distillation step.
#[derive(Clone, Debug)]
pub struct FdInputs<F> {
    pub student: (TokenBatch<F>, Keep),
    pub teacher: (TokenBatch<F>, Keep),
}

fn masked_view<F: Element>(batch: &TokenBatch<F>, rng: &mut Rng) -> Result<(TokenBatch<F>, Keep)> {
    match batch.modality {
        Modality::Text => {
            let plan = sample_text_mask(batch, TEXT_MASK_RATIO, rng)?;
            Ok((apply_text_mask(batch, &plan)?, plan.keep()))
        }
        _ => {
            let plan: MaskPlan = sample_visual_mask(batch, VISUAL_MASK_RATIO, rng)?;
            Ok((batch.clone(), plan.keep()))
        }
    }
}

/// Optional mixup, then one mask plan used by both paths (or independent
/// plans when `shared_mask` is off).
pub fn prepare_fd_inputs<F: Element>(
    batch: &TokenBatch<F>,
    mixup: bool,
    shared_mask: bool,
    mixup_rng: &mut Rng,
    mask_rng: &mut Rng,
) -> Result<FdInputs<F>> {
    let mixed = if mixup { mix_batch(batch, mixup_rng) } else { batch.clone() };
    let student = masked_view(&mixed, mask_rng)?;
    let teacher = if shared_mask { student.clone() } else { masked_view(&mixed, mask_rng)? };
    Ok(FdInputs { student, teacher })
}

/// Mean squared difference between student and teacher encoder outputs over
/// every output token and channel.
pub fn fd_loss<F: Element>(
    g: &mut Graph<F>,
    model: &Model<F>,
    teacher: &FrozenTeacher<F>,
    inputs: &FdInputs<F>,
) -> Result<Var> {
    if inputs.student.0.modality != inputs.teacher.0.modality {
        return invalid("student and teacher batches differ in modality");
    }
    let s = model.encode(g, &inputs.student.0, &inputs.student.1)?;
    let t = teacher.encode(g, &inputs.teacher.0, &inputs.teacher.1)?;
    if g.shape(s.hidden) != g.shape(t.hidden) {
        return invalid(format!("student {:?} vs teacher {:?} outputs", g.shape(s.hidden), g.shape(t.hidden)));
    }
    let diff = g.sub(s.hidden, t.hidden)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}
