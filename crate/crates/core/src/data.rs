//! Synthetic multi-modal corpora and the binary tensor file format.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use coss_numerics::{DType, Element, Tensor};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error, Result, TensorFileError};
use crate::rng::{stable_hash, stream_rng, Rng, Stream};
use crate::tokenizers::{Modality, TokenizerConfig};

/// One raw unlabeled sample.
#[derive(Clone, Debug, PartialEq)]
pub enum Sample {
    Text(String),
    /// `[C, H, W]` or `[C, D, H, W]`.
    Visual(Tensor<f32>),
}

/// All samples of one stream, in canonical (manifest) order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub modality: Modality,
    pub samples: Vec<Sample>,
    /// Class of the dominant shape for visual samples.
    pub labels: Vec<Option<usize>>,
    /// Path of each sample relative to the corpus root, when loaded from disk.
    pub paths: Vec<Option<String>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.samples
            .iter()
            .filter_map(|s| match s {
                Sample::Text(t) => Some(t.as_str()),
                Sample::Visual(_) => None,
            })
            .collect()
    }

    /// Reference used in buffer manifests.
    pub fn sample_ref(&self, index: usize) -> String {
        self.paths
            .get(index)
            .cloned()
            .flatten()
            .unwrap_or_else(|| format!("{}#{index}", self.name))
    }
}

// ---------------------------------------------------------------- tensor files

const TENSOR_MAGIC: &[u8; 8] = b"COSSTNSR";
const TENSOR_VERSION: u32 = 1;

pub fn encode_tensor<F: Element>(t: &Tensor<F>) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + t.len() * F::DTYPE.size());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.push(F::DTYPE.tag());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(&mut out);
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], TensorFileError> {
        let end = self.pos.checked_add(n).ok_or(TensorFileError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(TensorFileError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, TensorFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, TensorFileError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decodes a tensor file, converting the stored dtype into `F`.
pub fn decode_tensor<F: Element>(bytes: &[u8]) -> std::result::Result<Tensor<F>, TensorFileError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8).map_err(|_| TensorFileError::BadMagic)? != TENSOR_MAGIC {
        return Err(TensorFileError::BadMagic);
    }
    let version = c.u32()?;
    if version != TENSOR_VERSION {
        return Err(TensorFileError::BadVersion(version));
    }
    let tag = c.take(1)?[0];
    let dtype = DType::from_tag(tag).ok_or(TensorFileError::BadDtype(tag))?;
    let rank = c.u32()? as usize;
    let mut shape = Vec::with_capacity(rank.min(16));
    for _ in 0..rank {
        shape.push(c.u64()? as usize);
    }
    let numel = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or(TensorFileError::Truncated)?;
    let payload = c.take(numel.checked_mul(dtype.size()).ok_or(TensorFileError::Truncated)?)?;
    if c.pos != bytes.len() {
        return Err(TensorFileError::TrailingBytes);
    }
    let data: Vec<F> = match dtype {
        DType::F32 => payload.chunks(4).map(|b| F::from_f32(f32::read_le(b)).unwrap()).collect(),
        DType::F64 => payload.chunks(8).map(|b| F::from_f64(f64::read_le(b)).unwrap()).collect(),
    };
    Ok(Tensor::new(shape, data).expect("length checked"))
}

pub fn write_tensor<F: Element>(path: &Path, t: &Tensor<F>) -> Result<()> {
    if !t.is_finite() {
        return invalid(format!("{}: refusing to write non-finite values", path.display()));
    }
    fs::write(path, encode_tensor(t)).map_err(io_err(path))
}

pub fn read_tensor<F: Element>(path: &Path) -> Result<Tensor<F>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_tensor(&bytes).map_err(|kind| Error::TensorFile { path: path.to_path_buf(), kind })
}

// ----------------------------------------------------------- synthetic corpus

/// Shape primitives placed into synthetic images; the same definitions work
/// in 2D and 3D.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    /// Euclidean ball.
    Disk,
    /// Axis-aligned box.
    Square,
    /// Spherical shell.
    Ring,
    /// Box with the corners cut away along every axis.
    Cross,
}

impl Shape {
    fn contains(self, offset: &[f64], radius: f64) -> bool {
        let l2 = offset.iter().map(|d| d * d).sum::<f64>().sqrt();
        let linf = offset.iter().fold(0f64, |m, d| m.max(d.abs()));
        match self {
            Shape::Disk => l2 <= radius,
            Shape::Square => linf <= radius,
            Shape::Ring => l2 <= radius && l2 >= radius * 0.55,
            Shape::Cross => linf <= radius && offset.iter().filter(|d| d.abs() <= radius / 3.0).count() + 1 >= offset.len(),
        }
    }
}

/// Background texture of a visual family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    /// Linear ramp along the first spatial axis.
    Ramp,
    /// Sinusoidal stripes along the last spatial axis.
    Stripes,
    /// Radial falloff from the centre.
    Radial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Family {
    /// First-order Markov chain over `vocab` synthetic words.
    Markov { vocab: usize, min_words: usize, max_words: usize },
    /// Placed shapes over a background, shifted so the sample mean equals `offset`.
    Shapes {
        background: Background,
        shapes: Vec<Shape>,
        /// Relative frequency of each entry of `shapes` being the dominant one.
        weights: Vec<f64>,
        offset: f64,
        contrast: f64,
        noise: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub name: String,
    pub modality: Modality,
    pub count: usize,
    /// Held-out samples drawn from the same distribution.
    #[serde(default)]
    pub eval_count: usize,
    pub family: Family,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub streams: Vec<StreamSpec>,
    pub tokenizer: TokenizerConfig,
}

impl SyntheticSpec {
    /// Five streams mirroring report / X-ray / CT / MRI / pathology slots.
    pub fn five_modalities(tokenizer: TokenizerConfig, count: usize, eval_count: usize) -> Self {
        let stream = |name: &str, modality, family| StreamSpec {
            name: name.into(),
            modality,
            count,
            eval_count,
            family,
        };
        let shapes = |background, shapes: Vec<Shape>, weights: Vec<f64>, offset, noise| Family::Shapes {
            background,
            shapes,
            weights,
            offset,
            contrast: 1.0,
            noise,
        };
        SyntheticSpec {
            streams: vec![
                stream("text", Modality::Text, Family::Markov { vocab: 48, min_words: 6, max_words: 40 }),
                stream(
                    "image2d",
                    Modality::Image2d,
                    shapes(Background::Ramp, vec![Shape::Disk, Shape::Square, Shape::Cross], vec![0.6, 0.3, 0.1], 0.0, 0.05),
                ),
                stream(
                    "volume3d-a",
                    Modality::Volume3d,
                    shapes(Background::Radial, vec![Shape::Disk, Shape::Square], vec![0.7, 0.3], 0.2, 0.05),
                ),
                stream(
                    "volume3d-b",
                    Modality::Volume3d,
                    shapes(Background::Stripes, vec![Shape::Ring, Shape::Cross], vec![0.5, 0.5], -0.2, 0.05),
                ),
                stream(
                    "image2d-b",
                    Modality::Image2d,
                    shapes(Background::Stripes, vec![Shape::Ring, Shape::Square, Shape::Disk], vec![0.5, 0.3, 0.2], 0.4, 0.05),
                ),
            ],
            tokenizer,
        }
    }

    pub fn stream(&self, name: &str) -> Option<&StreamSpec> {
        self.streams.iter().find(|s| s.name == name)
    }
}

/// Which split of a stream to draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Generates one stream in memory. Each sample uses its own derived seed, so
/// generation is independent of evaluation order.
pub fn generate_stream(spec: &StreamSpec, tokenizer: &TokenizerConfig, seed: u64, split: Split) -> Result<Dataset> {
    let (count, split_tag) = match split {
        Split::Train => (spec.count, 0u64),
        Split::Eval => (spec.eval_count, 1u64),
    };
    let base = stable_hash(&spec.name) ^ seed ^ (split_tag << 63);
    let mut samples = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    match &spec.family {
        Family::Markov { vocab, min_words, max_words } => {
            if spec.modality != Modality::Text {
                return invalid(format!("stream {}: markov family needs text modality", spec.name));
            }
            let chain = MarkovChain::new(*vocab, stream_rng(stable_hash(&spec.name) ^ seed, Stream::Generate, u64::MAX));
            for i in 0..count {
                let mut rng = stream_rng(base, Stream::Generate, i as u64);
                samples.push(Sample::Text(chain.sentence(&mut rng, *min_words, *max_words)));
                labels.push(None);
            }
        }
        Family::Shapes { .. } => {
            if !spec.modality.is_visual() {
                return invalid(format!("stream {}: shape family needs visual modality", spec.name));
            }
            let shape = tokenizer.input_shape(spec.modality);
            for i in 0..count {
                let mut rng = stream_rng(base, Stream::Generate, i as u64);
                let (x, label) = shape_image(&spec.family, &shape, &mut rng)?;
                samples.push(Sample::Visual(x));
                labels.push(Some(label));
            }
        }
    }
    Ok(Dataset {
        name: spec.name.clone(),
        modality: spec.modality,
        samples,
        labels,
        paths: vec![None; count],
    })
}

struct MarkovChain {
    /// For each word, successor ids and cumulative probabilities.
    successors: Vec<Vec<(usize, f64)>>,
}

impl MarkovChain {
    fn new(vocab: usize, mut rng: Rng) -> Self {
        let vocab = vocab.max(2);
        let successors = (0..vocab)
            .map(|_| {
                let mut cum = 0.0;
                [0.6, 0.3, 0.1]
                    .iter()
                    .map(|&p| {
                        cum += p;
                        (rng.gen_range(0..vocab), cum)
                    })
                    .collect()
            })
            .collect();
        MarkovChain { successors }
    }

    fn sentence(&self, rng: &mut Rng, min_words: usize, max_words: usize) -> String {
        let len = rng.gen_range(min_words.max(1)..=max_words.max(min_words.max(1)));
        let mut word = rng.gen_range(0..self.successors.len());
        let mut out = String::new();
        for i in 0..len {
            if i > 0 {
                out.push(' ');
            }
            write!(out, "w{word:03}").unwrap();
            let u: f64 = rng.gen();
            word = self.successors[word].iter().find(|(_, c)| u < *c).map_or(self.successors[word][0].0, |s| s.0);
        }
        out
    }
}

/// Draws one shape image of the given `[C, *spatial]` shape and returns it
/// with the index of its dominant shape.
pub fn shape_image(family: &Family, shape: &[usize], rng: &mut Rng) -> Result<(Tensor<f32>, usize)> {
    let Family::Shapes { background, shapes, weights, offset, contrast, noise } = family else {
        return invalid("shape_image needs a shape family");
    };
    if shapes.is_empty() || shapes.len() != weights.len() {
        return invalid("shape family needs one weight per shape");
    }
    let spatial = &shape[1..];
    let rank = spatial.len();
    let wsum: f64 = weights.iter().sum();
    let u: f64 = rng.gen::<f64>() * wsum;
    let mut acc = 0.0;
    let mut label = shapes.len() - 1;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            label = i;
            break;
        }
    }
    let min_extent = *spatial.iter().min().unwrap() as f64;
    // dominant shape plus one smaller distractor of a random type
    let mut placed = Vec::new();
    let big = min_extent * rng.gen_range(0.25..0.35);
    placed.push((shapes[label], big, center(spatial, big, rng), *contrast));
    if shapes.len() > 1 && rng.gen_bool(0.5) {
        let other = *shapes.choose(rng).unwrap();
        let small = min_extent * rng.gen_range(0.10..0.15);
        placed.push((other, small, center(spatial, small, rng), 0.6 * contrast));
    }
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let plane: usize = spatial.iter().product();
    let mut pattern = vec![0f64; plane];
    let mut coord = vec![0usize; rank];
    let mut offset_buf = vec![0f64; rank];
    for value in pattern.iter_mut() {
        let rel: Vec<f64> = coord.iter().zip(spatial).map(|(&c, &e)| (c as f64 + 0.5) / e as f64).collect();
        let mut v = match background {
            Background::Ramp => 0.5 * rel[0],
            Background::Stripes => 0.25 * (rel[rank - 1] * std::f64::consts::TAU * 2.0 + phase).sin(),
            Background::Radial => {
                -0.5 * rel.iter().map(|r| (r - 0.5) * (r - 0.5)).sum::<f64>().sqrt()
            }
        };
        for (kind, radius, c, amp) in &placed {
            for ax in 0..rank {
                offset_buf[ax] = coord[ax] as f64 + 0.5 - c[ax];
            }
            if kind.contains(&offset_buf, *radius) {
                v += amp;
            }
        }
        *value = v;
        for ax in (0..rank).rev() {
            coord[ax] += 1;
            if coord[ax] < spatial[ax] {
                break;
            }
            coord[ax] = 0;
        }
    }
    let mean = pattern.iter().sum::<f64>() / plane as f64;
    let normal = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::Invalid(e.to_string()))?;
    let channels = shape[0];
    let mut data = Vec::with_capacity(channels * plane);
    for c in 0..channels {
        let gain = 1.0 - 0.1 * c as f64;
        data.extend(pattern.iter().map(|&p| ((p - mean) * gain + offset + normal.sample(rng)) as f32));
    }
    Ok((Tensor::new(shape.to_vec(), data)?, label))
}

fn center(spatial: &[usize], radius: f64, rng: &mut Rng) -> Vec<f64> {
    spatial
        .iter()
        .map(|&e| {
            let lo = radius.min(e as f64 / 2.0);
            let hi = (e as f64 - radius).max(lo + 1e-6);
            rng.gen_range(lo..hi)
        })
        .collect()
}

// ------------------------------------------------------------------ manifests

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub index: usize,
    pub modality: String,
    pub path: String,
    pub label: Option<usize>,
}

pub fn format_manifest(rows: &[ManifestRow]) -> String {
    let mut out = String::new();
    for r in rows {
        let label = r.label.map_or_else(|| "-".to_string(), |l| l.to_string());
        writeln!(out, "{}\t{}\t{}\t{}", r.index, r.modality, r.path, label).unwrap();
    }
    out
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRow>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Invalid(format!("manifest line {}: `{line}`", i + 1));
            if cols.len() != 4 {
                return Err(bad());
            }
            Ok(ManifestRow {
                index: cols[0].parse().map_err(|_| bad())?,
                modality: cols[1].to_string(),
                path: cols[2].to_string(),
                label: if cols[3] == "-" { None } else { Some(cols[3].parse().map_err(|_| bad())?) },
            })
        })
        .collect()
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const SPEC_FILE: &str = "corpus.json";

/// Writes the training split of every stream under `root`: one directory per
/// stream, text as UTF-8 lines, visual samples as tensor files, plus a
/// manifest and the generating spec.
pub fn generate_corpus(spec: &SyntheticSpec, seed: u64, root: &Path) -> Result<Vec<ManifestRow>> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    let mut rows = Vec::new();
    for stream in &spec.streams {
        let ds = generate_stream(stream, &spec.tokenizer, seed, Split::Train)?;
        let dir = root.join(&stream.name);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        match stream.modality {
            Modality::Text => {
                let file = dir.join("lines.txt");
                let mut f = fs::File::create(&file).map_err(io_err(&file))?;
                for (i, text) in ds.texts().iter().enumerate() {
                    writeln!(f, "{text}").map_err(io_err(&file))?;
                    rows.push(ManifestRow {
                        index: rows.len(),
                        modality: stream.name.clone(),
                        path: format!("{}/lines.txt:{i}", stream.name),
                        label: None,
                    });
                }
            }
            _ => {
                for (i, (sample, label)) in ds.samples.iter().zip(&ds.labels).enumerate() {
                    let Sample::Visual(x) = sample else { unreachable!() };
                    let rel = format!("{}/{i:06}.tnsr", stream.name);
                    write_tensor(&root.join(&rel), x)?;
                    rows.push(ManifestRow { index: rows.len(), modality: stream.name.clone(), path: rel, label: *label });
                }
            }
        }
    }
    let manifest = root.join(MANIFEST_FILE);
    fs::write(&manifest, format_manifest(&rows)).map_err(io_err(&manifest))?;
    let spec_path = root.join(SPEC_FILE);
    let json = serde_json::to_string_pretty(&CorpusFile { seed, spec: spec.clone() }).expect("serializable");
    fs::write(&spec_path, json).map_err(io_err(&spec_path))?;
    Ok(rows)
}

#[derive(Serialize, Deserialize)]
struct CorpusFile {
    seed: u64,
    spec: SyntheticSpec,
}

/// A corpus read back from disk.
pub struct Corpus {
    pub seed: u64,
    pub spec: SyntheticSpec,
    pub datasets: Vec<Dataset>,
}

impl Corpus {
    pub fn dataset(&self, name: &str) -> Option<&Dataset> {
        self.datasets.iter().find(|d| d.name == name)
    }
}

pub fn load_corpus(root: &Path) -> Result<Corpus> {
    let spec_path = root.join(SPEC_FILE);
    let file: CorpusFile = serde_json::from_str(&fs::read_to_string(&spec_path).map_err(io_err(&spec_path))?)
        .map_err(|e| Error::Invalid(format!("{}: {e}", spec_path.display())))?;
    let manifest_path = root.join(MANIFEST_FILE);
    let rows = parse_manifest(&fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?)?;
    let mut datasets: Vec<Dataset> = file
        .spec
        .streams
        .iter()
        .map(|s| Dataset { name: s.name.clone(), modality: s.modality, samples: vec![], labels: vec![], paths: vec![] })
        .collect();
    let mut text_cache: Vec<(PathBuf, Vec<String>)> = Vec::new();
    for row in rows {
        let ds = datasets
            .iter_mut()
            .find(|d| d.name == row.modality)
            .ok_or_else(|| Error::Invalid(format!("manifest stream `{}` not in corpus spec", row.modality)))?;
        let sample = if ds.modality == Modality::Text {
            let (file, line) = row
                .path
                .rsplit_once(':')
                .ok_or_else(|| Error::Invalid(format!("text path `{}` lacks a line number", row.path)))?;
            let line: usize = line.parse().map_err(|_| Error::Invalid(format!("bad line in `{}`", row.path)))?;
            let full = root.join(file);
            if !text_cache.iter().any(|(p, _)| p == &full) {
                let text = fs::read_to_string(&full).map_err(io_err(&full))?;
                text_cache.push((full.clone(), text.lines().map(str::to_string).collect()));
            }
            let lines = &text_cache.iter().find(|(p, _)| p == &full).unwrap().1;
            Sample::Text(lines.get(line).cloned().ok_or_else(|| Error::Invalid(format!("`{}` out of range", row.path)))?)
        } else {
            Sample::Visual(read_tensor(&root.join(&row.path))?)
        };
        ds.samples.push(sample);
        ds.labels.push(row.label);
        ds.paths.push(Some(row.path));
    }
    Ok(Corpus { seed: file.seed, spec: file.spec, datasets })
}

// ------------------------------------------------------------ labeled tasks

/// Supervision target of a downstream sample.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    /// Per-voxel class ids over the spatial grid.
    Mask(Vec<u8>),
}

#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub sample: Sample,
    pub target: Target,
}

#[derive(Clone, Debug)]
pub struct LabeledSplits {
    pub modality: Modality,
    pub n_classes: usize,
    pub train: Vec<LabeledSample>,
    pub val: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

fn split_three(mut items: Vec<LabeledSample>, sizes: [usize; 3]) -> [Vec<LabeledSample>; 3] {
    let test = items.split_off(sizes[0] + sizes[1]);
    let val = items.split_off(sizes[0]);
    [items, val, test]
}

/// Dominant-shape classification drawn from a stream's shape family.
pub fn shape_classification(
    stream: &StreamSpec,
    tokenizer: &TokenizerConfig,
    sizes: [usize; 3],
    seed: u64,
) -> Result<LabeledSplits> {
    let Family::Shapes { shapes, .. } = &stream.family else {
        return invalid(format!("stream {} has no shape classes", stream.name));
    };
    let shape = tokenizer.input_shape(stream.modality);
    let base = stable_hash(&stream.name) ^ seed ^ 0x5eed_c1a5;
    let items = (0..sizes.iter().sum::<usize>())
        .map(|i| {
            let mut rng = stream_rng(base, Stream::Generate, i as u64);
            let (x, label) = shape_image(&stream.family, &shape, &mut rng)?;
            Ok(LabeledSample { sample: Sample::Visual(x), target: Target::Class(label) })
        })
        .collect::<Result<Vec<_>>>()?;
    let [train, val, test] = split_three(items, sizes);
    Ok(LabeledSplits { modality: stream.modality, n_classes: shapes.len(), train, val, test })
}

/// Two classes separated by mean intensity (−1 vs +1) under unit-scale noise.
pub fn separable_classification(modality: Modality, tokenizer: &TokenizerConfig, sizes: [usize; 3], seed: u64) -> Result<LabeledSplits> {
    let shape = tokenizer.input_shape(modality);
    let numel: usize = shape.iter().product();
    let normal = Normal::new(0.0, 0.3).unwrap();
    let items = (0..sizes.iter().sum::<usize>())
        .map(|i| {
            let mut rng = stream_rng(seed, Stream::Generate, i as u64);
            let class = i % 2;
            let level = if class == 0 { -1.0 } else { 1.0 };
            let data = (0..numel).map(|_| (level + normal.sample(&mut rng)) as f32).collect();
            LabeledSample { sample: Sample::Visual(Tensor::new(shape.clone(), data).unwrap()), target: Target::Class(class) }
        })
        .collect();
    let [train, val, test] = split_three(items, sizes);
    Ok(LabeledSplits { modality, n_classes: 2, train, val, test })
}

/// Bright axis-aligned boxes on a noisy background; the mask marks the box.
pub fn square_segmentation(modality: Modality, tokenizer: &TokenizerConfig, sizes: [usize; 3], seed: u64) -> Result<LabeledSplits> {
    if !modality.is_visual() {
        return invalid("segmentation needs a visual modality");
    }
    let shape = tokenizer.input_shape(modality);
    let spatial = shape[1..].to_vec();
    let plane: usize = spatial.iter().product();
    let normal = Normal::new(0.0, 0.2).unwrap();
    let items = (0..sizes.iter().sum::<usize>())
        .map(|i| {
            let mut rng = stream_rng(seed ^ 0x5e6, Stream::Generate, i as u64);
            let lo: Vec<usize> = spatial.iter().map(|&e| rng.gen_range(0..e / 2)).collect();
            let hi: Vec<usize> = spatial.iter().zip(&lo).map(|(&e, &l)| rng.gen_range(l + e / 4..=e.min(l + e / 2))).collect();
            let mut mask = vec![0u8; plane];
            let mut coord = vec![0usize; spatial.len()];
            for m in mask.iter_mut() {
                if coord.iter().zip(&lo).zip(&hi).all(|((&c, &l), &h)| c >= l && c < h) {
                    *m = 1;
                }
                for ax in (0..spatial.len()).rev() {
                    coord[ax] += 1;
                    if coord[ax] < spatial[ax] {
                        break;
                    }
                    coord[ax] = 0;
                }
            }
            let mut data = Vec::with_capacity(plane * shape[0]);
            for _ in 0..shape[0] {
                data.extend(mask.iter().map(|&m| (m as f64 + normal.sample(&mut rng)) as f32));
            }
            LabeledSample { sample: Sample::Visual(Tensor::new(shape.clone(), data).unwrap()), target: Target::Mask(mask) }
        })
        .collect();
    let [train, val, test] = split_three(items, sizes);
    Ok(LabeledSplits { modality, n_classes: 2, train, val, test })
}
