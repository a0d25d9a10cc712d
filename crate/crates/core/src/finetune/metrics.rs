//! Classification and segmentation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub support: usize,
    pub auc: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub acc: f64,
    /// Macro one-vs-rest AUC over classes with at least one positive; NaN
    /// when only one class occurs.
    pub auc: f64,
    /// Macro F1 over classes occurring in labels or predictions.
    pub f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Area under the ROC curve of `scores` against binary `positive`, by the
/// trapezoid rule with tied scores forming one diagonal segment.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let pos = positive.iter().filter(|&&p| p).count() as f64;
    let neg = positive.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return f64::NAN;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut area) = (0.0, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let (tp0, fp0) = (tp, fp);
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        area += (fp - fp0) * (tp + tp0) / 2.0;
    }
    area / (pos * neg)
}

/// ACC, macro AUC and macro F1 from labels and per-class probabilities.
pub fn classification_metrics(labels: &[usize], probs: &[Vec<f64>]) -> Result<ClassificationReport> {
    if labels.len() != probs.len() || labels.is_empty() {
        return invalid(format!("{} labels for {} probability rows", labels.len(), probs.len()));
    }
    let c = probs[0].len();
    for (i, row) in probs.iter().enumerate() {
        if row.len() != c || (row.iter().sum::<f64>() - 1.0).abs() > 1e-5 {
            return invalid(format!("probability row {i} is not a distribution over {c} classes"));
        }
        if labels[i] >= c {
            return invalid(format!("label {} outside {c} classes", labels[i]));
        }
    }
    let preds: Vec<usize> = probs.iter().map(|r| argmax(r)).collect();
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    let acc = correct as f64 / labels.len() as f64;

    let present: Vec<bool> = (0..c).map(|k| labels.contains(&k)).collect();
    let single = present.iter().filter(|&&p| p).count() < 2;
    if single {
        log::warn!("only one class present in labels; AUC is undefined");
    }
    let mut per_class = Vec::with_capacity(c);
    let (mut auc_sum, mut auc_n, mut f1_sum, mut f1_n) = (0.0, 0, 0.0, 0);
    for k in 0..c {
        let positive: Vec<bool> = labels.iter().map(|&l| l == k).collect();
        let scores: Vec<f64> = probs.iter().map(|r| r[k]).collect();
        let auc = if single { f64::NAN } else { binary_auc(&scores, &positive) };
        if present[k] && !single {
            auc_sum += auc;
            auc_n += 1;
        }
        let tp = preds.iter().zip(labels).filter(|&(&p, &l)| p == k && l == k).count() as f64;
        let fp = preds.iter().zip(labels).filter(|&(&p, &l)| p == k && l != k).count() as f64;
        let fn_ = preds.iter().zip(labels).filter(|&(&p, &l)| p != k && l == k).count() as f64;
        let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
        if present[k] || preds.contains(&k) {
            f1_sum += f1;
            f1_n += 1;
        }
        per_class.push(ClassMetrics { class: k, support: positive.iter().filter(|&&p| p).count(), auc, f1 });
    }
    Ok(ClassificationReport {
        acc,
        auc: if auc_n == 0 { f64::NAN } else { auc_sum / auc_n as f64 },
        f1: f1_sum / f1_n.max(1) as f64,
        per_class,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    pub dice: f64,
    pub hd95: f64,
}

fn for_each_neighbor(pos: &[usize], dims: &[usize], mut f: impl FnMut(Option<usize>)) {
    let st = strides(dims);
    let flat: usize = pos.iter().zip(&st).map(|(p, s)| p * s).sum();
    for a in 0..dims.len() {
        f(if pos[a] == 0 { None } else { Some(flat - st[a]) });
        f(if pos[a] + 1 == dims[a] { None } else { Some(flat + st[a]) });
    }
}

fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for a in (0..dims.len().saturating_sub(1)).rev() {
        s[a] = s[a + 1] * dims[a + 1];
    }
    s
}

fn unravel(mut flat: usize, dims: &[usize]) -> Vec<usize> {
    let mut out = vec![0; dims.len()];
    for a in (0..dims.len()).rev() {
        out[a] = flat % dims[a];
        flat /= dims[a];
    }
    out
}

/// Foreground voxels with a face neighbour that is background or outside
/// the grid.
pub fn boundary(mask: &[bool], dims: &[usize]) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        let pos = unravel(i, dims);
        let mut edge = false;
        for_each_neighbor(&pos, dims, |nb| edge |= nb.map_or(true, |j| !mask[j]));
        out[i] = edge;
    }
    out
}

/// Squared Euclidean distance from every voxel to the nearest `true` voxel,
/// exact, by separable one-dimensional lower-envelope passes.
pub fn squared_distance_transform(seeds: &[bool], dims: &[usize], spacing: &[f64]) -> Vec<f64> {
    let mut d: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let st = strides(dims);
    let total = d.len();
    for (a, &len) in dims.iter().enumerate() {
        let w = spacing[a] * spacing[a];
        let mut line = vec![0.0; len];
        let mut out = vec![0.0; len];
        for start in 0..total {
            if (start / st[a]) % len != 0 {
                continue;
            }
            for (k, v) in line.iter_mut().enumerate() {
                *v = d[start + k * st[a]];
            }
            envelope_1d(&line, w, &mut out);
            for (k, v) in out.iter().enumerate() {
                d[start + k * st[a]] = *v;
            }
        }
    }
    d
}

/// `out[q] = min_p f[p] + w·(q − p)²`.
fn envelope_1d(f: &[f64], w: f64, out: &mut [f64]) {
    let n = f.len();
    let finite: Vec<usize> = (0..n).filter(|&p| f[p].is_finite()).collect();
    if finite.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut v: Vec<usize> = Vec::with_capacity(finite.len());
    let mut z: Vec<f64> = Vec::with_capacity(finite.len() + 1);
    let inter = |p: usize, q: usize| ((f[q] + w * (q * q) as f64) - (f[p] + w * (p * p) as f64)) / (2.0 * w * (q as f64 - p as f64));
    for &q in &finite {
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = inter(p, q);
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    z.push(f64::INFINITY);
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *o = f[p] + w * ((q as f64 - p as f64).powi(2));
    }
}

/// Linear-interpolated percentile (`q` in [0, 100]) of unsorted values.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (rank - lo as f64)
}

/// Dice and HD95 of one binary prediction against ground truth.
pub fn segmentation_metrics(pred: &[bool], gt: &[bool], dims: &[usize], spacing: &[f64]) -> Result<SegmentationMetrics> {
    let numel: usize = dims.iter().product();
    if pred.len() != numel || gt.len() != numel || spacing.len() != dims.len() {
        return invalid(format!("masks of {} and {} voxels for grid {dims:?}", pred.len(), gt.len()));
    }
    let np = pred.iter().filter(|&&p| p).count();
    let ng = gt.iter().filter(|&&g| g).count();
    let both = pred.iter().zip(gt).filter(|&(&p, &g)| p && g).count();
    if np == 0 && ng == 0 {
        return Ok(SegmentationMetrics { dice: 1.0, hd95: 0.0 });
    }
    let dice = 2.0 * both as f64 / (np + ng) as f64;
    if np == 0 || ng == 0 {
        let diagonal = dims.iter().zip(spacing).map(|(&e, &s)| (e as f64 * s).powi(2)).sum::<f64>().sqrt();
        return Ok(SegmentationMetrics { dice, hd95: diagonal });
    }
    let bp = boundary(pred, dims);
    let bg = boundary(gt, dims);
    let to_g = squared_distance_transform(&bg, dims, spacing);
    let to_p = squared_distance_transform(&bp, dims, spacing);
    let mut dists: Vec<f64> = (0..numel)
        .filter(|&i| bp[i])
        .map(|i| to_g[i].sqrt())
        .chain((0..numel).filter(|&i| bg[i]).map(|i| to_p[i].sqrt()))
        .collect();
    Ok(SegmentationMetrics { dice, hd95: percentile(&mut dists, 95.0) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub dice: f64,
    pub hd95: f64,
    /// Per foreground class, averaged over samples.
    pub per_class: Vec<SegmentationMetrics>,
}

/// Mean Dice/HD95 over samples and foreground classes of label maps.
pub fn segmentation_report(preds: &[Vec<u8>], gts: &[Vec<u8>], dims: &[usize], n_classes: usize) -> Result<SegmentationReport> {
    if preds.len() != gts.len() || preds.is_empty() {
        return invalid("prediction and ground-truth counts differ or are zero");
    }
    let spacing = vec![1.0; dims.len()];
    let mut per_class = Vec::new();
    for c in 1..n_classes.max(2) {
        let (mut dice, mut hd) = (0.0, 0.0);
        for (p, g) in preds.iter().zip(gts) {
            let pm: Vec<bool> = p.iter().map(|&v| v as usize == c).collect();
            let gm: Vec<bool> = g.iter().map(|&v| v as usize == c).collect();
            let m = segmentation_metrics(&pm, &gm, dims, &spacing)?;
            dice += m.dice;
            hd += m.hd95;
        }
        let k = preds.len() as f64;
        per_class.push(SegmentationMetrics { dice: dice / k, hd95: hd / k });
    }
    let k = per_class.len() as f64;
    Ok(SegmentationReport {
        dice: per_class.iter().map(|m| m.dice).sum::<f64>() / k,
        hd95: per_class.iter().map(|m| m.hd95).sum::<f64>() / k,
        per_class,
    })
}
