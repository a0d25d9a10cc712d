//! Downstream adaptation: task heads on the pre-trained encoder, fine-tuning
//! with best-validation selection, and evaluation metrics.

pub mod metrics;
mod seg;

pub use metrics::{
    binary_auc, boundary, classification_metrics, percentile, segmentation_metrics, segmentation_report,
    squared_distance_transform, ClassMetrics, ClassificationReport, SegmentationMetrics, SegmentationReport,
};
pub use seg::{tap_layers, SegDecoder};

use coss_numerics::{lit, AdamW, Element, Graph, ParamId, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::OptimizerConfig;
use crate::data::{LabeledSample, LabeledSplits, Sample, Target};
use crate::error::{invalid, Error, Result};
use crate::model::{Backbone, Encoded, Init, Keep, Linear, Model, ModelConfig, Norm};
use crate::rng::{stream_rng, Stream};
use crate::scheduler::lr_schedule;
use crate::tokenizers::{Modality, TokenBatch, Tokenizer, TokenizerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Linear → LayerNorm → GELU → Linear.
    Mlp2,
    /// Single linear layer.
    Mlp1,
    /// Convolutional decoder on intermediate features.
    Seg,
}

/// Built-in labeled tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    /// Dominant shape class of a synthetic stream.
    ShapeClassification { stream: String },
    /// Two intensity-separated classes.
    Separable { modality: Modality },
    /// Bright box versus background.
    Segmentation { modality: Modality },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub task: TaskSpec,
    pub head: HeadKind,
    /// Train / validation / test sample counts.
    pub sizes: [usize; 3],
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fixed number of updates, overriding `epochs`.
    pub steps: Option<usize>,
    pub seg_channels: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            task: TaskSpec::ShapeClassification { stream: "image2d".into() },
            head: HeadKind::Mlp1,
            sizes: [120, 40, 80],
            epochs: 20,
            warmup_epochs: 2,
            batch_size: 16,
            lr: 1e-3,
            steps: None,
            seg_channels: 16,
            optimizer: OptimizerConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Mlp2 { fc1: Linear, norm: Norm, fc2: Linear },
    Mlp1 { fc: Linear },
    Seg(SegDecoder),
}

impl Head {
    pub fn params(&self) -> Vec<ParamId> {
        match self {
            Head::Mlp2 { fc1, norm, fc2 } => [fc1.params(), norm.params(), fc2.params()].concat(),
            Head::Mlp1 { fc } => fc.params(),
            Head::Seg(s) => s.params(),
        }
    }
}

/// Pre-trained (or freshly initialized) front-ends and encoder plus a task
/// head; everything is trainable.
#[derive(Clone, Debug)]
pub struct TaskModel<F> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    pub backbone: Backbone,
    pub head: Head,
    pub modality: Modality,
    pub n_classes: usize,
    pub patch: Vec<usize>,
    pub channels: usize,
}

impl<F: Element> TaskModel<F> {
    /// Copies the backbone of `source` (decoders are dropped) and attaches a
    /// head initialized from `seed`.
    pub fn attach(source: &Model<F>, tokenizer: &TokenizerConfig, modality: Modality, head: HeadKind, n_classes: usize, seg_channels: usize, seed: u64) -> Result<Self> {
        if head == HeadKind::Seg && !modality.is_visual() {
            return invalid("segmentation head needs a visual modality");
        }
        if n_classes < 2 {
            return invalid(format!("task needs at least 2 classes, got {n_classes}"));
        }
        let mut params = ParamStore::new();
        for id in source.backbone_params() {
            let p = source.params.get(id);
            let new = params.insert(p.name.clone(), p.value.clone())?;
            debug_assert_eq!(new, id, "backbone parameters are registered first");
        }
        let cfg = source.config.clone();
        let d = cfg.embed_dim;
        let mut rng = stream_rng(seed, Stream::Head, 0);
        let mut init = Init { store: &mut params, rng: &mut rng };
        let head = match head {
            HeadKind::Mlp2 => Head::Mlp2 {
                fc1: Linear::new(&mut init, "head.fc1", d, d)?,
                norm: Norm::new(&mut init, "head.norm", d)?,
                fc2: Linear::new(&mut init, "head.fc2", d, n_classes)?,
            },
            HeadKind::Mlp1 => Head::Mlp1 { fc: Linear::new(&mut init, "head.fc", d, n_classes)? },
            HeadKind::Seg => Head::Seg(SegDecoder::new(
                &mut init,
                cfg.depth,
                d,
                tokenizer.patch(modality),
                tokenizer.channels,
                seg_channels,
                n_classes,
            )?),
        };
        Ok(TaskModel {
            config: cfg,
            params,
            backbone: source.backbone.clone(),
            head,
            modality,
            n_classes,
            patch: tokenizer.patch(modality).to_vec(),
            channels: tokenizer.channels,
        })
    }

    pub fn is_segmentation(&self) -> bool {
        matches!(self.head, Head::Seg(_))
    }

    pub fn backbone_params(&self) -> Vec<ParamId> {
        self.backbone.params()
    }

    fn encode(&self, g: &mut Graph<F>, batch: &TokenBatch<F>) -> Result<Encoded> {
        self.backbone.encode(g, &self.params, batch, &Keep::all(batch.n, batch.len))
    }

    /// Class logits `[N, n_classes]` from the CLS embedding (mean of all
    /// tokens when the modality carries no CLS).
    pub fn classify(&self, g: &mut Graph<F>, batch: &TokenBatch<F>) -> Result<Var> {
        let enc = self.encode(g, batch)?;
        let shape = g.shape(enc.hidden).to_vec();
        let (n, s, d) = (shape[0], shape[1], shape[2]);
        let pooled = if enc.cls {
            let index = (0..n).flat_map(|i| (0..d).map(move |j| i * s * d + j)).collect();
            g.gather(enc.hidden, index, &[n, d])?
        } else {
            let m = g.reshape(enc.hidden, &[n, s * d])?;
            let sel = Tensor::from_fn(&[s * d, d], |k| {
                let (row, col) = (k / d, k % d);
                if row % d == col {
                    lit(1.0 / s as f64)
                } else {
                    F::zero()
                }
            });
            let sel = g.constant(sel);
            g.matmul(m, sel)?
        };
        let w = &self.params;
        match &self.head {
            Head::Mlp2 { fc1, norm, fc2 } => {
                let h = fc1.forward(g, w, pooled)?;
                let h = norm.forward(g, w, h)?;
                let h = g.gelu(h);
                fc2.forward(g, w, h)
            }
            Head::Mlp1 { fc } => fc.forward(g, w, pooled),
            Head::Seg(_) => invalid("segmentation model has no class logits"),
        }
    }

    /// Channel-last logits `[N, *spatial, n_classes]`.
    pub fn segment_logits(&self, g: &mut Graph<F>, batch: &TokenBatch<F>) -> Result<Var> {
        let Head::Seg(dec) = &self.head else {
            return invalid("classification model has no segmentation output");
        };
        let grid = batch.grid().ok_or_else(|| Error::Invalid("segmentation needs a visual batch".into()))?.to_vec();
        let patches = batch.patches().expect("visual batch");
        let image = channel_last_image(g, patches, &grid, &self.patch, self.channels)?;
        let enc = self.encode(g, batch)?;
        dec.forward(g, &self.params, &enc, &grid, image)
    }

    /// Channel-first logits `[N, n_classes, *spatial]`.
    pub fn segment(&self, g: &mut Graph<F>, batch: &TokenBatch<F>) -> Result<Var> {
        let x = self.segment_logits(g, batch)?;
        let r = g.shape(x).len();
        let mut perm = vec![0, r - 1];
        perm.extend(1..r - 1);
        Ok(g.permute(x, &perm)?)
    }

    /// Task loss of a labeled batch: CE for classes, Dice + CE for masks.
    pub fn loss(&self, g: &mut Graph<F>, batch: &TokenBatch<F>, targets: &[&Target]) -> Result<Var> {
        if self.is_segmentation() {
            let logits = self.segment_logits(g, batch)?;
            let masks: Vec<&[u8]> = targets
                .iter()
                .map(|t| match t {
                    Target::Mask(m) => Ok(m.as_slice()),
                    Target::Class(_) => invalid("class target for a segmentation head"),
                })
                .collect::<Result<_>>()?;
            dice_ce_loss(g, logits, &masks, self.n_classes)
        } else {
            let logits = self.classify(g, batch)?;
            let labels: Vec<usize> = targets
                .iter()
                .map(|t| match t {
                    Target::Class(c) => Ok(*c),
                    Target::Mask(_) => invalid("mask target for a classification head"),
                })
                .collect::<Result<_>>()?;
            ce_loss(g, logits, &labels)
        }
    }
}

/// `[N, L, P·C]` patches → channel-last image `[N, *spatial, C]` (gather).
fn channel_last_image<F: Element>(g: &mut Graph<F>, patches: &Tensor<F>, grid: &[usize], patch: &[usize], channels: usize) -> Result<Var> {
    let n = patches.shape()[0];
    let len = patches.shape()[1];
    let pd = patches.shape()[2];
    let spatial: Vec<usize> = grid.iter().zip(patch).map(|(g, p)| g * p).collect();
    let cells: usize = spatial.iter().product();
    let r = spatial.len();
    let mut index = Vec::with_capacity(n * cells * channels);
    let mut pos = vec![0; r];
    for b in 0..n {
        for flat in 0..cells {
            let mut f = flat;
            for a in (0..r).rev() {
                pos[a] = f % spatial[a];
                f /= spatial[a];
            }
            let (mut cell, mut off) = (0, 0);
            for a in 0..r {
                cell = cell * grid[a] + pos[a] / patch[a];
                off = off * patch[a] + pos[a] % patch[a];
            }
            for ch in 0..channels {
                index.push((b * len + cell) * pd + off * channels + ch);
            }
        }
    }
    let src = g.constant(patches.clone());
    let mut shape = vec![n];
    shape.extend(&spatial);
    shape.push(channels);
    Ok(g.gather(src, index, &shape)?)
}

/// Mean cross-entropy of `[N, C]` logits.
pub fn ce_loss<F: Element>(g: &mut Graph<F>, logits: Var, labels: &[usize]) -> Result<Var> {
    let w = lit::<F>(1.0 / labels.len().max(1) as f64);
    Ok(g.cross_entropy(logits, labels, &vec![w; labels.len()])?)
}

const DICE_SMOOTH: f64 = 1e-5;

/// Mean voxel cross-entropy plus soft Dice loss (one minus the mean Dice of
/// the foreground classes, pooled over the batch) of channel-last logits.
pub fn dice_ce_loss<F: Element>(g: &mut Graph<F>, logits: Var, masks: &[&[u8]], n_classes: usize) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let c = *shape.last().unwrap();
    let voxels: usize = shape[..shape.len() - 1].iter().product();
    if c != n_classes || masks.iter().map(|m| m.len()).sum::<usize>() != voxels {
        return invalid(format!("logits {shape:?} vs {} masks of {n_classes} classes", masks.len()));
    }
    let labels: Vec<usize> = masks.iter().flat_map(|m| m.iter().map(|&v| v as usize)).collect();
    if labels.iter().any(|&l| l >= c) {
        return invalid("mask label outside class range");
    }
    let flat = g.reshape(logits, &[voxels, c])?;
    let ce = ce_loss(g, flat, &labels)?;
    let probs = g.softmax(flat);
    let mut dice_sum: Option<Var> = None;
    for k in 1..c {
        let inter_w = Tensor::from_fn(&[voxels, c], |i| if i % c == k && labels[i / c] == k { F::one() } else { F::zero() });
        let sel = Tensor::from_fn(&[voxels, c], |i| if i % c == k { F::one() } else { F::zero() });
        let gt = labels.iter().filter(|&&l| l == k).count() as f64;
        let inter = g.mul_const(probs, inter_w)?;
        let inter = g.sum(inter);
        let num = g.scale(inter, lit(2.0));
        let num = g.add_const(num, &Tensor::scalar(lit(DICE_SMOOTH)))?;
        let psum = g.mul_const(probs, sel)?;
        let psum = g.sum(psum);
        let den = g.add_const(psum, &Tensor::scalar(lit(gt + DICE_SMOOTH)))?;
        let dice = g.div(num, den)?;
        dice_sum = Some(match dice_sum {
            Some(s) => g.add(s, dice)?,
            None => dice,
        });
    }
    let mean_dice = g.scale(dice_sum.expect("at least two classes"), lit(1.0 / (c - 1) as f64));
    let dice_loss = g.scale(mean_dice, lit(-1.0));
    let dice_loss = g.add_const(dice_loss, &Tensor::scalar(F::one()))?;
    Ok(g.add(ce, dice_loss)?)
}

/// Test-split metrics of a fine-tuned model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EvalReport {
    Classification(ClassificationReport),
    Segmentation(SegmentationReport),
}

impl EvalReport {
    /// ACC for classification, Dice for segmentation.
    pub fn primary(&self) -> f64 {
        match self {
            EvalReport::Classification(c) => c.acc,
            EvalReport::Segmentation(s) => s.dice,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FinetuneOutcome {
    pub test: EvalReport,
    pub best_val: f64,
    pub best_epoch: usize,
    pub epoch_losses: Vec<f64>,
}

fn batches_of<'a>(items: &'a [LabeledSample], batch_size: usize) -> impl Iterator<Item = &'a [LabeledSample]> {
    items.chunks(batch_size.max(1))
}

/// Predictions on `items`: class probabilities or label maps.
pub fn evaluate<F: Element>(model: &TaskModel<F>, tokenizer: &Tokenizer, items: &[LabeledSample], batch_size: usize) -> Result<EvalReport> {
    if items.is_empty() {
        return invalid("cannot evaluate an empty split");
    }
    if model.is_segmentation() {
        let (mut preds, mut gts) = (Vec::new(), Vec::new());
        let mut dims = Vec::new();
        for chunk in batches_of(items, batch_size) {
            let batch = tokenize(tokenizer, model.modality, chunk)?;
            let mut g = Graph::new();
            let logits = model.segment_logits(&mut g, &batch)?;
            let shape = g.shape(logits).to_vec();
            dims = shape[1..shape.len() - 1].to_vec();
            let c = model.n_classes;
            let voxels: usize = dims.iter().product();
            let v = g.value(logits).data();
            for (i, item) in chunk.iter().enumerate() {
                let pred: Vec<u8> = (0..voxels)
                    .map(|p| {
                        let row = &v[(i * voxels + p) * c..(i * voxels + p + 1) * c];
                        let mut best = 0;
                        for k in 1..c {
                            if row[k] > row[best] {
                                best = k;
                            }
                        }
                        best as u8
                    })
                    .collect();
                preds.push(pred);
                let Target::Mask(m) = &item.target else { return invalid("class target in segmentation split") };
                gts.push(m.clone());
            }
        }
        Ok(EvalReport::Segmentation(segmentation_report(&preds, &gts, &dims, model.n_classes)?))
    } else {
        let (mut probs, mut labels) = (Vec::new(), Vec::new());
        for chunk in batches_of(items, batch_size) {
            let batch = tokenize(tokenizer, model.modality, chunk)?;
            let mut g = Graph::new();
            let logits = model.classify(&mut g, &batch)?;
            let p = g.softmax(logits);
            for row in g.value(p).rows() {
                probs.push(row.iter().map(|x| x.to_f64().unwrap()).collect::<Vec<f64>>());
            }
            for item in chunk {
                let Target::Class(c) = item.target else { return invalid("mask target in classification split") };
                labels.push(c);
            }
        }
        Ok(EvalReport::Classification(classification_metrics(&labels, &probs)?))
    }
}

fn tokenize<F: Element>(tokenizer: &Tokenizer, modality: Modality, items: &[LabeledSample]) -> Result<TokenBatch<F>> {
    let samples: Vec<&Sample> = items.iter().map(|s| &s.sample).collect();
    tokenizer.batch(modality, &samples)
}

/// AdamW fine-tuning with warmup + cosine decay; the parameters with the
/// best validation score (ACC or Dice, ties keep the earlier epoch) are
/// restored before testing.
pub fn finetune_task<F: Element>(
    model: &mut TaskModel<F>,
    tokenizer: &Tokenizer,
    splits: &LabeledSplits,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    if splits.train.is_empty() || splits.val.is_empty() || splits.test.is_empty() {
        return invalid("fine-tuning needs non-empty train, validation and test splits");
    }
    let per_epoch = splits.train.len().div_ceil(cfg.batch_size.max(1));
    let total = cfg.steps.unwrap_or(per_epoch * cfg.epochs.max(1));
    let epochs = total.div_ceil(per_epoch);
    let warmup = ((cfg.warmup_epochs * per_epoch) as f64).min(total as f64 / 2.0) as usize;
    let mut opt = AdamW::new(cfg.optimizer.adamw());
    let mut rng = stream_rng(cfg.seed, Stream::Data, u64::MAX);
    let mut order: Vec<usize> = (0..splits.train.len()).collect();
    let mut step = 0;
    let mut best: Option<(f64, usize, ParamStore<F>)> = None;
    let mut epoch_losses = Vec::new();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            if step == total {
                break;
            }
            let items: Vec<LabeledSample> = chunk.iter().map(|&i| splits.train[i].clone()).collect();
            let batch = tokenize::<F>(tokenizer, model.modality, &items)?;
            let targets: Vec<&Target> = items.iter().map(|s| &s.target).collect();
            let mut g = Graph::new();
            let loss = model.loss(&mut g, &batch, &targets)?;
            let value = g.value(loss).item().to_f64().unwrap();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { stage: 0, step, source_tag: "finetune".into() });
            }
            let grads = g.backward(loss)?;
            opt.step(&mut model.params, &grads, lr_schedule(step, warmup, total, cfg.lr))?;
            sum += value;
            count += 1;
            step += 1;
        }
        epoch_losses.push(sum / count.max(1) as f64);
        let val = evaluate(model, tokenizer, &splits.val, cfg.batch_size)?.primary();
        if best.as_ref().map_or(true, |(b, _, _)| val > *b) {
            best = Some((val, epoch, model.params.clone()));
        }
    }
    let (best_val, best_epoch, params) = best.expect("at least one epoch");
    model.params = params;
    let test = evaluate(model, tokenizer, &splits.test, cfg.batch_size)?;
    Ok(FinetuneOutcome { test, best_val, best_epoch, epoch_losses })
}

/// Labeled splits for a task spec.
pub fn build_task(spec: &TaskSpec, corpus: &crate::data::SyntheticSpec, sizes: [usize; 3], seed: u64) -> Result<LabeledSplits> {
    match spec {
        TaskSpec::ShapeClassification { stream } => {
            let s = corpus.stream(stream).ok_or_else(|| Error::Config(format!("no stream `{stream}` in corpus")))?;
            crate::data::shape_classification(s, &corpus.tokenizer, sizes, seed)
        }
        TaskSpec::Separable { modality } => crate::data::separable_classification(*modality, &corpus.tokenizer, sizes, seed),
        TaskSpec::Segmentation { modality } => crate::data::square_segmentation(*modality, &corpus.tokenizer, sizes, seed),
    }
}
