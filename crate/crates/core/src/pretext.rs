//! Masked modeling objectives: token substitution for text, token dropping
//! for images and volumes.

use coss_numerics::{lit, Element, Graph, Tensor, Var};
use rand::seq::index::sample;

use crate::error::{invalid, Result};
use crate::model::{DecoderKey, Keep, Model};
use crate::rng::{round_half_up, Rng};
use crate::tokenizers::{Modality, TokenBatch, Tokens, CLS, MASK, PAD};

pub const TEXT_MASK_RATIO: f64 = 0.15;
pub const VISUAL_MASK_RATIO: f64 = 0.75;

/// Per-position masking decision for one batch; `true` = masked.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub modality: Modality,
    pub n: usize,
    pub len: usize,
    pub ratio: f64,
    pub masked: Vec<bool>,
}

impl MaskPlan {
    pub fn is_masked(&self, sample: usize, pos: usize) -> bool {
        self.masked[sample * self.len + pos]
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn sample_masked_count(&self, sample: usize) -> usize {
        self.masked[sample * self.len..(sample + 1) * self.len].iter().filter(|&&m| m).count()
    }

    /// Visibility grid for the encoder: the complement of the mask for
    /// visual plans, every position for text plans.
    pub fn keep(&self) -> Keep {
        match self.modality {
            Modality::Text => Keep::all(self.n, self.len),
            _ => Keep::from_visible(self.n, self.len, self.masked.iter().map(|m| !m).collect()).unwrap(),
        }
    }
}

fn mask_count(ratio: f64, eligible: usize) -> usize {
    if eligible == 0 {
        0
    } else {
        round_half_up(ratio * eligible as f64).clamp(1, eligible)
    }
}

/// Chooses `round(ratio·n_valid)` (at least one) corpus-token positions per
/// sample; PAD and CLS positions are never chosen.
pub fn sample_text_mask<F: Element>(batch: &TokenBatch<F>, ratio: f64, rng: &mut Rng) -> Result<MaskPlan> {
    let Tokens::Text { ids, valid } = &batch.tokens else {
        return invalid("text mask requested for a visual batch");
    };
    if !(ratio > 0.0 && ratio < 1.0) {
        return invalid(format!("mask ratio {ratio} outside (0, 1)"));
    }
    let (n, len) = (batch.n, batch.len);
    let mut masked = vec![false; n * len];
    for i in 0..n {
        let eligible: Vec<usize> = (0..len)
            .filter(|&p| valid[i * len + p] && ids[i * len + p] != PAD && ids[i * len + p] != CLS)
            .collect();
        let k = mask_count(ratio, eligible.len());
        if k == 0 {
            log::debug!("text sample {i} has no maskable tokens");
        }
        for j in sample(rng, eligible.len(), k) {
            masked[i * len + eligible[j]] = true;
        }
    }
    Ok(MaskPlan { modality: Modality::Text, n, len, ratio, masked })
}

/// Masks `round(ratio·L)` positions per sample, uniformly without
/// replacement, always leaving at least one position visible.
pub fn sample_visual_mask<F: Element>(batch: &TokenBatch<F>, ratio: f64, rng: &mut Rng) -> Result<MaskPlan> {
    if !batch.modality.is_visual() {
        return invalid("visual mask requested for a text batch");
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return invalid(format!("mask ratio {ratio} outside (0, 1)"));
    }
    let (n, len) = (batch.n, batch.len);
    if len < 2 {
        return invalid(format!("cannot mask a sequence of {len} token(s) and keep one visible"));
    }
    let k = mask_count(ratio, len).min(len - 1);
    let mut masked = vec![false; n * len];
    for i in 0..n {
        for p in sample(rng, len, k) {
            masked[i * len + p] = true;
        }
    }
    Ok(MaskPlan { modality: batch.modality, n, len, ratio, masked })
}

/// Copy of a text batch with masked ids replaced by `MASK`; validity is kept.
pub fn apply_text_mask<F: Element>(batch: &TokenBatch<F>, plan: &MaskPlan) -> Result<TokenBatch<F>> {
    let Tokens::Text { ids, valid } = &batch.tokens else {
        return invalid("text mask applied to a visual batch");
    };
    if plan.n != batch.n || plan.len != batch.len {
        return invalid("mask plan does not match batch");
    }
    let ids = ids.iter().zip(&plan.masked).map(|(&id, &m)| if m { MASK } else { id }).collect();
    Ok(TokenBatch { modality: Modality::Text, n: batch.n, len: batch.len, tokens: Tokens::Text { ids, valid: valid.clone() } })
}

/// Cross-entropy over masked positions, averaged by the total masked count.
/// A batch with nothing masked yields a constant zero.
pub fn mlm_loss<F: Element>(g: &mut Graph<F>, logits: Var, targets: &[u32], plan: &MaskPlan) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 3 || shape[0] != plan.n || shape[1] != plan.len || targets.len() != plan.n * plan.len {
        return invalid(format!("logits {shape:?} inconsistent with a {}×{} plan", plan.n, plan.len));
    }
    let count = plan.masked_count();
    if count == 0 {
        log::warn!("no masked tokens in batch; MLM loss is zero");
        return Ok(g.constant(Tensor::scalar(F::zero())));
    }
    let w = lit::<F>(1.0 / count as f64);
    let weights: Vec<F> = plan.masked.iter().map(|&m| if m { w } else { F::zero() }).collect();
    let targets: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    Ok(g.cross_entropy(logits, &targets, &weights)?)
}

/// Mean squared error over masked patches: mean over masked tokens × patch dim.
pub fn mim_loss<F: Element>(g: &mut Graph<F>, reconstruction: Var, target: &Tensor<F>, plan: &MaskPlan) -> Result<Var> {
    let shape = g.shape(reconstruction).to_vec();
    if shape.as_slice() != target.shape() || shape.len() != 3 || shape[0] != plan.n || shape[1] != plan.len {
        return invalid(format!("reconstruction {shape:?} vs target {:?} for a {}×{} plan", target.shape(), plan.n, plan.len));
    }
    let p = shape[2];
    let count = plan.masked_count();
    if count == 0 {
        return Ok(g.constant(Tensor::scalar(F::zero())));
    }
    let w = lit::<F>(1.0 / (count * p) as f64);
    let weights = Tensor::from_fn(&shape, |i| if plan.masked[i / p] { w } else { F::zero() });
    let t = g.constant(target.clone());
    let diff = g.sub(reconstruction, t)?;
    let sq = g.square(diff);
    let weighted = g.mul_const(sq, weights)?;
    Ok(g.sum(weighted))
}

/// Masked-modeling loss of one single-modality batch through decoder `key`:
/// MLM on substituted ids for text, MIM on dropped patches otherwise.
pub fn pretext_loss<F: Element>(
    g: &mut Graph<F>,
    model: &Model<F>,
    key: DecoderKey,
    batch: &TokenBatch<F>,
    rng: &mut Rng,
) -> Result<Var> {
    match &batch.tokens {
        Tokens::Text { ids, .. } => {
            let plan = sample_text_mask(batch, TEXT_MASK_RATIO, rng)?;
            let masked = apply_text_mask(batch, &plan)?;
            let enc = model.encode(g, &masked, &plan.keep())?;
            let logits = model.predict_tokens(g, key, &enc)?;
            mlm_loss(g, logits, ids, &plan)
        }
        Tokens::Visual { patches, .. } => {
            let plan = sample_visual_mask(batch, VISUAL_MASK_RATIO, rng)?;
            let enc = model.encode(g, batch, &plan.keep())?;
            let rec = model.decode_visual(g, key, &enc)?;
            mim_loss(g, rec, patches, &plan)
        }
    }
}
