use std::collections::HashMap;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

#[derive(Clone, Debug)]
struct Moments<F> {
    m: Tensor<F>,
    v: Tensor<F>,
    steps: u64,
}

/// Adam with decoupled weight decay.
///
/// Only parameters present in the supplied [`Gradients`] are touched; each
/// parameter keeps its own step count for bias correction. Weight decay is
/// skipped for rank ≤ 1 tensors (biases, norms, single tokens).
#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    state: HashMap<ParamId, Moments<F>>,
}

impl<F: Element> AdamW<F> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, state: HashMap::new() }
    }

    pub fn reset(&mut self) {
        self.state.clear();
    }

    pub fn steps(&self, id: ParamId) -> u64 {
        self.state.get(&id).map_or(0, |s| s.steps)
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &Gradients<F>, lr: f64) -> Result<()> {
        let ids = grads.ids();
        for &id in &ids {
            let g = grads.get(id).expect("listed id");
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(store.get(id).name.clone()));
            }
            if g.shape() != store.value(id).shape() {
                return Err(Error::Shape {
                    op: "adamw_step",
                    lhs: store.value(id).shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        let c = self.config;
        let f = |x: f64| F::from_f64(x).unwrap();
        let (b1, b2, eps) = (f(c.beta1), f(c.beta2), f(c.eps));
        let (one_m_b1, one_m_b2) = (f(1.0 - c.beta1), f(1.0 - c.beta2));
        for id in ids {
            let g = grads.get(id).expect("listed id");
            let param = store.get_mut(id);
            param.grad = g.clone();
            let state = self.state.entry(id).or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
                steps: 0,
            });
            state.steps += 1;
            let t = state.steps as i32;
            let bc1 = f(1.0 - c.beta1.powi(t));
            let bc2 = f(1.0 - c.beta2.powi(t));
            let lr_f = f(lr);
            let decay = if param.value.rank() >= 2 { f(1.0 - lr * c.weight_decay) } else { F::one() };
            let (m, v) = (state.m.data_mut(), state.v.data_mut());
            for (((p, &gi), mi), vi) in param.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + one_m_b1 * gi;
                *vi = b2 * *vi + one_m_b2 * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p = *p * decay - lr_f * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
