//! Parameterized building blocks shared by the encoder, decoders and heads.

use coss_numerics::{lit, Element, Graph, ParamId, ParamStore, Tensor, Var};
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::rng::Rng;

/// Source of parameter values for a forward pass: a trainable store, or a
/// frozen copy whose values enter the graph as constants.
pub trait Weights<F: Element> {
    fn var(&self, g: &mut Graph<F>, id: ParamId) -> Var;
}

impl<F: Element> Weights<F> for ParamStore<F> {
    fn var(&self, g: &mut Graph<F>, id: ParamId) -> Var {
        g.param(self, id)
    }
}

/// Evaluates a store without recording gradients.
pub struct Frozen<'a, F>(pub &'a ParamStore<F>);

impl<F: Element> Weights<F> for Frozen<'_, F> {
    fn var(&self, g: &mut Graph<F>, id: ParamId) -> Var {
        g.frozen(id, self.0.value(id))
    }
}

pub const INIT_STD: f64 = 0.02;

/// Registers parameters with truncated-normal (±2σ) weights.
pub struct Init<'a, F> {
    pub store: &'a mut ParamStore<F>,
    pub rng: &'a mut Rng,
}

impl<F: Element> Init<'_, F> {
    pub fn normal(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let dist = Normal::new(0.0, INIT_STD).unwrap();
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| loop {
            let x: f64 = dist.sample(rng);
            if x.abs() <= 2.0 * INIT_STD {
                break lit::<F>(x);
            }
        });
        Ok(self.store.insert(name, t)?)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        Ok(self.store.insert(name, Tensor::zeros(shape))?)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        Ok(self.store.insert(name, Tensor::ones(shape))?)
    }
}

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<F: Element>(init: &mut Init<'_, F>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Linear {
            weight: init.normal(&format!("{name}.weight"), &[fan_in, fan_out])?,
            bias: init.zeros(&format!("{name}.bias"), &[fan_out])?,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<F: Element>(&self, g: &mut Graph<F>, w: &impl Weights<F>, x: Var) -> Result<Var> {
        let weight = w.var(g, self.weight);
        let bias = w.var(g, self.bias);
        let y = g.matmul(x, weight)?;
        Ok(g.add_row(y, bias)?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Layer normalization over the last axis with learned scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const NORM_EPS: f64 = 1e-6;

impl Norm {
    pub fn new<F: Element>(init: &mut Init<'_, F>, name: &str, dim: usize) -> Result<Self> {
        Ok(Norm {
            gamma: init.ones(&format!("{name}.weight"), &[dim])?,
            beta: init.zeros(&format!("{name}.bias"), &[dim])?,
        })
    }

    pub fn forward<F: Element>(&self, g: &mut Graph<F>, w: &impl Weights<F>, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, lit(NORM_EPS));
        let gamma = w.var(g, self.gamma);
        let beta = w.var(g, self.beta);
        let s = g.mul_row(n, gamma)?;
        Ok(g.add_row(s, beta)?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub norm1: Norm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl Block {
    pub fn new<F: Element>(init: &mut Init<'_, F>, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Block {
            norm1: Norm::new(init, &format!("{name}.norm1"), dim)?,
            qkv: Linear::new(init, &format!("{name}.attn.qkv"), dim, 3 * dim)?,
            proj: Linear::new(init, &format!("{name}.attn.proj"), dim, dim)?,
            norm2: Norm::new(init, &format!("{name}.norm2"), dim)?,
            fc1: Linear::new(init, &format!("{name}.mlp.fc1"), dim, mlp_ratio * dim)?,
            fc2: Linear::new(init, &format!("{name}.mlp.fc2"), mlp_ratio * dim, dim)?,
            heads,
        })
    }

    /// `x: [N, S, d]`. `key_bias` is an additive `[N·heads, S, S]` score bias
    /// (large negative at padded keys), when present.
    pub fn forward<F: Element>(
        &self,
        g: &mut Graph<F>,
        w: &impl Weights<F>,
        x: Var,
        key_bias: Option<&Tensor<F>>,
    ) -> Result<Var> {
        let h = self.norm1.forward(g, w, x)?;
        let a = self.attention(g, w, h, key_bias)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, w, x)?;
        let h = self.fc1.forward(g, w, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, w, h)?;
        Ok(g.add(x, h)?)
    }

    fn attention<F: Element>(
        &self,
        g: &mut Graph<F>,
        w: &impl Weights<F>,
        x: Var,
        key_bias: Option<&Tensor<F>>,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (n, s, d) = (shape[0], shape[1], shape[2]);
        let hd = d / self.heads;
        let qkv = self.qkv.forward(g, w, x)?;
        let qkv = g.reshape(qkv, &[n, s, 3, self.heads, hd])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let qkv = g.reshape(qkv, &[3, n * self.heads, s, hd])?;
        let mut parts = Vec::with_capacity(3);
        for i in 0..3 {
            let p = g.index_select(qkv, 0, &[i])?;
            parts.push(g.reshape(p, &[n * self.heads, s, hd])?);
        }
        let scores = g.bmm(parts[0], parts[1], true)?;
        let mut scores = g.scale(scores, lit::<F>(1.0 / (hd as f64).sqrt()));
        if let Some(bias) = key_bias {
            scores = g.add_const(scores, bias)?;
        }
        let att = g.softmax(scores);
        let out = g.bmm(att, parts[2], false)?;
        let out = g.reshape(out, &[n, self.heads, s, hd])?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, &[n, s, d])?;
        self.proj.forward(g, w, out)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.norm1.params()[..], &self.qkv.params(), &self.proj.params(), &self.norm2.params(), &self.fc1.params(), &self.fc2.params()]
            .concat()
    }
}
