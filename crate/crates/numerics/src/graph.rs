//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation eagerly: values are computed when the
//! op is added, and [`Graph::backward`] walks the tape in reverse. Nodes that
//! cannot reach a trainable parameter keep no backward information, so frozen
//! computations (teacher passes, evaluation) cost only their forward work.

use std::collections::HashMap;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::lit;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Sentinel used in gather indices to produce a zero instead of a source value.
pub const NO_INDEX: usize = usize::MAX;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, F),
    AddConst(Var),
    MulConst(Var, Tensor<F>),
    Square(Var),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Gather { src: Var, index: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    Softmax(Var),
    LayerNorm { x: Var, rstd: Vec<F> },
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    SumLeading(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<F>, probs: Tensor<F> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Gradients of a scalar loss with respect to every parameter placed on the
/// graph. Parameters on the graph but unreachable from the loss get zeros.
#[derive(Clone, Debug, Default)]
pub struct Gradients<F> {
    grads: HashMap<ParamId, Tensor<F>>,
}

impl<F: Element> Gradients<F> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.grads.get(&id)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.grads.contains_key(&id)
    }

    /// Parameter ids in ascending order.
    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<_> = self.grads.keys().copied().collect();
        ids.sort();
        ids
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn remove(&mut self, id: ParamId) -> Option<Tensor<F>> {
        self.grads.remove(&id)
    }

    /// Writes the gradients into the store's `grad` slots (others are zeroed).
    pub fn write_to(&self, store: &mut ParamStore<F>) {
        store.zero_grads();
        for (&id, g) in &self.grads {
            store.get_mut(id).grad = g.clone();
        }
    }
}

#[derive(Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
    frozen: HashMap<ParamId, Var>,
}

impl<F: Element> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: HashMap::new(), frozen: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable parameter leaf, memoized per id.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    /// Parameter value used without gradient tracking, memoized per id.
    pub fn frozen(&mut self, id: ParamId, value: &Tensor<F>) -> Var {
        if let Some(&v) = self.frozen.get(&id) {
            return v;
        }
        let v = self.constant(value.clone());
        self.frozen.insert(id, v);
        v
    }

    /// Parameters placed on this graph as trainable leaves.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<_> = self.params.keys().copied().collect();
        ids.sort();
        ids
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Shape { op: name, lhs: x.shape().to_vec(), rhs: y.shape().to_vec() });
        }
        x.zip_map(y, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "div", |x, y| x / y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Div(a, b), rg))
    }

    fn row_check(&self, a: Var, b: Var, op: &'static str) -> Result<usize> {
        let (xs, ys) = (self.shape(a), self.shape(b));
        match (xs.last(), ys) {
            (Some(&n), [m]) if n == *m => Ok(n),
            _ => Err(Error::Shape { op, lhs: xs.to_vec(), rhs: ys.to_vec() }),
        }
    }

    /// `a + b` with `b` of shape `[last(a)]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.row_check(a, b, "add_row")?;
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(a).clone();
        for row in v.data_mut().chunks_mut(n) {
            row.iter_mut().zip(&bias).for_each(|(x, &y)| *x = *x + y);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::AddRow(a, b), rg))
    }

    /// `a * b` with `b` of shape `[last(a)]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.row_check(a, b, "mul_row")?;
        let scale = self.value(b).data().to_vec();
        let mut v = self.value(a).clone();
        for row in v.data_mut().chunks_mut(n) {
            row.iter_mut().zip(&scale).for_each(|(x, &y)| *x = *x * y);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MulRow(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_const(&mut self, a: Var, c: &Tensor<F>) -> Result<Var> {
        let v = self.value(a).zip_map(c, |x, y| x + y)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::AddConst(a), rg))
    }

    pub fn mul_const(&mut self, a: Var, c: Tensor<F>) -> Result<Var> {
        let v = self.value(a).zip_map(&c, |x, y| x * y)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::MulConst(a, c), rg))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(v, Op::Square(a), rg)
    }

    /// `[.., k] × [k, n] → [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let k = *xs.last().unwrap_or(&0);
        if ws.len() != 2 || ws[0] != k || xs.is_empty() {
            return Err(Error::Shape { op: "matmul", lhs: xs, rhs: ws });
        }
        let n = ws[1];
        let m = self.value(a).len() / k.max(1);
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            &mut out,
            false,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul(a, b), rg))
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]`, or with `[B, n, k]`
    /// transposed when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (xs, ys) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::Shape { op: "bmm", lhs: xs.clone(), rhs: ys.clone() };
        if xs.len() != 3 || ys.len() != 3 || xs[0] != ys[0] {
            return Err(bad());
        }
        let (batch, m, k) = (xs[0], xs[1], xs[2]);
        let n = if trans_b { ys[1] } else { ys[2] };
        if (trans_b && ys[2] != k) || (!trans_b && ys[1] != k) {
            return Err(bad());
        }
        let mut out = vec![F::zero(); batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let b_strides = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        for i in 0..batch {
            F::gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                (k as isize, 1),
                &bv[i * k * n..(i + 1) * k * n],
                b_strides,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![batch, m, n], out)?, Op::Bmm { a, b, trans_b }, rg))
    }

    /// `out[i] = src[index[i]]`, or zero where `index[i] == NO_INDEX`.
    pub fn gather(&mut self, src: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != index.len() {
            return Err(Error::Length { shape: shape.to_vec(), len: index.len() });
        }
        let sv = self.value(src).data();
        let mut out = Vec::with_capacity(numel);
        for &ix in &index {
            if ix == NO_INDEX {
                out.push(F::zero());
            } else if ix < sv.len() {
                out.push(sv[ix]);
            } else {
                return Err(Error::Invalid(format!("gather index {ix} out of range {}", sv.len())));
            }
        }
        let rg = self.rg(&[src]);
        Ok(self.push(Tensor::new(shape.to_vec(), out)?, Op::Gather { src, index }, rg))
    }

    /// Selects `indices` along `axis` (`NO_INDEX` yields a zero slice).
    pub fn index_select(&mut self, src: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(src).to_vec();
        if axis >= shape.len() {
            return Err(Error::Invalid(format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let extent = shape[axis];
        let mut index = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                if i != NO_INDEX && i >= extent {
                    return Err(Error::Invalid(format!("index {i} out of range {extent} on axis {axis}")));
                }
                for j in 0..inner {
                    index.push(if i == NO_INDEX { NO_INDEX } else { (o * extent + i) * inner + j });
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        self.gather(src, index, &out_shape)
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, src: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(src).to_vec();
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..shape.len()).collect::<Vec<_>>() {
            return Err(Error::Invalid(format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let mut strides = vec![1usize; shape.len()];
        for i in (0..shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * shape[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let numel: usize = shape.iter().product();
        let mut index = Vec::with_capacity(numel);
        let mut coord = vec![0usize; shape.len()];
        for _ in 0..numel {
            index.push(coord.iter().zip(perm).map(|(&c, &p)| c * strides[p]).sum());
            for ax in (0..coord.len()).rev() {
                coord[ax] += 1;
                if coord[ax] < out_shape[ax] {
                    break;
                }
                coord[ax] = 0;
            }
        }
        self.gather(src, index, &out_shape)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::Invalid("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Invalid(format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape { op: "concat", lhs: first.clone(), rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        let n = *v.shape().last().unwrap_or(&1);
        for row in v.data_mut().chunks_mut(n.max(1)) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::Softmax(a), rg)
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: F) -> Var {
        let mut v = self.value(a).clone();
        let n = *v.shape().last().unwrap_or(&1);
        let nf = F::from_usize(n).unwrap();
        let mut rstds = Vec::with_capacity(v.len() / n.max(1));
        for row in v.data_mut().chunks_mut(n.max(1)) {
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<F>() / nf;
            let rstd = F::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * rstd);
            rstds.push(rstd);
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::LayerNorm { x: a, rstd: rstds }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Tensor::scalar(x.sum() / F::from_usize(x.len().max(1)).unwrap());
        let rg = self.rg(&[a]);
        self.push(v, Op::Mean(a), rg)
    }

    /// Sums all leading axes, keeping the last: `[.., n] → [n]`.
    pub fn sum_leading(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = *x.shape().last().unwrap_or(&1);
        let mut out = vec![F::zero(); n];
        for row in x.data().chunks(n.max(1)) {
            out.iter_mut().zip(row).for_each(|(o, &r)| *o = *o + r);
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(vec![n], out).unwrap(), Op::SumLeading(a), rg)
    }

    /// `Σ_r weights[r] · (−log softmax(logits_r)[targets[r]])` over the rows
    /// of `logits` viewed as `[R, V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[F]) -> Result<Var> {
        let x = self.value(logits);
        let v = *x.shape().last().unwrap_or(&0);
        let rows = x.len() / v.max(1);
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: x.shape().to_vec(),
                rhs: vec![targets.len(), weights.len()],
            });
        }
        let mut probs = x.clone();
        let mut loss = F::zero();
        for (r, row) in probs.data_mut().chunks_mut(v).enumerate() {
            softmax_in_place(row);
            if weights[r] != F::zero() {
                let t = targets[r];
                if t >= v {
                    return Err(Error::Invalid(format!("target {t} out of range {v}")));
                }
                // log-softmax through the max-shifted logits keeps this finite
                let raw = &x.data()[r * v..(r + 1) * v];
                let max = raw.iter().copied().fold(F::neg_infinity(), F::max);
                let lse = raw.iter().map(|&z| (z - max).exp()).sum::<F>().ln() + max;
                loss = loss + weights[r] * (lse - raw[t]);
            }
        }
        let rg = self.rg(&[logits]);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lv = self.value(loss);
        if lv.len() != 1 || lv.rank() > 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Some(id) = node.param {
                out.grads.insert(id, g);
                continue;
            }
            self.backprop(node, &g, &mut grads)?;
        }
        for (&id, &v) in &self.params {
            out.grads.entry(id).or_insert_with(|| Tensor::zeros(self.shape(v)));
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn backprop(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone())?;
                self.acc(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone())?;
                self.acc(grads, *b, g.map(|x| -x))?;
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?)?;
                }
                if self.requires_grad(*b) {
                    self.acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?)?;
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.requires_grad(*a) {
                    self.acc(grads, *a, g.zip_map(bv, |x, y| x / y)?)?;
                }
                if self.requires_grad(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let q = node.value.zip_map(bv, |x, y| x / y)?;
                    self.acc(grads, *b, g.zip_map(&q, |x, y| -x * y)?)?;
                }
            }
            Op::AddRow(a, b) => {
                self.acc(grads, *a, g.clone())?;
                if self.requires_grad(*b) {
                    self.acc(grads, *b, row_sum(g))?;
                }
            }
            Op::MulRow(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = bv.len();
                if self.requires_grad(*a) {
                    let mut ga = g.clone();
                    for row in ga.data_mut().chunks_mut(n) {
                        row.iter_mut().zip(bv.data()).for_each(|(x, &s)| *x = *x * s);
                    }
                    self.acc(grads, *a, ga)?;
                }
                if self.requires_grad(*b) {
                    self.acc(grads, *b, row_sum(&g.zip_map(av, |x, y| x * y)?))?;
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.map(|x| x * *s))?,
            Op::AddConst(a) => self.acc(grads, *a, g.clone())?,
            Op::MulConst(a, c) => self.acc(grads, *a, g.zip_map(c, |x, y| x * y)?)?,
            Op::Square(a) => {
                let two = lit::<F>(2.0);
                self.acc(grads, *a, g.zip_map(self.value(*a), |x, y| two * x * y)?)?;
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let m = av.len() / k.max(1);
                if self.requires_grad(*a) {
                    let mut ga = vec![F::zero(); m * k];
                    F::gemm(m, n, k, g.data(), (n as isize, 1), bv.data(), (1, n as isize), &mut ga, false);
                    self.acc(grads, *a, Tensor::new(av.shape().to_vec(), ga)?)?;
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![F::zero(); k * n];
                    F::gemm(k, m, n, av.data(), (1, k as isize), g.data(), (n as isize, 1), &mut gb, false);
                    self.acc(grads, *b, Tensor::new(vec![k, n], gb)?)?;
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = g.shape()[2];
                let (gd, ad, bd) = (g.data(), av.data(), bv.data());
                if self.requires_grad(*a) {
                    let mut ga = vec![F::zero(); batch * m * k];
                    // ga = g · bᵀ  (b stored [k,n]) or g · b (b stored [n,k])
                    let bs = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    for i in 0..batch {
                        F::gemm(
                            m,
                            n,
                            k,
                            &gd[i * m * n..(i + 1) * m * n],
                            (n as isize, 1),
                            &bd[i * k * n..(i + 1) * k * n],
                            bs,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    self.acc(grads, *a, Tensor::new(av.shape().to_vec(), ga)?)?;
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![F::zero(); batch * k * n];
                    for i in 0..batch {
                        let gs = &gd[i * m * n..(i + 1) * m * n];
                        let as_ = &ad[i * m * k..(i + 1) * m * k];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // gb[n,k] = gᵀ · a
                            F::gemm(n, m, k, gs, (1, n as isize), as_, (k as isize, 1), out, false);
                        } else {
                            // gb[k,n] = aᵀ · g
                            F::gemm(k, m, n, as_, (1, k as isize), gs, (n as isize, 1), out, false);
                        }
                    }
                    self.acc(grads, *b, Tensor::new(bv.shape().to_vec(), gb)?)?;
                }
            }
            Op::Gather { src, index } => {
                let sv = self.value(*src);
                let mut gs = Tensor::zeros(sv.shape());
                let data = gs.data_mut();
                for (&ix, &gv) in index.iter().zip(g.data()) {
                    if ix != NO_INDEX {
                        data[ix] = data[ix] + gv;
                    }
                }
                self.acc(grads, *src, gs)?;
            }
            Op::Concat { parts, axis } => {
                let shape = g.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let chunk = ps[*axis] * inner;
                    if self.requires_grad(p) {
                        let mut gp = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let start = o * total + offset;
                            gp.extend_from_slice(&g.data()[start..start + chunk]);
                        }
                        self.acc(grads, p, Tensor::new(ps, gp)?)?;
                    }
                    offset += chunk;
                }
            }
            Op::Reshape(a) => self.acc(grads, *a, g.clone().reshape(self.shape(*a))?)?,
            Op::Softmax(a) => {
                let y = &node.value;
                let n = *y.shape().last().unwrap_or(&1);
                let mut ga = g.clone();
                for (gr, yr) in ga.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let dot: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    gr.iter_mut().zip(yr).for_each(|(x, &yv)| *x = yv * (*x - dot));
                }
                self.acc(grads, *a, ga)?;
            }
            Op::LayerNorm { x, rstd } => {
                let y = &node.value;
                let n = *y.shape().last().unwrap_or(&1);
                let nf = F::from_usize(n).unwrap();
                let mut ga = g.clone();
                for ((gr, yr), &r) in ga.data_mut().chunks_mut(n).zip(y.data().chunks(n)).zip(rstd) {
                    let mg = gr.iter().copied().sum::<F>() / nf;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<F>() / nf;
                    gr.iter_mut().zip(yr).for_each(|(v, &yv)| *v = r * (*v - mg - yv * mgy));
                }
                self.acc(grads, *x, ga)?;
            }
            Op::Gelu(a) => {
                self.acc(grads, *a, g.zip_map(self.value(*a), |gv, x| gv * gelu_grad(x))?)?;
            }
            Op::Sum(a) => {
                let s = g.item();
                self.acc(grads, *a, Tensor::full(self.shape(*a), s))?;
            }
            Op::Mean(a) => {
                let n = F::from_usize(self.value(*a).len().max(1)).unwrap();
                self.acc(grads, *a, Tensor::full(self.shape(*a), g.item() / n))?;
            }
            Op::SumLeading(a) => {
                let n = g.len();
                let mut ga = Tensor::zeros(self.shape(*a));
                for row in ga.data_mut().chunks_mut(n.max(1)) {
                    row.copy_from_slice(g.data());
                }
                self.acc(grads, *a, ga)?;
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let s = g.item();
                let v = *probs.shape().last().unwrap_or(&1);
                let mut ga = probs.clone();
                for (r, row) in ga.data_mut().chunks_mut(v).enumerate() {
                    let w = weights[r] * s;
                    if weights[r] == F::zero() {
                        row.iter_mut().for_each(|x| *x = F::zero());
                        continue;
                    }
                    row[targets[r]] = row[targets[r]] - F::one();
                    row.iter_mut().for_each(|x| *x = *x * w);
                }
                self.acc(grads, *logits, ga)?;
            }
        }
        Ok(())
    }
}

fn row_sum<F: Element>(g: &Tensor<F>) -> Tensor<F> {
    let n = *g.shape().last().unwrap_or(&1);
    let mut out = vec![F::zero(); n];
    for row in g.data().chunks(n.max(1)) {
        out.iter_mut().zip(row).for_each(|(o, &x)| *o = *o + x);
    }
    Tensor::new(vec![n], out).unwrap()
}

pub(crate) fn softmax_in_place<F: Element>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    row.iter_mut().for_each(|x| *x = *x / total);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<F: Element>(x: F) -> F {
    let (c, a, half) = (lit::<F>(GELU_C), lit::<F>(GELU_A), lit::<F>(0.5));
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<F: Element>(x: F) -> F {
    let (c, a, half, three) = (lit::<F>(GELU_C), lit::<F>(GELU_A), lit::<F>(0.5), lit::<F>(3.0));
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x)
}
