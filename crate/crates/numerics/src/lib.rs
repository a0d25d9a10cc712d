//! Dense row-major tensors, a tape for reverse-mode differentiation, named
//! parameter storage and an AdamW optimizer.
//!
//! Everything is generic over [`Element`], implemented for `f32` (the default
//! training precision) and `f64` (used by gradient checks).

mod element;
mod error;
mod graph;
mod optim;
mod param;
mod tensor;

pub use element::{DType, Element};
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var, NO_INDEX};
pub use optim::{AdamW, AdamWConfig};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

/// Shorthand for converting an `f64` literal into the element type.
#[inline]
pub fn lit<F: Element>(x: f64) -> F {
    F::from_f64(x).expect("finite literal")
}
