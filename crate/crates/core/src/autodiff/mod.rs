//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is built fresh for each forward pass. Operations on [`Var`]
//! handles append nodes; [`Tape::backward`] walks them in reverse and
//! returns adjoints for every node that depends on a differentiable leaf.

mod gradcheck;
mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::{grad_check, GRAD_FLOOR};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{sigmoid, softmax, Gradients, Tape, Var, DEFAULT_LEAKY_SLOPE};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for length {len}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: no inputs")]
    Empty { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite value in {context} (parameter element {index})")]
    NonFinite { context: String, index: usize },
}
