//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records primitives as they are evaluated (define-by-run) and
//! [`Tape::backward`] sweeps the record in reverse creation order. Each tape
//! is single-threaded; build one per rollout.
//!
//! Subgradient conventions: the derivative of `max{0, x}` and of `min{0, x}`
//! is taken to be 0 at `x = 0`.

mod fd;
mod tape;
mod tensor;

use thiserror::Error;

pub use fd::{finite_difference_gradient, relative_error};
pub use tape::{BackwardFn, BatchMoments, Gradients, NodeId, Primitive, Tape};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid tensor shape {shape:?}: extents must be positive")]
    InvalidShape { shape: Vec<usize> },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity { op: String, expected: usize, got: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a one-element output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("batch statistics need at least 2 rows, got {batch}")]
    BatchTooSmall { batch: usize },
}
