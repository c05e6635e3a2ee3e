//! Minimal reverse-mode automatic differentiation over dense tensors, and
//! the Adam optimizer used by every training stage.

mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{AttentionMask, Graph, NodeId};
pub use optim::{Adam, AdamConfig};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("tensor shape {shape:?} does not match {len} elements")]
    InvalidTensor { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range for {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("loss must be scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },
}
