//! Reverse-mode automatic differentiation over a small fixed operator set.
//!
//! A [`Graph`] is built once and evaluated through a [`Session`], which owns
//! the per-call activations. Images use NHWC layout throughout.

mod gradcheck;
mod graph;
mod kernels;
mod scalar;
mod session;
mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{Graph, NodeId, Op, Reduction};
pub use scalar::Scalar;
pub use session::{Gradients, Session};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AutodiffError {
    #[error("invalid tensor: shape {shape:?} does not describe {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("shape mismatch at node `{node}`: {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("input `{0}` is not bound")]
    MissingInput(String),
    #[error("node `{node}` refers to missing parameter {index}")]
    MissingParam { node: String, index: usize },
    #[error("graph has no output named `{0}`")]
    UnknownOutput(String),
    #[error("backward called before forward")]
    NotEvaluated,
    #[error("gradients are disabled for this session")]
    GradDisabled,
    #[error("loss node `{node}` is not scalar (shape {shape:?})")]
    NonScalarLoss { node: String, shape: Vec<usize> },
}
