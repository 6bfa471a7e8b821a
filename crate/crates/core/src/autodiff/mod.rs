//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records primitive operations as they are applied; calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! gradients for every leaf and parameter that the loss depends on.

mod conv;
mod gradcheck;
mod graph;
mod param;
mod scalar;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_params, Coords};
pub use graph::{Gradients, Graph, Reduce, Var};
pub use param::{ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("{op}: {detail}")]
    InvalidArg { op: &'static str, detail: String },
    #[error("backward already ran on this graph; run a new forward pass first")]
    BackwardConsumed,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
}
