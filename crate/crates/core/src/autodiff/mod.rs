//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod adam;
mod graph;
mod params;
mod tensor;

pub use adam::Adam;
pub use graph::{Grads, Graph, KernelMap, Var};
pub use params::{load_checkpoint, save_checkpoint, Checkpoint, ParamId, ParamStore};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{0}")]
    Contract(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}
