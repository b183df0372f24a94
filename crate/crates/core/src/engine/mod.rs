//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! The encoder and every loss share this single differentiation path, and
//! [`finite_diff_check`] verifies it against central differences.

mod check;
mod graph;
mod tensor;

pub use check::{finite_diff_check, CoordSample, GradCheck};
pub use graph::{sigmoid, Gradients, Graph, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("shape mismatch at {node}: {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("non-finite value while probing {what}")]
    NonFinite { what: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
