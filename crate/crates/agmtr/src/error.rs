//! Crate-wide error type.

use crate::sinkhorn::TransportPlan;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value rejected at tensor construction (index {index}, value {value})")]
    NonFinite { index: usize, value: f64 },

    #[error("mask has no active pixels")]
    EmptyMask,

    #[error("vector norm below {eps} in cosine similarity")]
    ZeroVector { eps: f64 },

    #[error("softmax row {row} is fully masked")]
    AllMaskedRow { row: usize },

    #[error("sinkhorn did not reach marginal tolerance: residual {residual:.3e} after {iters} iterations")]
    NoConvergence {
        plan: TransportPlan,
        residual: f64,
        iters: usize,
    },

    #[error("class {class} has {available} images, episode needs {needed}")]
    InsufficientImages {
        class: usize,
        available: usize,
        needed: usize,
    },

    #[error("metric accumulator is empty")]
    EmptyAccumulator,

    #[error("loss became non-finite at iteration {iter}: {value}")]
    NonFiniteLoss { iter: usize, value: f64 },

    #[error("bad tensor file: {0}")]
    BadTensorFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(String),

    #[error("{0}")]
    Config(String),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}
