use std::io;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Named tensors, as stored in checkpoints.
pub type StateDict = Vec<(String, crate::tensor::Tensor)>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: output extent would be zero ({detail})")]
    ZeroExtent { op: &'static str, detail: String },

    #[error("numerical domain error in {op}: {detail}")]
    NumericalDomain { op: &'static str, detail: String },

    #[error("invalid label {label} at pixel {pixel}: expected an id below {classes} or the ignore id {ignore}")]
    InvalidLabel {
        label: u8,
        pixel: usize,
        classes: usize,
        ignore: u8,
    },

    #[error("backward requires a scalar loss, got a tensor of shape {0}")]
    NonScalarLoss(Shape),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at iteration {iter} (loss {loss})")]
    Diverged {
        iter: usize,
        loss: f64,
        /// Parameters and buffers as they were after the last finite step.
        last_good: Box<StateDict>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint tensors do not match the model: missing [{}], unexpected [{}]", missing.join(", "), unexpected.join(", "))]
    TensorSetMismatch {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },

    #[error("image format: {0}")]
    Format(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }
}
