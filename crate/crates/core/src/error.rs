use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PcnError>;

#[derive(Debug, Error)]
pub enum PcnError {
    #[error("shape: {0}")]
    Shape(String),

    /// A remapped window does not fit inside the target frame.
    #[error("oob: window {0} lies outside the {1}x{2} frame")]
    Oob(String, usize, usize),

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Training produced a non-finite loss.
    #[error("divergence at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },

    #[error("model format: {0}")]
    Format(String),

    #[error("image format: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PcnError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        PcnError::Shape(msg.into())
    }
}
