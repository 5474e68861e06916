//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (zero categories, empty image area, bad thresholds, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed input to an operation (vocabulary miss, category-order mismatch, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Tensor dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Prompt layout violates `before <= total`.
    #[error("layout error: prompt layout ({before},{total}) requires before <= total")]
    Layout { before: usize, total: usize },

    /// A training loop produced a non-finite loss.
    #[error("training diverged at batch {batch}: loss = {loss}")]
    Divergence { batch: usize, loss: f64 },

    /// An operation received input it is defined to reject (e.g. a loss with no valid pixel).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("codec error in {path}: {message}")]
    Codec { path: String, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
