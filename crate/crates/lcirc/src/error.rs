//! Error type shared across the crate.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Incompatible tensor shapes; the message names both shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Non-finite values where finite ones are required, or training divergence.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Token id or target index out of range.
    #[error("index out of range: {0}")]
    Index(String),

    /// Invalid configuration (bad field values, unknown keys, block-count mismatch).
    #[error("configuration error: {0}")]
    Config(String),

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Segment boundaries do not tile the context.
    #[error("segmentation error: {0}")]
    Segmentation(String),

    /// Input length exceeds the positional window of the base model.
    #[error("input of {n} tokens exceeds the positional window M={m}")]
    WindowExceeded { n: usize, m: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Malformed checkpoint or state file.
    #[error("file format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
