use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("invalid threshold {0}: clipping thresholds must be positive")]
    InvalidThreshold(f64),

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("unsupported layer kind `{0}`")]
    UnsupportedLayer(String),

    #[error("missing thresholds: {0}")]
    MissingThresholds(String),

    #[error("non-finite loss at epoch {epoch}{}", layer.map(|l| format!(" (layer {l})")).unwrap_or_default())]
    Divergence { epoch: usize, layer: Option<usize> },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
