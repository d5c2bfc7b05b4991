use std::io;

use thiserror::Error;

/// Errors raised anywhere in the codec stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch on {axis}: {detail}")]
    Shape { axis: String, detail: String },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("unsupported dtype {0}")]
    UnsupportedDtype(u8),
    #[error("segment length mismatch: {0}")]
    SegmentLength(String),
    #[error("symbol {symbol} outside alphabet [{min}, {max}]")]
    OutOfAlphabet { symbol: i64, min: i64, max: i64 },
    #[error("stream exhausted early")]
    StreamExhausted,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("hyperprior unavailable for family {0}")]
    NoHyperprior(String),
    #[error("manifest hash mismatch: {0}")]
    HashMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(axis: impl Into<String>, detail: impl Into<String>) -> Error {
    Error::Shape {
        axis: axis.into(),
        detail: detail.into(),
    }
}
