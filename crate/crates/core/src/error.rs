use thiserror::Error;

use crate::backends::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("pool is empty")]
    EmptyPool,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("non-finite embedding value")]
    NonFinite,

    #[error("token sequence is empty")]
    EmptySequence,

    #[error("invalid token distribution: {0}")]
    InvalidDistribution(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("exact match requires a label gold answer, got a caption")]
    InvalidGoldKind,

    #[error("input is empty")]
    EmptyInput,

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("encoder mismatch: pool was built with {expected:?}, endpoint is {found:?}")]
    EncoderMismatch { expected: String, found: String },

    #[error("malformed snapshot: {0}")]
    Snapshot(String),

    #[error("malformed dataset line {line}: {message}")]
    Dataset { line: usize, message: String },

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
