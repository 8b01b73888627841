use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty vector")]
    EmptyVector,

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    /// Every entry was zero after clamping or truncation.
    #[error("distribution has zero total mass")]
    ZeroMass,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("no distribution recorded for layer {0}")]
    MissingLayer(u16),

    #[error("layer selection is empty")]
    EmptySelection,

    #[error("invalid bucket: {0}")]
    InvalidBucket(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("bad magic bytes")]
    BadMagic,

    #[error("unsupported trace version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated file: needed {needed} bytes at offset {offset}")]
    TruncatedFile { offset: usize, needed: usize },

    #[error("non-finite payload value at step {step}, row {row}, index {index}")]
    NonFinitePayload {
        step: usize,
        row: usize,
        index: usize,
    },

    #[error("invalid payload at step {step}, row {row}: {reason}")]
    InvalidPayload {
        step: usize,
        row: usize,
        reason: String,
    },

    #[error("invalid trace header: {0}")]
    InvalidHeader(String),

    #[error("{0} unexpected trailing bytes after last step")]
    TrailingBytes(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("trace has no noise-reference channel; mode {0} needs one")]
    MissingNoiseChannel(&'static str),

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    /// The standard layer is never wrong, so the distortion rate is undefined.
    #[error("standard layer is never wrong; distortion rate undefined")]
    EmptyDenominator,

    #[error("empty input")]
    EmptyInput,

    #[error("baseline missing: {0}")]
    MissingBaseline(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
