//! Crate-wide error type.

use std::path::PathBuf;

/// All failure modes surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed wav: {0}")]
    MalformedWav(String),
    #[error("unsupported wav format: {0}")]
    UnsupportedFormat(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest parse error at line {line}: {msg}")]
    ManifestParse { line: usize, msg: String },
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("clip too short: {0}")]
    ClipTooShort(String),
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    SampleRateMismatch(u32, u32),
    #[error("rt60 out of range (0.05, 1.0]: {0}")]
    InvalidRt60(f64),
    #[error("invalid frequency range: {0}")]
    InvalidRange(String),
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss does not depend on any trainable parameter")]
    DisconnectedGraph,
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("similarity matrix is not square: {0:?}")]
    NotSquare(Vec<usize>),
    #[error("batch too small: got {got}, need at least {need}")]
    BatchTooSmall { got: usize, need: usize },
    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("missing labels: {0}")]
    MissingLabels(String),
    #[error("malformed feature blob: {0}")]
    MalformedBlob(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("label {label} out of range for {n_classes} classes")]
    OutOfRangeLabel { label: usize, n_classes: usize },
    #[error("empty confusion matrix")]
    EmptyMatrix,
    #[error("gradient check {name} failed: max rel err {max_rel_err:.3e} exceeds tolerance {tolerance:.0e}")]
    GradCheckFailed {
        name: String,
        max_rel_err: f64,
        tolerance: f64,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
