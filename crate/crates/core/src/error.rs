use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeaeError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("index {index} out of range (valid: 0..{len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("backward already ran on this tape; run a new forward pass first")]
    BackwardTwice,
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("bad checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("input must be non-negative (found {0})")]
    NegativeInput(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = MeaeError> = std::result::Result<T, E>;
