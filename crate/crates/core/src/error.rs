//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unknown code '{0}' not present in the vocabulary")]
    UnknownCode(String),

    #[error("patient '{patient}' has two visits with the same timestamp {t}")]
    DuplicateTimestamp { patient: String, t: i64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("R^2 is undefined: target values have zero variance")]
    ZeroVariance,

    #[error("training diverged (non-finite loss) at epoch {epoch}, patient '{patient}'")]
    Divergence { epoch: usize, patient: String },

    #[error("unsupported checkpoint version {0} (this build reads version 1)")]
    UnsupportedVersion(u32),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("target code '{0}' has no counterpart in the source vocabulary")]
    UnmappedCode(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
