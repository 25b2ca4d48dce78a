use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// The CLI maps [`MsmaError::is_validation`] errors to exit code 1 and every
/// other variant to exit code 2.
#[derive(Debug, Error)]
pub enum MsmaError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("validation error in `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("unexpected EOF at offset {offset} in {path}")]
    UnexpectedEof { path: PathBuf, offset: u64 },

    #[error("bad magic in {path}: expected \"MSMA\", found {found:?}")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("unsupported version {version} in {path}")]
    UnsupportedVersion { path: PathBuf, version: u16 },

    #[error("payload size mismatch in {path}: expected {expected} bytes, found {found}")]
    PayloadSizeMismatch {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("ambiguous boundaries: score profile is flat")]
    AmbiguousBoundaries { trace: Vec<f64> },

    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        step: usize,
        reason: String,
        trace: Vec<f64>,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, MsmaError>;

impl MsmaError {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        MsmaError::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MsmaError::Io {
            path: path.into(),
            source,
        }
    }

    /// Input problems the caller can fix, as opposed to runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            MsmaError::Validation { .. }
                | MsmaError::Precondition(_)
                | MsmaError::DimensionMismatch(_)
                | MsmaError::BadMagic { .. }
                | MsmaError::UnsupportedVersion { .. }
                | MsmaError::PayloadSizeMismatch { .. }
                | MsmaError::UnexpectedEof { .. }
        )
    }
}

impl From<serde_json::Error> for MsmaError {
    fn from(e: serde_json::Error) -> Self {
        MsmaError::Serde(e.to_string())
    }
}

impl From<csv::Error> for MsmaError {
    fn from(e: csv::Error) -> Self {
        MsmaError::Serde(e.to_string())
    }
}
