use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MelleError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MelleError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: unreadable wav: {reason}")]
    Wav { path: PathBuf, reason: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("numeric failure: {context}")]
    Numeric { context: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl MelleError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MelleError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        MelleError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            MelleError::Config(_) | MelleError::InvalidInput(_) => ErrorClass::Usage,
            MelleError::NonFinite { .. } | MelleError::Numeric { .. } => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}
