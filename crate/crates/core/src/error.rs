use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: {source}")]
    AtLine {
        line: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid record {id:?}: {message}")]
    InvalidRecord { id: String, message: String },

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("class count mismatch: expected {expected}, found {found}")]
    ArityMismatch { expected: usize, found: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient examples: need at least {needed}, got {got}")]
    InsufficientExamples { needed: usize, got: usize },

    #[error("model is not fitted")]
    NotFitted,

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("serialization: {0}")]
    Serialization(String),
}

impl Error {
    /// Short, stable, machine-parsable category used for CLI exit lines and
    /// FFI status codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::AtLine { source, .. } => source.category(),
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::InvalidRecord { .. } | Error::DuplicateId(_) => "validation",
            Error::ArityMismatch { .. } | Error::DimensionMismatch { .. } => "arity",
            Error::InvalidArgument(_) => "argument",
            Error::InsufficientExamples { .. } => "insufficient-examples",
            Error::NotFitted => "not-fitted",
            Error::Diverged(_) => "diverged",
            Error::Unsupported(_) => "unsupported",
            Error::Serialization(_) => "serialization",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
