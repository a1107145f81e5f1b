use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("non-finite loss at epoch {epoch}")]
    NumericOverflow { epoch: usize },

    #[error("non-finite gradient: {0}")]
    NonFiniteGradient(String),

    #[error("checkpoint slot (block {block}, candidate {candidate}) already written")]
    DuplicateWrite { block: usize, candidate: usize },

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("checkpoint store is sealed")]
    SealedStore,

    #[error("missing checkpoint for block {block}, candidate {candidate}")]
    MissingCheckpoint { block: usize, candidate: usize },

    #[error("missing checkpoint manifest in {0}")]
    MissingManifest(PathBuf),

    #[error("format error: {0}")]
    Format(String),

    #[error("population member {index}: {source}")]
    Population {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("search aborted at step {step}: {source}")]
    SearchAborted {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
