use thiserror::Error;

use crate::corpus::WordId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: WordId, size: usize },
    #[error("target outside sampled vocabulary (id {0})")]
    TargetOutsideSubset(WordId),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("malformed input at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
