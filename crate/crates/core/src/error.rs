use thiserror::Error;

use crate::corpus::CorpusError;
use crate::diffcore::DiffError;

#[derive(Debug, Error)]
pub enum CocoError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Model(String),
    #[error("non-finite loss term `{0}`")]
    NonFiniteLoss(&'static str),
    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint parse error: {0}")]
    Checkpoint(String),
    #[error("catalog mismatch: {0}")]
    CatalogMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CocoError> = std::result::Result<T, E>;
