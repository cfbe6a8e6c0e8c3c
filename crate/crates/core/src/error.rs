use std::io;

use thiserror::Error;

pub type Result<T, E = GistError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GistError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    /// Bad magic, unsupported version or otherwise malformed header.
    #[error("format error: {0}")]
    Format(String),

    /// The header parsed but the payload or sidecar disagrees with it.
    #[error("corrupt data: {0}")]
    Corruption(String),

    #[error("invalid value in row {row}: {reason}")]
    Validation { row: usize, reason: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("degenerate subspace: {0}")]
    DegenerateSubspace(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("degenerate eigengap: gap {gap:e} at rank {rank} is below tolerance {tolerance:e}")]
    DegenerateGap {
        rank: usize,
        gap: f64,
        tolerance: f64,
    },

    #[error("diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl GistError {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        GistError::Argument(msg.into())
    }
}
