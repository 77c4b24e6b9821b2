use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("image must be {expected}-bit, got {actual}-bit")]
    BitDepth { expected: u8, actual: u8 },

    #[error("{width}x{height} is not divisible into {patch}x{patch} patches")]
    NotDivisible { width: usize, height: usize, patch: usize },

    #[error("malformed image file: {0}")]
    Format(String),

    #[error("unsupported image: {0}")]
    Unsupported(String),

    #[error("placement infeasible after {attempts} attempts: {what}")]
    Infeasible { what: String, attempts: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("backward called without a preceding training forward pass")]
    NoForwardCache,

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
