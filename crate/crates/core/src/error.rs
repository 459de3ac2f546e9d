use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the merging toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed checkpoint: {0}")]
    Format(String),

    #[error("truncated payload: expected {expected} bytes after header, found {found}")]
    Truncation { expected: u64, found: u64 },

    #[error("unsupported dtype `{0}`")]
    Dtype(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("incompatible tensors at `{tensor}`: {reason}")]
    Compat { tensor: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("location dataset is empty")]
    EmptyDataset,

    #[error("non-finite value in {0}")]
    Numerics(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn compat(tensor: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Compat {
            tensor: tensor.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
