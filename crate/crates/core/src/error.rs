use std::path::PathBuf;

use numkit::NumError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AlterError {
    #[error(transparent)]
    Num(#[from] NumError),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("{path}:{line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("corpus spec error: {0}")]
    Spec(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl AlterError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// True for failures of the environment rather than of the inputs.
    pub fn is_io(&self) -> bool {
        matches!(self, Self::Io { .. })
    }
}

pub type Result<T> = std::result::Result<T, AlterError>;

pub(crate) fn contract(msg: impl Into<String>) -> AlterError {
    AlterError::Contract(msg.into())
}
