use std::path::PathBuf;

use thiserror::Error;
use unitac_nn::NnError;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid parameters or an impossible request.
    #[error("configuration error: {0}")]
    Config(String),
    /// Inputs that violate a data contract (dimensions, ids, empty sets).
    #[error("data error: {0}")]
    Data(String),
    /// Divergence or non-finite numbers during training or evaluation.
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, err: std::io::Error) -> Self {
        Error::Io(path.into(), err)
    }

    /// True for divergence and non-finite values, wherever they surfaced.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::Nn(NnError::NonFinite(_)))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
