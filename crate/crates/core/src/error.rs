use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt payload: {0}")]
    Corrupt(String),

    #[error("bounds error: {0}")]
    Bounds(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Divergence {
        epoch: usize,
        reason: String,
        loss_trace: Vec<f64>,
    },

    #[error("degenerate classifier: {0}")]
    Degenerate(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("metadata error in {path}: {message}")]
    Metadata { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical machinery (non-finite values,
    /// divergence, degenerate classifiers) as opposed to bad inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Numeric(_) | Error::Divergence { .. } | Error::Degenerate(_)
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
