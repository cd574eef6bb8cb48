use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A shape is invalid on its own (kernel larger than input, empty extents, ...).
    #[error("shape error: {0}")]
    Shape(String),

    /// A scalar parameter is out of its valid range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// NaN or infinite values where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Cached forward state is missing or does not match the layer.
    #[error("state error: {0}")]
    State(String),

    /// Bad labels or empty datasets.
    #[error("data error: {0}")]
    Data(String),

    /// A file parsed but its contents violate the expected format.
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
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

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
