use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {dimension}: expected {expected}, got {actual}")]
    Shape {
        dimension: String,
        expected: usize,
        actual: usize,
    },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("checksum mismatch for tensor {index}: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum {
        index: usize,
        stored: u32,
        computed: u32,
    },

    #[error("unsupported checkpoint version {found:?} (expected {expected:?})")]
    Version { found: String, expected: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(dimension: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::Shape {
            dimension: dimension.into(),
            expected,
            actual,
        }
    }

    pub(crate) fn parse(offset: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Checks `actual == expected`, naming the offending dimension on failure.
pub(crate) fn ensure_dim(dimension: &str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::shape(dimension, expected, actual))
    }
}
