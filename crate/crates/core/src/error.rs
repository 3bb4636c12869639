use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite value in {term} at step {step}")]
    NonFinite { term: String, step: usize },

    #[error("training diverged at step {step}: {term} is not finite (last good checkpoint at step {last_good_step})")]
    Divergence {
        step: usize,
        term: String,
        last_good_step: usize,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error is a caller mistake (bad input, config, or usage)
    /// rather than a failure while running.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Usage(_)
                | Error::Config(_)
                | Error::Parse { .. }
                | Error::Json(_)
                | Error::UnknownLayer(_)
                | Error::Format(_)
                | Error::Shape(_)
                | Error::Io { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
