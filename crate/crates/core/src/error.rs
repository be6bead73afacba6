use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncation { expected: usize, found: usize },
    #[error("unsupported tensor rank {0} (must be 1..=4)")]
    Dim(usize),
    #[error("invalid value: {0}")]
    Value(String),
    #[error("inconsistent metric keys in record {record}")]
    Schema { record: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("canvas error: {0}")]
    Canvas(String),
    #[error("empty mask")]
    Mask,
    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("training diverged at step {step}")]
    Divergence { step: usize },
    #[error("{path}: {source}")]
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
}
