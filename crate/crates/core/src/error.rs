use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the engine. Variants map onto the failure classes of the
/// pipeline: bad input files, bad configuration, bad call arguments, and
/// broken data invariants discovered mid-computation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("index out of range: {what} {index} (bound {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("instance too large for exhaustive enumeration: {size} items (limit {limit})")]
    TooLarge { size: usize, limit: usize },

    #[error("data integrity error: {0}")]
    Integrity(String),

    #[error("non-finite gradient: {0}")]
    NonFinite(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("cell {cell}: {source}")]
    Cell {
        cell: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
