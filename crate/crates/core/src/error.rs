use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("schedule invariant violated: {0}")]
    Schedule(String),

    #[error("index out of range: {what} = {index}, valid range 0..{len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sequencing error: {0}")]
    Sequencing(String),

    #[error("budget error: {0}")]
    Budget(String),

    /// A checked runtime invariant (conservation, budget compliance, audit
    /// reconciliation) did not hold.
    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}, line {line}: {message}", path = path.display())]
    Parse { path: PathBuf, line: u64, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub fn is_invariant(&self) -> bool {
        matches!(self, Error::Invariant(_))
    }
}
