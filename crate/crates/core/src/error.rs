use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Stored data disagrees with a recomputation from first principles.
    #[error("data integrity: {0}")]
    DataIntegrity(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid value: {}", .0.join("; "))]
    Invalid(Vec<String>),

    #[error("store key already written: {0}")]
    WriteOnce(String),

    /// Retriable: the listed keys never appeared before the deadline.
    #[error("timed out waiting for {} store keys: {}", .missing.len(), .missing.join(", "))]
    Timeout { missing: Vec<String> },

    #[error("malformed record: {0}")]
    Decode(String),

    #[error("config error: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether a worker may retry the failed operation unchanged.
    pub fn is_retriable(&self) -> bool {
        matches!(self, Error::Timeout { .. } | Error::Io { .. })
    }
}
