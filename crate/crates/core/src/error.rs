use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the core library.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad magic, unsupported version or otherwise unrecognizable file.
    #[error("format error: {0}")]
    Format(String),

    /// Header and payload disagree, or the payload is truncated.
    #[error("corrupt data: {0}")]
    Corruption(String),

    /// Non-finite values or broken data invariants.
    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A numerical precondition (e.g. unit norm) does not hold.
    #[error("contract violated: {0}")]
    Contract(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("partition error: {0}")]
    Partition(String),

    /// Federated protocol misuse, such as mixing domains in one aggregation.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("configuration error: {0}")]
    Config(String),

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
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
