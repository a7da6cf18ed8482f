//! Crate-wide error type. Most operations validate their inputs up front and
//! return one of these rather than panicking.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid cluster spec: {0}")]
    InvalidSpec(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("snapshot plan error: {0}")]
    Plan(String),

    #[error("codec error: {0}")]
    Codec(String),

    #[error("store error: {0}")]
    Store(String),

    #[error("snapshot capacity exceeded: need {needed} bytes, budget {budget} bytes")]
    CapacityExceeded { needed: u64, budget: u64 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checksum mismatch for shard {0}")]
    ChecksumMismatch(String),

    #[error("illegal signal transition: {from:?} on {event:?}")]
    IllegalTransition { from: String, event: String },

    #[error("recovery error: {0}")]
    Recovery(String),

    #[error("state is unrecoverable from memory: {0}")]
    Unrecoverable(String),

    #[error("reliability model error: {0}")]
    Reliability(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Attach a path to a raw I/O error.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
