use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("backward called with a cache from a different parameter state")]
    StaleCache,

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("unknown branch `{0}`")]
    UnknownBranch(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    Length { expected: usize, actual: usize },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("unknown device {0}")]
    UnknownDevice(u32),

    #[error("sync barrier timed out in round {round}; missing updates from devices {missing:?}")]
    BarrierTimeout { round: u64, missing: Vec<u32> },

    #[error("channel closed: {0}")]
    ChannelClosed(String),

    #[error("malformed frame: {0}")]
    Frame(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("environment error: {0}")]
    Env(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
