use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent user configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed input data (maps, tensors, polygons).
    #[error("data error: {0}")]
    Data(String),

    /// Operation requested in a state that does not support it.
    #[error("state error: {0}")]
    State(String),

    /// A pool or batch invariant would be broken.
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// External learner worker misbehaved.
    #[error("learner protocol error: {message}")]
    Protocol { message: String, stderr: String },

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
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Protocol { .. } => 3,
            _ => 1,
        }
    }
}
