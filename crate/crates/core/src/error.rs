use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Everything that can go wrong while loading, validating or solving a model.
#[derive(Debug, Error)]
pub enum Error {
    #[error("syntax error in {context} at offset {offset}: {message}")]
    Syntax {
        context: String,
        offset: usize,
        message: String,
    },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid state space: {0}")]
    InvalidSpace(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("budget exceeded: {0}")]
    Budget(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical instability: {0}")]
    Instability(String),

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
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Instability(_) => 3,
            Error::Io { .. } => 4,
            _ => 2,
        }
    }
}
