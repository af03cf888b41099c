use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] ssgraph_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("config: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit status: 2 for bad configuration or input, 3 for numeric
    /// failure, 4 when a memory guard refused the run, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use ssgraph_core::Error as C;
        match self {
            Error::Core(C::NonFinite(_) | C::Engine(_)) => 3,
            Error::Core(C::Refused(_)) => 4,
            Error::Core(_) | Error::Parse { .. } | Error::Format { .. } | Error::Config(_) | Error::Json(_) => 2,
            Error::Io { .. } => 1,
        }
    }
}
