use alloc::string::String;
use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("node index {index} out of range for {num_nodes} nodes")]
    Index { index: usize, num_nodes: usize },
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("parameter sets differ structurally: {0}")]
    Structure(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("wrong encoder kind: {0}")]
    Kind(String),
    #[error("refused: {0}")]
    Refused(String),
    #[error("gradient engine: {0}")]
    Engine(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
