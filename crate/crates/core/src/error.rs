use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("attribute `{0}` has no value type in the type map")]
    UnknownValueType(String),

    #[error("graph is empty")]
    EmptyGraph,

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("syntax error at byte {position}: {message}")]
    Syntax { position: usize, message: String },

    #[error("phase error: {0}")]
    Phase(String),

    #[error("unknown {kind} `{name}`")]
    UnknownSymbol { kind: &'static str, name: String },

    #[error("query does not match any general query type: {0}")]
    UnknownShape(String),

    #[error("no DICE range registered for value type `{0}`")]
    MissingRange(String),

    #[error("invalid encoding spec: {0}")]
    InvalidEncoding(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss at step {step} ({kind} batch)")]
    NonFiniteLoss { step: u64, kind: &'static str },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    Config(String),
}

impl Error {
    /// Process exit code: 2 for bad input or usage, 3 for failures while
    /// running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFiniteLoss { .. } | Error::Shape(_) | Error::EmptyGraph => 3,
            Error::Io { source, .. } if source.kind() != std::io::ErrorKind::NotFound => 3,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
