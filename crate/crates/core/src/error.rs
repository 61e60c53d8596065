use std::path::PathBuf;

use thiserror::Error;

use crate::dataset::TripleId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unknown {kind} `{name}`")]
    UnknownName { kind: &'static str, name: String },

    #[error("unknown triple id {0}")]
    UnknownTriple(TripleId),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("artifact mismatch: {0}")]
    Mismatch(String),

    #[error("malformed artifact {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("non-finite loss {loss} at step {step} (triple {triple}, epoch {epoch}, lr {lr})")]
    Diverged {
        step: u64,
        epoch: usize,
        triple: TripleId,
        loss: f64,
        lr: f64,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
