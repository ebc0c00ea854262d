use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    Tensor(String),

    #[error("backward already called on this graph; build a fresh graph")]
    BackwardTwice,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-deterministic model function: repeated evaluation gave {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("unknown node id {0}")]
    UnknownNode(u32),

    #[error("node {0} is not in the retrieved set")]
    NotRetrieved(u32),

    #[error("checkpoint mismatch at tensor `{name}`: {msg}")]
    CheckpointMismatch { name: String, msg: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (examples: {examples:?})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        examples: Vec<String>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
