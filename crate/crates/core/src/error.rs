use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("infeasible configuration: {0}")]
    Infeasible(String),
    #[error("unknown node id {0}")]
    UnknownNode(usize),
    #[error("no path between {0} and {1}")]
    Unreachable(usize, usize),
    #[error("invalid path: {0}")]
    InvalidPath(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("token id {0} outside vocabulary of size {1}")]
    OutOfVocab(usize, usize),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("target out of range: {0}")]
    Target(String),
    #[error("inconsistent edge length for ({u}, {v}): stored {stored}, observed {observed}")]
    EdgeLength { u: usize, v: usize, stored: f64, observed: f64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("unknown {kind} '{name}' (known: {known})")]
    UnknownName { kind: &'static str, name: String, known: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
