use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: reduction axis is empty")]
    EmptyAxis { op: &'static str },

    #[error("{op}: degenerate (zero-norm) vector")]
    DegenerateVector { op: &'static str },

    #[error("{what}: index {index} out of range for length {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("expected a scalar, got shape {shape:?}")]
    Rank { shape: Vec<usize> },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("version mismatch: {0}")]
    Version(String),

    #[error("malformed tensor container at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("numeric failure ({context}, seed {seed}): {reason}")]
    Numeric {
        context: String,
        seed: u64,
        reason: String,
    },

    #[error("cannot sample class {class}: need {needed} images, have {available}")]
    Sampling {
        class: usize,
        needed: usize,
        available: usize,
    },

    #[error("{op}: centered Gram matrix is zero (constant features)")]
    DegenerateInput { op: &'static str },

    #[error("not found: {0}")]
    Lookup(String),

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
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
