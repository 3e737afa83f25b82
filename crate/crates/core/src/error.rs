use std::path::PathBuf;

use aesvl_autograd::GraphError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] GraphError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint {path}: {kind}")]
    Checkpoint { path: PathBuf, kind: CheckpointError },

    #[error("config: {0}")]
    Config(String),

    #[error("{path} line {line}: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },

    #[error("record {id}: {msg}")]
    Record { id: String, msg: String },

    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("vocabulary: {0}")]
    Vocab(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("rank loss: all-tied batch, no pair with strictly ordered labels")]
    AllTied,

    #[error("metric {metric}: {msg}")]
    Metric { metric: &'static str, msg: String },

    #[error("non-finite loss at step {step}: {components}")]
    NonFinite { step: usize, components: String },

    #[error("task {task}: {msg}")]
    Task { task: String, msg: String },
}

/// Failure modes of the tensor container format.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CheckpointError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated while reading {0}")]
    Truncated(String),
    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
    #[error("tensor {name:?}: unknown dtype tag {tag}")]
    DType { name: String, tag: u8 },
    #[error("tensor {name:?}: stored as {found:?}, expected {expected:?}")]
    DTypeMismatch {
        name: String,
        found: aesvl_autograd::DType,
        expected: aesvl_autograd::DType,
    },
    #[error("tensor name is not UTF-8")]
    Utf8,
    #[error("duplicate tensor {0:?}")]
    Duplicate(String),
    #[error("unknown tensor {0:?}")]
    UnknownTensor(String),
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("tensor {name:?}: shape {found:?} does not match expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid shape for {0:?}")]
    InvalidShape(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn checkpoint(path: impl Into<PathBuf>, kind: CheckpointError) -> Self {
        Error::Checkpoint {
            path: path.into(),
            kind,
        }
    }
}
