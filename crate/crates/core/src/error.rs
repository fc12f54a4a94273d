use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("non-finite value {value} while perturbing parameter {param} element {index}")]
    NonFinite {
        param: String,
        index: usize,
        value: f64,
    },

    #[error("gradient for parameter {0} contains NaN")]
    NanGradient(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("input of length {len} is shorter than the required {required}")]
    TooShort { len: usize, required: usize },

    #[error("token id {id} outside vocabulary of size {vocab}")]
    OutOfVocab { id: usize, vocab: usize },

    #[error("CTC target of length {target_len} needs {required} frames, only {frames} available")]
    CtcInfeasible {
        frames: usize,
        target_len: usize,
        required: usize,
    },

    #[error("brute-force CTC search space {0} exceeds the guard limit")]
    SearchSpace(u128),

    #[error("contrastive loss needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("phase mismatch: expected checkpoint from {expected}, found {found}")]
    PhaseMismatch { expected: String, found: String },

    #[error("corpus format error in {path:?}: {detail}")]
    Corpus { path: PathBuf, detail: String },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
