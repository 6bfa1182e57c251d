use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    InvalidToken { id: u32, vocab: usize },

    #[error("empty {0} sequence")]
    EmptySequence(&'static str),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("non-finite parameter at flat index {index}")]
    NonFiniteParam { index: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite gradient at step {step} (flat index {index})")]
    NonFiniteGradient { step: usize, index: usize },

    #[error("NaN detected at step {step}: {what}")]
    NanDetected { step: usize, what: &'static str },

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("negative pool exhausted for example {example}: visit {visit} needs {needed} candidates, pool holds {available}")]
    PoolExhausted {
        example: usize,
        visit: usize,
        needed: usize,
        available: usize,
    },

    #[error("estimator state holds {state} entries but minibatch references example {index}")]
    StateMismatch { state: usize, index: usize },

    #[error("enumeration guard exceeded: {k_eff}^{max_len} sequences is above the limit")]
    GuardExceeded { k_eff: usize, max_len: usize },

    #[error("sequence is not a member of the output space")]
    NotInSpace,

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
