use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
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

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("invalid configuration: {0}")]
    InvalidSpec(String),

    #[error("requested {requested} distinct sources but only {capacity} can be constructed")]
    CorpusTooLarge { requested: u128, capacity: u128 },

    #[error("scorer has no entry for {sentence:?}: {message}")]
    Scorer { sentence: String, message: String },

    #[error("scoring pair {index} failed: {source}")]
    ScorePair {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("noise pool too small: need {required} pairs, have {available}")]
    InsufficientNoise { required: usize, available: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    OutOfVocab { id: usize, vocab_size: usize },

    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {what} at token position {position}")]
    NonFinite { what: &'static str, position: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
