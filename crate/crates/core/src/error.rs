use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("token id {id} is outside the vocabulary of size {vocab_size}")]
    UnknownToken { id: u32, vocab_size: usize },

    #[error("sequence of length {len} exceeds the context length {context_length}")]
    SequenceTooLong { len: usize, context_length: usize },

    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint stores {found} tensors but {expected} was requested")]
    DTypeMismatch { expected: String, found: String },

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("search space of {size} paths exceeds the budget of {budget}")]
    SearchTooLarge { size: u128, budget: u128 },

    #[error("missing artifact for stage `{stage}`: {detail}")]
    MissingUpstream { stage: String, detail: String },

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(what: &'static str, detail: impl std::fmt::Display) -> Self {
        Error::Format {
            what,
            detail: detail.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
