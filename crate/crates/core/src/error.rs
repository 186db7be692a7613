use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("oracle scale guard exceeded: {0}")]
    ScaleExceeded(String),
    #[error("reference has no feasible CTC alignment")]
    InfeasibleReference,
    #[error("every reference of the example has zero CTC probability")]
    InfeasibleReferences,
    #[error("step {step} outside the annealing range [0, {total}]")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("source length {len} exceeds the model maximum {max}")]
    SourceTooLong { len: usize, max: usize },
    #[error("forward cache does not match the gradient or parameters: {0}")]
    CacheMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint does not match its configuration: {0}")]
    ConfigMismatch(String),
    #[error("token id {0} outside the vocabulary")]
    UnknownToken(u32),
    #[error("cannot train a language model on an empty corpus")]
    EmptyCorpus,
    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },
    #[error("hypothesis and reference lists differ in length ({hyps} vs {refs})")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("reference list is empty")]
    EmptyRefs,
    #[error("translation list is empty")]
    EmptyList,
    #[error("pairwise BLEU needs at least two translations")]
    NeedTwo,
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error("invalid log-probability matrix: {0}")]
    InvalidMatrix(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::CorruptFile {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
