use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("token id {id} is outside the vocabulary of size {size}")]
    Vocabulary { id: usize, size: usize },

    #[error("softmax row {row} is masked in every position")]
    DegenerateRow { row: usize },

    #[error("tape: {0}")]
    Tape(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error(
        "sequence of {prefix} prefix + {prompt} prompt + {target} target positions exceeds max_positions {max}"
    )]
    Length {
        prefix: usize,
        prompt: usize,
        target: usize,
        max: usize,
    },

    #[error("target contains no non-padding tokens")]
    EmptyTarget,

    #[error("non-finite gradient at step {step}")]
    NumericFailure { step: usize },

    #[error("{0}: non-finite input")]
    NonFinite(&'static str),

    #[error("decoding: {0}")]
    Decoding(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("data: {0}")]
    Data(String),

    #[error("preprocessing: {0}")]
    Preprocess(String),

    #[error("provenance: {0}")]
    Provenance(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Length { .. } | Error::Provenance(_) => 2,
            Error::NumericFailure { .. } | Error::NonFinite(_) => 4,
            _ => 3,
        }
    }
}
