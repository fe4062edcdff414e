//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss must be scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("tape already consumed")]
    TapeConsumed,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("combinatorial limit exceeded: {0}")]
    CombinatorialLimit(String),

    #[error("empty dataset after filtering")]
    EmptyDataset,

    #[error("training diverged at batch {batch}: {what}")]
    Diverged { batch: usize, what: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad file format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code classification: 1 for config errors, 2 for runtime/numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Format(_) => 1,
            _ => 2,
        }
    }
}
