//! Error types shared across the crate.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("degenerate mask: softmax row {row} has no finite entry")]
    DegenerateMask { row: usize },

    #[error("degenerate page: no valid item to attend over")]
    DegeneratePage,

    #[error("field {field}: id {id} out of vocabulary (size {vocab_size})")]
    Vocabulary {
        field: String,
        id: u32,
        vocab_size: u32,
    },

    #[error("optimizer: non-finite gradient in parameter {name}")]
    NonFiniteGradient { name: String },

    #[error("training aborted: non-finite loss; first non-finite parameter: {name}")]
    TrainingDiverged { name: String },

    #[error("backward called on an empty tape")]
    TapeEmpty,

    #[error("backward requires a scalar loss node, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("metric undefined: need at least one positive and one negative label")]
    MetricUndefined,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Exit-code contract used by the CLI: 1 for user errors (bad input,
    /// missing files, invalid flags), 2 for internal invariant violations.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } | Error::Vocabulary { .. } | Error::Io(_) => 1,
            Error::Checkpoint(_) | Error::MetricUndefined => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
