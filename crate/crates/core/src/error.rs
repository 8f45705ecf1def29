use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the decomposition pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// No binary matrix of this shape can satisfy the row/column validity rules.
    #[error("no valid {num_classes}x{code_length} coding matrix exists (need 2^(L-1) > K)")]
    InfeasibleCode { num_classes: usize, code_length: usize },

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("index {index} out of range (bound {bound})")]
    IndexOutOfRange { index: usize, bound: usize },

    #[error("non-finite value in {0}")]
    NonFiniteInput(&'static str),

    #[error("non-finite gradient: {0}")]
    NonFiniteGradient(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("class {0} has no training instances")]
    MissingClass(usize),

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("file contains no data rows")]
    EmptyFile,

    #[error("class {class} has {count} instance(s); at least 2 are needed to split")]
    TooFewInstances { class: usize, count: usize },

    #[error("unknown label {0:?}")]
    UnknownLabel(String),

    #[error("malformed {kind} file {path}: {message}")]
    Format {
        kind: &'static str,
        path: PathBuf,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
