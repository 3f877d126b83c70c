//! Crate-wide error type.
//!
//! Every variant maps onto one of the CLI exit-code classes through
//! [`Error::exit_code`].

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("mask error: {0}")]
    Mask(String),

    #[error("index {index} out of range for {what} of length {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("optimizer state error: {0}")]
    State(String),

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("validation error: {invariant}")]
    Validation { invariant: String },

    #[error("ordering error: {0}")]
    Ordering(String),

    #[error("target error: {0}")]
    Target(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("weight load error: {0}")]
    Load(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("i/o error on {path}: {source}")]
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

    pub(crate) fn validation(invariant: impl Into<String>) -> Self {
        Error::Validation {
            invariant: invariant.into(),
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Range(_) | Error::Load(_) => 2,
            Error::Parse { .. }
            | Error::Validation { .. }
            | Error::Io { .. }
            | Error::Target(_)
            | Error::Input(_)
            | Error::Ordering(_) => 3,
            Error::Numeric(_)
            | Error::Dimension { .. }
            | Error::Mask(_)
            | Error::Index { .. }
            | Error::State(_) => 4,
        }
    }
}
