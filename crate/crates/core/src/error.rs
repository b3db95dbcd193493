//! Crate-wide error type.

use thiserror::Error;

/// Broad failure class, used by the CLI to choose an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Malformed input data, files, or configurations.
    Data,
    /// Numerical failure (domain violations, non-SPD precision, non-finite
    /// values).
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {context} (expected {expected}, got {got})")]
    Dim {
        context: String,
        expected: String,
        got: String,
    },

    #[error("index out of range: {context}")]
    IndexOutOfRange { context: String },

    #[error("domain violation: {context}")]
    Domain { context: String },

    #[error("non-finite value: {context}")]
    NonFinite { context: String },

    #[error("precision matrix not positive definite: {context}")]
    NotSpd { context: String },

    #[error("invalid data: {context}")]
    InvalidData { context: String },

    #[error("parse error at line {line}: {context}")]
    Parse { line: usize, context: String },

    #[error("infeasible target: {context}")]
    Infeasible { context: String },

    #[error("checkpoint error: {context}")]
    Checkpoint { context: String },

    #[error("gibbs sweep failed at iteration {iteration}: {source}")]
    Sweep {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn domain(context: impl Into<String>) -> Self {
        Error::Domain {
            context: context.into(),
        }
    }

    pub fn invalid(context: impl Into<String>) -> Self {
        Error::InvalidData {
            context: context.into(),
        }
    }

    pub fn dim(
        context: impl Into<String>,
        expected: impl ToString,
        got: impl ToString,
    ) -> Self {
        Error::Dim {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// Classify for exit-code mapping: data problems vs numerical failures.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Dim { .. }
            | Error::IndexOutOfRange { .. }
            | Error::InvalidData { .. }
            | Error::Parse { .. }
            | Error::Infeasible { .. }
            | Error::Checkpoint { .. }
            | Error::Io(_) => ErrorClass::Data,
            Error::Domain { .. } | Error::NonFinite { .. } | Error::NotSpd { .. } => {
                ErrorClass::Numerical
            }
            Error::Sweep { source, .. } => source.class(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
