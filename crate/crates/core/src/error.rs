//! Crate-wide error type and result alias.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes for an operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: String, detail: String },

    /// Input outside the mathematical domain of an operation.
    #[error("domain error in {op}: {detail}")]
    Domain { op: String, detail: String },

    /// A caller violated an operation's preconditions.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A NaN or infinity appeared where only finite values are allowed.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed file contents (CSV, JSON, checkpoint).
    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },
}

impl Error {
    pub fn shape(op: &str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op: op.to_string(),
            detail: detail.into(),
        }
    }

    pub fn domain(op: &str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op: op.to_string(),
            detail: detail.into(),
        }
    }

    pub fn contract(detail: impl Into<String>) -> Self {
        Error::Contract(detail.into())
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
