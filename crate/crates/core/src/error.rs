use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the toolkit.
///
/// Variants split into two families: malformed or unreadable inputs
/// ([`Error::is_format`]) and inputs that parse but violate a contract.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("truncated file in record {record}: expected {expected} bytes, found {actual}")]
    Truncated {
        record: u64,
        expected: u64,
        actual: u64,
    },

    #[error("truncated file: expected {expected} bytes, found {actual}")]
    TruncatedFile { expected: u64, actual: u64 },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("record {record_id}: missing field `{field}`")]
    MissingField { record_id: u64, field: &'static str },

    #[error("duplicate record id {0}")]
    DuplicateId(String),

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    /// True for errors caused by unreadable or malformed bytes rather than
    /// by a well-formed input that fails validation.
    pub fn is_format(&self) -> bool {
        matches!(
            self,
            Error::Io(_)
                | Error::Format { .. }
                | Error::Truncated { .. }
                | Error::TruncatedFile { .. }
                | Error::Parse { .. }
        )
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}
