use std::io;

use thiserror::Error;

/// Errors produced anywhere in the workbench.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("capability violation: {0}")]
    Capability(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("attack failed: {0}")]
    Attack(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn parse_line(line: usize, message: impl Into<String>) -> Self {
        Error::Parse { location: format!("line {line}"), message: message.into() }
    }

    pub(crate) fn parse_offset(offset: u64, message: impl Into<String>) -> Self {
        Error::Parse { location: format!("byte offset {offset}"), message: message.into() }
    }

    /// True for errors caused by bad user input rather than I/O or internal failure.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::Attack(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
