//! Error types shared across the numeric core.

use thiserror::Error;

/// A tensor or grid dimension did not match what the operation requires.
#[derive(Debug, Error)]
#[error("{context}: {message}")]
pub struct ShapeError {
    context: &'static str,
    message: String,
}

impl ShapeError {
    pub fn new(context: &'static str, message: impl Into<String>) -> Self {
        Self {
            context,
            message: message.into(),
        }
    }
}

/// Structurally well-formed input that violates a semantic contract
/// (duplicate identities, empty mask rows, out-of-range annotations).
#[derive(Debug, Error)]
#[error("{context}: {message}")]
pub struct ValidationError {
    context: &'static str,
    message: String,
}

impl ValidationError {
    pub fn new(context: &'static str, message: impl Into<String>) -> Self {
        Self {
            context,
            message: message.into(),
        }
    }
}

/// Either kind of input rejection; operations that validate both shape and
/// semantics return this. Checkpoint and corpus IO adds the filesystem case.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    /// A computation produced a non-finite value; carries the diagnostics.
    #[error("numeric: {0}")]
    Numeric(String),
}
