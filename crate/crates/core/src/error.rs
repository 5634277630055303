//! Error taxonomy shared by every module in the crate.
//!
//! The variants deliberately mirror how failures are surfaced to callers: shape
//! and domain problems come from individual tensor operations, contract
//! violations from misuse of an API, numeric failures from non-finite values or
//! diverging training, and config/format errors from user-supplied files.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Operand shapes are incompatible with the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// An input lies outside the mathematical domain of the operation.
    #[error("domain violation: {0}")]
    Domain(String),
    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A computation produced a non-finite value or otherwise diverged.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// A configuration file or parameter set is invalid.
    #[error("config error: {0}")]
    Config(String),
    /// An on-disk artifact is malformed, truncated, or of the wrong version.
    #[error("format error: {0}")]
    Format(String),
    /// An underlying filesystem operation failed.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CoreError {
    pub fn shape(msg: impl Into<String>) -> Self {
        CoreError::Shape(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        CoreError::Domain(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        CoreError::Contract(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        CoreError::Numeric(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        CoreError::Format(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
