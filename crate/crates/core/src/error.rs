//! Shared error types.

use thiserror::Error;

/// Invalid model shape or run configuration.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("config error: {msg}")]
pub struct ConfigError {
    msg: String,
}

impl ConfigError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self { msg: msg.into() }
    }
}
