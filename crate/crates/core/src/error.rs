//! Error types shared across the library.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A spatial or channel dimension violates a precondition (names the axis).
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Shapes of two or more inputs do not agree.
    #[error("shape error: {0}")]
    Shape(String),

    /// A scalar parameter is out of its valid range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A configuration field is invalid.
    #[error("config error: field `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// Inputs are individually valid but mutually incompatible
    /// (e.g. checkpoint scale vs requested scale).
    #[error("incompatible: {0}")]
    Incompatible(String),

    /// A non-finite value appeared where the contract requires finite output.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A serialized artifact (checkpoint, manifest, config) failed to parse.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: &str, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
