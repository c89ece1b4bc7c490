//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or incompatible shapes/settings.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or out-of-contract data (datasets, passwords, manifests).
    #[error("data error: {0}")]
    Data(String),

    /// A training or evaluation computation produced NaN/Inf.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Checkpoint file problems: wrong magic, version, truncation.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 usage/config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Image(_) | Error::Checkpoint(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}
