//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A numeric input was outside the domain of an operation, e.g. a
    /// non-finite value handed to the FP8 encoder.
    #[error("invalid value: {0}")]
    InvalidValue(String),

    /// Tensor shapes disagree with each other or with a buffer length.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value (scale grid, policy, CLI argument) is unusable.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A container file is structurally broken. The message names the
    /// offending tensor when one is known.
    #[error("container format: {0}")]
    Format(String),

    /// Base and fine-tuned checkpoints cannot be matched up.
    #[error("cannot pair checkpoints: {0}")]
    Pairing(String),

    /// A checkpoint path or shard index does not resolve to tensor files.
    #[error("manifest: {0}")]
    Manifest(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
