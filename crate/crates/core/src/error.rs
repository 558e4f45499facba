//! Error type shared across the engine and simulator.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("width fraction {0} is not an atom of the dropout distribution")]
    WidthNotInDistribution(f64),

    #[error("invalid width fraction {0}: must lie in (0, 1]")]
    InvalidWidth(f64),

    #[error("client cap {cap} below minimum supported width {min}")]
    CapBelowMinimum { cap: f64, min: f64 },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("non-finite loss at step {step}: first non-finite activation in layer {layer}")]
    NonFiniteLoss { step: usize, layer: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("rank {rank} out of range for a matrix of rank {max}")]
    RankOutOfRange { rank: usize, max: usize },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged: loss {loss:.3e} exceeded {limit:.3e} at step {step}")]
    Diverged { loss: f64, limit: f64, step: usize },

    #[error("output directory is locked by another process: {0}")]
    OutputLocked(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
