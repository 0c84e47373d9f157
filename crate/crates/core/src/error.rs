use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum BladeError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{0}: file is empty")]
    EmptyFile(PathBuf),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("user {user} step {step}: valid position has an empty behavior set")]
    EmptyBehaviorSet { user: usize, step: usize },

    #[error("user {user}: target behavior set for the final step is missing")]
    MissingTargetBehavior { user: usize },

    #[error("item index {0} is the padding item and cannot be scored")]
    PaddingItem(usize),

    #[error("user {user}: negative sampler exhausted ({history} history items, {catalog} catalog items)")]
    NegativeSamplerExhausted {
        user: usize,
        history: usize,
        catalog: usize,
    },

    #[error("contrastive loss needs at least one sequence in the batch")]
    EmptyBatch,

    #[error("epoch {epoch} batch {batch}: non-finite loss {value}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f64 },

    #[error("evaluation split is empty")]
    EmptySplit,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("gradient check failed for group `{group}`: relative error {error:.3e}")]
    GradientCheck { group: String, error: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, BladeError>;
