use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library and the pipeline driver.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("non-finite values in {tensor}")]
    NonFinite { tensor: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("score table is incomplete: expected {expected} entries, got {got}")]
    IncompleteScores { expected: usize, got: usize },

    #[error("fraction {0} out of range (0, 1]")]
    FractionOutOfRange(f64),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error(
        "per-weight path over the full weight set is rejected: it costs one gradient \
         evaluation per (weight, step) pair; pass an explicit sample of weight refs \
         or use the joint path"
    )]
    PerWeightFullSet,

    #[error("missing artifact {path}: run `{produced_by}` first")]
    MissingArtifact { path: PathBuf, produced_by: String },

    #[error("invariant failure: {name}: {detail}")]
    InvariantFailure { name: String, detail: String },

    #[error("malformed artifact {path}: {detail}")]
    MalformedArtifact { path: PathBuf, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
