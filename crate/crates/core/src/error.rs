use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the workbench.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid synthetic spec: {0}")]
    InvalidSynthetic(String),

    #[error("{path}: {reason}")]
    Idx { path: PathBuf, reason: String },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("csv ingestion: {0}")]
    Csv(String),

    #[error("requested split sizes sum to {requested} but the dataset has {available} examples")]
    SplitTooLarge { requested: usize, available: usize },

    #[error("invalid learner configuration: {0}")]
    InvalidLearner(String),

    #[error("empty {0} set")]
    EmptySet(&'static str),

    #[error("feature dimension mismatch: model expects {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid order: {0}")]
    InvalidOrder(String),

    #[error("prefix k={k} exceeds K={max}")]
    PrefixOutOfRange { k: usize, max: usize },

    #[error("invalid acquisition configuration: {0}")]
    InvalidAcquisition(String),

    #[error("invalid probability vector: {0}")]
    InvalidDistribution(String),

    #[error("pool of {pool} points cannot fill a batch of {batch}")]
    PoolTooSmall { pool: usize, batch: usize },

    #[error("invalid binning: {0}")]
    InvalidBins(String),

    #[error("invalid search configuration: {0}")]
    InvalidSearch(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("order configurations differ: {0}")]
    ConfigMismatch(String),

    #[error("corrupt cache entry {0}")]
    CorruptCache(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
