use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("power constraint violated: |z[{index}]| = {magnitude} exceeds the peak amplitude")]
    PowerConstraintViolation { index: usize, magnitude: f64 },

    #[error("noise variance estimation needs at least 2 pilots, got {0}")]
    InsufficientPilots(usize),

    #[error("latency undefined: channel capacity is zero")]
    LatencyUndefined,

    #[error("model contract violation: {0}")]
    ModelContractViolation(String),

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("training diverged at epoch {epoch} (non-finite loss); last good state is from epoch {last_good_epoch}")]
    TrainingDiverged { epoch: usize, last_good_epoch: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("dataset `{dataset}` not found under {}: run `ibcomm fetch-data {dataset}` (or set IBCOMM_DATA)", root.display())]
    DatasetMissing { dataset: String, root: PathBuf },

    #[error("malformed dataset file {}: {reason}", path.display())]
    MalformedDataset { path: PathBuf, reason: String },

    #[error("checkpoint format version {found} is not supported (this build reads version {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("run directory {} already holds a run; pass --resume or --force", .0.display())]
    RunDirectoryOccupied(PathBuf),

    #[error("download failed: {0}")]
    Fetch(String),

    #[error("plotting failed: {0}")]
    Plot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
