use thiserror::Error;

/// Errors raised across the simulator, learners and benchmark.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{field} = {value} is outside [{lo}, {hi}]")]
    OutOfRange {
        field: String,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("simulation diverged: {0}")]
    SimulationDiverged(String),
    #[error("reset failed after {attempts} attempts")]
    ResetFailed { attempts: usize },
    #[error("particle filter collapsed: {0}")]
    FilterCollapsed(String),
    #[error("non-finite loss at update {0}")]
    NonFiniteLoss(u64),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
