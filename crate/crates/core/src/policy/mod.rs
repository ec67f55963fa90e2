//! Soft actor-critic policy learning over stacked proprioceptive frames.

pub mod collect;
pub mod observation;
pub mod replay;
pub mod sac;
pub mod train;

pub use collect::{collect, CollectStats, StateEstimator, StepOutcome, Worker, WorkerSettings};
pub use observation::{build_observation, ObservationStack, Role, Snapshot, POLICY_OBS_DIM, Q_OBS_DIM};
pub use replay::{ReplayBuffer, Transition};
pub use sac::{act, Batch, PolicyNet, QNet, SacAgent, SacConfig, SacDiagnostics, ACTION_DIM};
pub use train::{append_curve, CurveRow, PolicyCheckpoint, PolicyTrainConfig, PolicyTrainer};
