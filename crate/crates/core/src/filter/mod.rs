//! Differentiable particle filter estimating the cube state from joint
//! measurements and commands.

pub mod dataset;
pub mod estimate;
pub mod model;
pub mod particles;
pub mod runtime;
pub mod train;

pub use dataset::{rollout_sequences, DataSource, Dataset, RolloutStats, Sequence};
pub use estimate::{estimate, filter_loss, FilterLossConfig};
pub use model::{FilterModels, STATE_DIM};
pub use particles::{filter_step, Particles, StepModel};
pub use runtime::{InitBias, InitSpread, ParticleFilter, Window};
pub use train::{
    evaluate, one_step_loss, train_inloop, train_stage1, train_stage2, unrolled_loss, EvalReport, FilterCheckpoint,
    FilterTrainConfig, FilterTrainer, InloopReport, Stage1Report, Stage2Report,
};
