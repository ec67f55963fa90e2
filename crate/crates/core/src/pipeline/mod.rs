//! Curriculum stages chaining policy and filter training.

pub mod config;
pub mod gravity;
pub mod stages;

pub use config::{Budgets, DatasetConfig, GravityConfig, PipelineConfig, ReferenceRates};
pub use gravity::GravitySchedule;
pub use stages::{
    bench_seed, collect_offline_data, load_offline_data, run_pipeline, run_stage, run_stage_from, stage_plans,
    stage_seed, worker_settings, CubeStateSource, OfflineData, PipelineSummary, RunLayout, StageId, StageOutcome,
    StagePlan,
};

/// Estimate error beyond which an in-loop episode is cut short.
pub const INLOOP_MAX_POSITION_ERROR: f64 = 0.015;
pub const INLOOP_MAX_ANGLE_ERROR: f64 = 0.8;

/// True when the estimator has drifted far enough to end the episode.
pub fn inloop_termination(x_err: f64, phi: f64) -> bool {
    x_err > INLOOP_MAX_POSITION_ERROR || phi > INLOOP_MAX_ANGLE_ERROR
}
