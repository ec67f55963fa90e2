//! The reorientation benchmark: every goal at several spinning-friction
//! values, starting from the identity orientation, with the filter in the loop.

pub mod height;
pub mod report;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{sample_domain, DomainConfig, DomainOverrides, Event, NoiseConfig, SimParams};
use crate::error::{Error, Result};
use crate::filter::{FilterTrainer, InitSpread, ParticleFilter};
use crate::policy::{PolicyNet, Worker, WorkerSettings, POLICY_OBS_DIM};
use crate::rotations::{distance, GoalSet, Rotation};

pub use height::{height_ambiguity, HeightReport};
pub use report::{emit_report, read_goal_csv, wilson_interval, BenchReport, FrictionRow, GoalRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    /// Goal numbers (1-based).
    pub goals: Vec<usize>,
    pub eta_spin: Vec<f64>,
    pub runs_per_cell: usize,
    pub cube_size: f64,
    pub workers: usize,
    pub particles: usize,
    pub sim: SimParams,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            goals: (1..=24).collect(),
            eta_spin: vec![2e-4, 1e-3, 1e-2],
            runs_per_cell: 8,
            cube_size: 0.08,
            workers: 8,
            particles: 100,
            sim: SimParams::default(),
        }
    }
}

impl BenchConfig {
    pub fn episodes(&self) -> usize {
        self.goals.len() * self.eta_spin.len() * self.runs_per_cell
    }

    pub fn validate(&self) -> Result<()> {
        if self.goals.iter().any(|g| !(1..=24).contains(g)) {
            return Err(Error::Config(format!("goal numbers {:?} outside 1..=24", self.goals)));
        }
        if self.goals.is_empty() || self.eta_spin.is_empty() || self.runs_per_cell == 0 || self.workers == 0 {
            return Err(Error::Config("benchmark grid is empty".into()));
        }
        Ok(())
    }
}

/// Cube-state source of the policy during the benchmark.
#[derive(Debug, Clone, Copy)]
pub enum StateSource<'a> {
    /// Noise-free simulator state.
    Simulator,
    /// The particle filter, initialised at the known start pose.
    Filter(&'a FilterTrainer),
}

/// One benchmark episode, keyed by `(goal, eta_index, run)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub goal: usize,
    pub eta_index: usize,
    pub eta_spin: f64,
    pub run: usize,
    pub seed: u64,
    pub success: bool,
    pub event: Event,
    pub steps: u32,
    /// Final true distance to the goal orientation, rad.
    pub final_angle: f64,
    pub final_position: f64,
    /// Final estimate errors (absent without a filter).
    pub estimate_position_error: Option<f64>,
    pub estimate_angle_error: Option<f64>,
    pub diverged: bool,
    /// Randomization the episode ran with.
    pub domain: DomainConfig,
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    goal: usize,
    eta_index: usize,
    run: usize,
    seed: u64,
}

fn episode_seed(seed: u64, index: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index);
    r.gen()
}

/// Pins applied to every benchmark episode at spinning friction `eta`.
pub fn bench_overrides(cfg: &BenchConfig, eta: f64) -> DomainOverrides {
    DomainOverrides {
        eta_spin: Some(eta),
        cube_size: Some(cfg.cube_size),
        gravity_scale: Some(1.0),
        start_orientation: Some(Rotation::IDENTITY),
        noise: Some(NoiseConfig {
            x: 0.0,
            r: 0.0,
            ..NoiseConfig::default()
        }),
        ..DomainOverrides::default()
    }
}

fn run_cell(
    policy: &PolicyNet,
    source: StateSource<'_>,
    cfg: &BenchConfig,
    goals: &GoalSet,
    cell: Cell,
) -> Result<EpisodeResult> {
    let eta = cfg.eta_spin[cell.eta_index];
    let goal = goals.goal(cell.goal);
    let mut rng = ChaCha8Rng::seed_from_u64(cell.seed);
    let overrides = bench_overrides(cfg, eta);
    let domain = sample_domain(&mut rng, &overrides)?;
    let settings = WorkerSettings {
        overrides,
        sim: cfg.sim.clone(),
        ..WorkerSettings::default()
    };
    let mut worker = Worker::new(0, rng.gen(), settings);
    if let StateSource::Filter(t) = source {
        let pf: ParticleFilter = ParticleFilter::new(t.models.clone(), cfg.particles, InitSpread::RESET);
        worker.set_estimator(Some(Box::new(pf)));
    }
    worker.enable_recording();
    worker.begin(domain.clone(), goal)?;
    let mut result = EpisodeResult {
        goal: cell.goal,
        eta_index: cell.eta_index,
        eta_spin: eta,
        run: cell.run,
        seed: cell.seed,
        success: false,
        event: Event::None,
        steps: 0,
        final_angle: f64::NAN,
        final_position: f64::NAN,
        estimate_position_error: None,
        estimate_angle_error: None,
        diverged: false,
        domain,
    };
    loop {
        let Some(o) = worker.step(policy, true)? else {
            result.diverged = true;
            break;
        };
        result.steps += 1;
        if let Some(ok) = o.attempt {
            result.success = ok;
            result.event = o.event;
            break;
        }
    }
    if let Some(last) = worker.take_records().last() {
        result.final_angle = distance(goal, last.cube_true.r);
        result.final_position = last.cube_true.x.norm();
        if let Some(e) = last.cube_est {
            result.estimate_position_error = Some((e.x - last.cube_true.x).norm());
            result.estimate_angle_error = Some(distance(e.r, last.cube_true.r));
        }
    }
    Ok(result)
}

/// Runs the whole grid. Episodes are spread over `cfg.workers` threads; the
/// report does not depend on the thread count.
pub fn run_benchmark(policy: &PolicyNet, source: StateSource<'_>, cfg: &BenchConfig, seed: u64) -> Result<BenchReport> {
    cfg.validate()?;
    if policy.obs_dim() != POLICY_OBS_DIM {
        return Err(Error::CheckpointMismatch(format!(
            "policy expects {} inputs, the benchmark provides {POLICY_OBS_DIM}",
            policy.obs_dim()
        )));
    }
    let goals = GoalSet::new();
    let mut cells = Vec::with_capacity(cfg.episodes());
    for &goal in &cfg.goals {
        for eta_index in 0..cfg.eta_spin.len() {
            for run in 0..cfg.runs_per_cell {
                let index = ((goal - 1) * cfg.eta_spin.len() + eta_index) * cfg.runs_per_cell + run;
                cells.push(Cell {
                    goal,
                    eta_index,
                    run,
                    seed: episode_seed(seed, index as u64),
                });
            }
        }
    }
    let threads = cfg.workers.min(cells.len());
    let results: Vec<Result<Vec<EpisodeResult>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let cells = &cells;
                let goals = &goals;
                s.spawn(move || {
                    cells
                        .iter()
                        .skip(t)
                        .step_by(threads)
                        .map(|&c| run_cell(policy, source, cfg, goals, c))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("benchmark thread panicked"))
            .collect()
    });
    let mut episodes = Vec::with_capacity(cells.len());
    for r in results {
        episodes.extend(r?);
    }
    episodes.sort_by_key(|e| (e.goal, e.eta_index, e.run));
    Ok(BenchReport::from_episodes(cfg.clone(), seed, episodes))
}
