//! The training loop: parallel collection, SAC updates, learning curves and
//! checkpoints.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::collect::{collect, StateEstimator, Worker, WorkerSettings};
use super::observation::{POLICY_OBS_DIM, Q_OBS_DIM};
use super::replay::ReplayBuffer;
use super::sac::{SacAgent, SacConfig, ACTION_DIM};
use crate::checkpoint::{self, RngState};
use crate::error::{Error, Result};
use crate::pipeline::GravitySchedule;

pub const POLICY_CHECKPOINT: &str = "policy";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyTrainConfig {
    pub workers: usize,
    pub replay_capacity: usize,
    /// Policy steps per worker between update phases.
    pub steps_per_worker: usize,
    /// Transitions collected before the first update.
    pub warmup: usize,
    /// Gradient updates per collected transition.
    pub update_ratio: f64,
    /// Environment steps between curve rows.
    pub log_every: u64,
    pub sac: SacConfig,
}

impl Default for PolicyTrainConfig {
    fn default() -> Self {
        Self {
            workers: 8,
            replay_capacity: 150_000,
            steps_per_worker: 25,
            warmup: 5_000,
            update_ratio: 0.25,
            log_every: 5_000,
            sac: SacConfig::default(),
        }
    }
}

impl PolicyTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 || self.steps_per_worker == 0 || self.replay_capacity == 0 {
            return Err(Error::Config(
                "workers, steps_per_worker and replay_capacity must be positive".into(),
            ));
        }
        if !(self.update_ratio >= 0.0 && self.update_ratio.is_finite()) {
            return Err(Error::Config(format!("update_ratio = {}", self.update_ratio)));
        }
        if self.sac.batch_size == 0 || self.sac.batch_size > self.replay_capacity {
            return Err(Error::Config(format!("batch_size = {}", self.sac.batch_size)));
        }
        Ok(())
    }
}

/// One row of the learning curve, aggregated over `log_every` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: u64,
    /// Mean undiscounted return of episodes that ended in the window (NaN if none).
    #[serde(rename = "return")]
    pub episode_return: f64,
    /// Goal success rate over the window's attempts (NaN if none).
    pub success_rate: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
    pub entropy: f64,
    pub gravity: f64,
    pub updates: u64,
    pub incidents: u64,
}

/// Everything needed to continue training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub stage: String,
    pub steps: u64,
    pub agent: SacAgent,
    pub rng: RngState,
    pub gravity: Option<GravitySchedule>,
    pub settings: WorkerSettings,
}

impl PolicyCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, POLICY_CHECKPOINT, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = checkpoint::load(path, POLICY_CHECKPOINT)?;
        if c.agent.actor.obs_dim() != POLICY_OBS_DIM || c.agent.q1.mlp.inputs() != Q_OBS_DIM + ACTION_DIM {
            return Err(Error::CheckpointMismatch(format!(
                "{}: observation sizes {} / {} do not match {POLICY_OBS_DIM} / {Q_OBS_DIM}",
                path.display(),
                c.agent.actor.obs_dim(),
                c.agent.q1.mlp.inputs()
            )));
        }
        Ok(c)
    }
}

#[derive(Default)]
struct Window {
    returns: Vec<f64>,
    attempts: usize,
    successes: usize,
    critic: f64,
    actor: f64,
    entropy: f64,
    updates: u64,
    incidents: u64,
}

pub struct PolicyTrainer {
    pub agent: SacAgent,
    pub config: PolicyTrainConfig,
    pub stage: String,
    pub workers: Vec<Worker>,
    pub replay: ReplayBuffer,
    pub steps: u64,
    pub gravity: Option<GravitySchedule>,
    pub curve: Vec<CurveRow>,
    rng: ChaCha8Rng,
    window: Window,
    next_log: u64,
}

impl PolicyTrainer {
    /// A trainer with a fresh replay buffer around `agent`.
    pub fn new(
        agent: SacAgent,
        config: PolicyTrainConfig,
        settings: WorkerSettings,
        stage: &str,
        seed: u64,
    ) -> Result<Self> {
        Self::from_parts(agent, config, settings, stage, 0, None, ChaCha8Rng::seed_from_u64(seed))
    }

    /// Continues from a checkpoint. The replay buffer is not part of the
    /// checkpoint, so collection restarts from fresh episodes.
    pub fn resume(ckpt: PolicyCheckpoint, config: PolicyTrainConfig) -> Result<Self> {
        let rng = ckpt.rng.restore()?;
        Self::from_parts(
            ckpt.agent,
            config,
            ckpt.settings,
            &ckpt.stage,
            ckpt.steps,
            ckpt.gravity,
            rng,
        )
    }

    fn from_parts(
        agent: SacAgent,
        config: PolicyTrainConfig,
        mut settings: WorkerSettings,
        stage: &str,
        steps: u64,
        gravity: Option<GravitySchedule>,
        mut rng: ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        if let Some(g) = &gravity {
            settings.overrides.gravity_scale = Some(g.scale());
        }
        let workers = (0..config.workers)
            .map(|i| Worker::new(i, rng.gen(), settings.clone()))
            .collect();
        Ok(Self {
            replay: ReplayBuffer::new(config.replay_capacity, POLICY_OBS_DIM, Q_OBS_DIM),
            next_log: steps + config.log_every,
            agent,
            config,
            stage: stage.to_string(),
            workers,
            steps,
            gravity,
            curve: Vec::new(),
            rng,
            window: Window::default(),
        })
    }

    pub fn with_gravity(mut self, schedule: GravitySchedule) -> Self {
        let s = schedule.scale();
        for w in &mut self.workers {
            w.settings_mut().overrides.gravity_scale = Some(s);
        }
        self.gravity = Some(schedule);
        self
    }

    /// Runs every worker with its own estimator.
    pub fn set_estimators(&mut self, mut make: impl FnMut(usize) -> Box<dyn StateEstimator>) {
        for w in &mut self.workers {
            w.set_estimator(Some(make(w.id)));
        }
    }

    pub fn settings(&self) -> &WorkerSettings {
        self.workers[0].settings()
    }

    /// One collection phase followed by the matching number of updates.
    /// Returns a curve row when a logging boundary was crossed.
    pub fn iteration(&mut self, budget: u64) -> Result<Option<CurveRow>> {
        let stats = collect(
            &mut self.workers,
            &self.agent.actor,
            &mut self.replay,
            self.config.steps_per_worker,
        )?;
        self.steps += stats.transitions as u64;
        let w = &mut self.window;
        w.returns.extend(&stats.returns);
        w.attempts += stats.attempts;
        w.successes += stats.successes;
        w.incidents += stats.incidents as u64;

        if self.replay.len() >= self.config.warmup.max(self.config.sac.batch_size) {
            let n = (stats.transitions as f64 * self.config.update_ratio).round() as usize;
            for _ in 0..n {
                let batch = self.replay.sample(self.config.sac.batch_size, &mut self.rng);
                let d = self.agent.update(&batch, &mut self.rng).inspect_err(|e| {
                    eprintln!("{}: update failed at step {}: {e}", self.stage, self.steps);
                })?;
                let w = &mut self.window;
                w.critic += d.critic_loss;
                w.actor += d.actor_loss;
                w.entropy += d.entropy;
                w.updates += 1;
            }
        }

        if let Some(g) = self.gravity.as_mut() {
            if g.update(&stats.outcomes, self.steps, budget) {
                let s = g.scale();
                for w in &mut self.workers {
                    w.settings_mut().overrides.gravity_scale = Some(s);
                }
            }
        }

        if self.steps >= self.next_log {
            self.next_log = self.steps + self.config.log_every;
            return Ok(Some(self.flush_row()));
        }
        Ok(None)
    }

    fn flush_row(&mut self) -> CurveRow {
        let w = std::mem::take(&mut self.window);
        let mean = |s: f64, n: u64| if n == 0 { f64::NAN } else { s / n as f64 };
        let row = CurveRow {
            step: self.steps,
            episode_return: mean(w.returns.iter().sum(), w.returns.len() as u64),
            success_rate: mean(w.successes as f64, w.attempts as u64),
            critic_loss: mean(w.critic, w.updates),
            actor_loss: mean(w.actor, w.updates),
            alpha: self.agent.alpha(),
            entropy: mean(w.entropy, w.updates),
            gravity: self.gravity.as_ref().map_or_else(
                || self.workers[0].settings().overrides.gravity_scale.unwrap_or(1.0),
                |g| g.scale(),
            ),
            updates: self.agent.updates,
            incidents: w.incidents,
        };
        self.curve.push(row);
        row
    }

    /// Trains until `budget` environment steps have been collected in this
    /// stage, calling `on_row` for every curve row.
    pub fn train(
        &mut self,
        budget: u64,
        mut on_row: impl FnMut(&CurveRow, &PolicyTrainer) -> Result<()>,
    ) -> Result<()> {
        while self.steps < budget {
            if let Some(row) = self.iteration(budget)? {
                on_row(&row, self)?;
            }
        }
        if self.window.updates > 0 || !self.window.returns.is_empty() || self.window.attempts > 0 {
            let row = self.flush_row();
            on_row(&row, self)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> PolicyCheckpoint {
        PolicyCheckpoint {
            stage: self.stage.clone(),
            steps: self.steps,
            agent: self.agent.clone(),
            rng: RngState::capture(&self.rng),
            gravity: self.gravity.clone(),
            settings: self.settings().clone(),
        }
    }
}

pub const CURVE_HEADER: &str =
    "step,return,success_rate,critic_loss,actor_loss,alpha,entropy,gravity,updates,incidents";

/// Appends curve rows as CSV; writes the header when the file is new.
pub fn append_curve(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let fresh = !path.exists();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{CURVE_HEADER}")?;
    }
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.episode_return,
            r.success_rate,
            r.critic_loss,
            r.actor_loss,
            r.alpha,
            r.entropy,
            r.gravity,
            r.updates,
            r.incidents
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(PolicyTrainConfig::default().validate().is_ok());
        let bad = PolicyTrainConfig {
            workers: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = PolicyTrainConfig {
            replay_capacity: 10,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn curve_csv_has_one_line_per_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("logs/curve.csv");
        let row = CurveRow {
            step: 10,
            episode_return: f64::NAN,
            success_rate: 0.5,
            critic_loss: 1.0,
            actor_loss: -2.0,
            alpha: 0.1,
            entropy: 3.0,
            gravity: 0.2,
            updates: 4,
            incidents: 0,
        };
        append_curve(&p, &[row]).unwrap();
        append_curve(&p, &[row, row]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], CURVE_HEADER);
        assert!(lines[1].starts_with("10,NaN,0.5,"));
    }
}
