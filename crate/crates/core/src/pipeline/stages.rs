//! The five curriculum stages, their wiring and the run directory layout.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use crate::bench::{emit_report, run_benchmark, StateSource};
use crate::checkpoint;
use crate::env::{DomainOverrides, SimParams};
use crate::error::{Error, Result};
use crate::filter::{
    one_step_loss, rollout_sequences, train_inloop, train_stage1, train_stage2, unrolled_loss, DataSource, Dataset,
    FilterCheckpoint, FilterTrainer, RolloutStats, Sequence,
};
use crate::policy::{
    append_curve, PolicyCheckpoint, PolicyNet, PolicyTrainer, SacAgent, Worker, WorkerSettings, POLICY_OBS_DIM,
    Q_OBS_DIM,
};
use crate::rewards::RewardKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StageId {
    S1,
    S2,
    S3,
    S4,
    S5,
}

impl StageId {
    pub const ALL: [StageId; 5] = [StageId::S1, StageId::S2, StageId::S3, StageId::S4, StageId::S5];

    pub fn name(self) -> &'static str {
        match self {
            StageId::S1 => "S1",
            StageId::S2 => "S2",
            StageId::S3 => "S3",
            StageId::S4 => "S4",
            StageId::S5 => "S5",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for StageId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StageId::ALL
            .into_iter()
            .find(|id| id.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?} (expected S1..S5)")))
    }
}

/// Where the policy reads the cube state from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CubeStateSource {
    /// Simulator state with per-step observation noise.
    Simulator,
    /// The particle filter.
    Estimator,
}

/// What a stage trains and what it starts from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: StageId,
    /// Policy reward; `None` for the filter stages.
    pub reward: Option<RewardKind>,
    pub state: CubeStateSource,
    pub lowpass_alpha: f64,
    pub gravity_curriculum: bool,
    pub policy_in: Option<StageId>,
    pub filter_in: Option<StageId>,
    /// Environment steps for policy stages, offline sequences for S3,
    /// in-loop sequences per iteration for S4.
    pub budget: u64,
    pub fresh_replay: bool,
    pub inloop_termination: bool,
    /// Success rate reported for the real system (metadata only).
    pub reference_rate: f64,
}

pub fn stage_plans(cfg: &PipelineConfig) -> Vec<StagePlan> {
    let alpha = SimParams::default().alpha;
    let r = &cfg.reference_rates;
    let base = StagePlan {
        stage: StageId::S1,
        reward: None,
        state: CubeStateSource::Simulator,
        lowpass_alpha: alpha,
        gravity_curriculum: false,
        policy_in: None,
        filter_in: None,
        budget: 0,
        fresh_replay: true,
        inloop_termination: false,
        reference_rate: 0.0,
    };
    vec![
        StagePlan {
            stage: StageId::S1,
            reward: Some(RewardKind::Goal),
            gravity_curriculum: true,
            budget: cfg.budgets.s1_steps,
            reference_rate: r.s1,
            ..base.clone()
        },
        StagePlan {
            stage: StageId::S2,
            reward: Some(RewardKind::Simple),
            policy_in: Some(StageId::S1),
            budget: cfg.budgets.s2_steps,
            reference_rate: r.s2,
            ..base.clone()
        },
        StagePlan {
            stage: StageId::S3,
            policy_in: Some(StageId::S2),
            budget: cfg.dataset.offline_sequences as u64,
            fresh_replay: false,
            reference_rate: r.s3,
            ..base.clone()
        },
        StagePlan {
            stage: StageId::S4,
            state: CubeStateSource::Estimator,
            policy_in: Some(StageId::S2),
            filter_in: Some(StageId::S3),
            budget: cfg.filter.inloop_per_iteration as u64,
            fresh_replay: false,
            reference_rate: r.s4,
            ..base.clone()
        },
        StagePlan {
            stage: StageId::S5,
            reward: Some(RewardKind::Estimator),
            state: CubeStateSource::Estimator,
            policy_in: Some(StageId::S2),
            filter_in: Some(StageId::S4),
            budget: cfg.budgets.s5_steps,
            inloop_termination: true,
            reference_rate: r.s5,
            ..base
        },
    ]
}

/// `runs/<name>/<stage>/{checkpoints, logs, bench.csv}`.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn stage_dir(&self, s: StageId) -> PathBuf {
        self.root.join(s.name())
    }

    pub fn checkpoints(&self, s: StageId) -> PathBuf {
        self.stage_dir(s).join("checkpoints")
    }

    pub fn logs(&self, s: StageId) -> PathBuf {
        self.stage_dir(s).join("logs")
    }

    pub fn data(&self, s: StageId) -> PathBuf {
        self.stage_dir(s).join("data")
    }

    pub fn policy_checkpoint(&self, s: StageId) -> PathBuf {
        self.checkpoints(s).join("policy.json")
    }

    pub fn filter_checkpoint(&self, s: StageId) -> PathBuf {
        self.checkpoints(s).join("filter.json")
    }

    pub fn outcome(&self, s: StageId) -> PathBuf {
        self.logs(s).join("outcome.json")
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }
}

pub const OUTCOME: &str = "stage-outcome";

/// Result of one stage: the benchmark rate and stage-specific details.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: StageId,
    pub plan: StagePlan,
    pub bench_rate: f64,
    pub bench_ci: (f64, f64),
    pub bench_episodes: usize,
    pub details: serde_json::Value,
}

impl StageOutcome {
    pub fn load(path: &Path) -> Result<Self> {
        checkpoint::load(path, OUTCOME)
    }
}

/// Seed of a stage, independent of which stages ran before in this process.
pub fn stage_seed(seed: u64, s: StageId) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(1 + s.index());
    r.gen()
}

/// Seed shared by all stage benchmarks, so that rates are paired comparisons.
pub fn bench_seed(seed: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(100);
    r.gen()
}

fn need(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingPrerequisite(format!("{what} ({})", path.display())))
    }
}

fn load_policy(layout: &RunLayout, s: StageId) -> Result<PolicyCheckpoint> {
    let p = layout.policy_checkpoint(s);
    need(&p, &format!("{s} policy checkpoint"))?;
    PolicyCheckpoint::load(&p)
}

fn load_filter(layout: &RunLayout, s: StageId) -> Result<FilterCheckpoint> {
    let p = layout.filter_checkpoint(s);
    need(&p, &format!("{s} filter checkpoint"))?;
    FilterCheckpoint::load(&p)
}

/// Worker settings a stage trains or collects with.
pub fn worker_settings(cfg: &PipelineConfig, plan: &StagePlan) -> WorkerSettings {
    WorkerSettings {
        reward: plan.reward.unwrap_or(RewardKind::Simple),
        rewards: cfg.rewards.clone(),
        overrides: DomainOverrides {
            gravity_scale: Some(1.0),
            ..DomainOverrides::default()
        },
        sim: SimParams {
            alpha: plan.lowpass_alpha,
            ..SimParams::default()
        },
        inloop_termination: plan.inloop_termination,
        window: 100,
    }
}

fn json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

/// Runs one stage from its on-disk prerequisites and writes its artifacts.
pub fn run_stage(cfg: &PipelineConfig, plan: &StagePlan, layout: &RunLayout) -> Result<StageOutcome> {
    run_stage_from(cfg, plan, layout, None)
}

/// Like [`run_stage`]; a policy stage may continue from a mid-stage
/// checkpoint instead of starting over.
pub fn run_stage_from(
    cfg: &PipelineConfig,
    plan: &StagePlan,
    layout: &RunLayout,
    resume: Option<PolicyCheckpoint>,
) -> Result<StageOutcome> {
    if let Some(p) = plan.policy_in {
        need(&layout.policy_checkpoint(p), &format!("{p} policy checkpoint"))?;
    }
    if let Some(f) = plan.filter_in {
        need(&layout.filter_checkpoint(f), &format!("{f} filter checkpoint"))?;
    }
    if let Some(c) = &resume {
        if c.stage != plan.stage.name() {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint of {} cannot resume {}",
                c.stage, plan.stage
            )));
        }
        if plan.reward.is_none() {
            return Err(Error::Config(format!("{} does not train a policy", plan.stage)));
        }
    }
    let dir = layout.stage_dir(plan.stage);
    if dir.exists() && resume.is_none() {
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::create_dir_all(layout.checkpoints(plan.stage))?;
    std::fs::create_dir_all(layout.logs(plan.stage))?;
    let seed = stage_seed(cfg.seed, plan.stage);
    eprintln!("[{}] starting (seed {seed})", plan.stage);

    let start = std::time::Instant::now();
    let (policy, filter, mut details) = match plan.stage {
        StageId::S1 | StageId::S2 | StageId::S5 => policy_stage(cfg, plan, layout, seed, resume)?,
        StageId::S3 => offline_filter_stage(cfg, plan, layout, seed)?,
        StageId::S4 => inloop_filter_stage(cfg, plan, layout, seed)?,
    };

    let source = match &filter {
        Some(f) => StateSource::Filter(f),
        None => StateSource::Simulator,
    };
    let train_seconds = start.elapsed().as_secs_f64();
    let report = run_benchmark(&policy, source, &cfg.bench, bench_seed(cfg.seed))?;
    emit_report(&report, &dir)?;
    // Wall-clock times live apart from the outcome so reruns compare bitwise.
    let mut timing = serde_json::json!({
        "train_seconds": train_seconds,
        "bench_seconds": start.elapsed().as_secs_f64() - train_seconds,
    });
    if let Some(s) = details.as_object_mut().and_then(|d| d.remove("seconds")) {
        timing["stage_seconds"] = s;
    }
    std::fs::write(layout.logs(plan.stage).join("timing.json"), timing.to_string())?;
    let outcome = StageOutcome {
        stage: plan.stage,
        plan: plan.clone(),
        bench_rate: report.rate,
        bench_ci: (report.ci_low, report.ci_high),
        bench_episodes: report.trials,
        details,
    };
    checkpoint::save(&layout.outcome(plan.stage), OUTCOME, &outcome)?;
    eprintln!(
        "[{}] benchmark rate {:.3} [{:.3}, {:.3}] over {} episodes",
        plan.stage, report.rate, report.ci_low, report.ci_high, report.trials
    );
    Ok(outcome)
}

type StageProducts = (PolicyNet, Option<FilterTrainer>, serde_json::Value);

fn policy_stage(
    cfg: &PipelineConfig,
    plan: &StagePlan,
    layout: &RunLayout,
    seed: u64,
    resume: Option<PolicyCheckpoint>,
) -> Result<StageProducts> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let settings = worker_settings(cfg, plan);
    let prior = plan.policy_in.map(|p| load_policy(layout, p)).transpose()?;
    let resumed = resume.is_some();
    let mut trainer = match resume {
        Some(c) => PolicyTrainer::resume(c, cfg.policy.clone())?,
        None => {
            let agent = match &prior {
                Some(c) => c.agent.clone(),
                None => SacAgent::new(POLICY_OBS_DIM, Q_OBS_DIM, cfg.policy.sac.clone(), &mut rng),
            };
            let t = PolicyTrainer::new(agent, cfg.policy.clone(), settings, plan.stage.name(), rng.gen())?;
            if plan.gravity_curriculum {
                t.with_gravity(cfg.gravity.schedule()?)
            } else {
                t
            }
        }
    };
    let filter = plan.filter_in.map(|f| load_filter(layout, f)).transpose()?;
    if let Some(f) = &filter {
        let n = f.config.particles_infer;
        let t = f.trainer.clone();
        trainer.set_estimators(|_| Box::new(t.estimator(n)));
    }
    let replay_at_start = trainer.replay.len();
    let params_from_prior = prior.as_ref().map(|c| c.agent == trainer.agent);

    let curve_path = layout.logs(plan.stage).join("curve.csv");
    let latest = layout.checkpoints(plan.stage).join("latest.json");
    let start = std::time::Instant::now();
    let stage = plan.stage;
    trainer.train(plan.budget, |row, t| {
        eprintln!(
            "[{stage}] step {:>7}  return {:>8.2}  success {:.3}  gravity {:.1}  alpha {:.4}  ({:.0} s)",
            row.step,
            row.episode_return,
            row.success_rate,
            row.gravity,
            row.alpha,
            start.elapsed().as_secs_f64()
        );
        append_curve(&curve_path, std::slice::from_ref(row))?;
        t.checkpoint().save(&latest)
    })?;
    let ckpt = trainer.checkpoint();
    ckpt.save(&layout.policy_checkpoint(plan.stage))?;
    // Benchmark what was written, so a resumed run sees the same parameters.
    let saved = PolicyCheckpoint::load(&layout.policy_checkpoint(plan.stage))?;

    let details = serde_json::json!({
        "steps": trainer.steps,
        "updates": trainer.agent.updates,
        "resumed": resumed,
        "replay_at_start": replay_at_start,
        "params_from_prior": params_from_prior,
        "gravity_trace": trainer.gravity.as_ref().map(|g| g.trace.clone()),
        "gravity_monotone": trainer.gravity.as_ref().map(|g| g.is_monotone()),
        "final_gravity": trainer.gravity.as_ref().map_or(1.0, |g| g.scale()),
        "incidents": trainer.workers.iter().map(|w| w.incidents).sum::<u64>(),
        "seconds": start.elapsed().as_secs_f64(),
    });
    Ok((saved.agent.actor, filter.map(|f| f.trainer), details))
}

/// Collects `count` sequences with `workers` parallel workers; sequences are
/// concatenated in worker order.
fn collect_sequences(
    policy: &PolicyNet,
    settings: &WorkerSettings,
    trainer: Option<&FilterTrainer>,
    particles: usize,
    count: usize,
    workers: usize,
    len: usize,
    source: DataSource,
    seed: u64,
) -> Result<(Vec<Sequence>, RolloutStats)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let workers = workers.min(count).max(1);
    let jobs: Vec<(u64, usize)> = (0..workers)
        .map(|i| (rng.gen(), count / workers + usize::from(i < count % workers)))
        .collect();
    let results: Vec<Result<(Vec<Sequence>, RolloutStats)>> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .iter()
            .enumerate()
            .map(|(i, &(wseed, k))| {
                s.spawn(move || {
                    let mut w = Worker::new(i, wseed, settings.clone());
                    if let Some(t) = trainer {
                        w.set_estimator(Some(Box::new(t.estimator(particles))));
                    }
                    rollout_sequences(&mut w, policy, k, len, source)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("collection thread panicked"))
            .collect()
    });
    let mut seqs = Vec::with_capacity(count);
    let mut stats = RolloutStats::default();
    for r in results {
        let (s, st) = r?;
        seqs.extend(s);
        stats.steps += st.steps;
        stats.attempts += st.attempts;
        stats.successes += st.successes;
        stats.episodes += st.episodes;
    }
    Ok((seqs, stats))
}

/// Offline data of the filter stages, split into train, validation and test.
pub struct OfflineData {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub stats: RolloutStats,
}

/// Collects the offline dataset with the true-state `policy` and writes
/// `offline.tfds`, the three splits and `collection.json` into `dir`.
pub fn collect_offline_data(cfg: &PipelineConfig, policy: &PolicyNet, dir: &Path, seed: u64) -> Result<OfflineData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = &stage_plans(cfg)[StageId::S3.index() as usize];
    let settings = worker_settings(cfg, plan);
    let (seqs, stats) = collect_sequences(
        policy,
        &settings,
        None,
        cfg.filter.particles_infer,
        cfg.dataset.offline_sequences,
        cfg.dataset.workers,
        cfg.filter.seq_len,
        DataSource::Offline,
        rng.gen(),
    )?;
    eprintln!(
        "collected {} sequences, true-state success rate {:?}",
        seqs.len(),
        stats.success_rate()
    );
    std::fs::create_dir_all(dir)?;
    let all = Dataset { sequences: seqs };
    all.save(&dir.join("offline.tfds"))?;
    let (rest, test) = all.split(cfg.dataset.test_fraction, &mut rng);
    let val_share = cfg.dataset.validation_fraction / (1.0 - cfg.dataset.test_fraction);
    let (train, validation) = rest.split(val_share, &mut rng);
    train.save(&dir.join("train.tfds"))?;
    validation.save(&dir.join("validation.tfds"))?;
    test.save(&dir.join("test.tfds"))?;
    checkpoint::save(&dir.join("collection.json"), "collection", &stats)?;
    Ok(OfflineData {
        train,
        validation,
        test,
        stats,
    })
}

/// Reads the splits written by [`collect_offline_data`].
pub fn load_offline_data(dir: &Path) -> Result<OfflineData> {
    let load = |name: &str| {
        let p = dir.join(name);
        need(&p, name)?;
        Dataset::load(&p)
    };
    Ok(OfflineData {
        train: load("train.tfds")?,
        validation: load("validation.tfds")?,
        test: load("test.tfds")?,
        stats: checkpoint::load(&dir.join("collection.json"), "collection").unwrap_or_default(),
    })
}

fn offline_filter_stage(
    cfg: &PipelineConfig,
    plan: &StagePlan,
    layout: &RunLayout,
    seed: u64,
) -> Result<StageProducts> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = load_policy(layout, StageId::S2)?.agent.actor;
    let fc = &cfg.filter;
    let start = std::time::Instant::now();
    let OfflineData {
        train,
        validation: val,
        test,
        stats,
    } = collect_offline_data(cfg, &policy, &layout.data(plan.stage), rng.gen())?;

    let mut trainer = FilterTrainer::new(fc, &mut rng);
    let s1 = train_stage1(&mut trainer, &train.sequences, &val.sequences, fc, rng.gen())?;
    eprintln!(
        "[S3] stage 1: {} epochs, best validation {:.5} (identity {:.5})",
        s1.val_loss.len(),
        s1.val_loss.iter().cloned().fold(f64::INFINITY, f64::min),
        s1.identity_val_loss
    );
    let stage1_models = trainer.models.clone();
    let test_seed = rng.gen();
    let test_one_step_stage1 = one_step_loss(&stage1_models, &test.sequences, fc, test_seed)?;
    let test_identity = crate::filter::train::identity_baseline(&test.sequences, &fc.loss);

    let s2 = train_stage2(&mut trainer, &train.sequences, &val.sequences, fc, rng.gen())?;
    let spread = trainer.spread;
    let test_unrolled_stage1 = unrolled_loss(&stage1_models, &test.sequences, fc, &spread, test_seed)?;
    let test_unrolled_stage2 = unrolled_loss(&trainer.models, &test.sequences, fc, &spread, test_seed)?;
    eprintln!("[S3] stage 2: held-out unrolled loss {test_unrolled_stage1:.5} -> {test_unrolled_stage2:.5}");

    let ckpt = FilterCheckpoint {
        stage: plan.stage.name().into(),
        config: fc.clone(),
        trainer,
    };
    ckpt.save(&layout.filter_checkpoint(plan.stage))?;
    let saved = FilterCheckpoint::load(&layout.filter_checkpoint(plan.stage))?;
    let details = serde_json::json!({
        "collection": json(&stats),
        "sequences": {"train": train.len(), "validation": val.len(), "test": test.len()},
        "stage1": json(&s1),
        "stage2": json(&s2),
        "test_identity_loss": test_identity,
        "test_one_step_loss_stage1": test_one_step_stage1,
        "test_unrolled_loss_stage1": test_unrolled_stage1,
        "test_unrolled_loss_stage2": test_unrolled_stage2,
        "spread": json(&spread),
        "seconds": start.elapsed().as_secs_f64(),
    });
    Ok((policy, Some(saved.trainer), details))
}

fn inloop_filter_stage(cfg: &PipelineConfig, plan: &StagePlan, layout: &RunLayout, seed: u64) -> Result<StageProducts> {
    let policy = load_policy(layout, StageId::S2)?.agent.actor;
    let prior = load_filter(layout, StageId::S3)?;
    let s3_data = layout.data(StageId::S3);
    let mut dataset = Dataset::load(&s3_data.join("train.tfds"))?;
    let eval_suite = Dataset::load(&s3_data.join("test.tfds"))?;
    let baseline: RolloutStats = checkpoint::load(&s3_data.join("collection.json"), "collection")?;
    let settings = worker_settings(cfg, plan);
    let mut trainer = prior.trainer;
    let start = std::time::Instant::now();
    let report = train_inloop(
        &mut trainer,
        &policy,
        &settings,
        &mut dataset,
        &eval_suite.sequences,
        baseline.success_rate(),
        &cfg.filter,
        seed,
    )?;
    for (i, it) in report.iterations.iter().enumerate() {
        eprintln!(
            "[S4] iteration {}: in-loop {} / offline {}, position error {:.4} m, rotation error {:.4} rad, success {:?}",
            i + 1,
            it.inloop_total,
            report.offline,
            it.eval.position_error,
            it.eval.rotation_error,
            it.rollout.success_rate()
        );
    }
    std::fs::create_dir_all(layout.data(plan.stage))?;
    dataset.save(&layout.data(plan.stage).join("combined.tfds"))?;
    let ckpt = FilterCheckpoint {
        stage: plan.stage.name().into(),
        config: cfg.filter.clone(),
        trainer,
    };
    ckpt.save(&layout.filter_checkpoint(plan.stage))?;
    let saved = FilterCheckpoint::load(&layout.filter_checkpoint(plan.stage))?;
    let details = serde_json::json!({
        "inloop": json(&report),
        "errors_non_increasing": report.errors_non_increasing(),
        "offline": report.offline,
        "inloop_sequences": report.inloop,
        "baseline_success_rate": baseline.success_rate(),
        "seconds": start.elapsed().as_secs_f64(),
    });
    Ok((policy, Some(saved.trainer), details))
}

/// Outcomes of every stage of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub name: String,
    pub seed: u64,
    pub stages: Vec<StageOutcome>,
}

impl PipelineSummary {
    pub fn rate(&self, s: StageId) -> Option<f64> {
        self.stages.iter().find(|o| o.stage == s).map(|o| o.bench_rate)
    }

    pub fn load(path: &Path) -> Result<Self> {
        checkpoint::load(path, "pipeline-summary")
    }
}

/// Runs S1..S5, skipping stages before `from` (their artifacts must exist).
pub fn run_pipeline(cfg: &PipelineConfig, from: Option<StageId>) -> Result<PipelineSummary> {
    cfg.validate()?;
    let layout = RunLayout::new(cfg.run_dir());
    std::fs::create_dir_all(&layout.root)?;
    std::fs::write(layout.root.join("config.toml"), cfg.to_toml()?)?;
    let from = from.unwrap_or(StageId::S1);
    let mut stages = Vec::new();
    for plan in stage_plans(cfg) {
        let outcome = if plan.stage < from {
            let p = layout.outcome(plan.stage);
            need(&p, &format!("{} outcome", plan.stage))?;
            StageOutcome::load(&p)?
        } else {
            run_stage(cfg, &plan, &layout)?
        };
        stages.push(outcome);
    }
    let summary = PipelineSummary {
        name: cfg.name.clone(),
        seed: cfg.seed,
        stages,
    };
    checkpoint::save(&layout.summary(), "pipeline-summary", &summary)?;
    Ok(summary)
}
