//! The three filter training stages: one-step proposal fitting, unrolled
//! training through time, and iterative estimator-in-the-loop refinement.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tactile_autograd::{clip_grad_norm, Adam, Matrix, Tape};

use super::dataset::{rollout_sequences, DataSource, Dataset, RolloutStats, Sequence};
use super::estimate::{filter_loss, FilterLossConfig};
use super::model::{states_matrix, FilterModels};
use super::runtime::{initial_particles, unroll_loss, InitBias, InitSpread, ParticleFilter, Window};
use crate::env::CubeState;
use crate::error::{Error, Result};
use crate::policy::{PolicyNet, Worker, WorkerSettings};
use crate::rotations::{distance, OctahedralGroup};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterTrainConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub loss: FilterLossConfig,
    pub particles_train: usize,
    pub particles_infer: usize,
    pub seq_len: usize,
    pub grad_clip: f64,
    pub stage1_batch: usize,
    pub stage1_max_epochs: usize,
    /// Stop once validation improved by less than `stage1_min_improvement`
    /// (relative) over this many epochs.
    pub stage1_patience: usize,
    pub stage1_min_improvement: f64,
    pub stage2_batch: usize,
    pub stage2_epochs: usize,
    pub bias: InitBias,
    pub inloop_per_iteration: usize,
    pub inloop_epochs: usize,
    pub inloop_min_success_rate: f64,
    /// Attempts needed before the success-rate guard applies.
    pub inloop_min_attempts: usize,
}

impl Default for FilterTrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            lr: 1e-3,
            loss: FilterLossConfig::default(),
            particles_train: 32,
            particles_infer: 100,
            seq_len: 100,
            grad_clip: 10.0,
            stage1_batch: 256,
            stage1_max_epochs: 100,
            stage1_patience: 5,
            stage1_min_improvement: 0.01,
            stage2_batch: 4,
            stage2_epochs: 10,
            bias: InitBias::default(),
            inloop_per_iteration: 1000,
            inloop_epochs: 2,
            inloop_min_success_rate: 0.05,
            inloop_min_attempts: 20,
        }
    }
}

/// Networks with their optimisers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterTrainer {
    pub models: FilterModels,
    pub opt_proposal: Adam,
    pub opt_update: Adam,
    pub spread: InitSpread,
}

impl FilterTrainer {
    pub fn new<R: Rng + ?Sized>(cfg: &FilterTrainConfig, rng: &mut R) -> Self {
        Self {
            models: FilterModels::new(&cfg.hidden, rng),
            opt_proposal: Adam::new(cfg.lr),
            opt_update: Adam::new(cfg.lr),
            spread: InitSpread::RESET,
        }
    }

    pub fn estimator(&self, n: usize) -> ParticleFilter {
        ParticleFilter::new(self.models.clone(), n, InitSpread::RESET)
    }

    /// One gradient step on a batch of equal-length windows. Returns the loss.
    fn train_batch<R: Rng + ?Sized>(
        &mut self,
        windows: &[Window<'_>],
        n: usize,
        spread: &InitSpread,
        bias: &InitBias,
        train_update: bool,
        cfg: &FilterTrainConfig,
        rng: &mut R,
    ) -> Result<Option<f64>> {
        let tape = Tape::new();
        let bound = self.models.bind(&tape, true, train_update);
        let starts: Vec<CubeState> = windows.iter().map(|w| w.initial).collect();
        let init = initial_particles(&starts, n, spread, bias, rng);
        let loss = unroll_loss(&bound, &tape, windows, init, n, &cfg.loss, rng)?;
        let value = loss.item();
        let grads = tape.backward(loss);
        let mut gp = bound.proposal.grads(&grads);
        let mut gu = bound.update.grads(&grads);
        let finite = value.is_finite() && gp.iter().chain(&gu).all(|g| g.iter().all(|v| v.is_finite()));
        if !finite {
            return Ok(None);
        }
        clip_grad_norm(&mut gp, cfg.grad_clip);
        self.opt_proposal.update(self.models.proposal.params_mut(), &gp);
        if train_update {
            clip_grad_norm(&mut gu, cfg.grad_clip);
            self.opt_update.update(self.models.update.params_mut(), &gu);
        }
        Ok(Some(value))
    }
}

/// Per-component spread of the true states in a dataset. The rotation
/// spread is the RMS distance of each orientation to its nearest raster
/// orientation.
pub fn data_spread(seqs: &[Sequence]) -> InitSpread {
    let group = OctahedralGroup::get();
    let mut acc = [[0.0f64; 2]; 9];
    let mut r2 = 0.0;
    let mut count = 0.0;
    for s in seqs {
        for st in &s.steps {
            let c = st.cube;
            for (k, v) in
                c.x.to_array()
                    .into_iter()
                    .chain(c.v.to_array())
                    .chain(c.w.to_array())
                    .enumerate()
            {
                acc[k][0] += v;
                acc[k][1] += v * v;
            }
            r2 += group.nearest(c.r).1.powi(2);
            count += 1.0;
        }
    }
    if count == 0.0 {
        return InitSpread::RESET;
    }
    let sd = |k: usize| {
        let m = acc[k][0] / count;
        (acc[k][1] / count - m * m).max(0.0).sqrt()
    };
    let pooled = |from: usize| ((sd(from).powi(2) + sd(from + 1).powi(2) + sd(from + 2).powi(2)) / 3.0).sqrt();
    InitSpread {
        x: pooled(0),
        r: (r2 / count).sqrt(),
        v: pooled(3),
        w: pooled(6),
    }
}

fn pairs(seqs: &[Sequence]) -> Vec<Window<'_>> {
    seqs.iter()
        .flat_map(|s| {
            let prev = std::iter::once(s.initial).chain(s.steps.iter().map(|x| x.cube));
            prev.zip(0..s.steps.len()).map(move |(initial, t)| Window {
                initial,
                steps: &s.steps[t..t + 1],
            })
        })
        .collect()
}

/// Loss of predicting no change over one step.
pub fn identity_baseline(seqs: &[Sequence], cfg: &FilterLossConfig) -> f64 {
    let ps = pairs(seqs);
    let sum: f64 = ps.iter().map(|w| cfg.state_loss(&w.initial, &w.steps[0].cube)).sum();
    sum / ps.len().max(1) as f64
}

/// Mean one-step loss of a single-particle proposal from exact states.
pub fn one_step_loss(models: &FilterModels, seqs: &[Sequence], cfg: &FilterTrainConfig, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ps = pairs(seqs);
    let mut sum = 0.0;
    for chunk in ps.chunks(cfg.stage1_batch.max(1)) {
        let tape = Tape::new();
        let bound = models.bind(&tape, false, false);
        let init = states_matrix(&chunk.iter().map(|w| w.initial).collect::<Vec<_>>());
        let l = unroll_loss(&bound, &tape, chunk, init, 1, &cfg.loss, &mut rng)?;
        sum += l.item() * chunk.len() as f64;
    }
    Ok(sum / ps.len().max(1) as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1Report {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub identity_val_loss: f64,
    pub converged: bool,
}

/// Fits the proposal for one-step prediction with a single particle.
pub fn train_stage1(
    trainer: &mut FilterTrainer,
    train: &[Sequence],
    val: &[Sequence],
    cfg: &FilterTrainConfig,
    seed: u64,
) -> Result<Stage1Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut windows = pairs(train);
    let mut report = Stage1Report {
        identity_val_loss: identity_baseline(val, &cfg.loss),
        ..Stage1Report::default()
    };
    let mut best = (f64::INFINITY, trainer.clone());
    for epoch in 0..cfg.stage1_max_epochs {
        windows.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in windows.chunks(cfg.stage1_batch.max(1)) {
            let l = trainer
                .train_batch(chunk, 1, &InitSpread::ZERO, &InitBias::NONE, false, cfg, &mut rng)?
                .ok_or(Error::NonFiniteLoss(epoch as u64))?;
            sum += l * chunk.len() as f64;
            count += chunk.len();
        }
        report.train_loss.push(sum / count.max(1) as f64);
        let v = one_step_loss(&trainer.models, val, cfg, seed ^ 0x5eed)?;
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss(epoch as u64));
        }
        report.val_loss.push(v);
        if v < best.0 {
            best = (v, trainer.clone());
        }
        let p = cfg.stage1_patience;
        if report.val_loss.len() > p {
            let old = report.val_loss[report.val_loss.len() - 1 - p];
            if v > old * (1.0 - cfg.stage1_min_improvement) {
                report.converged = true;
                break;
            }
        }
    }
    *trainer = best.1;
    Ok(report)
}

/// Filter quality on a fixed set of sequences.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub loss: f64,
    /// Mean position error, m.
    pub position_error: f64,
    /// Mean rotation error, rad.
    pub rotation_error: f64,
    /// Mean absolute error per position axis, m.
    pub axis_error: [f64; 3],
}

/// Runs the filter over every sequence with a fixed seed.
pub fn evaluate(
    models: &FilterModels,
    seqs: &[Sequence],
    n: usize,
    cfg: &FilterLossConfig,
    seed: u64,
) -> Result<EvalReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pf = ParticleFilter::new(models.clone(), n, InitSpread::RESET);
    let mut r = EvalReport::default();
    let mut steps = 0usize;
    for s in seqs {
        let est = pf.run(s.into(), &mut rng)?;
        let truth: Vec<CubeState> = s.steps.iter().map(|x| x.cube).collect();
        r.loss += filter_loss(&est, &truth, cfg)?;
        for (e, t) in est.iter().zip(&truth) {
            let d = e.x - t.x;
            r.position_error += d.norm();
            r.rotation_error += distance(e.r, t.r);
            for (a, v) in r.axis_error.iter_mut().zip(d.to_array()) {
                *a += v.abs();
            }
            steps += 1;
        }
    }
    let k = seqs.len().max(1) as f64;
    let s = steps.max(1) as f64;
    r.loss /= k;
    r.position_error /= s;
    r.rotation_error /= s;
    for a in r.axis_error.iter_mut() {
        *a /= s;
    }
    Ok(r)
}

/// Mean unrolled training-configuration loss on held-out sequences.
pub fn unrolled_loss(
    models: &FilterModels,
    seqs: &[Sequence],
    cfg: &FilterTrainConfig,
    spread: &InitSpread,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    for s in seqs {
        let tape = Tape::new();
        let bound = models.bind(&tape, false, false);
        let init = initial_particles(&[s.initial], cfg.particles_train, spread, &cfg.bias, &mut rng);
        let w = [Window::from(s)];
        sum += unroll_loss(&bound, &tape, &w, init, cfg.particles_train, &cfg.loss, &mut rng)?.item();
    }
    Ok(sum / seqs.len().max(1) as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2Report {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub initial_val_loss: f64,
    pub best_epoch: Option<usize>,
    pub truncations: usize,
    pub skipped_batches: usize,
}

fn stage2_epochs(
    trainer: &mut FilterTrainer,
    train: &[Sequence],
    cfg: &FilterTrainConfig,
    epochs: usize,
    spread: &InitSpread,
    rng: &mut ChaCha8Rng,
    report: &mut Stage2Report,
    mut after_epoch: impl FnMut(&FilterTrainer, &mut Stage2Report) -> Result<()>,
) -> Result<()> {
    let mut order: Vec<&Sequence> = train.iter().filter(|s| !s.is_empty()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.stage2_batch.max(1)) {
            let t = chunk.iter().map(|s| s.len()).min().unwrap_or(0).min(cfg.seq_len);
            let mut len = t;
            loop {
                let windows: Vec<Window<'_>> = chunk
                    .iter()
                    .map(|s| Window {
                        initial: s.initial,
                        steps: &s.steps[..len],
                    })
                    .collect();
                match trainer.train_batch(&windows, cfg.particles_train, spread, &cfg.bias, true, cfg, rng)? {
                    Some(l) => {
                        sum += l;
                        count += 1;
                        break;
                    }
                    None if len > 1 => {
                        len /= 2;
                        report.truncations += 1;
                        eprintln!("filter: non-finite gradients, truncating sequences to {len} steps");
                    }
                    None => {
                        report.skipped_batches += 1;
                        eprintln!("filter: non-finite gradients at length 1, batch skipped");
                        break;
                    }
                }
            }
        }
        report.train_loss.push(sum / count.max(1) as f64);
        after_epoch(trainer, report)?;
    }
    Ok(())
}

/// Trains the full filter unrolled through time; keeps the parameters with
/// the lowest validation loss (including the starting point).
pub fn train_stage2(
    trainer: &mut FilterTrainer,
    train: &[Sequence],
    val: &[Sequence],
    cfg: &FilterTrainConfig,
    seed: u64,
) -> Result<Stage2Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spread = data_spread(train);
    trainer.spread = spread;
    let val_seed = seed ^ 0xfeed;
    let mut report = Stage2Report {
        initial_val_loss: unrolled_loss(&trainer.models, val, cfg, &spread, val_seed)?,
        ..Stage2Report::default()
    };
    let mut best = (report.initial_val_loss, trainer.clone());
    stage2_epochs(
        trainer,
        train,
        cfg,
        cfg.stage2_epochs,
        &spread,
        &mut rng,
        &mut report,
        |t, rep| {
            let v = unrolled_loss(&t.models, val, cfg, &spread, val_seed)?;
            rep.val_loss.push(v);
            if v < best.0 {
                best = (v, t.clone());
                rep.best_epoch = Some(rep.val_loss.len() - 1);
            }
            Ok(())
        },
    )?;
    *trainer = best.1;
    trainer.spread = spread;
    Ok(report)
}

/// Number of in-loop sequences that completes the 1 : 2 in-loop to offline ratio.
pub fn inloop_target(offline: usize) -> usize {
    offline / 2
}

/// Iteration count for a given offline size and per-iteration collection.
pub fn inloop_iterations(offline: usize, per_iteration: usize) -> usize {
    inloop_target(offline).div_ceil(per_iteration.max(1))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InloopIteration {
    pub collected: usize,
    pub inloop_total: usize,
    pub rollout: RolloutStats,
    pub train_loss: Vec<f64>,
    pub eval: EvalReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InloopReport {
    pub initial_eval: EvalReport,
    pub iterations: Vec<InloopIteration>,
    pub offline: usize,
    pub inloop: usize,
}

impl InloopReport {
    /// Position and rotation errors never increased between iterations.
    pub fn errors_non_increasing(&self) -> bool {
        let evals: Vec<&EvalReport> = std::iter::once(&self.initial_eval)
            .chain(self.iterations.iter().map(|i| &i.eval))
            .collect();
        evals
            .windows(2)
            .all(|w| w[1].position_error <= w[0].position_error && w[1].rotation_error <= w[0].rotation_error)
    }
}

/// Collects rollouts with the current filter driving `policy`, appends
/// them and retrains, until in-loop data is half the offline data.
pub fn train_inloop(
    trainer: &mut FilterTrainer,
    policy: &PolicyNet,
    settings: &WorkerSettings,
    dataset: &mut Dataset,
    eval_suite: &[Sequence],
    baseline_success_rate: Option<f64>,
    cfg: &FilterTrainConfig,
    seed: u64,
) -> Result<InloopReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offline = dataset.count(DataSource::Offline);
    let target = inloop_target(offline);
    let eval_seed = seed ^ 0xe7a1;
    let mut report = InloopReport {
        initial_eval: evaluate(&trainer.models, eval_suite, cfg.particles_infer, &cfg.loss, eval_seed)?,
        offline,
        ..InloopReport::default()
    };
    let mut worker_settings = settings.clone();
    worker_settings.inloop_termination = false;
    while dataset.count(DataSource::InLoop) < target {
        let have = dataset.count(DataSource::InLoop);
        let k = cfg.inloop_per_iteration.min(target - have);
        let mut worker = Worker::new(0, rng.gen(), worker_settings.clone());
        worker.set_estimator(Some(Box::new(trainer.estimator(cfg.particles_infer))));
        let (seqs, stats) = rollout_sequences(&mut worker, policy, k, cfg.seq_len, DataSource::InLoop)?;
        if stats.attempts >= cfg.inloop_min_attempts {
            let rate = stats.success_rate().unwrap_or(0.0);
            // A collapse is a drop below the floor from a policy that clears it
            // with true states; a policy that never did is not diagnosed here.
            let healthy = baseline_success_rate.is_none_or(|b| b >= cfg.inloop_min_success_rate);
            if healthy && rate < cfg.inloop_min_success_rate {
                return Err(Error::FilterCollapsed(format!(
                    "in-loop success rate {rate:.3} over {} attempts is below {}",
                    stats.attempts, cfg.inloop_min_success_rate
                )));
            }
        }
        dataset.sequences.extend(seqs);
        let mut it = InloopIteration {
            collected: k,
            inloop_total: dataset.count(DataSource::InLoop),
            rollout: stats,
            ..InloopIteration::default()
        };
        let mut r2 = Stage2Report::default();
        let spread = trainer.spread;
        stage2_epochs(
            trainer,
            &dataset.sequences,
            cfg,
            cfg.inloop_epochs,
            &spread,
            &mut rng,
            &mut r2,
            |_, _| Ok(()),
        )?;
        it.train_loss = r2.train_loss;
        it.eval = evaluate(&trainer.models, eval_suite, cfg.particles_infer, &cfg.loss, eval_seed)?;
        report.iterations.push(it);
    }
    report.inloop = dataset.count(DataSource::InLoop);
    Ok(report)
}

/// Gradient of the unrolled loss for a fixed draw sequence, for checks.
pub fn unrolled_loss_and_grads(
    models: &FilterModels,
    windows: &[Window<'_>],
    init: &Matrix,
    n: usize,
    cfg: &FilterLossConfig,
    seed: u64,
) -> Result<(f64, Vec<Matrix>, Vec<Matrix>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tape = Tape::new();
    let bound = models.bind(&tape, true, true);
    let loss = unroll_loss(&bound, &tape, windows, init.clone(), n, cfg, &mut rng)?;
    let v = loss.item();
    let g = tape.backward(loss);
    Ok((v, bound.proposal.grads(&g), bound.update.grads(&g)))
}

pub const FILTER_CHECKPOINT: &str = "filter";

/// Filter networks, optimiser state and the configuration they were trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterCheckpoint {
    pub stage: String,
    pub config: FilterTrainConfig,
    pub trainer: FilterTrainer,
}

impl FilterCheckpoint {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::checkpoint::save(path, FILTER_CHECKPOINT, self)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        crate::checkpoint::load(path, FILTER_CHECKPOINT)
    }
}
