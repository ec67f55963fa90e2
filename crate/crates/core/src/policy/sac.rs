//! Soft actor-critic with twin critics and a learned temperature.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use tactile_autograd::{concat_cols, Activation, Adam, BoundMlp, Matrix, Mlp, Tape, Var};

use crate::env::NUM_JOINTS;
use crate::error::{Error, Result};

pub const ACTION_DIM: usize = NUM_JOINTS;
pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;
/// Keeps squashed samples strictly inside the open interval.
const SQUASH_LIMIT: f64 = 1.0 - 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SacConfig {
    pub gamma: f64,
    pub tau: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_alpha: f64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub init_alpha: f64,
    pub target_entropy: f64,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            lr_actor: 3e-4,
            lr_critic: 3e-4,
            lr_alpha: 3e-4,
            batch_size: 256,
            hidden: vec![64, 64],
            init_alpha: 0.1,
            target_entropy: -(ACTION_DIM as f64),
        }
    }
}

/// Gaussian policy head: the first half of the outputs is the mean, the
/// second half the log standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    pub mlp: Mlp,
}

impl PolicyNet {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * ACTION_DIM);
        let mut mlp = Mlp::new(&sizes, Activation::Relu, rng);
        mlp.scale_output(0.1);
        Self { mlp }
    }

    pub fn obs_dim(&self) -> usize {
        self.mlp.inputs()
    }

    pub fn forward(&self, obs: &Matrix) -> (Matrix, Matrix) {
        let out = self.mlp.forward(obs);
        let mean = out.slice(ndarray::s![.., ..ACTION_DIM]).to_owned();
        let log_std = out
            .slice(ndarray::s![.., ACTION_DIM..])
            .mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        (mean, log_std)
    }
}

/// State-action value network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QNet {
    pub mlp: Mlp,
}

impl QNet {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut sizes = vec![obs_dim + ACTION_DIM];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Self {
            mlp: Mlp::new(&sizes, Activation::Relu, rng),
        }
    }

    pub fn forward(&self, obs: &Matrix, act: &Matrix) -> Matrix {
        self.mlp.forward(&ndarray::concatenate![ndarray::Axis(1), *obs, *act])
    }
}

fn squash(u: f64) -> f64 {
    u.tanh().clamp(-SQUASH_LIMIT, SQUASH_LIMIT)
}

/// `log(1 - tanh(u)^2)`, stable for large `|u|`.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Squashed Gaussian sample and its log density, without a tape.
pub fn sample_squashed(mean: &Matrix, log_std: &Matrix, eps: &Matrix) -> (Matrix, Matrix) {
    let n = mean.nrows();
    let mut act = Matrix::zeros(mean.dim());
    let mut logp = Matrix::zeros((n, 1));
    for i in 0..n {
        let mut lp = 0.0;
        for j in 0..mean.ncols() {
            let u = mean[[i, j]] + log_std[[i, j]].exp() * eps[[i, j]];
            act[[i, j]] = squash(u);
            lp += -0.5 * eps[[i, j]] * eps[[i, j]] - log_std[[i, j]] - HALF_LOG_2PI - log_one_minus_tanh_sq(u);
        }
        logp[[i, 0]] = lp;
    }
    (act, logp)
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Matrix::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

/// Samples (or takes the mode of) the squashed policy for one observation.
pub fn act<R: Rng + ?Sized>(obs: &[f64], net: &PolicyNet, deterministic: bool, rng: &mut R) -> [f64; ACTION_DIM] {
    let x = Matrix::from_shape_vec((1, obs.len()), obs.to_vec()).expect("observation row");
    let (mean, log_std) = net.forward(&x);
    let mut a = [0.0; ACTION_DIM];
    for j in 0..ACTION_DIM {
        let u = if deterministic {
            mean[[0, j]]
        } else {
            let e: f64 = StandardNormal.sample(rng);
            mean[[0, j]] + log_std[[0, j]].exp() * e
        };
        a[j] = squash(u);
    }
    a
}

/// Reparameterised squashed sample on a tape: (action, log density n×1).
pub fn squashed_on_tape<'t>(out: Var<'t>, eps: Var<'t>) -> (Var<'t>, Var<'t>) {
    let mean = out.cols(0, ACTION_DIM);
    let log_std = out.cols(ACTION_DIM, 2 * ACTION_DIM).clamp(LOG_STD_MIN, LOG_STD_MAX);
    let u = mean + log_std.exp() * eps;
    let act = u.tanh();
    let gauss = (eps.square().scale(-0.5) - log_std - HALF_LOG_2PI).sum_cols();
    let ln2 = std::f64::consts::LN_2;
    let correction = ((-u - (u.scale(-2.0)).softplus()) + ln2).scale(2.0).sum_cols();
    (act, gauss - correction)
}

/// Elementwise minimum `a - relu(a - b)`.
fn min2<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    a - (a - b).relu()
}

/// Mean squared Bellman error of one critic against fixed targets.
pub fn critic_loss<'t>(q: &BoundMlp<'t>, obs: Var<'t>, act: Var<'t>, target: Var<'t>) -> Var<'t> {
    let pred = q.forward(concat_cols(&[obs, act]));
    (pred - target).square().mean()
}

/// `E[α log π(ã|s) − min(Q1, Q2)(s, ã)]` with frozen critics.
pub fn actor_loss<'t>(
    actor: &BoundMlp<'t>,
    q1: &BoundMlp<'t>,
    q2: &BoundMlp<'t>,
    obs_pi: Var<'t>,
    obs_q: Var<'t>,
    eps: Var<'t>,
    alpha: f64,
) -> (Var<'t>, Var<'t>) {
    let (act, logp) = squashed_on_tape(actor.forward(obs_pi), eps);
    let x = concat_cols(&[obs_q, act]);
    let q = min2(q1.forward(x), q2.forward(x));
    ((logp.scale(alpha) - q).mean(), logp)
}

/// Temperature loss `−E[log α · (log π + H̄)]`.
pub fn alpha_loss<'t>(log_alpha: Var<'t>, logp: &Matrix, target_entropy: f64) -> Var<'t> {
    let mean = logp.mean().unwrap_or(0.0) + target_entropy;
    (log_alpha * -mean).sum()
}

/// A sampled minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub obs_pi: Matrix,
    pub obs_q: Matrix,
    pub action: Matrix,
    pub reward: Matrix,
    pub done: Matrix,
    pub next_obs_pi: Matrix,
    pub next_obs_q: Matrix,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SacDiagnostics {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
    pub entropy: f64,
    pub mean_q: f64,
}

/// Networks, targets, optimisers and temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SacAgent {
    pub config: SacConfig,
    pub actor: PolicyNet,
    pub q1: QNet,
    pub q2: QNet,
    pub q1_target: QNet,
    pub q2_target: QNet,
    pub log_alpha: Matrix,
    pub opt_actor: Adam,
    pub opt_q1: Adam,
    pub opt_q2: Adam,
    pub opt_alpha: Adam,
    pub updates: u64,
}

impl SacAgent {
    pub fn new<R: Rng + ?Sized>(obs_pi: usize, obs_q: usize, config: SacConfig, rng: &mut R) -> Self {
        let actor = PolicyNet::new(obs_pi, &config.hidden, rng);
        let q1 = QNet::new(obs_q, &config.hidden, rng);
        let q2 = QNet::new(obs_q, &config.hidden, rng);
        Self {
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            log_alpha: Matrix::from_elem((1, 1), config.init_alpha.ln()),
            opt_actor: Adam::new(config.lr_actor),
            opt_q1: Adam::new(config.lr_critic),
            opt_q2: Adam::new(config.lr_critic),
            opt_alpha: Adam::new(config.lr_alpha),
            actor,
            q1,
            q2,
            config,
            updates: 0,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha[[0, 0]].exp()
    }

    /// Soft Bellman targets from the target critics.
    pub fn targets(&self, b: &Batch, eps: &Matrix) -> Matrix {
        let (mean, log_std) = self.actor.forward(&b.next_obs_pi);
        let (next_act, logp) = sample_squashed(&mean, &log_std, eps);
        let q1 = self.q1_target.forward(&b.next_obs_q, &next_act);
        let q2 = self.q2_target.forward(&b.next_obs_q, &next_act);
        let alpha = self.alpha();
        let mut y = b.reward.clone();
        for i in 0..y.nrows() {
            let soft = q1[[i, 0]].min(q2[[i, 0]]) - alpha * logp[[i, 0]];
            y[[i, 0]] += self.config.gamma * (1.0 - b.done[[i, 0]]) * soft;
        }
        y
    }

    /// One gradient step on both critics, the actor and the temperature.
    pub fn update<R: Rng + ?Sized>(&mut self, b: &Batch, rng: &mut R) -> Result<SacDiagnostics> {
        let n = b.obs_pi.nrows();
        let y = self.targets(b, &standard_normal(rng, n, ACTION_DIM));
        let mut diag = SacDiagnostics::default();

        for (qnet, opt) in [(&mut self.q1, &mut self.opt_q1), (&mut self.q2, &mut self.opt_q2)] {
            let tape = Tape::new();
            let bound = qnet.mlp.bind(&tape);
            let loss = critic_loss(
                &bound,
                tape.constant(b.obs_q.clone()),
                tape.constant(b.action.clone()),
                tape.constant(y.clone()),
            );
            diag.critic_loss += 0.5 * loss.item();
            let grads = bound.grads(&tape.backward(loss));
            opt.update(qnet.mlp.params_mut(), &grads);
        }

        let eps = standard_normal(rng, n, ACTION_DIM);
        let alpha = self.alpha();
        let logp = {
            let tape = Tape::new();
            let actor = self.actor.mlp.bind(&tape);
            let q1 = self.q1.mlp.bind_frozen(&tape);
            let q2 = self.q2.mlp.bind_frozen(&tape);
            let (loss, logp) = actor_loss(
                &actor,
                &q1,
                &q2,
                tape.constant(b.obs_pi.clone()),
                tape.constant(b.obs_q.clone()),
                tape.constant(eps),
                alpha,
            );
            diag.actor_loss = loss.item();
            let logp = logp.value();
            let grads = actor.grads(&tape.backward(loss));
            self.opt_actor.update(self.actor.mlp.params_mut(), &grads);
            logp
        };

        {
            let tape = Tape::new();
            let la = tape.var(self.log_alpha.clone());
            let loss = alpha_loss(la, &logp, self.config.target_entropy);
            let g = tape.backward(loss).wrt_or_zero(la);
            self.opt_alpha.update(vec![&mut self.log_alpha], &[g]);
        }

        let tau = self.config.tau;
        self.q1_target.mlp.polyak_from(&self.q1.mlp, tau);
        self.q2_target.mlp.polyak_from(&self.q2.mlp, tau);
        self.updates += 1;

        diag.alpha = self.alpha();
        diag.entropy = -logp.mean().unwrap_or(0.0);
        diag.mean_q = y.mean().unwrap_or(0.0);
        if !(diag.critic_loss.is_finite() && diag.actor_loss.is_finite() && diag.alpha.is_finite()) {
            return Err(Error::NonFiniteLoss(self.updates));
        }
        Ok(diag)
    }
}
