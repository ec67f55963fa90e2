//! Running the filter: initial particles, batched unrolls and the online estimator.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use tactile_autograd::{Matrix, Tape, Var};

use super::dataset::Sequence;
use super::estimate::{estimate, estimate_on_tape, loss_on_tape, FilterLossConfig};
use super::model::{io_features, state_row, states_matrix, FilterModels, IO_DIM, NOISE_DIM, STATE_DIM};
use super::particles::{filter_step, Particles};
use crate::env::{CubeState, EstimatorSample};
use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::policy::StateEstimator;
use crate::rotations::{random_unit_vector, Rotation};

/// Per-group standard deviations of the initial particle cloud.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitSpread {
    pub x: f64,
    pub r: f64,
    pub v: f64,
    pub w: f64,
}

impl InitSpread {
    /// Uncertainty of the scripted grasp's known start pose.
    pub const RESET: InitSpread = InitSpread {
        x: 0.002,
        r: 0.05,
        v: 0.01,
        w: 0.1,
    };

    pub const ZERO: InitSpread = InitSpread {
        x: 0.0,
        r: 0.0,
        v: 0.0,
        w: 0.0,
    };
}

/// Systematic offset applied to all particles of one filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitBias {
    /// Bound of the uniform per-axis position offset, m.
    pub x: f64,
    /// Bound of the rotation offset angle, rad.
    pub r: f64,
}

impl InitBias {
    pub const NONE: InitBias = InitBias { x: 0.0, r: 0.0 };
}

/// The training-time offset: ±5 mm per axis and up to 0.05 rad.
impl Default for InitBias {
    fn default() -> Self {
        InitBias { x: 0.005, r: 0.05 }
    }
}

fn gauss<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn jitter<R: Rng + ?Sized>(v: Vec3, sigma: f64, rng: &mut R) -> Vec3 {
    if sigma == 0.0 {
        return v;
    }
    v + Vec3::new(gauss(rng), gauss(rng), gauss(rng)) * sigma
}

/// `n` particles around each start state (rows grouped per filter).
pub fn initial_particles<R: Rng + ?Sized>(
    starts: &[CubeState],
    n: usize,
    spread: &InitSpread,
    bias: &InitBias,
    rng: &mut R,
) -> Matrix {
    let mut m = Matrix::zeros((starts.len() * n, STATE_DIM));
    for (b, s0) in starts.iter().enumerate() {
        let mut centre = *s0;
        if bias.x > 0.0 {
            centre.x += Vec3::new(
                rng.gen_range(-bias.x..=bias.x),
                rng.gen_range(-bias.x..=bias.x),
                rng.gen_range(-bias.x..=bias.x),
            );
        }
        if bias.r > 0.0 {
            let axis = random_unit_vector(rng);
            centre.r = Rotation::from_axis_angle(axis, rng.gen_range(0.0..=bias.r)) * centre.r;
        }
        for k in 0..n {
            let mut p = centre;
            p.x = jitter(p.x, spread.x, rng);
            if spread.r > 0.0 {
                p.r = Rotation::from_rotvec(jitter(Vec3::ZERO, spread.r, rng)) * p.r;
            }
            p.v = jitter(p.v, spread.v, rng);
            p.w = jitter(p.w, spread.w, rng);
            for (j, v) in state_row(&p).into_iter().enumerate() {
                m[[b * n + k, j]] = v;
            }
        }
    }
    m
}

/// Input features of several samples as rows.
pub fn io_matrix(samples: &[&EstimatorSample]) -> Matrix {
    let mut m = Matrix::zeros((samples.len(), IO_DIM));
    for (i, s) in samples.iter().enumerate() {
        for (j, v) in io_features(s).into_iter().enumerate() {
            m[[i, j]] = v;
        }
    }
    m
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Matrix::from_shape_fn((rows, cols), |_| gauss(rng))
}

/// A view of `steps.len()` filter steps starting from `initial`.
#[derive(Debug, Clone, Copy)]
pub struct Window<'a> {
    pub initial: CubeState,
    pub steps: &'a [EstimatorSample],
}

impl<'a> From<&'a Sequence> for Window<'a> {
    fn from(s: &'a Sequence) -> Self {
        Window {
            initial: s.initial,
            steps: &s.steps,
        }
    }
}

/// Unrolls one filter per window (all of equal length) on `tape` and returns
/// the time-averaged loss of the point estimates.
pub fn unroll_loss<'t, R: Rng + ?Sized>(
    model: &super::model::BoundModels<'t>,
    tape: &'t Tape,
    windows: &[Window<'_>],
    init: Matrix,
    n: usize,
    cfg: &FilterLossConfig,
    rng: &mut R,
) -> Result<Var<'t>> {
    let t_len = windows[0].steps.len();
    if windows.iter().any(|w| w.steps.len() != t_len) || t_len == 0 {
        return Err(Error::LengthMismatch(
            "windows of a batch must share a positive length".into(),
        ));
    }
    let mut ps = Particles::uniform(tape, tape.constant(init), n);
    let mut total: Option<Var<'t>> = None;
    for t in 0..t_len {
        let samples: Vec<&EstimatorSample> = windows.iter().map(|w| &w.steps[t]).collect();
        let io = tape.constant(io_matrix(&samples));
        let eps = tape.constant(gaussian_matrix(rng, windows.len() * n, NOISE_DIM));
        ps = filter_step(model, ps, io, eps, rng)?;
        let truth: Vec<CubeState> = samples.iter().map(|s| s.cube).collect();
        let l = loss_on_tape(estimate_on_tape(&ps), &states_matrix(&truth), cfg);
        total = Some(match total {
            Some(acc) => acc + l,
            None => l,
        });
    }
    Ok(total.expect("non-empty window").scale(1.0 / t_len as f64))
}

/// Online estimator holding plain particle values between steps.
#[derive(Debug, Clone)]
pub struct ParticleFilter {
    pub models: FilterModels,
    pub n: usize,
    pub spread: InitSpread,
    states: Matrix,
    log_w: Matrix,
}

impl ParticleFilter {
    pub fn new(models: FilterModels, n: usize, spread: InitSpread) -> Self {
        Self {
            models,
            n,
            spread,
            states: Matrix::zeros((0, STATE_DIM)),
            log_w: Matrix::zeros((0, 1)),
        }
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, initial: &CubeState, rng: &mut R) {
        self.states = initial_particles(&[*initial], self.n, &self.spread, &InitBias::NONE, rng);
        self.log_w = Matrix::from_elem((self.n, 1), -(self.n as f64).ln());
    }

    pub fn step<R: Rng + ?Sized>(&mut self, sample: &EstimatorSample, rng: &mut R) -> Result<()> {
        let tape = Tape::new();
        let bound = self.models.bind(&tape, false, false);
        let ps = Particles {
            states: tape.constant(std::mem::take(&mut self.states)),
            log_w: tape.constant(std::mem::take(&mut self.log_w)),
            n: self.n,
        };
        let io = tape.constant(io_matrix(&[sample]));
        let eps = tape.constant(gaussian_matrix(rng, self.n, NOISE_DIM));
        let next = filter_step(&bound, ps, io, eps, rng)?;
        self.states = next.states.value();
        self.log_w = next.log_w.value();
        Ok(())
    }

    pub fn estimate(&self) -> CubeState {
        estimate(&self.states, &self.log_w.mapv(f64::exp))
    }

    pub fn states(&self) -> &Matrix {
        &self.states
    }

    /// Filters a whole window and returns the estimate after every step.
    pub fn run<R: Rng + ?Sized>(&mut self, window: Window<'_>, rng: &mut R) -> Result<Vec<CubeState>> {
        self.reset(&window.initial, rng);
        let mut out = Vec::with_capacity(window.steps.len());
        for s in window.steps {
            self.step(s, rng)?;
            out.push(self.estimate());
        }
        Ok(out)
    }
}

impl StateEstimator for ParticleFilter {
    fn start(&mut self, initial: &CubeState, rng: &mut ChaCha8Rng) {
        self.reset(initial, rng);
    }

    fn observe(&mut self, samples: &[EstimatorSample], rng: &mut ChaCha8Rng) -> Result<CubeState> {
        for s in samples {
            self.step(s, rng)?;
        }
        Ok(self.estimate())
    }
}
