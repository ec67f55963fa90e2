//! Learned proposal and update models for the cube state.

use rand::Rng;
use serde::{Deserialize, Serialize};
use tactile_autograd::{concat_cols, Activation, BoundMlp, Matrix, Mlp, Tape, Var};

use super::particles::StepModel;
use crate::env::{CubeState, EstimatorSample, Finger, JOINTS_PER_FINGER, NUM_FINGERS, NUM_JOINTS};
use crate::math::Vec3;
use crate::rotations::Rotation;

/// Particle state row: position, quaternion (w, x, y, z), linear and angular velocity.
pub const STATE_DIM: usize = 13;
/// Filter period, s.
pub const FILTER_DT: f64 = 0.01;
/// Per-filter input features derived from z and u.
pub const IO_DIM: usize = 5 * NUM_JOINTS;
const STATE_FEATURES: usize = 18;
/// Noise channels of the proposal: Δx, Δv, Δw and the rotation increment.
pub const NOISE_DIM: usize = 12;
/// Physical size of one normalised unit of each increment channel.
const INCREMENT_SCALE: [f64; 4] = [1e-3, 2e-2, 0.3, 1e-2];
const INIT_LOG_SIGMA: f64 = -1.0;
const LOG_SIGMA_RANGE: (f64, f64) = (-8.0, 1.0);

pub fn state_row(s: &CubeState) -> [f64; STATE_DIM] {
    let q = s.r.to_array();
    [
        s.x.x, s.x.y, s.x.z, q[0], q[1], q[2], q[3], s.v.x, s.v.y, s.v.z, s.w.x, s.w.y, s.w.z,
    ]
}

pub fn state_from_row(r: &[f64]) -> CubeState {
    CubeState {
        x: Vec3::new(r[0], r[1], r[2]),
        r: Rotation::from_wxyz(r[3], r[4], r[5], r[6]),
        v: Vec3::new(r[7], r[8], r[9]),
        w: Vec3::new(r[10], r[11], r[12]),
    }
}

pub fn states_matrix(states: &[CubeState]) -> Matrix {
    let mut m = Matrix::zeros((states.len(), STATE_DIM));
    for (i, s) in states.iter().enumerate() {
        for (j, v) in state_row(s).into_iter().enumerate() {
            m[[i, j]] = v;
        }
    }
    m
}

/// Sensor and command features of one 100 Hz sample: joint angles,
/// velocities, targets, tracking error and fingertip positions.
pub fn io_features(s: &EstimatorSample) -> [f64; IO_DIM] {
    let mut f = [0.0; IO_DIM];
    for j in 0..NUM_JOINTS {
        f[j] = s.q[j];
        f[NUM_JOINTS + j] = 0.1 * s.qdot[j];
        f[2 * NUM_JOINTS + j] = s.u[j];
        f[3 * NUM_JOINTS + j] = 5.0 * (s.u[j] - s.q[j]);
    }
    for (i, finger) in Finger::all().iter().enumerate() {
        let k = i * JOINTS_PER_FINGER;
        let tip = finger.pose([s.q[k], s.q[k + 1], s.q[k + 2]]).tip;
        let base = 4 * NUM_JOINTS + 3 * i;
        f[base] = 20.0 * tip.x;
        f[base + 1] = 20.0 * tip.y;
        f[base + 2] = 20.0 * tip.z;
    }
    debug_assert_eq!(NUM_FINGERS * 3, NUM_JOINTS);
    f
}

/// Proposal `F` and update `G` networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterModels {
    pub proposal: Mlp,
    pub update: Mlp,
}

impl FilterModels {
    pub fn new<R: Rng + ?Sized>(hidden: &[usize], rng: &mut R) -> Self {
        let sizes = |out: usize| {
            let mut s = vec![STATE_FEATURES + IO_DIM];
            s.extend_from_slice(hidden);
            s.push(out);
            s
        };
        let mut proposal = Mlp::new(&sizes(2 * NOISE_DIM), Activation::Tanh, rng);
        let mut update = Mlp::new(&sizes(1), Activation::Tanh, rng);
        // Start close to the physics prior and to uniform weighting.
        proposal.scale_output(0.1);
        update.scale_output(0.1);
        Self { proposal, update }
    }

    pub fn hidden(&self) -> Vec<usize> {
        self.proposal.layers[..self.proposal.layers.len() - 1]
            .iter()
            .map(|l| l.outputs())
            .collect()
    }

    /// Binds both networks; frozen networks contribute no gradients.
    pub fn bind<'t>(&self, tape: &'t Tape, train_proposal: bool, train_update: bool) -> BoundModels<'t> {
        let b = |m: &Mlp, t: bool| if t { m.bind(tape) } else { m.bind_frozen(tape) };
        BoundModels {
            tape,
            proposal: b(&self.proposal, train_proposal),
            update: b(&self.update, train_update),
        }
    }
}

pub struct BoundModels<'t> {
    tape: &'t Tape,
    pub proposal: BoundMlp<'t>,
    pub update: BoundMlp<'t>,
}

impl<'t> BoundModels<'t> {
    fn features(&self, states: Var<'t>, io: Var<'t>) -> Var<'t> {
        let rows = states.shape().0;
        let q = states.cols(3, 7);
        let axis = |k: usize| {
            let mut m = Matrix::zeros((rows, 3));
            m.column_mut(k).fill(1.0);
            q.quat_rotate(self.tape.constant(m))
        };
        concat_cols(&[
            states.cols(0, 3).scale(50.0),
            axis(0),
            axis(1),
            axis(2),
            states.cols(7, 10).scale(10.0),
            states.cols(10, 13),
            io,
        ])
    }

    fn increment_scale(&self) -> Var<'t> {
        let mut m = Matrix::zeros((1, NOISE_DIM));
        for (k, s) in INCREMENT_SCALE.iter().enumerate() {
            for j in 0..3 {
                m[[0, 3 * k + j]] = *s;
            }
        }
        self.tape.constant(m)
    }
}

impl<'t> StepModel<'t> for BoundModels<'t> {
    fn noise_dim(&self) -> usize {
        NOISE_DIM
    }

    fn propose(&self, states: Var<'t>, io: Var<'t>, eps: Var<'t>) -> Var<'t> {
        let out = self.proposal.forward(self.features(states, io));
        let mu = out.cols(0, NOISE_DIM);
        let log_sigma = out
            .cols(NOISE_DIM, 2 * NOISE_DIM)
            .offset(INIT_LOG_SIGMA)
            .clamp(LOG_SIGMA_RANGE.0, LOG_SIGMA_RANGE.1);
        let d = (mu + log_sigma.exp() * eps) * self.increment_scale();
        let x = states.cols(0, 3);
        let q = states.cols(3, 7);
        let v = states.cols(7, 10);
        let w = states.cols(10, 13);
        let x1 = x + v.scale(FILTER_DT) + d.cols(0, 3);
        let v1 = v + d.cols(3, 6);
        let w1 = w + d.cols(6, 9);
        let turn = (w.scale(FILTER_DT) + d.cols(9, 12)).quat_exp();
        let q1 = turn.quat_mul(q).normalize_rows();
        concat_cols(&[x1, q1, v1, w1])
    }

    fn log_weight(&self, states: Var<'t>, io: Var<'t>) -> Var<'t> {
        self.update.forward(self.features(states, io))
    }
}
