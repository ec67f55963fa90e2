//! Policy and critic observations.
//!
//! The policy sees deployable signals only: noisy joint angles and either a
//! noisy copy of the cube pose or the estimator's prediction. The critic sees
//! the simulator's true state including the cube velocity.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::{CubeState, JointVec, NoiseConfig, NUM_JOINTS};
use crate::math::Vec3;
use crate::rotations::{perturb_rotation, reduce_symmetry, Rotation};

pub const STACK_LEN: usize = 5;
pub const POLICY_FRAME_DIM: usize = 3 * NUM_JOINTS + 4 + 3 + 4 + 4;
pub const Q_FRAME_DIM: usize = POLICY_FRAME_DIM + 3;
pub const POLICY_OBS_DIM: usize = STACK_LEN * POLICY_FRAME_DIM;
pub const Q_OBS_DIM: usize = STACK_LEN * Q_FRAME_DIM;

// Fixed input scaling so every feature is roughly unit sized.
const POS_SCALE: f64 = 50.0;
const VEL_SCALE: f64 = 10.0;
const ERR_SCALE: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Policy,
    Critic,
}

/// What the observation builder reads from the environment.
#[derive(Debug, Clone)]
pub struct Snapshot {
    /// True joint angles.
    pub q: JointVec,
    /// Joint angles as reported by the sensors (offsets included).
    pub q_measured: JointVec,
    /// Targets that were active during the previous period.
    pub q_bar_prev: JointVec,
    pub cube: CubeState,
    pub goal: Rotation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationFrame {
    pub q: JointVec,
    pub q_bar_prev: JointVec,
    pub ctrl_err: JointVec,
    pub goal: Rotation,
    pub cube_pos: Vec3,
    pub cube_rot_sym: Rotation,
    pub delta_rot: Rotation,
    /// Critic frames only.
    pub cube_vel: Option<Vec3>,
}

impl ObservationFrame {
    pub fn dim(&self) -> usize {
        if self.cube_vel.is_some() {
            Q_FRAME_DIM
        } else {
            POLICY_FRAME_DIM
        }
    }

    /// Appends the scaled features in fixed order.
    pub fn write(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.q);
        out.extend_from_slice(&self.q_bar_prev);
        out.extend(self.ctrl_err.iter().map(|e| e * ERR_SCALE));
        out.extend_from_slice(&self.goal.to_array());
        out.extend(self.cube_pos.to_array().iter().map(|p| p * POS_SCALE));
        out.extend_from_slice(&self.cube_rot_sym.to_array());
        out.extend_from_slice(&self.delta_rot.to_array());
        if let Some(v) = self.cube_vel {
            out.extend(v.to_array().iter().map(|p| p * VEL_SCALE));
        }
    }
}

/// Builds one frame. Critic frames ignore `est` and `noise` by construction.
pub fn build_observation<R: Rng + ?Sized>(
    snap: &Snapshot,
    role: Role,
    est: Option<&CubeState>,
    noise: &NoiseConfig,
    rng: &mut R,
) -> ObservationFrame {
    let (q, x, r, vel) = match role {
        Role::Critic => (snap.q, snap.cube.x, snap.cube.r, Some(snap.cube.v)),
        Role::Policy => {
            let mut q = snap.q_measured;
            if noise.q > 0.0 {
                let n = Normal::new(0.0, noise.q).unwrap();
                for v in q.iter_mut() {
                    *v += n.sample(rng);
                }
            }
            let (x, r) = match est {
                Some(e) => (e.x, e.r),
                None => {
                    let mut x = snap.cube.x;
                    if noise.x > 0.0 {
                        let n = Normal::new(0.0, noise.x).unwrap();
                        for k in 0..3 {
                            x[k] += n.sample(rng);
                        }
                    }
                    (x, perturb_rotation(snap.cube.r, noise.r, rng))
                }
            };
            (q, x, r, None)
        }
    };
    let mut ctrl_err = [0.0; NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        ctrl_err[j] = snap.q_bar_prev[j] - q[j];
    }
    ObservationFrame {
        q,
        q_bar_prev: snap.q_bar_prev,
        ctrl_err,
        goal: snap.goal,
        cube_pos: x,
        cube_rot_sym: reduce_symmetry(r),
        delta_rot: snap.goal.inverse() * r,
        cube_vel: vel,
    }
}

/// The last [`STACK_LEN`] frames, zero padded, newest last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationStack {
    frame_dim: usize,
    frames: VecDeque<Vec<f64>>,
}

impl ObservationStack {
    pub fn new(frame_dim: usize) -> Self {
        let mut s = Self {
            frame_dim,
            frames: VecDeque::with_capacity(STACK_LEN),
        };
        s.clear();
        s
    }

    pub fn clear(&mut self) {
        self.frames.clear();
        for _ in 0..STACK_LEN {
            self.frames.push_back(vec![0.0; self.frame_dim]);
        }
    }

    pub fn push(&mut self, frame: &ObservationFrame) {
        let mut v = Vec::with_capacity(self.frame_dim);
        frame.write(&mut v);
        assert_eq!(v.len(), self.frame_dim, "frame dimension mismatch");
        self.frames.pop_front();
        self.frames.push_back(v);
    }

    pub fn dim(&self) -> usize {
        self.frame_dim * STACK_LEN
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for f in &self.frames {
            out.extend_from_slice(f);
        }
        out
    }
}
