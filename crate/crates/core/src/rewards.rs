//! Reward functions: goal-distance reward, the telescoping progress reward,
//! and the progress reward with an estimation-error penalty.

use serde::{Deserialize, Serialize};

use crate::env::{CubeState, Event};
use crate::math::Vec3;
use crate::rotations::{distance, Rotation};

/// Weights of all three rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub lambda_theta: f64,
    pub eps_theta: f64,
    pub lambda_pos: f64,
    pub lambda_clip: f64,
    pub lambda_drop: f64,
    pub lambda_succ: f64,
    pub simple_theta: f64,
    pub simple_pos: f64,
    pub simple_clip: f64,
    pub est_pos: f64,
    pub est_phi: f64,
    pub est_clip: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda_theta: 1.0,
            eps_theta: 0.1,
            lambda_pos: 1e4,
            lambda_clip: 1.0,
            lambda_drop: -10.0,
            lambda_succ: 10.0,
            simple_theta: 5.0,
            simple_pos: 20.0,
            simple_clip: 0.25,
            est_pos: 100.0,
            est_phi: 1.0,
            est_clip: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Goal,
    Simple,
    Estimator,
}

impl RewardConfig {
    /// Dense reward on the remaining angle plus terminal bonuses.
    pub fn reward_goal(&self, theta: f64, x: Vec3, event: Event) -> f64 {
        let pos = (self.lambda_pos * x.norm().powi(4)).clamp(0.0, self.lambda_clip);
        let bonus = match event {
            Event::Dropped | Event::OutOfBounds => self.lambda_drop,
            Event::Success => self.lambda_succ,
            _ => 0.0,
        };
        self.lambda_theta / (theta + self.eps_theta) - pos + bonus
    }

    /// Progress reward; only the rotation gain is capped.
    pub fn reward_simple(&self, dtheta: f64, dx: f64) -> f64 {
        (-self.simple_theta * dtheta).min(self.simple_clip) - self.simple_pos * dx
    }

    /// Progress reward minus a capped penalty on the estimation error.
    pub fn reward_estimator(&self, r_s: f64, x_err: f64, phi: f64) -> f64 {
        r_s - (self.est_pos * x_err * x_err + self.est_phi * phi * phi).clamp(0.0, self.est_clip)
    }

    /// Reward of the transition `prev → cur` towards `goal`.
    ///
    /// `estimate` is required for [`RewardKind::Estimator`]; without it the
    /// penalty is zero.
    pub fn evaluate(
        &self,
        kind: RewardKind,
        prev: &CubeState,
        cur: &CubeState,
        goal: Rotation,
        event: Event,
        estimate: Option<&CubeState>,
    ) -> f64 {
        let theta = distance(goal, cur.r);
        match kind {
            RewardKind::Goal => self.reward_goal(theta, cur.x, event),
            RewardKind::Simple | RewardKind::Estimator => {
                let dtheta = theta - distance(goal, prev.r);
                let dx = cur.x.norm() - prev.x.norm();
                let r_s = self.reward_simple(dtheta, dx);
                match (kind, estimate) {
                    (RewardKind::Estimator, Some(est)) => {
                        self.reward_estimator(r_s, (est.x - cur.x).norm(), distance(est.r, cur.r))
                    }
                    _ => r_s,
                }
            }
        }
    }
}
