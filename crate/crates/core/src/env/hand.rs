//! Kinematics of the four-finger surrogate hand.
//!
//! The palm faces down at height [`PALM_HEIGHT`]. Finger `i` is mounted on
//! the palm edge at angle `i·π/2` and points down. `q1` spreads the finger
//! about its inward axis, `q2` and `q3` flex it towards the palm centre and
//! the passive distal joint copies `q3`.

use std::f64::consts::FRAC_PI_2;

use crate::math::Vec3;

pub const NUM_FINGERS: usize = 4;
pub const JOINTS_PER_FINGER: usize = 3;
pub const NUM_JOINTS: usize = NUM_FINGERS * JOINTS_PER_FINGER;

pub const LINKS: [f64; 3] = [0.05, 0.04, 0.03];
pub const PALM_SIDE: f64 = 0.12;
pub const PALM_HEIGHT: f64 = 0.09;
/// Outward tilt of the first link at `q2 = 0`, rad.
pub const MOUNT_TILT: f64 = 0.7;
pub const TIP_RADIUS: f64 = 0.008;
pub const Q_MIN: [f64; JOINTS_PER_FINGER] = [-0.2, -0.1, -0.1];
pub const Q_MAX: [f64; JOINTS_PER_FINGER] = [1.4, 1.5, 1.5];
/// Diagonal joint inertias, kg·m².
pub const JOINT_INERTIA: [f64; JOINTS_PER_FINGER] = [1e-3, 1e-3, 5e-4];

pub fn q_min(j: usize) -> f64 {
    Q_MIN[j % JOINTS_PER_FINGER]
}

pub fn q_max(j: usize) -> f64 {
    Q_MAX[j % JOINTS_PER_FINGER]
}

/// Mounting frame of one finger.
#[derive(Debug, Clone, Copy)]
pub struct Finger {
    pub base: Vec3,
    /// Horizontal unit vector from the base towards the palm centre.
    pub inward: Vec3,
}

impl Finger {
    pub fn new(index: usize) -> Self {
        let phi = index as f64 * FRAC_PI_2;
        let out = Vec3::new(phi.cos(), phi.sin(), 0.0);
        Self {
            base: out * (PALM_SIDE / 2.0) + Vec3::Z * PALM_HEIGHT,
            inward: -out,
        }
    }

    pub fn all() -> [Finger; NUM_FINGERS] {
        [0, 1, 2, 3].map(Finger::new)
    }

    /// Forward kinematics with tip Jacobians.
    pub fn pose(&self, q: [f64; 3]) -> FingerPose {
        let (s1, c1) = q[0].sin_cos();
        // Spread rotates the down direction about the inward axis.
        let down = -Vec3::Z * c1 + self.inward.cross(-Vec3::Z) * s1;
        let flex = down.cross(self.inward);
        let dir = |theta: f64| {
            let (s, c) = theta.sin_cos();
            down * c + self.inward * s
        };
        let j2 = self.base;
        let t2 = q[1] - MOUNT_TILT;
        let j3 = j2 + dir(t2) * LINKS[0];
        let j4 = j3 + dir(t2 + q[2]) * LINKS[1];
        let tip = j4 + dir(t2 + 2.0 * q[2]) * LINKS[2];
        let linear = [
            self.inward.cross(tip - self.base),
            flex.cross(tip - j2),
            flex.cross(tip - j3) + flex.cross(tip - j4),
        ];
        let angular = [self.inward, flex, flex * 2.0];
        FingerPose {
            tip,
            joints: [j2, j3, j4],
            linear,
            angular,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FingerPose {
    pub tip: Vec3,
    /// Flexion joint positions (q2, q3, passive q4).
    pub joints: [Vec3; 3],
    /// Columns ∂tip/∂q.
    pub linear: [Vec3; 3],
    /// Columns ∂ω_tip/∂q̇.
    pub angular: [Vec3; 3],
}

impl FingerPose {
    pub fn tip_velocity(&self, qd: [f64; 3]) -> Vec3 {
        self.linear[0] * qd[0] + self.linear[1] * qd[1] + self.linear[2] * qd[2]
    }

    pub fn tip_angular_velocity(&self, qd: [f64; 3]) -> Vec3 {
        self.angular[0] * qd[0] + self.angular[1] * qd[1] + self.angular[2] * qd[2]
    }

    /// Joint torques produced by a force and torque applied at the tip.
    pub fn transpose_map(&self, force: Vec3, torque: Vec3) -> [f64; 3] {
        [0, 1, 2].map(|j| self.linear[j].dot(force) + self.angular[j].dot(torque))
    }
}

/// Damped least-squares inverse kinematics for the tip position.
pub fn solve_ik(finger: &Finger, target: Vec3, seed: [f64; 3]) -> [f64; 3] {
    let mut q = seed;
    let lambda2 = 1e-6;
    for _ in 0..200 {
        let pose = finger.pose(q);
        let e = target - pose.tip;
        if e.norm() < 1e-9 {
            break;
        }
        // J Jᵀ + λ² I, then dq = Jᵀ (J Jᵀ + λ² I)⁻¹ e
        let cols = pose.linear;
        let mut a = [[0.0; 3]; 3];
        for (r, row) in a.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| cols[k][r] * cols[k][c]).sum::<f64>();
                if r == c {
                    *v += lambda2;
                }
            }
        }
        let y = solve3(a, e);
        for (j, qj) in q.iter_mut().enumerate() {
            *qj = (*qj + cols[j].dot(y)).clamp(Q_MIN[j], Q_MAX[j]);
        }
    }
    q
}

fn solve3(a: [[f64; 3]; 3], b: Vec3) -> Vec3 {
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(a);
    let mut x = Vec3::ZERO;
    for c in 0..3 {
        let mut m = a;
        for r in 0..3 {
            m[r][c] = b[r];
        }
        x[c] = det(m) / d;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_finger_hangs_below_base() {
        let f = Finger::new(0);
        let p = f.pose([0.0, MOUNT_TILT, 0.0]);
        let len: f64 = LINKS.iter().sum();
        assert!((p.tip - (f.base - Vec3::Z * len)).norm() < 1e-12);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let f = Finger::new(1);
        let q = [0.3, 0.4, 0.7];
        let pose = f.pose(q);
        for j in 0..3 {
            let mut qp = q;
            let mut qm = q;
            qp[j] += 1e-6;
            qm[j] -= 1e-6;
            let fd = (f.pose(qp).tip - f.pose(qm).tip) / 2e-6;
            assert!((fd - pose.linear[j]).norm() < 1e-8);
        }
    }

    #[test]
    fn ik_reaches_side_face() {
        for (i, f) in Finger::all().iter().enumerate() {
            let target = -f.inward * 0.045;
            let q = solve_ik(f, target, [0.0, 0.5, 0.5]);
            assert!((f.pose(q).tip - target).norm() < 1e-6, "finger {i}: {q:?}");
        }
    }
}
