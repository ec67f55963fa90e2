//! Surrogate hand–cube environment.
//!
//! Four 3-link fingers hang from a downward-facing palm and hold the cube by
//! fingertip point contacts. Joints are impedance controlled towards a
//! low-pass filtered target; the cube is a free rigid body under gravity and
//! small random wrenches. Physics runs at 1 kHz, the policy at 10 Hz and the
//! state estimator at 100 Hz.

pub mod domain;
pub mod hand;
pub mod log;
pub mod termination;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use domain::{effective_spinning_friction, sample_domain, DomainConfig, DomainOverrides, NoiseConfig};
pub use hand::{Finger, FingerPose, JOINTS_PER_FINGER, NUM_FINGERS, NUM_JOINTS};
pub use termination::{check_termination, EpisodeHistory, Event};

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::rotations::{random_unit_vector, OctahedralGroup, Rotation};

pub type JointVec = [f64; NUM_JOINTS];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CubeState {
    pub x: Vec3,
    pub r: Rotation,
    pub v: Vec3,
    pub w: Vec3,
}

impl CubeState {
    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.r.is_finite() && self.v.is_finite() && self.w.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandState {
    pub q: JointVec,
    pub qdot: JointVec,
    /// Passive distal joints, equal to the corresponding `q3`.
    pub q4: [f64; NUM_FINGERS],
}

impl HandState {
    pub fn from_q(q: JointVec) -> Self {
        let mut h = Self {
            q,
            qdot: [0.0; NUM_JOINTS],
            q4: [0.0; NUM_FINGERS],
        };
        h.sync_passive();
        h
    }

    fn sync_passive(&mut self) {
        for f in 0..NUM_FINGERS {
            self.q4[f] = self.q[f * JOINTS_PER_FINGER + 2];
        }
    }

    pub fn finger(&self, f: usize) -> ([f64; 3], [f64; 3]) {
        let o = f * JOINTS_PER_FINGER;
        (
            [self.q[o], self.q[o + 1], self.q[o + 2]],
            [self.qdot[o], self.qdot[o + 1], self.qdot[o + 2]],
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub q_bar: JointVec,
    pub q_tilde_prev: JointVec,
    pub kp: f64,
    pub kd: f64,
    pub tau_max: f64,
    pub alpha: f64,
}

/// Maps a policy output to new joint targets.
///
/// The action is an offset relative to the measured joint angles, scaled so
/// that `±1` corresponds to the torque limit, clipped to the joint range and
/// low-pass filtered into `q_bar`.
pub fn apply_action(ctrl: &ControllerState, q_measured: &JointVec, a: &[f64; NUM_JOINTS]) -> ControllerState {
    let mut next = ctrl.clone();
    let scale = ctrl.tau_max / ctrl.kp;
    for j in 0..NUM_JOINTS {
        let tilde = (q_measured[j] + a[j].clamp(-1.0, 1.0) * scale).clamp(hand::q_min(j), hand::q_max(j));
        next.q_tilde_prev[j] = tilde;
        next.q_bar[j] = ctrl.alpha * ctrl.q_bar[j] + (1.0 - ctrl.alpha) * tilde;
    }
    next
}

/// Numerical and contact parameters of the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub dt: f64,
    pub substeps: usize,
    /// Substeps between estimator samples.
    pub estimator_every: usize,
    pub contact_stiffness: f64,
    pub contact_damping: f64,
    pub tangential_stiffness: f64,
    pub tangential_damping: f64,
    pub torsional_stiffness: f64,
    pub torsional_damping: f64,
    pub tau_max: f64,
    pub alpha: f64,
    /// Squeeze depth of the scripted grasp inside each side face, m.
    pub squeeze: f64,
    pub close_time: f64,
    pub settle_time: f64,
    pub max_reset_attempts: usize,
    pub orientation_jitter: f64,
    pub position_jitter: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            substeps: 100,
            estimator_every: 10,
            contact_stiffness: 5000.0,
            contact_damping: 8.0,
            tangential_stiffness: 2000.0,
            tangential_damping: 4.0,
            torsional_stiffness: 0.5,
            torsional_damping: 1e-3,
            tau_max: 0.5,
            alpha: 0.5,
            squeeze: 0.012,
            close_time: 0.3,
            settle_time: 0.5,
            max_reset_attempts: 10,
            orientation_jitter: 0.1,
            position_jitter: 0.005,
        }
    }
}

/// Stick-slip memory of one fingertip contact.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
struct TipContact {
    active: bool,
    /// Elastic tangential displacement, world frame.
    slip: Vec3,
    /// Elastic twist about the normal.
    twist: f64,
    /// Last normal force magnitude, N.
    normal: f64,
}

/// One 100 Hz estimator sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSample {
    /// Measured joint angles (with sensor offsets).
    pub q: JointVec,
    pub qdot: JointVec,
    /// Commanded (filtered) joint targets.
    pub u: JointVec,
    pub cube: CubeState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub hand: HandState,
    pub cube_true: CubeState,
    pub event: Event,
    pub contacts: usize,
    #[serde(skip)]
    pub samples: Vec<EstimatorSample>,
}

/// Work-energy bookkeeping over an episode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub initial: f64,
    pub current: f64,
    pub actuator_work: f64,
    pub perturbation_work: f64,
    /// Largest `ΔE − W_act − W_pert` seen so far.
    pub max_excess: f64,
}

impl EnergyLedger {
    pub fn excess(&self) -> f64 {
        self.current - self.initial - self.actuator_work - self.perturbation_work
    }
}

/// Largest friction-cone violations seen so far (≤ 0 means respected).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConeStats {
    pub lateral: f64,
    pub spin: f64,
}

impl Default for ConeStats {
    fn default() -> Self {
        Self {
            lateral: f64::NEG_INFINITY,
            spin: f64::NEG_INFINITY,
        }
    }
}

pub struct Env {
    cfg: DomainConfig,
    params: SimParams,
    fingers: [Finger; NUM_FINGERS],
    hand: HandState,
    cube: CubeState,
    ctrl: ControllerState,
    contacts: [TipContact; NUM_FINGERS],
    rng: ChaCha8Rng,
    force: Vec3,
    torque: Vec3,
    /// Cube held by the reset support.
    supported: bool,
    ledger: EnergyLedger,
    cone: ConeStats,
    history: EpisodeHistory,
    goal: Rotation,
    n_contacts: usize,
}

impl Env {
    pub fn new(cfg: DomainConfig, params: SimParams, seed: u64) -> Self {
        let ctrl = ControllerState {
            q_bar: [0.0; NUM_JOINTS],
            q_tilde_prev: [0.0; NUM_JOINTS],
            kp: cfg.kp,
            kd: cfg.kd,
            tau_max: params.tau_max,
            alpha: params.alpha,
        };
        Self {
            cfg,
            params,
            fingers: Finger::all(),
            hand: HandState::from_q([0.0; NUM_JOINTS]),
            cube: CubeState::default(),
            ctrl,
            contacts: [TipContact::default(); NUM_FINGERS],
            rng: ChaCha8Rng::seed_from_u64(seed),
            force: Vec3::ZERO,
            torque: Vec3::ZERO,
            supported: true,
            ledger: EnergyLedger::default(),
            cone: ConeStats::default(),
            history: EpisodeHistory::new(),
            goal: Rotation::IDENTITY,
            n_contacts: 0,
        }
    }

    pub fn cfg(&self) -> &DomainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn hand(&self) -> &HandState {
        &self.hand
    }

    pub fn cube(&self) -> &CubeState {
        &self.cube
    }

    pub fn ctrl(&self) -> &ControllerState {
        &self.ctrl
    }

    pub fn ledger(&self) -> &EnergyLedger {
        &self.ledger
    }

    pub fn cone_stats(&self) -> &ConeStats {
        &self.cone
    }

    pub fn history(&self) -> &EpisodeHistory {
        &self.history
    }

    pub fn goal(&self) -> Rotation {
        self.goal
    }

    pub fn contacts(&self) -> usize {
        self.n_contacts
    }

    /// Normal force at each fingertip (0 without contact), N.
    pub fn normal_forces(&self) -> [f64; NUM_FINGERS] {
        self.contacts.map(|c| if c.active { c.normal } else { 0.0 })
    }

    /// Switches the goal and restarts the per-goal clock.
    pub fn set_goal(&mut self, goal: Rotation) {
        self.goal = goal;
        self.history.new_goal();
    }

    pub fn set_alpha(&mut self, alpha: f64) {
        self.ctrl.alpha = alpha;
        self.params.alpha = alpha;
    }

    /// Overrides the joint targets directly (scripted motions, tests).
    pub fn command(&mut self, q_bar: JointVec) {
        self.ctrl.q_bar = q_bar;
        self.ctrl.q_tilde_prev = q_bar;
    }

    /// The action that re-issues the current joint targets.
    pub fn hold_action(&self) -> JointVec {
        let q = self.measured_q();
        let c = &self.ctrl;
        std::array::from_fn(|j| ((c.q_bar[j] - q[j]) * c.kp / c.tau_max).clamp(-1.0, 1.0))
    }

    /// Joint angles as reported by the (offset) sensors.
    pub fn measured_q(&self) -> JointVec {
        let mut q = self.hand.q;
        for (qj, off) in q.iter_mut().zip(self.cfg.q_offset) {
            *qj += off;
        }
        q
    }

    /// Places the cube, closes the hand and lets the grasp settle.
    pub fn reset(&mut self) -> Result<StepResult> {
        for _ in 0..self.params.max_reset_attempts {
            if self.try_reset()? {
                self.ledger = EnergyLedger::default();
                self.cone = ConeStats::default();
                let e = self.energy();
                self.ledger.initial = e;
                self.ledger.current = e;
                self.history = EpisodeHistory::new();
                return Ok(self.result(Event::None, Vec::new()));
            }
        }
        Err(Error::ResetFailed {
            attempts: self.params.max_reset_attempts,
        })
    }

    fn try_reset(&mut self) -> Result<bool> {
        let p = self.params.clone();
        let group = OctahedralGroup::get();
        let base = match self.cfg.start_orientation {
            Some(r) => r,
            None => group.elements()[self.rng.gen_range(0..group.len())],
        };
        let jitter = Rotation::from_axis_angle(
            random_unit_vector(&mut self.rng),
            self.rng.gen::<f64>() * p.orientation_jitter,
        );
        let offset = random_unit_vector(&mut self.rng) * (self.rng.gen::<f64>() * p.position_jitter);
        self.cube = CubeState {
            x: offset,
            r: jitter * base,
            v: Vec3::ZERO,
            w: Vec3::ZERO,
        };
        self.goal = base;
        self.contacts = [TipContact::default(); NUM_FINGERS];
        self.force = Vec3::ZERO;
        self.torque = Vec3::ZERO;
        self.supported = true;

        // Fingertip targets on the side faces, from outside to squeezed.
        let half = self.cfg.cube_size / 2.0;
        let mut open = [0.0; NUM_JOINTS];
        let mut closed = [0.0; NUM_JOINTS];
        for (f, finger) in self.fingers.iter().enumerate() {
            let out = -finger.inward;
            let surface = out * (half + hand::TIP_RADIUS);
            let qo = hand::solve_ik(finger, surface + out * 0.015, [0.0, 0.5, 0.5]);
            let qc = hand::solve_ik(finger, surface - out * p.squeeze, qo);
            open[f * 3..f * 3 + 3].copy_from_slice(&qo);
            closed[f * 3..f * 3 + 3].copy_from_slice(&qc);
        }
        self.hand = HandState::from_q(open);
        self.ctrl.kp = self.cfg.kp;
        self.ctrl.kd = self.cfg.kd;
        self.ctrl.tau_max = p.tau_max;
        self.ctrl.alpha = p.alpha;

        let close_steps = (p.close_time / p.dt).round() as usize;
        for k in 0..close_steps {
            let s = ((k + 1) as f64 / (0.7 * close_steps as f64)).min(1.0);
            let mut target = [0.0; NUM_JOINTS];
            for j in 0..NUM_JOINTS {
                target[j] = open[j] + s * (closed[j] - open[j]);
            }
            self.command(target);
            self.substep(false)?;
        }
        if self.n_contacts < NUM_FINGERS {
            return Ok(false);
        }
        self.supported = false;
        let settle = (p.settle_time / p.dt).round() as usize;
        for _ in 0..settle {
            self.substep(false)?;
        }
        let c = &self.cube;
        let still = c.v.norm() < 1e-3 && c.w.norm() * self.cfg.cube_size / 2.0 < 1e-3;
        Ok(
            still
                && self.n_contacts >= 3
                && c.x.z > termination::DROP_HEIGHT
                && c.x.norm() <= termination::MAX_DISTANCE,
        )
    }

    /// One policy period: sticky action, controller update, 100 substeps.
    pub fn step(&mut self, action: &[f64; NUM_JOINTS]) -> Result<StepResult> {
        let sticky = self.rng.gen::<f64>() < self.cfg.sticky_prob;
        if !sticky {
            self.ctrl = apply_action(&self.ctrl, &self.measured_q(), action);
        }
        self.advance()
    }

    /// One policy period with the current targets held.
    pub fn advance(&mut self) -> Result<StepResult> {
        let fdist = Normal::new(0.0, self.cfg.perturb_force.max(0.0)).unwrap();
        let tdist = Normal::new(0.0, self.cfg.perturb_torque.max(0.0)).unwrap();
        self.force = Vec3::new(
            fdist.sample(&mut self.rng),
            fdist.sample(&mut self.rng),
            fdist.sample(&mut self.rng),
        );
        self.torque = Vec3::new(
            tdist.sample(&mut self.rng),
            tdist.sample(&mut self.rng),
            tdist.sample(&mut self.rng),
        );
        let mut samples = Vec::with_capacity(self.params.substeps / self.params.estimator_every);
        for k in 0..self.params.substeps {
            self.substep(true)?;
            if (k + 1) % self.params.estimator_every == 0 {
                samples.push(EstimatorSample {
                    q: self.measured_q(),
                    qdot: self.hand.qdot,
                    u: self.ctrl.q_bar,
                    cube: self.cube,
                });
            }
        }
        self.ledger.current = self.energy();
        self.ledger.max_excess = self.ledger.max_excess.max(self.ledger.excess());
        self.history.push(&self.cube);
        let event = check_termination(&self.cube, self.goal, &self.history);
        Ok(self.result(event, samples))
    }

    fn result(&self, event: Event, samples: Vec<EstimatorSample>) -> StepResult {
        StepResult {
            hand: self.hand.clone(),
            cube_true: self.cube,
            event,
            contacts: self.n_contacts,
            samples,
        }
    }

    fn cube_inertia(&self) -> f64 {
        self.cfg.cube_mass * self.cfg.cube_size * self.cfg.cube_size / 6.0
    }

    fn gravity(&self) -> f64 {
        self.cfg.gravity_scale * 9.81
    }

    /// Closest point of the cube surface to `p`: (contact point, outward normal, signed gap).
    fn closest_on_cube(&self, p: Vec3) -> (Vec3, Vec3, f64) {
        let h = self.cfg.cube_size / 2.0;
        let local = self.cube.r.inverse_rotate(p - self.cube.x);
        let clamped = local.map(|v| v.clamp(-h, h));
        let (point, normal, gap) = if clamped != local {
            let d = local - clamped;
            let n = d.norm();
            (clamped, d / n, n)
        } else {
            let mut axis = 0;
            for k in 1..3 {
                if h - local[k].abs() < h - local[axis].abs() {
                    axis = k;
                }
            }
            let sign = if local[axis] >= 0.0 { 1.0 } else { -1.0 };
            let mut point = local;
            point[axis] = sign * h;
            let mut normal = Vec3::ZERO;
            normal[axis] = sign;
            (point, normal, -(h - local[axis].abs()))
        };
        (self.cube.x + self.cube.r.rotate(point), self.cube.r.rotate(normal), gap)
    }

    fn cube_corners(&self) -> [Vec3; 8] {
        let h = self.cfg.cube_size / 2.0;
        let mut out = [Vec3::ZERO; 8];
        for (i, c) in out.iter_mut().enumerate() {
            let l = Vec3::new(
                if i & 1 == 0 { -h } else { h },
                if i & 2 == 0 { -h } else { h },
                if i & 4 == 0 { -h } else { h },
            );
            *c = self.cube.x + self.cube.r.rotate(l);
        }
        out
    }

    /// Mechanical energy including the elastic energy stored in contacts.
    pub fn energy(&self) -> f64 {
        let m = self.cfg.cube_mass;
        let mut e = 0.5 * m * self.cube.v.norm_squared()
            + 0.5 * self.cube_inertia() * self.cube.w.norm_squared()
            + m * self.gravity() * self.cube.x.z;
        for j in 0..NUM_JOINTS {
            e += 0.5 * hand::JOINT_INERTIA[j % 3] * self.hand.qdot[j] * self.hand.qdot[j];
        }
        let p = &self.params;
        for (f, finger) in self.fingers.iter().enumerate() {
            let (q, _) = self.hand.finger(f);
            let tip = finger.pose(q).tip;
            let (_, _, gap) = self.closest_on_cube(tip);
            let pen = hand::TIP_RADIUS - gap;
            if pen > 0.0 {
                e += 0.5 * p.contact_stiffness * pen * pen;
            }
            let c = &self.contacts[f];
            if c.active {
                e += 0.5 * p.tangential_stiffness * c.slip.norm_squared()
                    + 0.5 * p.torsional_stiffness * c.twist * c.twist;
            }
        }
        for corner in self.cube_corners() {
            let pen = corner.z - hand::PALM_HEIGHT;
            if pen > 0.0 {
                e += 0.5 * p.contact_stiffness * pen * pen;
            }
        }
        e
    }

    fn substep(&mut self, perturb: bool) -> Result<()> {
        let p = self.params.clone();
        let dt = p.dt;
        let mu = self.cfg.eta_lat;
        let mu_spin = effective_spinning_friction(&self.cfg);
        let m = self.cfg.cube_mass;
        let inertia = self.cube_inertia();

        let mut cube_force = Vec3::new(0.0, 0.0, -m * self.gravity());
        let mut cube_torque = Vec3::ZERO;
        if perturb {
            cube_force += self.force;
            cube_torque += self.torque;
        }

        // Joint torques from the impedance controller.
        let q_meas = self.measured_q();
        let mut tau_motor = [0.0; NUM_JOINTS];
        for j in 0..NUM_JOINTS {
            tau_motor[j] = (self.ctrl.kp * (self.ctrl.q_bar[j] - q_meas[j]) - self.ctrl.kd * self.hand.qdot[j])
                .clamp(-self.ctrl.tau_max, self.ctrl.tau_max);
        }
        let mut tau = tau_motor;

        let mut n_contacts = 0;
        for f in 0..NUM_FINGERS {
            let (q, qd) = self.hand.finger(f);
            let pose = self.fingers[f].pose(q);
            let (point, normal, gap) = self.closest_on_cube(pose.tip);
            let pen = hand::TIP_RADIUS - gap;
            let contact = &mut self.contacts[f];
            if pen <= 0.0 {
                *contact = TipContact::default();
                continue;
            }
            let arm = point - self.cube.x;
            let v_rel = pose.tip_velocity(qd) - (self.cube.v + self.cube.w.cross(arm));
            let rate = -v_rel.dot(normal);
            let fn_mag = (p.contact_stiffness * pen + p.contact_damping * rate).max(0.0);
            if !contact.active {
                *contact = TipContact {
                    active: true,
                    ..Default::default()
                };
            }
            n_contacts += 1;

            // Tangential stick-slip spring capped at the friction cone.
            let vt = v_rel - normal * v_rel.dot(normal);
            let mut slip = contact.slip + vt * dt;
            slip -= normal * slip.dot(normal);
            let mut ft = slip * p.tangential_stiffness + vt * p.tangential_damping;
            let cap = mu * fn_mag;
            let ft_norm = ft.norm();
            if ft_norm > cap {
                let dir = ft / ft_norm;
                ft = dir * cap;
                slip = dir * (cap / p.tangential_stiffness);
            }
            contact.slip = slip;

            // Torsion about the normal, capped by spinning friction.
            let spin_rel = (pose.tip_angular_velocity(qd) - self.cube.w).dot(normal);
            let mut twist = contact.twist + spin_rel * dt;
            let mut tz = p.torsional_stiffness * twist + p.torsional_damping * spin_rel;
            let tcap = mu_spin * fn_mag;
            if tz.abs() > tcap {
                tz = tz.signum() * tcap;
                twist = tz / p.torsional_stiffness;
            }
            contact.twist = twist;
            contact.normal = fn_mag;

            self.cone.lateral = self.cone.lateral.max(ft.norm() - cap);
            self.cone.spin = self.cone.spin.max(tz.abs() - tcap);

            // Force and torque on the cube; the fingertip gets the reaction.
            let f_cube = ft - normal * fn_mag;
            let t_cube = normal * tz;
            cube_force += f_cube;
            cube_torque += arm.cross(f_cube) + t_cube;
            let tau_tip = pose.transpose_map(-f_cube, -t_cube);
            for k in 0..3 {
                tau[f * 3 + k] += tau_tip[k];
            }
        }
        self.n_contacts = n_contacts;

        // Frictionless palm plane above the cube.
        for corner in self.cube_corners() {
            let pen = corner.z - hand::PALM_HEIGHT;
            if pen > 0.0 {
                let arm = corner - self.cube.x;
                let vz = (self.cube.v + self.cube.w.cross(arm)).z;
                let fz = (p.contact_stiffness * pen + p.contact_damping * vz).max(0.0);
                let fc = Vec3::new(0.0, 0.0, -fz);
                cube_force += fc;
                cube_torque += arm.cross(fc);
            }
        }

        // Semi-implicit Euler for the fingers.
        let mut work_act = 0.0;
        for j in 0..NUM_JOINTS {
            let old = self.hand.qdot[j];
            let mut qd = old + tau[j] / hand::JOINT_INERTIA[j % 3] * dt;
            work_act += tau_motor[j] * 0.5 * (old + qd) * dt;
            let mut q = self.hand.q[j] + qd * dt;
            let (lo, hi) = (hand::q_min(j), hand::q_max(j));
            if q < lo || q > hi {
                q = q.clamp(lo, hi);
                qd = 0.0;
            }
            self.hand.q[j] = q;
            self.hand.qdot[j] = qd;
        }
        self.hand.sync_passive();
        self.ledger.actuator_work += work_act;

        // The cube, unless the reset support holds it.
        if !self.supported {
            let v_old = self.cube.v;
            let w_old = self.cube.w;
            self.cube.v += cube_force * (dt / m);
            self.cube.w += cube_torque * (dt / inertia);
            if perturb {
                self.ledger.perturbation_work +=
                    (self.force.dot(v_old + self.cube.v) + self.torque.dot(w_old + self.cube.w)) * 0.5 * dt;
            }
            self.cube.x += self.cube.v * dt;
            self.cube.r = Rotation::from_rotvec(self.cube.w * dt) * self.cube.r;
        }
        if !(self.cube.is_finite() && self.hand.q.iter().chain(&self.hand.qdot).all(|v| v.is_finite())) {
            return Err(Error::SimulationDiverged(format!(
                "non-finite state, cube {:?}",
                self.cube
            )));
        }
        Ok(())
    }
}
