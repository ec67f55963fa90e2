//! Per-episode domain randomization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::NUM_JOINTS;
use crate::error::{Error, Result};
use crate::rotations::Rotation;

pub const Q_OFFSET_MAX: f64 = 0.04;
pub const ETA_LAT_RANGE: (f64, f64) = (0.81, 0.99);
pub const ETA_SPIN_RANGE: (f64, f64) = (2e-4, 2e-2);
pub const CUBE_MASS_RANGE: (f64, f64) = (0.08, 0.12);
pub const CUBE_SIZE_RANGE: (f64, f64) = (0.076, 0.084);
pub const KP_RANGE: (f64, f64) = (1.6, 2.4);
pub const KD_RANGE: (f64, f64) = (0.04, 0.06);

/// Standard deviations of the per-step observation noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Joint angles, rad.
    pub q: f64,
    /// Cube position per axis, m.
    pub x: f64,
    /// Cube orientation, rad (random axis, normal angle).
    pub r: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            q: 0.02,
            x: 0.01,
            r: 0.2,
        }
    }
}

impl NoiseConfig {
    pub const OFF: NoiseConfig = NoiseConfig { q: 0.0, x: 0.0, r: 0.0 };
}

/// One realization of every randomized quantity for an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainConfig {
    /// Sensor offset added to the true joint angles, rad.
    pub q_offset: [f64; NUM_JOINTS],
    pub eta_lat: f64,
    /// Spinning friction, N·m/N.
    pub eta_spin: f64,
    pub cube_mass: f64,
    pub cube_size: f64,
    pub sticky_prob: f64,
    pub gravity_scale: f64,
    pub kp: f64,
    pub kd: f64,
    pub noise: NoiseConfig,
    /// Random external wrench on the cube, per-axis std (N, N·m).
    pub perturb_force: f64,
    pub perturb_torque: f64,
    /// Start orientation; `None` draws a random cube rotation.
    pub start_orientation: Option<Rotation>,
}

/// Values pinned by the caller; everything left `None` is sampled.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainOverrides {
    pub q_offset: Option<[f64; NUM_JOINTS]>,
    pub eta_lat: Option<f64>,
    pub eta_spin: Option<f64>,
    pub cube_mass: Option<f64>,
    pub cube_size: Option<f64>,
    pub sticky_prob: Option<f64>,
    pub gravity_scale: Option<f64>,
    pub kp: Option<f64>,
    pub kd: Option<f64>,
    pub noise: Option<NoiseConfig>,
    pub perturb_force: Option<f64>,
    pub perturb_torque: Option<f64>,
    pub start_orientation: Option<Rotation>,
}

fn check(field: &str, value: f64, (lo, hi): (f64, f64)) -> Result<f64> {
    if value.is_finite() && value >= lo && value <= hi {
        Ok(value)
    } else {
        Err(Error::OutOfRange {
            field: field.to_string(),
            value,
            lo,
            hi,
        })
    }
}

fn pick<R: Rng + ?Sized>(rng: &mut R, field: &str, pinned: Option<f64>, range: (f64, f64)) -> Result<f64> {
    // Draw regardless of pinning so the stream does not depend on overrides.
    let drawn = rng.gen_range(range.0..=range.1);
    match pinned {
        Some(v) => check(field, v, range),
        None => Ok(drawn),
    }
}

/// Samples a domain; pinned values must lie in the sampled support.
pub fn sample_domain<R: Rng + ?Sized>(rng: &mut R, overrides: &DomainOverrides) -> Result<DomainConfig> {
    let mut q_offset = [0.0; NUM_JOINTS];
    for q in q_offset.iter_mut() {
        *q = rng.gen_range(-Q_OFFSET_MAX..=Q_OFFSET_MAX);
    }
    if let Some(pinned) = overrides.q_offset {
        for (i, &v) in pinned.iter().enumerate() {
            check(&format!("q_offset[{i}]"), v, (-Q_OFFSET_MAX, Q_OFFSET_MAX))?;
        }
        q_offset = pinned;
    }
    let eta_lat = pick(rng, "eta_lat", overrides.eta_lat, ETA_LAT_RANGE)?;
    let log_spin = rng.gen_range(ETA_SPIN_RANGE.0.ln()..=ETA_SPIN_RANGE.1.ln()).exp();
    let eta_spin = match overrides.eta_spin {
        Some(v) => check("eta_spin", v, ETA_SPIN_RANGE)?,
        None => log_spin,
    };
    let cube_mass = pick(rng, "cube_mass", overrides.cube_mass, CUBE_MASS_RANGE)?;
    let cube_size = pick(rng, "cube_size", overrides.cube_size, CUBE_SIZE_RANGE)?;
    let kp = pick(rng, "kp", overrides.kp, KP_RANGE)?;
    let kd = pick(rng, "kd", overrides.kd, KD_RANGE)?;
    let sticky_prob = check("sticky_prob", overrides.sticky_prob.unwrap_or(0.1), (0.0, 1.0))?;
    let gravity_scale = check("gravity_scale", overrides.gravity_scale.unwrap_or(1.0), (0.0, 1.0))?;
    let noise = overrides.noise.unwrap_or_default();
    for (field, v) in [("noise.q", noise.q), ("noise.x", noise.x), ("noise.r", noise.r)] {
        check(field, v, (0.0, f64::INFINITY))?;
    }
    let perturb_force = check("perturb_force", overrides.perturb_force.unwrap_or(0.2), (0.0, 10.0))?;
    let perturb_torque = check("perturb_torque", overrides.perturb_torque.unwrap_or(2e-3), (0.0, 0.1))?;
    Ok(DomainConfig {
        q_offset,
        eta_lat,
        eta_spin,
        cube_mass,
        cube_size,
        sticky_prob,
        gravity_scale,
        kp,
        kd,
        noise,
        perturb_force,
        perturb_torque,
        start_orientation: overrides.start_orientation,
    })
}

/// Torsional friction coefficient actually used at the fingertips.
pub fn effective_spinning_friction(cfg: &DomainConfig) -> f64 {
    cfg.eta_spin * cfg.eta_lat / 0.9
}

impl DomainConfig {
    /// The nominal, unrandomized domain.
    pub fn nominal() -> Self {
        Self {
            q_offset: [0.0; NUM_JOINTS],
            eta_lat: 0.9,
            eta_spin: 1e-3,
            cube_mass: 0.1,
            cube_size: 0.08,
            sticky_prob: 0.0,
            gravity_scale: 1.0,
            kp: 2.0,
            kd: 0.05,
            noise: NoiseConfig::default(),
            perturb_force: 0.0,
            perturb_torque: 0.0,
            start_orientation: Some(Rotation::IDENTITY),
        }
    }
}
