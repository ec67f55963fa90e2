//! Per-axis estimate error after a fixed horizon of in-loop control.
//!
//! The fingertips touch only the side faces, so joint signals constrain the
//! horizontal position far better than the height; the vertical error is
//! expected to dominate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{sample_domain, DomainOverrides};
use crate::error::{Error, Result};
use crate::filter::{FilterTrainer, InitSpread, ParticleFilter};
use crate::policy::{PolicyNet, Worker, WorkerSettings};
use crate::rotations::{OctahedralGroup, Rotation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeightReport {
    pub horizon_steps: u32,
    /// Absolute per-axis position error at the horizon, one entry per episode.
    pub errors: Vec<[f64; 3]>,
    /// Episodes that ended before the horizon and were replaced.
    pub discarded: usize,
    pub median_error: [f64; 3],
}

impl HeightReport {
    pub fn height_dominates(&self) -> bool {
        let m = self.median_error;
        m[2] > m[0] && m[2] > m[1]
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs `episodes` filter-in-the-loop episodes from the identity pose and
/// records the estimate error after `horizon_steps` policy steps. Episodes
/// that fail earlier are replaced, up to four times the requested count.
pub fn height_ambiguity(
    policy: &PolicyNet,
    filter: &FilterTrainer,
    particles: usize,
    episodes: usize,
    horizon_steps: u32,
    seed: u64,
) -> Result<HeightReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let overrides = DomainOverrides {
        start_orientation: Some(Rotation::IDENTITY),
        gravity_scale: Some(1.0),
        ..DomainOverrides::default()
    };
    let settings = WorkerSettings {
        overrides: overrides.clone(),
        ..WorkerSettings::default()
    };
    let group = OctahedralGroup::get();
    let mut errors = Vec::with_capacity(episodes);
    let mut discarded = 0;
    while errors.len() < episodes {
        if discarded > 3 * episodes {
            return Err(Error::Config(format!(
                "only {} of {episodes} episodes lasted {horizon_steps} steps",
                errors.len()
            )));
        }
        let domain = sample_domain(&mut rng, &overrides)?;
        let goal = group.elements()[rng.gen_range(0..group.len())];
        let mut worker = Worker::new(0, rng.gen(), settings.clone());
        worker.set_estimator(Some(Box::new(ParticleFilter::new(
            filter.models.clone(),
            particles,
            InitSpread::RESET,
        ))));
        worker.begin(domain, goal)?;
        let mut alive = true;
        for _ in 0..horizon_steps {
            match worker.step(policy, true)? {
                Some(o) if !o.episode_end => {}
                _ => {
                    alive = false;
                    break;
                }
            }
        }
        match (alive, worker.env(), worker.estimate()) {
            (true, Some(env), Some(est)) => {
                let d = est.x - env.cube().x;
                errors.push([d[0].abs(), d[1].abs(), d[2].abs()]);
            }
            _ => discarded += 1,
        }
    }
    let median_error = [0, 1, 2].map(|k| median(errors.iter().map(|e| e[k]).collect()));
    Ok(HeightReport {
        horizon_steps,
        errors,
        discarded,
        median_error,
    })
}
