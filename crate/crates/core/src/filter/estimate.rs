//! Point estimates from particle sets and the weighted state loss.

use serde::{Deserialize, Serialize};
use tactile_autograd::{concat_cols, Matrix, Var};

use super::model::{state_from_row, STATE_DIM};
use super::particles::{weighted_mean, Particles};
use crate::env::CubeState;
use crate::error::{Error, Result};
use crate::rotations::distance;

/// Component weights of the estimation loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterLossConfig {
    pub c_x: f64,
    pub c_r: f64,
    pub c_v: f64,
    pub c_w: f64,
}

impl Default for FilterLossConfig {
    fn default() -> Self {
        Self {
            c_x: 1.0,
            c_r: 100.0,
            c_v: 0.1,
            c_w: 0.1,
        }
    }
}

impl FilterLossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, c) in [
            ("c_x", self.c_x),
            ("c_r", self.c_r),
            ("c_v", self.c_v),
            ("c_w", self.c_w),
        ] {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} = {c} must be non-negative")));
            }
        }
        Ok(())
    }

    /// Weighted squared error of a single state.
    pub fn state_loss(&self, pred: &CubeState, truth: &CubeState) -> f64 {
        let phi = distance(pred.r, truth.r);
        self.c_x * (pred.x - truth.x).norm_squared()
            + self.c_r * phi * phi
            + self.c_v * (pred.v - truth.v).norm_squared()
            + self.c_w * (pred.w - truth.w).norm_squared()
    }
}

/// Mean weighted squared error over a predicted trajectory.
pub fn filter_loss(pred: &[CubeState], truth: &[CubeState], cfg: &FilterLossConfig) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions for {} true states",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred.iter().zip(truth).map(|(p, t)| cfg.state_loss(p, t)).sum();
    Ok(sum / pred.len() as f64)
}

fn quat_angle(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    2.0 * a.dot(&b).abs().min(1.0).acos()
}

/// Row index (within `quats`) of the weighted rotation medoid of each filter.
/// Ties go to the lowest index.
pub fn medoid_indices(quats: &Matrix, weights: &Matrix, n: usize) -> Vec<usize> {
    let rows = quats.nrows();
    let mut out = Vec::with_capacity(rows / n);
    for b in 0..rows / n {
        let base = b * n;
        let mut best = (f64::INFINITY, base);
        for i in 0..n {
            let qi = quats.row(base + i);
            let mut cost = 0.0;
            for j in 0..n {
                if i != j {
                    let a = quat_angle(qi, quats.row(base + j));
                    cost += weights[[base + j, 0]] * a * a;
                }
            }
            if cost < best.0 {
                best = (cost, base + i);
            }
        }
        out.push(best.1);
    }
    out
}

/// Point estimate of every filter as a tape value (filters × 13): weighted
/// means for position and velocities, weighted medoid for the rotation.
pub fn estimate_on_tape<'t>(ps: &Particles<'t>) -> Var<'t> {
    let quats = ps.states.cols(3, 7);
    let idx = medoid_indices(&quats.value(), &ps.weights(), ps.n);
    concat_cols(&[
        weighted_mean(ps, 0, 3),
        quats.gather_rows(&idx),
        weighted_mean(ps, 7, 10),
        weighted_mean(ps, 10, 13),
    ])
}

/// Point estimate of a single filter from plain particle values.
pub fn estimate(states: &Matrix, weights: &Matrix) -> CubeState {
    let n = states.nrows();
    let idx = medoid_indices(&states.slice(ndarray::s![.., 3..7]).to_owned(), weights, n)[0];
    let mut row = [0.0; STATE_DIM];
    for i in 0..n {
        let w = weights[[i, 0]];
        for c in (0..3).chain(7..STATE_DIM) {
            row[c] += w * states[[i, c]];
        }
    }
    for c in 3..7 {
        row[c] = states[[idx, c]];
    }
    state_from_row(&row)
}

/// Batch-mean weighted squared error of tape estimates against true rows.
pub fn loss_on_tape<'t>(est: Var<'t>, truth: &Matrix, cfg: &FilterLossConfig) -> Var<'t> {
    let tape = est.tape();
    let t = tape.constant(truth.clone());
    let sq = |a: usize, b: usize| (est.cols(a, b) - t.cols(a, b)).square().sum_cols();
    let rot = est.cols(3, 7).quat_angle_sq(t.cols(3, 7));
    let per = sq(0, 3).scale(cfg.c_x) + rot.scale(cfg.c_r) + sq(7, 10).scale(cfg.c_v) + sq(10, 13).scale(cfg.c_w);
    per.mean()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::model::states_matrix;
    use crate::math::Vec3;
    use crate::rotations::Rotation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tactile_autograd::Tape;

    #[test]
    fn loss_examples() {
        let cfg = FilterLossConfig::default();
        let s = CubeState::default();
        assert_eq!(filter_loss(&[s], &[s], &cfg).unwrap(), 0.0);
        let mut p = s;
        p.x = Vec3::new(0.01, 0.0, 0.0);
        assert!((filter_loss(&[p], &[s], &cfg).unwrap() - 1e-4).abs() < 1e-15);
        let mut p = s;
        p.r = Rotation::from_axis_angle(Vec3::Z, 0.1);
        assert!((filter_loss(&[p], &[s], &cfg).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            filter_loss(&[s, s], &[s], &cfg),
            Err(Error::LengthMismatch(_))
        ));
    }

    #[test]
    fn medoid_of_two_is_first() {
        let a = CubeState::default();
        let mut b = a;
        b.r = Rotation::from_axis_angle(Vec3::Z, 0.2);
        let m = states_matrix(&[a, b]);
        let w = Matrix::from_elem((2, 1), 0.5);
        let e = estimate(&m, &w);
        assert_eq!(e.r, a.r);
    }

    #[test]
    fn weighted_mean_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let n = rng.gen_range(1..30);
            let states: Vec<CubeState> = (0..n)
                .map(|_| CubeState {
                    x: Vec3::new(rng.gen(), rng.gen(), rng.gen()),
                    ..CubeState::default()
                })
                .collect();
            let raw: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let total: f64 = raw.iter().sum();
            let w = Matrix::from_shape_fn((n, 1), |(i, _)| raw[i] / total);
            let e = estimate(&states_matrix(&states), &w);
            let direct = states
                .iter()
                .zip(&raw)
                .fold(Vec3::ZERO, |acc, (s, r)| acc + s.x * (r / total));
            assert!((e.x - direct).norm() < 1e-12);
        }
    }

    #[test]
    fn identical_particles_give_their_state() {
        let s = CubeState {
            x: Vec3::new(0.01, 0.02, -0.01),
            r: Rotation::from_axis_angle(Vec3::X, 0.3),
            v: Vec3::new(0.1, 0.0, 0.0),
            w: Vec3::new(0.0, 1.0, 0.0),
        };
        let m = states_matrix(&[s; 5]);
        let w = Matrix::from_shape_vec((5, 1), vec![0.1, 0.5, 0.2, 0.1, 0.1]).unwrap();
        let e = estimate(&m, &w);
        assert!((e.x - s.x).norm() < 1e-12 && (e.v - s.v).norm() < 1e-12 && e.r == s.r);
    }

    #[test]
    fn tape_and_plain_loss_agree() {
        let tape = Tape::new();
        let a = CubeState {
            x: Vec3::new(0.01, 0.0, 0.0),
            r: Rotation::from_axis_angle(Vec3::Y, 0.2),
            v: Vec3::new(0.0, 0.1, 0.0),
            w: Vec3::new(0.0, 0.0, 1.0),
        };
        let b = CubeState::default();
        let cfg = FilterLossConfig::default();
        let l = loss_on_tape(tape.constant(states_matrix(&[a])), &states_matrix(&[b]), &cfg).item();
        assert!((l - cfg.state_loss(&a, &b)).abs() < 1e-12);
    }
}
