//! Model-agnostic particle machinery on the autograd tape.
//!
//! `B` independent filters of `N` particles are stored row-wise: filter `b`
//! owns rows `b*N .. (b+1)*N` of the state and log-weight matrices.

use rand::Rng;
use tactile_autograd::{Matrix, Tape, Var};

use crate::error::{Error, Result};

/// One propagation and weighting model bound to a tape.
pub trait StepModel<'t> {
    /// Width of the per-particle Gaussian draw.
    fn noise_dim(&self) -> usize;
    /// Samples next states from previous states, per-particle inputs and draws.
    fn propose(&self, states: Var<'t>, io: Var<'t>, eps: Var<'t>) -> Var<'t>;
    /// Log-weight increments (rows × 1) from previous states and inputs.
    fn log_weight(&self, states: Var<'t>, io: Var<'t>) -> Var<'t>;
}

#[derive(Clone, Copy)]
pub struct Particles<'t> {
    pub states: Var<'t>,
    /// Normalised log-weights, rows × 1.
    pub log_w: Var<'t>,
    /// Particles per filter.
    pub n: usize,
}

impl<'t> Particles<'t> {
    /// Uniformly weighted particles.
    pub fn uniform(tape: &'t Tape, states: Var<'t>, n: usize) -> Self {
        let rows = states.shape().0;
        assert!(
            n > 0 && rows.is_multiple_of(n),
            "rows must be a multiple of the particle count"
        );
        let log_w = tape.constant(Matrix::from_elem((rows, 1), -(n as f64).ln()));
        Self { states, log_w, n }
    }

    pub fn filters(&self) -> usize {
        self.states.shape().0 / self.n
    }

    /// Normalised weights as plain values.
    pub fn weights(&self) -> Matrix {
        self.log_w.value().mapv(f64::exp)
    }
}

/// Subtracts the per-filter log-sum-exp. Fails if a filter lost all mass.
pub fn normalize<'t>(log_w: Var<'t>, n: usize) -> Result<Var<'t>> {
    let lse = log_w.segment_logsumexp(n);
    let bad = lse.with_value(|m| m.iter().any(|v| !v.is_finite()));
    if bad {
        return Err(Error::FilterCollapsed("all particle weights vanished".into()));
    }
    Ok(log_w - lse.repeat_rows(n))
}

/// Effective sample size `1 / Σ w²` of each filter.
pub fn ess(weights: &Matrix, n: usize) -> Vec<f64> {
    weights
        .column(0)
        .as_slice()
        .expect("contiguous weights")
        .chunks(n)
        .map(|w| 1.0 / w.iter().map(|x| x * x).sum::<f64>())
        .collect()
}

/// Systematic resampling: ancestor indices for one filter given offset `u ∈ [0,1)`.
pub fn systematic_indices(weights: &[f64], u: f64) -> Vec<usize> {
    let n = weights.len();
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut i = 0;
    for k in 0..n {
        let p = (k as f64 + u) / n as f64;
        while p > cum && i + 1 < n {
            i += 1;
            cum += weights[i];
        }
        out.push(i);
    }
    out
}

/// Resamples every filter whose ESS dropped below `N/2`. Ancestor choice is
/// not differentiated; gradients flow through the selected states only.
pub fn resample_if_degenerate<'t, R: Rng + ?Sized>(ps: Particles<'t>, rng: &mut R) -> (Particles<'t>, Vec<bool>) {
    let n = ps.n;
    let w = ps.weights();
    let ess = ess(&w, n);
    let flags: Vec<bool> = ess.iter().map(|&e| e < n as f64 / 2.0).collect();
    if !flags.iter().any(|&f| f) {
        return (ps, flags);
    }
    let ws = w.column(0).to_vec();
    let mut idx: Vec<usize> = (0..ws.len()).collect();
    let mut keep = Matrix::zeros((ws.len(), 1));
    let mut fresh = Matrix::zeros((ws.len(), 1));
    for (b, &f) in flags.iter().enumerate() {
        let rows = b * n..(b + 1) * n;
        if f {
            let anc = systematic_indices(&ws[rows.clone()], rng.gen::<f64>());
            for (k, a) in anc.into_iter().enumerate() {
                idx[b * n + k] = b * n + a;
                fresh[[b * n + k, 0]] = -(n as f64).ln();
            }
        } else {
            for r in rows {
                keep[[r, 0]] = 1.0;
            }
        }
    }
    let tape = ps.states.tape();
    let states = ps.states.gather_rows(&idx);
    // Resampled filters restart from uniform weights; the others keep theirs.
    let log_w = ps.log_w * tape.constant(keep) + tape.constant(fresh);
    (Particles { states, log_w, n }, flags)
}

/// One predict–update–resample cycle.
///
/// `io` has one row per filter; `eps` one row per particle.
pub fn filter_step<'t, M: StepModel<'t>, R: Rng + ?Sized>(
    model: &M,
    ps: Particles<'t>,
    io: Var<'t>,
    eps: Var<'t>,
    rng: &mut R,
) -> Result<Particles<'t>> {
    let io_p = io.repeat_rows(ps.n);
    let incr = model.log_weight(ps.states, io_p);
    let states = model.propose(ps.states, io_p, eps);
    let log_w = normalize(ps.log_w + incr, ps.n)?;
    let (out, _) = resample_if_degenerate(Particles { states, log_w, n: ps.n }, rng);
    Ok(out)
}

/// Weighted mean of columns `start..end` per filter (filters × width).
pub fn weighted_mean<'t>(ps: &Particles<'t>, start: usize, end: usize) -> Var<'t> {
    let w = ps.log_w.exp();
    (ps.states.cols(start, end) * w).segment_sum(ps.n)
}
