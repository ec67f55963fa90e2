//! Uniform-sampling ring buffer of transitions.
//!
//! Observations are stored as `f32` to halve the memory footprint; sampled
//! batches are widened back to `f64`.

use rand::Rng;
use tactile_autograd::Matrix;

use super::sac::{Batch, ACTION_DIM};

#[derive(Debug, Clone)]
pub struct Transition {
    pub obs_pi: Vec<f64>,
    pub obs_q: Vec<f64>,
    pub action: [f64; ACTION_DIM],
    pub reward: f64,
    /// Learning termination signal (never set for timeouts).
    pub done: bool,
    pub next_obs_pi: Vec<f64>,
    pub next_obs_q: Vec<f64>,
}

pub struct ReplayBuffer {
    capacity: usize,
    pi_dim: usize,
    q_dim: usize,
    obs_pi: Vec<f32>,
    obs_q: Vec<f32>,
    next_pi: Vec<f32>,
    next_q: Vec<f32>,
    action: Vec<f64>,
    reward: Vec<f64>,
    done: Vec<bool>,
    len: usize,
    head: usize,
    total: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, pi_dim: usize, q_dim: usize) -> Self {
        assert!(capacity > 0);
        Self {
            capacity,
            pi_dim,
            q_dim,
            obs_pi: vec![0.0; capacity * pi_dim],
            obs_q: vec![0.0; capacity * q_dim],
            next_pi: vec![0.0; capacity * pi_dim],
            next_q: vec![0.0; capacity * q_dim],
            action: vec![0.0; capacity * ACTION_DIM],
            reward: vec![0.0; capacity],
            done: vec![false; capacity],
            len: 0,
            head: 0,
            total: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Transitions ever pushed, including overwritten ones.
    pub fn total_pushed(&self) -> u64 {
        self.total
    }

    pub fn push(&mut self, t: &Transition) {
        assert_eq!(t.obs_pi.len(), self.pi_dim);
        assert_eq!(t.obs_q.len(), self.q_dim);
        let i = self.head;
        let put = |dst: &mut [f32], src: &[f64], dim: usize| {
            for (d, s) in dst[i * dim..(i + 1) * dim].iter_mut().zip(src) {
                *d = *s as f32;
            }
        };
        put(&mut self.obs_pi, &t.obs_pi, self.pi_dim);
        put(&mut self.obs_q, &t.obs_q, self.q_dim);
        put(&mut self.next_pi, &t.next_obs_pi, self.pi_dim);
        put(&mut self.next_q, &t.next_obs_q, self.q_dim);
        self.action[i * ACTION_DIM..(i + 1) * ACTION_DIM].copy_from_slice(&t.action);
        self.reward[i] = t.reward;
        self.done[i] = t.done;
        self.head = (self.head + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
        self.total += 1;
    }

    pub fn done_flag(&self, index: usize) -> bool {
        self.done[index]
    }

    /// Indices drawn uniformly with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        assert!(self.len > 0, "sampling from an empty buffer");
        (0..n).map(|_| rng.gen_range(0..self.len)).collect()
    }

    pub fn gather(&self, idx: &[usize]) -> Batch {
        let rows =
            |src: &[f32], dim: usize| Matrix::from_shape_fn((idx.len(), dim), |(r, c)| src[idx[r] * dim + c] as f64);
        Batch {
            obs_pi: rows(&self.obs_pi, self.pi_dim),
            obs_q: rows(&self.obs_q, self.q_dim),
            action: Matrix::from_shape_fn((idx.len(), ACTION_DIM), |(r, c)| self.action[idx[r] * ACTION_DIM + c]),
            reward: Matrix::from_shape_fn((idx.len(), 1), |(r, _)| self.reward[idx[r]]),
            done: Matrix::from_shape_fn((idx.len(), 1), |(r, _)| if self.done[idx[r]] { 1.0 } else { 0.0 }),
            next_obs_pi: rows(&self.next_pi, self.pi_dim),
            next_obs_q: rows(&self.next_q, self.q_dim),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Batch {
        let idx = self.sample_indices(n, rng);
        self.gather(&idx)
    }
}
