//! Gravity curriculum of the first stage.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raises the gravity scale in fixed increments whenever the trailing
/// success rate clears a threshold. A linear floor guarantees full gravity
/// by `deadline` (fraction of the stage budget) even if the policy stalls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GravitySchedule {
    pub initial: f64,
    pub increment: f64,
    pub threshold: f64,
    pub window: usize,
    pub deadline: f64,
    scale: f64,
    recent: VecDeque<bool>,
    /// `(step, scale)` at the start and after every change.
    pub trace: Vec<(u64, f64)>,
}

impl Default for GravitySchedule {
    fn default() -> Self {
        Self::new(0.0, 0.1, 0.4, 100, 0.75).expect("valid defaults")
    }
}

impl GravitySchedule {
    pub fn new(initial: f64, increment: f64, threshold: f64, window: usize, deadline: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&initial) || !(increment > 0.0 && increment <= 1.0) {
            return Err(Error::Config(format!(
                "gravity initial {initial} / increment {increment}"
            )));
        }
        if !(0.0..=1.0).contains(&threshold) || window == 0 || !(deadline > 0.0 && deadline <= 1.0) {
            return Err(Error::Config(format!(
                "gravity threshold {threshold} / window {window} / deadline {deadline}"
            )));
        }
        Ok(Self {
            initial,
            increment,
            threshold,
            window,
            deadline,
            scale: initial,
            recent: VecDeque::new(),
            trace: vec![(0, initial)],
        })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn success_rate(&self) -> Option<f64> {
        (!self.recent.is_empty()).then(|| self.recent.iter().filter(|&&s| s).count() as f64 / self.recent.len() as f64)
    }

    /// Lowest scale allowed at `step` of a `budget`-step stage, on the increment grid.
    pub fn floor(&self, step: u64, budget: u64) -> f64 {
        let horizon = self.deadline * budget as f64;
        if horizon <= 0.0 || step as f64 >= horizon {
            return 1.0;
        }
        let raw = self.initial + (1.0 - self.initial) * step as f64 / horizon;
        let grid = ((raw - self.initial) / self.increment + 1e-9).floor();
        (self.initial + grid * self.increment).min(1.0)
    }

    /// Feeds goal-attempt outcomes in order; returns true if the scale changed.
    pub fn update(&mut self, outcomes: &[bool], step: u64, budget: u64) -> bool {
        let before = self.scale;
        for &ok in outcomes {
            if self.recent.len() == self.window {
                self.recent.pop_front();
            }
            self.recent.push_back(ok);
            if self.recent.len() == self.window
                && self.success_rate().unwrap_or(0.0) > self.threshold
                && self.scale < 1.0
            {
                self.scale = (self.scale + self.increment).min(1.0);
                // The new difficulty needs a fresh window.
                self.recent.clear();
            }
        }
        self.scale = self.scale.max(self.floor(step, budget));
        if (self.scale - 1.0).abs() < 1e-9 {
            self.scale = 1.0;
        }
        let changed = self.scale != before;
        if changed {
            self.trace.push((step, self.scale));
        }
        changed
    }

    pub fn is_monotone(&self) -> bool {
        self.trace.windows(2).all(|w| w[1].1 >= w[0].1 && w[1].0 >= w[0].0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steps_up_above_threshold_only() {
        let mut g = GravitySchedule::default();
        // 40 % exactly does not clear the bar.
        let mixed: Vec<bool> = (0..100).map(|i| i % 5 < 2).collect();
        assert!(!g.update(&mixed, 0, 1_000_000));
        assert_eq!(g.scale(), 0.0);
        let good: Vec<bool> = (0..100).map(|i| i % 2 == 0).collect();
        assert!(g.update(&good, 0, 1_000_000));
        // The window restarts after the step, so one batch raises it once.
        assert!((g.scale() - 0.1).abs() < 1e-12);
        assert!(g.success_rate().unwrap() > 0.4);
    }

    #[test]
    fn floor_forces_full_gravity_by_the_deadline() {
        let mut g = GravitySchedule::default();
        let budget = 1000;
        for step in (0..=budget).step_by(50) {
            g.update(&[false; 3], step, budget);
        }
        assert_eq!(g.scale(), 1.0);
        assert!(g.is_monotone());
        let at = g.trace.iter().find(|(_, s)| *s == 1.0).unwrap().0;
        assert!(at <= 750, "{at}");
    }

    #[test]
    fn never_exceeds_one() {
        let mut g = GravitySchedule::new(0.95, 0.1, 0.0, 1, 1.0).unwrap();
        g.update(&[true; 10], 0, 100);
        assert_eq!(g.scale(), 1.0);
    }
}
