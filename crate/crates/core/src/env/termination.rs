//! Episode termination rules shared by training and the benchmark.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::CubeState;
use crate::math::Vec3;
use crate::rotations::{distance, Rotation};

pub const DROP_HEIGHT: f64 = -0.05;
pub const MAX_DISTANCE: f64 = 0.10;
pub const SUCCESS_DISTANCE: f64 = 0.025;
pub const SUCCESS_ANGLE: f64 = 0.4;
pub const HOLD_STEPS: usize = 4;
/// 10 s at 10 Hz.
pub const GOAL_STEPS: u32 = 100;
/// 120 s at 10 Hz.
pub const EPISODE_STEPS: u32 = 1200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    None,
    Dropped,
    OutOfBounds,
    Success,
    TimeoutGoal,
    TimeoutEpisode,
}

impl Event {
    /// Whether the learner sees a terminal transition.
    pub fn is_terminal_signal(self) -> bool {
        matches!(self, Event::Dropped | Event::OutOfBounds | Event::Success)
    }

    pub fn is_failure(self) -> bool {
        matches!(self, Event::Dropped | Event::OutOfBounds)
    }
}

/// Recent policy-step states and the goal and episode clocks.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EpisodeHistory {
    recent: VecDeque<(Vec3, Rotation)>,
    pub steps_since_goal: u32,
    pub steps_total: u32,
}

impl EpisodeHistory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records the state reached by one more policy step.
    pub fn push(&mut self, cube: &CubeState) {
        if self.recent.len() == HOLD_STEPS {
            self.recent.pop_front();
        }
        self.recent.push_back((cube.x, cube.r));
        self.steps_since_goal += 1;
        self.steps_total += 1;
    }

    /// Restarts the hold window and the per-goal clock.
    pub fn new_goal(&mut self) {
        self.recent.clear();
        self.steps_since_goal = 0;
    }

    pub fn recent(&self) -> impl Iterator<Item = &(Vec3, Rotation)> {
        self.recent.iter()
    }
}

pub fn within_goal(x: Vec3, r: Rotation, goal: Rotation) -> bool {
    x.norm() < SUCCESS_DISTANCE && distance(goal, r) < SUCCESS_ANGLE
}

/// Classifies the latest state; `history` must already contain it.
pub fn check_termination(cube: &CubeState, goal: Rotation, history: &EpisodeHistory) -> Event {
    if cube.x.z <= DROP_HEIGHT {
        Event::Dropped
    } else if cube.x.norm() > MAX_DISTANCE {
        Event::OutOfBounds
    } else if history.recent.len() == HOLD_STEPS && history.recent.iter().all(|&(x, r)| within_goal(x, r, goal)) {
        Event::Success
    } else if history.steps_total >= EPISODE_STEPS {
        Event::TimeoutEpisode
    } else if history.steps_since_goal >= GOAL_STEPS {
        Event::TimeoutGoal
    } else {
        Event::None
    }
}
