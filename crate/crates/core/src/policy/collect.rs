//! Experience collection with independent, explicitly seeded workers.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::observation::{build_observation, ObservationStack, Role, Snapshot, POLICY_FRAME_DIM, Q_FRAME_DIM};
use super::replay::{ReplayBuffer, Transition};
use super::sac::{act, PolicyNet, ACTION_DIM};
use crate::env::log::StepRecord;
use crate::env::{sample_domain, CubeState, DomainConfig, DomainOverrides, Env, EstimatorSample, Event, SimParams};
use crate::error::{Error, Result};
use crate::pipeline::inloop_termination;
use crate::rewards::{RewardConfig, RewardKind};
use crate::rotations::{distance, OctahedralGroup, Rotation};

/// A cube-state estimator run alongside the simulation.
pub trait StateEstimator: Send {
    /// Starts a new episode from the known initial pose.
    fn start(&mut self, initial: &CubeState, rng: &mut ChaCha8Rng);
    /// Consumes one policy period of 100 Hz samples and returns the estimate.
    fn observe(&mut self, samples: &[EstimatorSample], rng: &mut ChaCha8Rng) -> Result<CubeState>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerSettings {
    pub reward: RewardKind,
    pub rewards: RewardConfig,
    pub overrides: DomainOverrides,
    pub sim: SimParams,
    /// Terminate when the estimate drifts too far from the truth.
    pub inloop_termination: bool,
    /// Per-goal success window used by the gravity curriculum.
    pub window: usize,
}

impl Default for WorkerSettings {
    fn default() -> Self {
        Self {
            reward: RewardKind::Goal,
            rewards: RewardConfig::default(),
            overrides: DomainOverrides::default(),
            sim: SimParams::default(),
            inloop_termination: false,
            window: 100,
        }
    }
}

/// Result of one policy step of a worker.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub transition: Transition,
    pub event: Event,
    /// `Some(success)` when a goal attempt ended on this step.
    pub attempt: Option<bool>,
    pub episode_end: bool,
    pub inloop_stop: bool,
    /// Undiscounted return of the episode, set when it ends.
    pub episode_return: Option<f64>,
    /// The 100 Hz estimator samples of this step.
    pub samples: Vec<EstimatorSample>,
}

pub struct Worker {
    pub id: usize,
    settings: WorkerSettings,
    rng: ChaCha8Rng,
    obs_rng: ChaCha8Rng,
    env: Option<Env>,
    estimator: Option<Box<dyn StateEstimator>>,
    est_rng: ChaCha8Rng,
    pi_stack: ObservationStack,
    q_stack: ObservationStack,
    prev_cube: CubeState,
    estimate: Option<CubeState>,
    recent: VecDeque<bool>,
    pub incidents: u64,
    pub episodes: u64,
    record: Option<Vec<StepRecord>>,
    time: f64,
    ret: f64,
}

impl Worker {
    pub fn new(id: usize, seed: u64, settings: WorkerSettings) -> Self {
        let mut root = ChaCha8Rng::seed_from_u64(seed);
        let rng = ChaCha8Rng::seed_from_u64(root.gen());
        let obs_rng = ChaCha8Rng::seed_from_u64(root.gen());
        let est_rng = ChaCha8Rng::seed_from_u64(root.gen());
        Self {
            id,
            settings,
            rng,
            obs_rng,
            env: None,
            estimator: None,
            est_rng,
            pi_stack: ObservationStack::new(POLICY_FRAME_DIM),
            q_stack: ObservationStack::new(Q_FRAME_DIM),
            prev_cube: CubeState::default(),
            estimate: None,
            recent: VecDeque::new(),
            incidents: 0,
            episodes: 0,
            record: None,
            time: 0.0,
            ret: 0.0,
        }
    }

    pub fn settings(&self) -> &WorkerSettings {
        &self.settings
    }

    pub fn settings_mut(&mut self) -> &mut WorkerSettings {
        &mut self.settings
    }

    pub fn set_estimator(&mut self, est: Option<Box<dyn StateEstimator>>) {
        self.estimator = est;
        self.env = None;
    }

    pub fn env(&self) -> Option<&Env> {
        self.env.as_ref()
    }

    pub fn estimate(&self) -> Option<&CubeState> {
        self.estimate.as_ref()
    }

    /// Keep per-step records of the running episode.
    pub fn enable_recording(&mut self) {
        self.record = Some(Vec::new());
    }

    pub fn take_records(&mut self) -> Vec<StepRecord> {
        self.record.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Success rate over the trailing goal attempts (`None` before any).
    pub fn success_rate(&self) -> Option<f64> {
        (!self.recent.is_empty()).then(|| self.recent.iter().filter(|&&s| s).count() as f64 / self.recent.len() as f64)
    }

    pub fn recent_attempts(&self) -> &VecDeque<bool> {
        &self.recent
    }

    fn random_goal(&mut self) -> Rotation {
        let g = OctahedralGroup::get();
        g.elements()[self.rng.gen_range(0..g.len())]
    }

    /// Starts an episode in a freshly sampled domain with a random goal.
    pub fn begin_random(&mut self) -> Result<()> {
        let cfg = sample_domain(&mut self.rng, &self.settings.overrides)?;
        let goal = self.random_goal();
        self.begin(cfg, goal)
    }

    /// Starts an episode in the given domain towards `goal`.
    pub fn begin(&mut self, cfg: DomainConfig, goal: Rotation) -> Result<()> {
        let seed = self.rng.gen();
        let mut env = Env::new(cfg, self.settings.sim.clone(), seed);
        let start = env.reset()?;
        env.set_goal(goal);
        self.prev_cube = start.cube_true;
        self.estimate = None;
        if let Some(est) = self.estimator.as_mut() {
            est.start(&start.cube_true, &mut self.est_rng);
            self.estimate = Some(start.cube_true);
        }
        self.pi_stack.clear();
        self.q_stack.clear();
        self.env = Some(env);
        self.push_frames();
        self.episodes += 1;
        self.time = 0.0;
        self.ret = 0.0;
        if let Some(r) = self.record.as_mut() {
            r.clear();
        }
        Ok(())
    }

    fn snapshot(env: &Env) -> Snapshot {
        Snapshot {
            q: env.hand().q,
            q_measured: env.measured_q(),
            q_bar_prev: env.ctrl().q_bar,
            cube: *env.cube(),
            goal: env.goal(),
        }
    }

    fn push_frames(&mut self) {
        let env = self.env.as_ref().expect("episode running");
        let snap = Self::snapshot(env);
        let noise = env.cfg().noise;
        let pf = build_observation(&snap, Role::Policy, self.estimate.as_ref(), &noise, &mut self.obs_rng);
        let qf = build_observation(&snap, Role::Critic, None, &noise, &mut self.obs_rng);
        self.pi_stack.push(&pf);
        self.q_stack.push(&qf);
    }

    fn record_attempt(&mut self, success: bool) {
        if self.recent.len() == self.settings.window {
            self.recent.pop_front();
        }
        self.recent.push_back(success);
    }

    /// Advances one policy step. Returns `None` if the simulation diverged
    /// (the episode is dropped and the worker restarts).
    pub fn step(&mut self, policy: &PolicyNet, deterministic: bool) -> Result<Option<StepOutcome>> {
        if self.env.is_none() {
            self.begin_random()?;
        }
        let obs_pi = self.pi_stack.flatten();
        let obs_q = self.q_stack.flatten();
        let action = act(&obs_pi, policy, deterministic, &mut self.rng);
        self.step_with(action, obs_pi, obs_q)
    }

    /// Advances one step with an externally chosen action.
    pub fn step_action(&mut self, action: [f64; ACTION_DIM]) -> Result<Option<StepOutcome>> {
        if self.env.is_none() {
            self.begin_random()?;
        }
        let obs_pi = self.pi_stack.flatten();
        let obs_q = self.q_stack.flatten();
        self.step_with(action, obs_pi, obs_q)
    }

    /// The current stacked policy observation.
    pub fn policy_observation(&self) -> Vec<f64> {
        self.pi_stack.flatten()
    }

    fn step_with(
        &mut self,
        action: [f64; ACTION_DIM],
        obs_pi: Vec<f64>,
        obs_q: Vec<f64>,
    ) -> Result<Option<StepOutcome>> {
        let env = self.env.as_mut().expect("episode running");
        let goal = env.goal();
        let res = match env.step(&action) {
            Ok(r) => r,
            Err(Error::SimulationDiverged(msg)) => {
                self.incidents += 1;
                eprintln!("worker {}: episode discarded after divergence: {msg}", self.id);
                self.env = None;
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        self.time += 0.1;
        if let Some(est) = self.estimator.as_mut() {
            self.estimate = Some(est.observe(&res.samples, &mut self.est_rng)?);
        }
        let cube = res.cube_true;
        let event = res.event;
        let reward = self.settings.rewards.evaluate(
            self.settings.reward,
            &self.prev_cube,
            &cube,
            goal,
            event,
            self.estimate.as_ref(),
        );
        let mut inloop_stop = false;
        if self.settings.inloop_termination {
            if let Some(e) = &self.estimate {
                inloop_stop = inloop_termination((e.x - cube.x).norm(), distance(e.r, cube.r));
            }
        }
        let done = event.is_terminal_signal() || inloop_stop;
        if let Some(r) = self.record.as_mut() {
            r.push(StepRecord {
                t: self.time,
                q: res.hand.q,
                q_bar: self.env.as_ref().unwrap().ctrl().q_bar,
                cube_true: cube,
                cube_est: self.estimate,
                action,
                reward,
                event,
                goal,
            });
        }
        self.push_frames();
        let transition = Transition {
            obs_pi,
            obs_q,
            action,
            reward,
            done,
            next_obs_pi: self.pi_stack.flatten(),
            next_obs_q: self.q_stack.flatten(),
        };
        self.prev_cube = cube;
        self.ret += reward;

        let (attempt, episode_end) = match event {
            Event::Success => {
                let g = self.random_goal();
                self.env.as_mut().unwrap().set_goal(g);
                (Some(true), false)
            }
            Event::None if !inloop_stop => (None, false),
            _ => (Some(false), true),
        };
        if let Some(s) = attempt {
            self.record_attempt(s);
        }
        let episode_return = episode_end.then_some(self.ret);
        if episode_end {
            self.env = None;
        }
        Ok(Some(StepOutcome {
            transition,
            event,
            attempt,
            episode_end,
            inloop_stop,
            episode_return,
            samples: res.samples,
        }))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CollectStats {
    pub transitions: usize,
    pub attempts: usize,
    pub successes: usize,
    pub episodes_ended: usize,
    pub reward_sum: f64,
    pub incidents: usize,
    /// Returns of the episodes that ended, in worker order.
    pub returns: Vec<f64>,
    /// Goal-attempt outcomes, in worker order.
    pub outcomes: Vec<bool>,
}

/// Runs every worker for `steps` policy steps and appends the transitions
/// to `replay` in worker order.
pub fn collect(
    workers: &mut [Worker],
    policy: &PolicyNet,
    replay: &mut ReplayBuffer,
    steps: usize,
) -> Result<CollectStats> {
    assert!(!workers.is_empty(), "collect needs at least one worker");
    let results: Vec<Result<(Vec<Transition>, CollectStats)>> = std::thread::scope(|s| {
        let handles: Vec<_> = workers
            .iter_mut()
            .map(|w| {
                s.spawn(move || {
                    let mut out = Vec::with_capacity(steps);
                    let mut stats = CollectStats::default();
                    while out.len() < steps {
                        match w.step(policy, false)? {
                            Some(o) => {
                                stats.reward_sum += o.transition.reward;
                                if let Some(ok) = o.attempt {
                                    stats.attempts += 1;
                                    stats.successes += ok as usize;
                                    stats.outcomes.push(ok);
                                }
                                stats.episodes_ended += o.episode_end as usize;
                                stats.returns.extend(o.episode_return);
                                out.push(o.transition);
                            }
                            None => stats.incidents += 1,
                        }
                    }
                    Ok((out, stats))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect()
    });
    let mut total = CollectStats::default();
    for r in results {
        let (ts, st) = r?;
        for t in &ts {
            replay.push(t);
        }
        total.transitions += ts.len();
        total.attempts += st.attempts;
        total.successes += st.successes;
        total.episodes_ended += st.episodes_ended;
        total.reward_sum += st.reward_sum;
        total.incidents += st.incidents;
        total.returns.extend(st.returns);
        total.outcomes.extend(st.outcomes);
    }
    Ok(total)
}
