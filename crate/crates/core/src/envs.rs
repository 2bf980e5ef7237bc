//! Deterministic desk-scale environments.
//!
//! Every environment separates its raw simulator state from what the agent
//! observes, and computes rewards as a pure function of
//! `(previous raw state, action, next raw state)`. The reward labeler in the
//! async harness uses the same functions on logged raw states, so labeled
//! rewards equal environment rewards bit for bit.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("non-finite action")]
    NonFiniteAction,
    #[error("action has dimension {got}, environment expects {expected}")]
    ActionDim { expected: usize, got: usize },
    #[error("raw state has dimension {got}, environment expects {expected}")]
    RawDim { expected: usize, got: usize },
    #[error("unknown environment {0:?} (expected pendulum, pointmass or crawler)")]
    Unknown(String),
}

/// Why an episode stopped after a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DoneReason {
    Running,
    /// Step budget exhausted; the value still bootstraps.
    TimeLimit,
    /// Fall or goal; the value does not bootstrap.
    Terminal,
}

impl DoneReason {
    pub fn code(self) -> u8 {
        match self {
            DoneReason::Running => 0,
            DoneReason::TimeLimit => 1,
            DoneReason::Terminal => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DoneReason::Running),
            1 => Some(DoneReason::TimeLimit),
            2 => Some(DoneReason::Terminal),
            _ => None,
        }
    }

    pub fn is_done(self) -> bool {
        self != DoneReason::Running
    }

    pub fn is_terminal(self) -> bool {
        self == DoneReason::Terminal
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvSpec {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub raw_dim: usize,
    pub max_steps: usize,
    /// Control timestep, seconds.
    pub dt: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: DoneReason,
}

pub trait Env {
    fn spec(&self) -> EnvSpec;
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<Step, EnvError>;
    fn raw_state(&self) -> Vec<f64>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardWeights {
    pub distance: f64,
    pub acceleration: f64,
    pub roll: f64,
    pub fold: f64,
    /// Joint angle below which the fold penalty applies, rad.
    pub fold_threshold: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            distance: 1.0,
            acceleration: 0.05,
            roll: 0.5,
            fold: 1.0,
            fold_threshold: -0.3,
        }
    }
}

/// Environment identity plus the pure observation and reward maps over raw
/// states.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EnvKind {
    Pendulum,
    PointMass,
    Crawler(RewardWeights),
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pendulum" => Ok(EnvKind::Pendulum),
            "pointmass" => Ok(EnvKind::PointMass),
            "crawler" => Ok(EnvKind::Crawler(RewardWeights::default())),
            other => Err(EnvError::Unknown(other.to_string())),
        }
    }
}

impl EnvKind {
    pub fn name(&self) -> &'static str {
        match self {
            EnvKind::Pendulum => "pendulum",
            EnvKind::PointMass => "pointmass",
            EnvKind::Crawler(_) => "crawler",
        }
    }

    pub fn spec(&self) -> EnvSpec {
        match self {
            EnvKind::Pendulum => Pendulum::SPEC,
            EnvKind::PointMass => PointMass::SPEC,
            EnvKind::Crawler(_) => Crawler::SPEC,
        }
    }

    pub fn make(&self) -> Box<dyn Env + Send> {
        match *self {
            EnvKind::Pendulum => Box::new(Pendulum::new()),
            EnvKind::PointMass => Box::new(PointMass::new()),
            EnvKind::Crawler(w) => Box::new(Crawler::new(w)),
        }
    }

    /// Environment wrapped with `history` past (observation, action) pairs.
    pub fn make_wrapped(&self, history: usize) -> Box<dyn Env + Send> {
        if history == 0 {
            self.make()
        } else {
            Box::new(HistoryWrapper::new(self.make(), history))
        }
    }

    pub fn observe(&self, raw: &[f64]) -> Vec<f64> {
        match self {
            EnvKind::Pendulum => Pendulum::observe(raw),
            EnvKind::PointMass => PointMass::observe(raw),
            EnvKind::Crawler(_) => Crawler::observe(raw),
        }
    }

    pub fn reward(&self, prev_raw: &[f64], action: &[f64], next_raw: &[f64]) -> Result<f64, EnvError> {
        let spec = self.spec();
        for raw in [prev_raw, next_raw] {
            if raw.len() != spec.raw_dim {
                return Err(EnvError::RawDim {
                    expected: spec.raw_dim,
                    got: raw.len(),
                });
            }
        }
        check_action(action, spec.action_dim)?;
        Ok(match self {
            EnvKind::Pendulum => Pendulum::reward(prev_raw, action),
            EnvKind::PointMass => PointMass::reward(next_raw),
            EnvKind::Crawler(w) => crawler_terms(prev_raw, action, next_raw, w).total(w),
        })
    }
}

fn check_action(action: &[f64], dim: usize) -> Result<(), EnvError> {
    if action.len() != dim {
        return Err(EnvError::ActionDim {
            expected: dim,
            got: action.len(),
        });
    }
    if !action.iter().all(|a| a.is_finite()) {
        return Err(EnvError::NonFiniteAction);
    }
    Ok(())
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

/// Classic torque-limited swing-up; `θ = 0` is upright.
#[derive(Clone, Debug)]
pub struct Pendulum {
    pub theta: f64,
    pub theta_dot: f64,
    steps: usize,
}

impl Pendulum {
    pub const SPEC: EnvSpec = EnvSpec {
        obs_dim: 3,
        action_dim: 1,
        raw_dim: 2,
        max_steps: 200,
        dt: 0.05,
    };
    const GRAVITY: f64 = 10.0;
    const MASS: f64 = 1.0;
    const LENGTH: f64 = 1.0;
    const MAX_TORQUE: f64 = 2.0;
    const MAX_SPEED: f64 = 8.0;

    pub fn new() -> Self {
        Pendulum {
            theta: PI,
            theta_dot: 0.0,
            steps: 0,
        }
    }

    pub fn with_state(theta: f64, theta_dot: f64) -> Self {
        Pendulum {
            theta,
            theta_dot,
            steps: 0,
        }
    }

    fn observe(raw: &[f64]) -> Vec<f64> {
        vec![raw[0].cos(), raw[0].sin(), raw[1]]
    }

    fn torque(action: &[f64]) -> f64 {
        Self::MAX_TORQUE * action[0].clamp(-1.0, 1.0)
    }

    fn reward(prev_raw: &[f64], action: &[f64]) -> f64 {
        let u = Self::torque(action);
        let th = wrap_angle(prev_raw[0]);
        -(th * th + 0.1 * prev_raw[1] * prev_raw[1] + 0.001 * u * u)
    }
}

impl Default for Pendulum {
    fn default() -> Self {
        Self::new()
    }
}

impl Env for Pendulum {
    fn spec(&self) -> EnvSpec {
        Self::SPEC
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.theta = rng.random_range(-PI..=PI);
        self.theta_dot = rng.random_range(-1.0..=1.0);
        self.steps = 0;
        Self::observe(&self.raw_state())
    }

    fn step(&mut self, action: &[f64]) -> Result<Step, EnvError> {
        check_action(action, 1)?;
        let prev = self.raw_state();
        let u = Self::torque(action);
        let (g, m, l, dt) = (Self::GRAVITY, Self::MASS, Self::LENGTH, Self::SPEC.dt);
        let accel = 3.0 * g / (2.0 * l) * self.theta.sin() + 3.0 / (m * l * l) * u;
        self.theta_dot = (self.theta_dot + accel * dt).clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
        self.theta += self.theta_dot * dt;
        self.steps += 1;
        let done = if self.steps >= Self::SPEC.max_steps {
            DoneReason::TimeLimit
        } else {
            DoneReason::Running
        };
        Ok(Step {
            obs: Self::observe(&self.raw_state()),
            reward: Self::reward(&prev, action),
            done,
        })
    }

    fn raw_state(&self) -> Vec<f64> {
        vec![self.theta, self.theta_dot]
    }
}

/// 2-D point steered by velocity commands toward the origin.
#[derive(Clone, Debug)]
pub struct PointMass {
    pub position: [f64; 2],
    steps: usize,
}

impl PointMass {
    pub const SPEC: EnvSpec = EnvSpec {
        obs_dim: 2,
        action_dim: 2,
        raw_dim: 2,
        max_steps: 100,
        dt: 0.05,
    };
    pub const GOAL: [f64; 2] = [0.0, 0.0];
    pub const GOAL_RADIUS: f64 = 0.05;

    pub fn new() -> Self {
        PointMass {
            position: [1.0, 1.0],
            steps: 0,
        }
    }

    pub fn at(position: [f64; 2]) -> Self {
        PointMass { position, steps: 0 }
    }

    fn observe(raw: &[f64]) -> Vec<f64> {
        raw.to_vec()
    }

    pub fn goal_distance(raw: &[f64]) -> f64 {
        (raw[0] - Self::GOAL[0]).hypot(raw[1] - Self::GOAL[1])
    }

    fn reward(next_raw: &[f64]) -> f64 {
        -Self::goal_distance(next_raw)
    }
}

impl Default for PointMass {
    fn default() -> Self {
        Self::new()
    }
}

impl Env for PointMass {
    fn spec(&self) -> EnvSpec {
        Self::SPEC
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.position = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
        self.steps = 0;
        self.raw_state()
    }

    fn step(&mut self, action: &[f64]) -> Result<Step, EnvError> {
        check_action(action, 2)?;
        for (p, a) in self.position.iter_mut().zip(action) {
            *p += Self::SPEC.dt * a.clamp(-1.0, 1.0);
        }
        self.steps += 1;
        let raw = self.raw_state();
        let done = if Self::goal_distance(&raw) <= Self::GOAL_RADIUS {
            DoneReason::Terminal
        } else if self.steps >= Self::SPEC.max_steps {
            DoneReason::TimeLimit
        } else {
            DoneReason::Running
        };
        Ok(Step {
            obs: Self::observe(&raw),
            reward: Self::reward(&raw),
            done,
        })
    }

    fn raw_state(&self) -> Vec<f64> {
        self.position.to_vec()
    }
}

/// Two-joint planar crawler with ratchet ground contact.
///
/// Raw state layout: `[x, q1, q2, q̇1, q̇2, a_{t−1} (2), a_{t−2} (2), roll]`.
#[derive(Clone, Debug)]
pub struct Crawler {
    pub weights: RewardWeights,
    pub x: f64,
    pub q: [f64; 2],
    pub q_dot: [f64; 2],
    pub prev_action: [f64; 2],
    pub prev_prev_action: [f64; 2],
    pub roll: f64,
    steps: usize,
    last_terms: RewardTerms,
}

/// Unweighted reward components of one crawler step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RewardTerms {
    /// `x_t − x_{t−1}`, m.
    pub distance: f64,
    /// `|ä_t|`, second difference of the last three actions.
    pub acceleration: f64,
    /// `|φ_roll|`, rad.
    pub roll: f64,
    /// `Σᵢ max(q̄ − qᵢ, 0)`, rad.
    pub fold: f64,
}

impl RewardTerms {
    pub fn total(&self, w: &RewardWeights) -> f64 {
        w.distance * self.distance
            - w.acceleration * self.acceleration
            - w.roll * self.roll
            - w.fold * self.fold
    }
}

fn crawler_terms(prev: &[f64], action: &[f64], next: &[f64], w: &RewardWeights) -> RewardTerms {
    let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
    let acceleration = (0..2)
        .map(|i| a[i] - 2.0 * prev[5 + i] + prev[7 + i])
        .map(|d| d * d)
        .sum::<f64>()
        .sqrt();
    RewardTerms {
        distance: next[0] - prev[0],
        acceleration,
        roll: next[9].abs(),
        fold: (w.fold_threshold - next[1]).max(0.0) + (w.fold_threshold - next[2]).max(0.0),
    }
}

impl Crawler {
    pub const SPEC: EnvSpec = EnvSpec {
        obs_dim: 5,
        action_dim: 2,
        raw_dim: 10,
        max_steps: 500,
        dt: 0.02,
    };
    pub const JOINT_LIMIT: f64 = 1.2;
    pub const MAX_JOINT_SPEED: f64 = 2.0;
    pub const ROLL_GAIN: f64 = 0.3;
    pub const FALL_ROLL: f64 = 0.8;

    pub fn new(weights: RewardWeights) -> Self {
        Crawler {
            weights,
            x: 0.0,
            q: [0.0; 2],
            q_dot: [0.0; 2],
            prev_action: [0.0; 2],
            prev_prev_action: [0.0; 2],
            roll: 0.0,
            steps: 0,
            last_terms: RewardTerms::default(),
        }
    }

    pub fn with_joints(weights: RewardWeights, q: [f64; 2]) -> Self {
        let mut c = Self::new(weights);
        c.q = q;
        c.roll = Self::ROLL_GAIN * (q[0] - q[1]);
        c
    }

    /// Horizontal foot reach for joint angles `q`, m.
    pub fn foot_reach(q: [f64; 2]) -> f64 {
        0.5 * q[0].cos() + 0.5 * (q[0] + q[1]).cos()
    }

    pub fn last_terms(&self) -> RewardTerms {
        self.last_terms
    }

    /// Terms for the current pose taken with zero displacement and
    /// acceleration.
    pub fn posture_terms(&self) -> RewardTerms {
        let raw = self.raw_state();
        crawler_terms(&raw, &self.prev_action, &raw, &self.weights)
    }

    fn observe(raw: &[f64]) -> Vec<f64> {
        vec![raw[1], raw[2], raw[3], raw[4], raw[9]]
    }
}

impl Env for Crawler {
    fn spec(&self) -> EnvSpec {
        Self::SPEC
    }

    fn reset(&mut self, _seed: u64) -> Vec<f64> {
        *self = Crawler::new(self.weights);
        Self::observe(&self.raw_state())
    }

    fn step(&mut self, action: &[f64]) -> Result<Step, EnvError> {
        check_action(action, 2)?;
        let prev = self.raw_state();
        let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
        let reach_before = Self::foot_reach(self.q);
        for i in 0..2 {
            self.q_dot[i] = Self::MAX_JOINT_SPEED * a[i];
            self.q[i] = (self.q[i] + self.q_dot[i] * Self::SPEC.dt)
                .clamp(-Self::JOINT_LIMIT, Self::JOINT_LIMIT);
        }
        // Ratchet: backward strokes push the body forward, forward strokes slip.
        self.x += (reach_before - Self::foot_reach(self.q)).max(0.0);
        self.roll = Self::ROLL_GAIN * (self.q[0] - self.q[1]);
        self.prev_prev_action = self.prev_action;
        self.prev_action = a;
        self.steps += 1;
        let next = self.raw_state();
        self.last_terms = crawler_terms(&prev, action, &next, &self.weights);
        let done = if self.roll.abs() > Self::FALL_ROLL {
            DoneReason::Terminal
        } else if self.steps >= Self::SPEC.max_steps {
            DoneReason::TimeLimit
        } else {
            DoneReason::Running
        };
        Ok(Step {
            obs: Self::observe(&next),
            reward: self.last_terms.total(&self.weights),
            done,
        })
    }

    fn raw_state(&self) -> Vec<f64> {
        vec![
            self.x,
            self.q[0],
            self.q[1],
            self.q_dot[0],
            self.q_dot[1],
            self.prev_action[0],
            self.prev_action[1],
            self.prev_prev_action[0],
            self.prev_prev_action[1],
            self.roll,
        ]
    }
}

/// Rolling window of past (observation, action) pairs, newest first.
#[derive(Clone, Debug)]
pub struct History {
    len: usize,
    obs_dim: usize,
    action_dim: usize,
    past: VecDeque<(Vec<f64>, Vec<f64>)>,
}

impl History {
    pub fn new(len: usize, obs_dim: usize, action_dim: usize) -> Self {
        History {
            len,
            obs_dim,
            action_dim,
            past: VecDeque::with_capacity(len),
        }
    }

    pub fn wrapped_dim(&self) -> usize {
        wrapped_obs_dim(self.obs_dim, self.action_dim, self.len)
    }

    pub fn clear(&mut self) {
        self.past.clear();
    }

    pub fn record(&mut self, obs: &[f64], action: &[f64]) {
        if self.len == 0 {
            return;
        }
        if self.past.len() == self.len {
            self.past.pop_back();
        }
        self.past.push_front((obs.to_vec(), action.to_vec()));
    }

    /// `[obs, (o_{t−1}, a_{t−1}), …, (o_{t−k}, a_{t−k})]`, zero-padded.
    pub fn wrap(&self, obs: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.wrapped_dim());
        out.extend_from_slice(obs);
        for i in 0..self.len {
            match self.past.get(i) {
                Some((o, a)) => {
                    out.extend_from_slice(o);
                    out.extend_from_slice(a);
                }
                None => out.extend(std::iter::repeat_n(0.0, self.obs_dim + self.action_dim)),
            }
        }
        out
    }
}

pub fn wrapped_obs_dim(obs_dim: usize, action_dim: usize, history: usize) -> usize {
    obs_dim + history * (obs_dim + action_dim)
}

/// Inverse of [`wrapped_obs_dim`], if the dimension is consistent.
pub fn history_len_for(wrapped: usize, obs_dim: usize, action_dim: usize) -> Option<usize> {
    let extra = wrapped.checked_sub(obs_dim)?;
    (extra % (obs_dim + action_dim) == 0).then_some(extra / (obs_dim + action_dim))
}

pub struct HistoryWrapper<E> {
    inner: E,
    history: History,
    current: Vec<f64>,
}

impl<E: Env> HistoryWrapper<E> {
    pub fn new(inner: E, len: usize) -> Self {
        let spec = inner.spec();
        HistoryWrapper {
            history: History::new(len, spec.obs_dim, spec.action_dim),
            current: vec![0.0; spec.obs_dim],
            inner,
        }
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }
}

impl<E: Env> Env for HistoryWrapper<E> {
    fn spec(&self) -> EnvSpec {
        let mut spec = self.inner.spec();
        spec.obs_dim = self.history.wrapped_dim();
        spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.history.clear();
        self.current = self.inner.reset(seed);
        self.history.wrap(&self.current)
    }

    fn step(&mut self, action: &[f64]) -> Result<Step, EnvError> {
        let step = self.inner.step(action)?;
        self.history.record(&self.current, action);
        self.current = step.obs;
        Ok(Step {
            obs: self.history.wrap(&self.current),
            reward: step.reward,
            done: step.done,
        })
    }

    fn raw_state(&self) -> Vec<f64> {
        self.inner.raw_state()
    }
}

impl Env for Box<dyn Env + Send> {
    fn spec(&self) -> EnvSpec {
        (**self).spec()
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        (**self).reset(seed)
    }

    fn step(&mut self, action: &[f64]) -> Result<Step, EnvError> {
        (**self).step(action)
    }

    fn raw_state(&self) -> Vec<f64> {
        (**self).raw_state()
    }
}
