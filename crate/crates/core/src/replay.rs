//! Bounded FIFO transition store with uniform sampling.

use rand::Rng;
use thiserror::Error;

use crate::net::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReplayError {
    #[error("transition {field} has dimension {got}, buffer expects {expected}")]
    Schema {
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite reward")]
    NonFiniteReward,
    #[error("cannot sample from an empty buffer")]
    Empty,
    #[error("capacity must be positive")]
    ZeroCapacity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    /// Terminal: the bootstrap is cut after this step.
    pub done: bool,
    /// Last step of its episode (terminal or time limit).
    pub episode_end: bool,
    pub timestamp: u64,
}

/// Struct-of-arrays minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct Minibatch {
    pub obs: Matrix,
    pub actions: Matrix,
    pub rewards: Vec<f64>,
    pub next_obs: Matrix,
    pub dones: Vec<f64>,
    /// Buffer slots the rows were drawn from.
    pub indices: Vec<usize>,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn from_transitions(items: &[&Transition]) -> Minibatch {
        let obs_dim = items.first().map_or(0, |t| t.obs.len());
        let act_dim = items.first().map_or(0, |t| t.action.len());
        let n = items.len();
        let mut obs = Vec::with_capacity(n * obs_dim);
        let mut actions = Vec::with_capacity(n * act_dim);
        let mut next_obs = Vec::with_capacity(n * obs_dim);
        let mut rewards = Vec::with_capacity(n);
        let mut dones = Vec::with_capacity(n);
        for t in items {
            obs.extend_from_slice(&t.obs);
            actions.extend_from_slice(&t.action);
            next_obs.extend_from_slice(&t.next_obs);
            rewards.push(t.reward);
            dones.push(if t.done { 1.0 } else { 0.0 });
        }
        Minibatch {
            obs: Matrix::from_vec(n, obs_dim, obs).expect("uniform obs dims"),
            actions: Matrix::from_vec(n, act_dim, actions).expect("uniform action dims"),
            rewards,
            next_obs: Matrix::from_vec(n, obs_dim, next_obs).expect("uniform obs dims"),
            dones,
            indices: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReplayStats {
    pub size: usize,
    pub insertions: u64,
    pub episodes: u64,
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_dim: usize,
    action_dim: usize,
    storage: Vec<Transition>,
    next_slot: usize,
    insertions: u64,
    episodes: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize, action_dim: usize) -> Result<Self, ReplayError> {
        if capacity == 0 {
            return Err(ReplayError::ZeroCapacity);
        }
        Ok(ReplayBuffer {
            capacity,
            obs_dim,
            action_dim,
            storage: Vec::new(),
            next_slot: 0,
            insertions: 0,
            episodes: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn push(&mut self, t: Transition) -> Result<(), ReplayError> {
        for (field, expected, got) in [
            ("obs", self.obs_dim, t.obs.len()),
            ("action", self.action_dim, t.action.len()),
            ("next_obs", self.obs_dim, t.next_obs.len()),
        ] {
            if expected != got {
                return Err(ReplayError::Schema {
                    field,
                    expected,
                    got,
                });
            }
        }
        if !t.reward.is_finite() {
            return Err(ReplayError::NonFiniteReward);
        }
        if t.episode_end {
            self.episodes += 1;
        }
        if self.storage.len() < self.capacity {
            self.storage.push(t);
        } else {
            self.storage[self.next_slot] = t;
        }
        self.next_slot = (self.next_slot + 1) % self.capacity;
        self.insertions += 1;
        Ok(())
    }

    /// Held transitions, oldest first.
    pub fn iter_fifo(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.storage.len() < self.capacity {
            0
        } else {
            self.next_slot
        };
        self.storage[split..].iter().chain(self.storage[..split].iter())
    }

    /// `batch_size` independent uniform draws with replacement.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Minibatch, ReplayError> {
        if self.storage.is_empty() {
            return Err(ReplayError::Empty);
        }
        let indices: Vec<usize> = (0..batch_size)
            .map(|_| rng.random_range(0..self.storage.len()))
            .collect();
        let items: Vec<&Transition> = indices.iter().map(|&i| &self.storage[i]).collect();
        let mut batch = Minibatch::from_transitions(&items);
        if batch_size == 0 {
            batch.obs = Matrix::zeros(0, self.obs_dim);
            batch.next_obs = Matrix::zeros(0, self.obs_dim);
            batch.actions = Matrix::zeros(0, self.action_dim);
        }
        batch.indices = indices;
        Ok(batch)
    }

    pub fn stats(&self) -> ReplayStats {
        ReplayStats {
            size: self.storage.len(),
            insertions: self.insertions,
            episodes: self.episodes,
        }
    }
}
