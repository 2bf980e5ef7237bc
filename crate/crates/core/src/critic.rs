//! Twin soft Q-functions, their regression loss, the reparameterized policy
//! loss, and Polyak-averaged targets.

use thiserror::Error;

use crate::net::{Gradients, Matrix, Mlp, NetError};
use crate::policy::{sample_action, PolicyHead};
use crate::replay::Minibatch;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CriticError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("non-finite bootstrap target {value} at batch row {row} (reward {reward}, next value {next_value})")]
    NonFiniteTarget {
        row: usize,
        value: f64,
        reward: f64,
        next_value: f64,
    },
    #[error("discount {0} outside [0, 1)")]
    Discount(f64),
    #[error("polyak coefficient {0} outside (0, 1]")]
    Tau(f64),
    #[error("critic output dimension must be 1, got {0}")]
    OutputDim(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriticPair {
    pub q1: Mlp,
    pub q2: Mlp,
    pub target1: Mlp,
    pub target2: Mlp,
    pub tau: f64,
}

impl CriticPair {
    /// Targets start as exact copies of the main networks.
    pub fn new(q1: Mlp, q2: Mlp, tau: f64) -> Result<Self, CriticError> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(CriticError::Tau(tau));
        }
        for q in [&q1, &q2] {
            if q.output_dim() != 1 {
                return Err(CriticError::OutputDim(q.output_dim()));
            }
        }
        if !q1.same_shape(&q2) {
            return Err(NetError::ShapeMismatch.into());
        }
        Ok(CriticPair {
            target1: q1.clone(),
            target2: q2.clone(),
            q1,
            q2,
            tau,
        })
    }

    pub fn init(
        obs_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        seeds: (u64, u64),
        tau: f64,
    ) -> Result<Self, CriticError> {
        let mut dims = vec![obs_dim + action_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        Self::new(Mlp::new(&dims, seeds.0)?, Mlp::new(&dims, seeds.1)?, tau)
    }

    /// Same pair with the roles of the two critics exchanged.
    pub fn swapped(&self) -> Self {
        CriticPair {
            q1: self.q2.clone(),
            q2: self.q1.clone(),
            target1: self.target2.clone(),
            target2: self.target1.clone(),
            tau: self.tau,
        }
    }

    /// `θ̄ᵢ ← τθᵢ + (1 − τ)θ̄ᵢ` for both critics.
    pub fn target_update(&mut self) {
        let tau = self.tau;
        self.target1
            .polyak_from(&self.q1, tau)
            .expect("targets share the main shape");
        self.target2
            .polyak_from(&self.q2, tau)
            .expect("targets share the main shape");
    }
}

pub fn q_value(net: &Mlp, obs: &[f64], action: &[f64]) -> Result<f64, NetError> {
    let mut input = Vec::with_capacity(obs.len() + action.len());
    input.extend_from_slice(obs);
    input.extend_from_slice(action);
    Ok(net.forward(&input)?.0[0])
}

/// Single-sample soft value of `obs` under the target critics:
/// `min(Q̄₁, Q̄₂)(s, ã) − α·log π(ã|s)`.
pub fn soft_state_value(
    critic: &CriticPair,
    policy: &PolicyHead,
    alpha: f64,
    obs: &[f64],
    noise: &[f64],
) -> Result<f64, NetError> {
    let (mean, std) = policy.distribution(obs)?;
    let sample = sample_action(&mean, &std, noise);
    let q1 = q_value(&critic.target1, obs, &sample.action)?;
    let q2 = q_value(&critic.target2, obs, &sample.action)?;
    Ok(q1.min(q2) - alpha * sample.log_prob)
}

/// Batched [`soft_state_value`]: one noise row per state.
pub fn soft_state_values(
    critic: &CriticPair,
    policy: &PolicyHead,
    alpha: f64,
    states: &Matrix,
    noise: &Matrix,
) -> Result<Vec<f64>, NetError> {
    let sample = policy.sample_batch(states, noise)?;
    let input = states.hcat(&sample.actions)?;
    let q1 = critic.target1.predict(&input)?;
    let q2 = critic.target2.predict(&input)?;
    Ok((0..states.rows())
        .map(|r| q1.row(r)[0].min(q2.row(r)[0]) - alpha * sample.log_probs[r])
        .collect())
}

#[derive(Clone, Debug)]
pub struct QLoss {
    pub loss1: f64,
    pub loss2: f64,
    pub grads1: Gradients,
    pub grads2: Gradients,
    pub targets: Vec<f64>,
}

impl QLoss {
    pub fn mean_loss(&self) -> f64 {
        0.5 * (self.loss1 + self.loss2)
    }
}

/// Regression of both critics onto `y = r + γ(1 − done)·V̄(s′)`; `y` is a
/// constant for differentiation. `next_noise` holds one row per batch
/// element for the bootstrap action.
pub fn q_loss_and_grads(
    critic: &CriticPair,
    policy: &PolicyHead,
    alpha: f64,
    gamma: f64,
    batch: &Minibatch,
    next_noise: &Matrix,
) -> Result<QLoss, CriticError> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(CriticError::Discount(gamma));
    }
    let n = batch.len();
    let next_values = soft_state_values(critic, policy, alpha, &batch.next_obs, next_noise)?;
    let mut targets = Vec::with_capacity(n);
    for row in 0..n {
        let bootstrap = if batch.dones[row] != 0.0 {
            0.0
        } else {
            gamma * next_values[row]
        };
        let y = batch.rewards[row] + bootstrap;
        if !y.is_finite() {
            return Err(CriticError::NonFiniteTarget {
                row,
                value: y,
                reward: batch.rewards[row],
                next_value: next_values[row],
            });
        }
        targets.push(y);
    }
    let input = batch.obs.hcat(&batch.actions)?;
    let (loss1, grads1) = regress(&critic.q1, &input, &targets)?;
    let (loss2, grads2) = regress(&critic.q2, &input, &targets)?;
    Ok(QLoss {
        loss1,
        loss2,
        grads1,
        grads2,
        targets,
    })
}

fn regress(net: &Mlp, input: &Matrix, targets: &[f64]) -> Result<(f64, Gradients), NetError> {
    let n = targets.len();
    let cache = net.forward_batch(input)?;
    let out = cache.output();
    let scale = 1.0 / n.max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, 1);
    for (r, &y) in targets.iter().enumerate() {
        let diff = out.row(r)[0] - y;
        loss += diff * diff;
        grad.row_mut(r)[0] = 2.0 * diff * scale;
    }
    Ok((loss * scale, net.backward(&cache, &grad)?))
}

#[derive(Clone, Debug)]
pub struct PolicyLoss {
    pub loss: f64,
    pub grads: Gradients,
    /// Log-probabilities of the fresh samples; feed the temperature loss.
    pub log_probs: Vec<f64>,
}

impl PolicyLoss {
    /// `−mean(log π)` over the batch.
    pub fn entropy_estimate(&self) -> f64 {
        -self.log_probs.iter().sum::<f64>() / self.log_probs.len().max(1) as f64
    }
}

/// `mean[α·log π(ã|s) − minᵢ Qᵢ(s, ã)]` with `ã` reparameterized by `noise`.
/// Critic parameters are held fixed; gradients reach `φ` through `ã`.
pub fn policy_loss_and_grads(
    critic: &CriticPair,
    policy: &PolicyHead,
    alpha: f64,
    states: &Matrix,
    noise: &Matrix,
) -> Result<PolicyLoss, CriticError> {
    let n = states.rows();
    let scale = 1.0 / n.max(1) as f64;
    let obs_dim = states.cols();
    let d = policy.action_dim;
    let sample = policy.sample_batch(states, noise)?;
    let input = states.hcat(&sample.actions)?;
    let cache1 = critic.q1.forward_batch(&input)?;
    let cache2 = critic.q2.forward_batch(&input)?;
    let mut loss = 0.0;
    let mut seed1 = Matrix::zeros(n, 1);
    let mut seed2 = Matrix::zeros(n, 1);
    for r in 0..n {
        let a = cache1.output().row(r)[0];
        let b = cache2.output().row(r)[0];
        // Ties route through the first critic.
        if a <= b {
            seed1.row_mut(r)[0] = -scale;
        } else {
            seed2.row_mut(r)[0] = -scale;
        }
        loss += alpha * sample.log_probs[r] - a.min(b);
    }
    let gin1 = critic.q1.backward_input(&cache1, &seed1)?;
    let gin2 = critic.q2.backward_input(&cache2, &seed2)?;
    let mut grad_u = Matrix::zeros(n, d);
    for r in 0..n {
        for j in 0..d {
            let da = gin1.row(r)[obs_dim + j] + gin2.row(r)[obs_dim + j];
            let a = sample.actions.row(r)[j];
            grad_u.row_mut(r)[j] = da * (1.0 - a * a);
        }
    }
    let grad_log_prob = vec![alpha * scale; n];
    let grads = policy.backward(&sample, &grad_u, &grad_log_prob)?;
    Ok(PolicyLoss {
        loss: loss * scale,
        grads,
        log_probs: sample.log_probs,
    })
}
