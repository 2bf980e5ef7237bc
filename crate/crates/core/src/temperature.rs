//! Entropy-constrained temperature: `α = exp(β)` adjusted by descent on
//! `J(α) = mean(−α·log π − α·H)`.

use thiserror::Error;

use crate::net::{AdamConfig, AdamState, NetError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TemperatureError {
    #[error("temperature loss needs at least one log-probability")]
    EmptyBatch,
    #[error("non-finite temperature gradient {0}")]
    NonFiniteGradient(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateRule {
    /// Scalar Adam on `dJ/dβ`.
    Adam,
    /// `β ← β − λ·dJ/dβ`.
    Plain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemperatureState {
    pub log_alpha: f64,
    pub target_entropy: f64,
    pub learning_rate: f64,
    pub rule: UpdateRule,
    pub optimizer: AdamState,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemperatureGrad {
    pub loss: f64,
    /// `dJ/dα = Ĥ − H`.
    pub d_alpha: f64,
    /// `dJ/dβ = α·dJ/dα`.
    pub d_log_alpha: f64,
    /// `Ĥ = −mean(log π)`.
    pub entropy: f64,
}

/// −1 nat per action dimension.
pub fn default_target_entropy(action_dim: usize) -> f64 {
    -(action_dim as f64)
}

impl TemperatureState {
    pub fn new(target_entropy: f64, learning_rate: f64) -> Self {
        Self::with_log_alpha(0.0, target_entropy, learning_rate)
    }

    pub fn with_log_alpha(log_alpha: f64, target_entropy: f64, learning_rate: f64) -> Self {
        TemperatureState {
            log_alpha,
            target_entropy,
            learning_rate,
            rule: UpdateRule::Adam,
            optimizer: AdamState::new(1, AdamConfig::with_learning_rate(learning_rate)),
        }
    }

    pub fn with_rule(mut self, rule: UpdateRule) -> Self {
        self.rule = rule;
        self
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn loss_and_grad(&self, log_probs: &[f64]) -> Result<TemperatureGrad, TemperatureError> {
        if log_probs.is_empty() {
            return Err(TemperatureError::EmptyBatch);
        }
        let alpha = self.alpha();
        let n = log_probs.len() as f64;
        let entropy = -log_probs.iter().sum::<f64>() / n;
        let loss = log_probs
            .iter()
            .map(|lp| -alpha * lp - alpha * self.target_entropy)
            .sum::<f64>()
            / n;
        let d_alpha = entropy - self.target_entropy;
        Ok(TemperatureGrad {
            loss,
            d_alpha,
            d_log_alpha: alpha * d_alpha,
            entropy,
        })
    }

    pub fn update(&mut self, d_log_alpha: f64) -> Result<(), TemperatureError> {
        if !d_log_alpha.is_finite() {
            return Err(TemperatureError::NonFiniteGradient(d_log_alpha));
        }
        match self.rule {
            UpdateRule::Plain => {
                self.log_alpha -= self.learning_rate * d_log_alpha;
            }
            UpdateRule::Adam => {
                let mut p = [self.log_alpha];
                self.optimizer
                    .step_slice(&mut p, &[d_log_alpha])
                    .map_err(|e| match e {
                        NetError::NonFinite(_) => TemperatureError::NonFiniteGradient(d_log_alpha),
                        other => unreachable!("scalar adam: {other}"),
                    })?;
                self.log_alpha = p[0];
            }
        }
        Ok(())
    }
}
