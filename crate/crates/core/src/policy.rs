//! Tanh-squashed diagonal Gaussian policy.
//!
//! The network maps an observation to `2·d_a` outputs: means followed by
//! log standard deviations. Samples are reparameterized as
//! `a = tanh(μ + σ⊙ε)` with caller-supplied noise `ε`.

use crate::net::{ForwardCache, Matrix, Mlp, NetError};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln(1 − tanh²(u))`, stable for large `|u|`.
pub fn log_tanh_jacobian(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyHead {
    pub net: Mlp,
    pub action_dim: usize,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActionSample {
    pub noise: Vec<f64>,
    pub pre_squash: Vec<f64>,
    pub action: Vec<f64>,
    pub log_prob: f64,
}

/// A batch of reparameterized samples with everything the backward pass
/// needs.
#[derive(Clone, Debug)]
pub struct BatchSample {
    pub cache: ForwardCache,
    pub mean: Matrix,
    pub raw_log_std: Matrix,
    pub std: Matrix,
    pub noise: Matrix,
    pub pre_squash: Matrix,
    pub actions: Matrix,
    pub log_probs: Vec<f64>,
}

impl PolicyHead {
    pub fn new(net: Mlp, action_dim: usize) -> Result<Self, NetError> {
        if net.output_dim() != 2 * action_dim {
            return Err(NetError::DimMismatch {
                expected: 2 * action_dim,
                got: net.output_dim(),
            });
        }
        Ok(PolicyHead {
            net,
            action_dim,
            log_std_min: LOG_STD_MIN,
            log_std_max: LOG_STD_MAX,
        })
    }

    /// Policy with the given hidden widths and freshly initialized weights.
    pub fn init(obs_dim: usize, action_dim: usize, hidden: &[usize], seed: u64) -> Result<Self, NetError> {
        let mut dims = vec![obs_dim];
        dims.extend_from_slice(hidden);
        dims.push(2 * action_dim);
        Self::new(Mlp::new(&dims, seed)?, action_dim)
    }

    pub fn obs_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn clamp_log_std(&self, x: f64) -> f64 {
        x.clamp(self.log_std_min, self.log_std_max)
    }

    pub fn distribution(&self, obs: &[f64]) -> Result<(Vec<f64>, Vec<f64>), NetError> {
        if !obs.iter().all(|v| v.is_finite()) {
            return Err(NetError::NonFinite("observation"));
        }
        let (out, _) = self.net.forward(obs)?;
        let d = self.action_dim;
        let mean = out[..d].to_vec();
        let std = out[d..].iter().map(|&l| self.clamp_log_std(l).exp()).collect();
        Ok((mean, std))
    }

    pub fn deterministic_action(&self, obs: &[f64]) -> Result<Vec<f64>, NetError> {
        let (mean, _) = self.distribution(obs)?;
        Ok(mean.into_iter().map(f64::tanh).collect())
    }

    /// Reparameterized samples for a batch of observations, one noise row
    /// per observation.
    pub fn sample_batch(&self, obs: &Matrix, noise: &Matrix) -> Result<BatchSample, NetError> {
        let d = self.action_dim;
        if noise.cols() != d || noise.rows() != obs.rows() {
            return Err(NetError::DimMismatch {
                expected: obs.rows() * d,
                got: noise.rows() * noise.cols(),
            });
        }
        let cache = self.net.forward_batch(obs)?;
        let out = cache.output();
        let mean = out.columns(0, d);
        let raw_log_std = out.columns(d, d);
        let rows = obs.rows();
        let mut std = Matrix::zeros(rows, d);
        let mut pre_squash = Matrix::zeros(rows, d);
        let mut actions = Matrix::zeros(rows, d);
        let mut log_probs = Vec::with_capacity(rows);
        for r in 0..rows {
            for j in 0..d {
                let s = self.clamp_log_std(raw_log_std.row(r)[j]).exp();
                std.row_mut(r)[j] = s;
                let u = mean.row(r)[j] + s * noise.row(r)[j];
                pre_squash.row_mut(r)[j] = u;
                actions.row_mut(r)[j] = u.tanh();
            }
            log_probs.push(log_prob(mean.row(r), std.row(r), pre_squash.row(r)));
        }
        Ok(BatchSample {
            cache,
            mean,
            raw_log_std,
            std,
            noise: noise.clone(),
            pre_squash,
            actions,
            log_probs,
        })
    }

    /// Backpropagates per-sample gradients with respect to the pre-squash
    /// action `u` and the log-probability into the network parameters.
    ///
    /// `grad_u` is `∂L/∂u` through every path except the log-density;
    /// `grad_log_prob` is `∂L/∂log π` per sample. Both already include any
    /// batch averaging.
    pub fn backward(
        &self,
        sample: &BatchSample,
        grad_u: &Matrix,
        grad_log_prob: &[f64],
    ) -> Result<crate::net::Gradients, NetError> {
        let d = self.action_dim;
        let rows = sample.mean.rows();
        let mut out_grad = Matrix::zeros(rows, 2 * d);
        for r in 0..rows {
            let glp = grad_log_prob[r];
            for j in 0..d {
                let u = sample.pre_squash.row(r)[j];
                // ∂log π/∂u = 2·tanh(u) with ε held fixed.
                let gu = grad_u.row(r)[j] + glp * 2.0 * u.tanh();
                let raw = sample.raw_log_std.row(r)[j];
                let clamped = raw < self.log_std_min || raw > self.log_std_max;
                let g_log_std = if clamped {
                    0.0
                } else {
                    gu * sample.std.row(r)[j] * sample.noise.row(r)[j] - glp
                };
                let row = out_grad.row_mut(r);
                row[j] = gu;
                row[d + j] = g_log_std;
            }
        }
        self.net.backward(&sample.cache, &out_grad)
    }
}

/// Reparameterized sample for one state.
pub fn sample_action(mean: &[f64], std: &[f64], noise: &[f64]) -> ActionSample {
    assert!(mean.len() == std.len() && mean.len() == noise.len());
    let pre_squash: Vec<f64> = mean
        .iter()
        .zip(std)
        .zip(noise)
        .map(|((m, s), e)| m + s * e)
        .collect();
    let action = pre_squash.iter().map(|u| u.tanh()).collect();
    let log_prob = log_prob(mean, std, &pre_squash);
    ActionSample {
        noise: noise.to_vec(),
        pre_squash,
        action,
        log_prob,
    }
}

/// Log-density (nats) of the squashed action `tanh(u)` under the
/// tanh-Gaussian with the given mean and standard deviation.
pub fn log_prob(mean: &[f64], std: &[f64], pre_squash: &[f64]) -> f64 {
    mean.iter()
        .zip(std)
        .zip(pre_squash)
        .map(|((m, s), u)| {
            let z = (u - m) / s;
            -0.5 * z * z - s.ln() - HALF_LN_2PI - log_tanh_jacobian(*u)
        })
        .sum()
}
