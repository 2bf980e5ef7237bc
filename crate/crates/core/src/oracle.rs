//! Exact soft value iteration and softmax policies on small finite MDPs.
//!
//! This is the ground truth the function-approximation pipeline is checked
//! against: at a fixed temperature the soft Bellman fixed point has the
//! closed form `V(s) = α·log Σₐ exp(Q(s,a)/α)` and the improved policy is
//! the softmax of `Q/α`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const MAX_ITERATIONS: usize = 100_000;
pub const ALPHA_RANGE: (f64, f64) = (1e-6, 1e6);
const STATIONARY_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),
    #[error("temperature must be positive, got {0}")]
    Alpha(f64),
    #[error("tolerance must be positive, got {0}")]
    Tolerance(f64),
    #[error("no convergence after {0} iterations")]
    NotConverged(usize),
    #[error("target entropy {target} outside (0, ln|A|) = (0, {max})")]
    InvalidTarget { target: f64, max: f64 },
    #[error("target entropy {target} unattainable: mean entropy spans [{lowest}, {highest}] over the temperature range")]
    Unattainable {
        target: f64,
        lowest: f64,
        highest: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    states: usize,
    actions: usize,
    /// `P[s][a][s′]`.
    transitions: Vec<Vec<Vec<f64>>>,
    /// `R[s][a]`.
    rewards: Vec<Vec<f64>>,
    gamma: f64,
}

impl TabularMdp {
    pub fn new(
        transitions: Vec<Vec<Vec<f64>>>,
        rewards: Vec<Vec<f64>>,
        gamma: f64,
    ) -> Result<Self, OracleError> {
        let states = transitions.len();
        if states == 0 {
            return Err(OracleError::InvalidMdp("no states".into()));
        }
        let actions = transitions[0].len();
        if actions == 0 {
            return Err(OracleError::InvalidMdp("no actions".into()));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(OracleError::InvalidMdp(format!("discount {gamma} outside [0, 1)")));
        }
        if rewards.len() != states {
            return Err(OracleError::InvalidMdp("reward table rows != states".into()));
        }
        for s in 0..states {
            if transitions[s].len() != actions || rewards[s].len() != actions {
                return Err(OracleError::InvalidMdp(format!("state {s} has a ragged action row")));
            }
            for a in 0..actions {
                let row = &transitions[s][a];
                if row.len() != states || row.iter().any(|&p| !(p >= 0.0)) {
                    return Err(OracleError::InvalidMdp(format!("bad transition row ({s}, {a})")));
                }
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(OracleError::InvalidMdp(format!(
                        "transition row ({s}, {a}) sums to {total}"
                    )));
                }
                if !rewards[s][a].is_finite() {
                    return Err(OracleError::InvalidMdp(format!("reward ({s}, {a}) not finite")));
                }
            }
        }
        Ok(TabularMdp {
            states,
            actions,
            transitions,
            rewards,
            gamma,
        })
    }

    /// Dense random MDP with rewards in `[-1, 1]`.
    pub fn random(states: usize, actions: usize, gamma: f64, seed: u64) -> Result<Self, OracleError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut transitions = Vec::with_capacity(states);
        let mut rewards = Vec::with_capacity(states);
        for _ in 0..states {
            let mut p_s = Vec::with_capacity(actions);
            let mut r_s = Vec::with_capacity(actions);
            for _ in 0..actions {
                let mut row: Vec<f64> = (0..states).map(|_| rng.random_range(0.0..1.0)).collect();
                let total: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= total);
                // Push the rounding residue into the largest entry.
                let residue = 1.0 - row.iter().sum::<f64>();
                let imax = (0..states)
                    .max_by(|&i, &j| row[i].total_cmp(&row[j]))
                    .unwrap_or(0);
                row[imax] += residue;
                p_s.push(row);
                r_s.push(rng.random_range(-1.0..=1.0));
            }
            transitions.push(p_s);
            rewards.push(r_s);
        }
        Self::new(transitions, rewards, gamma)
    }

    /// One state, self-looping, with the given per-action rewards.
    pub fn bandit(rewards: &[f64], gamma: f64) -> Result<Self, OracleError> {
        let transitions = vec![vec![vec![1.0]; rewards.len()]];
        Self::new(transitions, vec![rewards.to_vec()], gamma)
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s][a]
    }

    pub fn transition(&self, s: usize, a: usize) -> &[f64] {
        &self.transitions[s][a]
    }

    /// `R(s,a) + γ·Σ_{s′} P(s′|s,a)·V(s′)`.
    pub fn backup(&self, values: &[f64]) -> Vec<Vec<f64>> {
        (0..self.states)
            .map(|s| {
                (0..self.actions)
                    .map(|a| {
                        let expected: f64 = self.transitions[s][a]
                            .iter()
                            .zip(values)
                            .map(|(p, v)| p * v)
                            .sum();
                        self.rewards[s][a] + self.gamma * expected
                    })
                    .collect()
            })
            .collect()
    }
}

/// `α·log Σ exp(q/α)` with max subtraction.
pub fn soft_max_value(q: &[f64], alpha: f64) -> f64 {
    let m = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = q.iter().map(|x| ((x - m) / alpha).exp()).sum();
    m + alpha * sum.ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftSolution {
    pub q: Vec<Vec<f64>>,
    pub v: Vec<f64>,
    pub iterations: usize,
    /// Sup-norm change of `Q` at each sweep.
    pub deltas: Vec<f64>,
}

fn sup_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .fold(0.0, |m, (x, y)| f64::max(m, (x - y).abs()))
}

fn iterate(
    mdp: &TabularMdp,
    tol: f64,
    value_of: impl Fn(&[f64]) -> f64,
) -> Result<SoftSolution, OracleError> {
    if !(tol > 0.0) {
        return Err(OracleError::Tolerance(tol));
    }
    let mut q = vec![vec![0.0; mdp.actions]; mdp.states];
    let mut deltas = Vec::new();
    for it in 1..=MAX_ITERATIONS {
        let v: Vec<f64> = q.iter().map(|row| value_of(row)).collect();
        let next = mdp.backup(&v);
        let delta = sup_diff(&next, &q);
        deltas.push(delta);
        q = next;
        if delta < tol {
            let v = q.iter().map(|row| value_of(row)).collect();
            return Ok(SoftSolution {
                q,
                v,
                iterations: it,
                deltas,
            });
        }
    }
    Err(OracleError::NotConverged(MAX_ITERATIONS))
}

/// Fixed point of `Q = R + γ·P·V`, `V(s) = α·log Σₐ exp(Q(s,a)/α)`.
pub fn soft_value_iteration(mdp: &TabularMdp, alpha: f64, tol: f64) -> Result<SoftSolution, OracleError> {
    if !(alpha > 0.0) {
        return Err(OracleError::Alpha(alpha));
    }
    iterate(mdp, tol, |row| soft_max_value(row, alpha))
}

/// Standard (hard-max) value iteration.
pub fn value_iteration(mdp: &TabularMdp, tol: f64) -> Result<SoftSolution, OracleError> {
    iterate(mdp, tol, |row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// `π(a|s) ∝ exp(Q(s,a)/α)`, rows normalized.
pub fn soft_policy(q: &[Vec<f64>], alpha: f64) -> Result<Vec<Vec<f64>>, OracleError> {
    if !(alpha > 0.0) {
        return Err(OracleError::Alpha(alpha));
    }
    Ok(q.iter()
        .map(|row| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = row.iter().map(|x| ((x - m) / alpha).exp()).collect();
            let z: f64 = w.iter().sum();
            w.into_iter().map(|x| x / z).collect()
        })
        .collect())
}

/// `H(s) = −Σₐ π log π`, with `0·log 0 = 0`.
pub fn entropy_of(policy: &[Vec<f64>]) -> Vec<f64> {
    policy
        .iter()
        .map(|row| {
            -row.iter()
                .filter(|&&p| p > 0.0)
                .map(|p| p * p.ln())
                .sum::<f64>()
        })
        .collect()
}

/// Stationary state distribution of the chain induced by `policy`.
///
/// Power iteration from uniform on the lazy chain `(I + P_π)/2`, which has
/// the same stationary distribution and cannot oscillate.
pub fn stationary_distribution(mdp: &TabularMdp, policy: &[Vec<f64>]) -> Result<Vec<f64>, OracleError> {
    let n = mdp.states;
    let mut chain = vec![vec![0.0; n]; n];
    for s in 0..n {
        for a in 0..mdp.actions {
            for (sp, p) in mdp.transitions[s][a].iter().enumerate() {
                chain[s][sp] += policy[s][a] * p;
            }
        }
    }
    let mut d = vec![1.0 / n as f64; n];
    for _ in 0..MAX_ITERATIONS * 10 {
        let mut next = vec![0.0; n];
        for s in 0..n {
            for sp in 0..n {
                next[sp] += d[s] * chain[s][sp];
            }
        }
        let next: Vec<f64> = next.iter().zip(&d).map(|(x, y)| 0.5 * (x + y)).collect();
        let change = next
            .iter()
            .zip(&d)
            .fold(0.0, |m, (x, y)| f64::max(m, (x - y).abs()));
        d = next;
        if change < STATIONARY_TOL {
            return Ok(d);
        }
    }
    Err(OracleError::NotConverged(MAX_ITERATIONS * 10))
}

/// Stationary-distribution-weighted entropy of the soft-optimal policy at
/// temperature `alpha`.
pub fn mean_entropy(mdp: &TabularMdp, alpha: f64, tol: f64) -> Result<f64, OracleError> {
    let sol = soft_value_iteration(mdp, alpha, tol)?;
    let pi = soft_policy(&sol.q, alpha)?;
    let d = stationary_distribution(mdp, &pi)?;
    Ok(entropy_of(&pi).iter().zip(&d).map(|(h, w)| h * w).sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub alpha: f64,
    pub entropy: f64,
    pub iterations: usize,
}

/// Bisection on `log α` so that the mean entropy of the soft-optimal policy
/// hits `target` within `tol`.
pub fn calibrate_alpha(mdp: &TabularMdp, target: f64, tol: f64) -> Result<Calibration, OracleError> {
    let max = (mdp.actions as f64).ln();
    if !(target > 0.0 && target < max) {
        return Err(OracleError::InvalidTarget { target, max });
    }
    if !(tol > 0.0) {
        return Err(OracleError::Tolerance(tol));
    }
    let vi_tol = 1e-10;
    let (mut lo, mut hi) = (ALPHA_RANGE.0.ln(), ALPHA_RANGE.1.ln());
    let h_lo = mean_entropy(mdp, lo.exp(), vi_tol)?;
    let h_hi = mean_entropy(mdp, hi.exp(), vi_tol)?;
    if target < h_lo - tol || target > h_hi + tol {
        return Err(OracleError::Unattainable {
            target,
            lowest: h_lo,
            highest: h_hi,
        });
    }
    for iterations in 1..=200 {
        let mid = 0.5 * (lo + hi);
        let h = mean_entropy(mdp, mid.exp(), vi_tol)?;
        if (h - target).abs() <= tol {
            return Ok(Calibration {
                alpha: mid.exp(),
                entropy: h,
                iterations,
            });
        }
        if h < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(OracleError::NotConverged(200))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn single_action_geometric_series() {
        let mdp = TabularMdp::bandit(&[1.0], 0.5).unwrap();
        let sol = soft_value_iteration(&mdp, 1.0, 1e-13).unwrap();
        assert!((sol.q[0][0] - 2.0).abs() < 1e-10);
        assert!((sol.v[0] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn symmetric_two_action_closed_form() {
        let mdp = TabularMdp::bandit(&[0.0, 0.0], 0.5).unwrap();
        let sol = soft_value_iteration(&mdp, 1.0, 1e-13).unwrap();
        assert!((sol.v[0] - 2.0 * LN_2).abs() < 1e-10);
        assert!((sol.q[0][0] - LN_2).abs() < 1e-10);
        assert!((sol.q[0][1] - LN_2).abs() < 1e-10);
    }

    #[test]
    fn invalid_inputs() {
        assert!(TabularMdp::new(vec![vec![vec![0.5]]], vec![vec![0.0]], 0.5).is_err());
        assert!(TabularMdp::bandit(&[0.0], 1.0).is_err());
        let mdp = TabularMdp::bandit(&[0.0], 0.5).unwrap();
        assert_eq!(soft_value_iteration(&mdp, 0.0, 1e-6), Err(OracleError::Alpha(0.0)));
        assert_eq!(soft_value_iteration(&mdp, 1.0, 0.0), Err(OracleError::Tolerance(0.0)));
    }

    #[test]
    fn softmax_limits() {
        let q = vec![vec![1.0, 0.0, -0.5]];
        let hot = soft_policy(&q, 100.0).unwrap();
        assert!(hot[0].iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-2));
        let cold = soft_policy(&q, 0.001).unwrap();
        assert!((cold[0][0] - 1.0).abs() < 1e-3);
        let uniform = soft_policy(&[vec![2.0, 2.0]], 0.7).unwrap();
        assert_eq!(uniform[0], vec![0.5, 0.5]);
        assert!((entropy_of(&uniform)[0] - LN_2).abs() < 1e-15);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy_of(&[vec![0.0, 1.0, 0.0]]), vec![0.0]);
        let h = entropy_of(&[vec![1.0 / 3.0; 3]])[0];
        assert!((h - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn degenerate_calibration_reports() {
        let mdp = TabularMdp::bandit(&[0.5, 0.5, 0.5], 0.9).unwrap();
        for alpha in [1e-3, 1.0, 1e3] {
            assert!((mean_entropy(&mdp, alpha, 1e-10).unwrap() - 3f64.ln()).abs() < 1e-12);
        }
        assert!(matches!(
            calibrate_alpha(&mdp, 0.5, 1e-6),
            Err(OracleError::Unattainable { .. })
        ));
        assert!(matches!(
            calibrate_alpha(&mdp, 2.0, 1e-6),
            Err(OracleError::InvalidTarget { .. })
        ));
    }

    #[test]
    fn stationary_handles_periodic_chain() {
        // Two states that swap deterministically.
        let mdp = TabularMdp::new(
            vec![vec![vec![0.0, 1.0]], vec![vec![1.0, 0.0]]],
            vec![vec![0.0], vec![0.0]],
            0.5,
        )
        .unwrap();
        let d = stationary_distribution(&mdp, &[vec![1.0], vec![1.0]]).unwrap();
        assert!((d[0] - 0.5).abs() < 1e-9);
    }
}
