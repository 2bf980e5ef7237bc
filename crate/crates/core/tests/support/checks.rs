//! Independent numerical checks shared by the core test suites and the
//! acceptance target. Each returns the worst error it saw.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sac_core::critic::{policy_loss_and_grads, q_loss_and_grads, soft_state_values, CriticPair};
use sac_core::net::{Gradients, Matrix, Mlp};
use sac_core::oracle::{
    calibrate_alpha, soft_value_iteration, value_iteration, SoftSolution, TabularMdp,
};
use sac_core::policy::{log_prob, PolicyHead};
use sac_core::replay::{Minibatch, Transition};
use sac_core::temperature::TemperatureState;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn param_mut(net: &mut Mlp, mut idx: usize) -> &mut f64 {
    for l in net.layers_mut() {
        if idx < l.weights.len() {
            return &mut l.weights[idx];
        }
        idx -= l.weights.len();
        if idx < l.bias.len() {
            return &mut l.bias[idx];
        }
        idx -= l.bias.len();
    }
    panic!("parameter index out of range")
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`, zero when both vanish.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` over every parameter of `net`.
pub fn fd_params(net: &Mlp, f: impl Fn(&Mlp) -> f64) -> Vec<f64> {
    let mut probe = net.clone();
    (0..net.param_count())
        .map(|i| {
            let orig = *param_mut(&mut probe, i);
            *param_mut(&mut probe, i) = orig + FD_STEP;
            let up = f(&probe);
            *param_mut(&mut probe, i) = orig - FD_STEP;
            let down = f(&probe);
            *param_mut(&mut probe, i) = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn flat(g: &Gradients) -> Vec<f64> {
    g.iter().copied().collect()
}

/// Raw backward pass of a two-hidden-layer net against `sum(out ⊙ G)`,
/// parameters and input together.
pub fn net_backward_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let net = Mlp::new(&[4, 10, 8, 3], seed).unwrap();
    let x = normal(&mut r, 5, 4);
    let g = normal(&mut r, 5, 3);
    let objective = |n: &Mlp, x: &Matrix| -> f64 {
        let out = n.predict(x).unwrap();
        out.as_slice().iter().zip(g.as_slice()).map(|(o, g)| o * g).sum()
    };
    let cache = net.forward_batch(&x).unwrap();
    let grads = net.backward(&cache, &g).unwrap();
    let params = rel_error(&flat(&grads), &fd_params(&net, |n| objective(n, &x)));
    let mut xp = x.clone();
    let numeric_input: Vec<f64> = (0..x.as_slice().len())
        .map(|i| {
            let orig = xp.as_slice()[i];
            xp.as_mut_slice()[i] = orig + FD_STEP;
            let up = objective(&net, &xp);
            xp.as_mut_slice()[i] = orig - FD_STEP;
            let down = objective(&net, &xp);
            xp.as_mut_slice()[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect();
    params.max(rel_error(grads.input.as_slice(), &numeric_input))
}

pub struct Problem {
    pub policy: PolicyHead,
    pub critic: CriticPair,
    pub batch: Minibatch,
    pub next_noise: Matrix,
    pub noise: Matrix,
    pub alpha: f64,
    pub gamma: f64,
}

/// A small random SAC problem: 3-dim observations, 2-dim actions.
pub fn problem(seed: u64) -> Problem {
    let (obs, act, n) = (3, 2, 6);
    let mut r = rng(seed ^ 0x5eed);
    let policy = PolicyHead::init(obs, act, &[16, 16], seed.wrapping_mul(3) + 1).unwrap();
    let mut critic = CriticPair::init(obs, act, &[16, 16], (seed * 3 + 2, seed * 3 + 3), 0.5).unwrap();
    // Targets drift away from the mains so the bootstrap is non-trivial.
    critic.target1 = Mlp::new(&[obs + act, 16, 16, 1], seed + 1000).unwrap();
    critic.target2 = Mlp::new(&[obs + act, 16, 16, 1], seed + 2000).unwrap();
    let items: Vec<Transition> = (0..n)
        .map(|i| Transition {
            obs: (0..obs).map(|_| r.sample(StandardNormal)).collect(),
            action: (0..act).map(|_| r.random_range(-0.95..0.95)).collect(),
            reward: r.sample(StandardNormal),
            next_obs: (0..obs).map(|_| r.sample(StandardNormal)).collect(),
            done: i % 3 == 0,
            episode_end: false,
            timestamp: i as u64,
        })
        .collect();
    let refs: Vec<&Transition> = items.iter().collect();
    Problem {
        policy,
        critic,
        batch: Minibatch::from_transitions(&refs),
        next_noise: normal(&mut r, n, act),
        noise: normal(&mut r, n, act),
        alpha: r.random_range(0.05..1.5),
        gamma: 0.99,
    }
}

/// Both critic losses against their analytic gradients.
pub fn q_loss_error(seed: u64) -> f64 {
    let p = problem(seed);
    let loss = q_loss_and_grads(&p.critic, &p.policy, p.alpha, p.gamma, &p.batch, &p.next_noise).unwrap();
    let e1 = rel_error(
        &flat(&loss.grads1),
        &fd_params(&p.critic.q1, |q| {
            let mut c = p.critic.clone();
            c.q1 = q.clone();
            q_loss_and_grads(&c, &p.policy, p.alpha, p.gamma, &p.batch, &p.next_noise).unwrap().loss1
        }),
    );
    let e2 = rel_error(
        &flat(&loss.grads2),
        &fd_params(&p.critic.q2, |q| {
            let mut c = p.critic.clone();
            c.q2 = q.clone();
            q_loss_and_grads(&c, &p.policy, p.alpha, p.gamma, &p.batch, &p.next_noise).unwrap().loss2
        }),
    );
    e1.max(e2)
}

/// Reparameterized policy loss over a fixed noise batch.
pub fn policy_loss_error(seed: u64) -> f64 {
    let p = problem(seed);
    let loss = policy_loss_and_grads(&p.critic, &p.policy, p.alpha, &p.batch.obs, &p.noise).unwrap();
    let numeric = fd_params(&p.policy.net, |net| {
        let mut head = p.policy.clone();
        head.net = net.clone();
        policy_loss_and_grads(&p.critic, &head, p.alpha, &p.batch.obs, &p.noise).unwrap().loss
    });
    rel_error(&flat(&loss.grads), &numeric)
}

/// `dJ/dβ` against central differences of `J` in `β`.
pub fn temperature_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(1..64);
    let log_probs: Vec<f64> = (0..n).map(|_| r.random_range(-4.0..3.0)).collect();
    let state = TemperatureState::with_log_alpha(r.random_range(-3.0..1.0), r.random_range(-3.0..1.0), 3e-4);
    let g = state.loss_and_grad(&log_probs).unwrap();
    let j = |beta: f64| {
        let mut s = state.clone();
        s.log_alpha = beta;
        s.loss_and_grad(&log_probs).unwrap().loss
    };
    let numeric = (j(state.log_alpha + FD_STEP) - j(state.log_alpha - FD_STEP)) / (2.0 * FD_STEP);
    rel_error(&[g.d_log_alpha], &[numeric])
}

/// `ln(1 − tanh²u)` written as `ln 4 − 2·ln(eᵘ + e⁻ᵘ)`.
pub fn ln_sech2(u: f64) -> f64 {
    4f64.ln() - 2.0 * (u.exp() + (-u).exp()).ln()
}

/// Composite Simpson rule over `[a, b]` with `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    assert!(n.is_multiple_of(2));
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Density of the squashed action integrated over `(−1, 1)`, by
/// substituting `a = tanh(u)` and weighting with `da/du` computed directly.
pub fn squashed_mass(mean: f64, std: f64) -> f64 {
    let lo = mean - 14.0 * std;
    let hi = mean + 14.0 * std;
    simpson(
        |u| {
            let a = u.tanh();
            log_prob(&[mean], &[std], &[u]).exp() * (1.0 - a * a)
        },
        lo,
        hi,
        40_000,
    )
}

/// Differential entropy of the squashed action.
pub fn squashed_entropy(mean: f64, std: f64) -> f64 {
    simpson(
        |u| {
            let z = (u - mean) / std;
            let log_gauss = -0.5 * z * z - std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
            -log_gauss.exp() * (log_gauss - ln_sech2(u))
        },
        mean - 14.0 * std,
        mean + 14.0 * std,
        40_000,
    )
}

/// Worst `|mass − 1|` over `draws` random (μ, σ).
pub fn density_normalization_error(draws: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    (0..draws)
        .map(|_| {
            let mean = r.random_range(-2.5..2.5);
            let std = r.random_range(-3.0f64..1.0).exp();
            (squashed_mass(mean, std) - 1.0).abs()
        })
        .fold(0.0, f64::max)
}

/// Single-sample soft value averaged over many draws against quadrature of
/// `∫ π(a)[min Q̄(s, a) − α log π(a)] da` for a 1-D action.
pub fn soft_value_error(seed: u64, draws: usize) -> f64 {
    let obs_dim = 2;
    let policy = PolicyHead::init(obs_dim, 1, &[8], seed + 7).unwrap();
    let critic = CriticPair::init(obs_dim, 1, &[16], (seed + 8, seed + 9), 1.0).unwrap();
    let alpha = 0.4;
    let obs = [0.3, -0.7];
    let states = Matrix::from_vec(draws, obs_dim, obs.repeat(draws)).unwrap();
    let mut r = rng(seed);
    let noise = normal(&mut r, draws, 1);
    let values = soft_state_values(&critic, &policy, alpha, &states, &noise).unwrap();
    let mc = values.iter().sum::<f64>() / draws as f64;

    let (mean, std) = policy.distribution(&obs).unwrap();
    let (m, s) = (mean[0], std[0]);
    let exact = simpson(
        |u| {
            let z = (u - m) / s;
            let log_gauss = -0.5 * z * z - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
            let a = u.tanh();
            let input = [obs[0], obs[1], a];
            let q1 = critic.target1.forward(&input).unwrap().0[0];
            let q2 = critic.target2.forward(&input).unwrap().0[0];
            log_gauss.exp() * (q1.min(q2) - alpha * (log_gauss - ln_sech2(u)))
        },
        m - 14.0 * s,
        m + 14.0 * s,
        40_000,
    );
    (mc - exact).abs()
}

/// Sup-norm residual of the soft Bellman equation at the returned solution.
pub fn bellman_residual(mdp: &TabularMdp, alpha: f64, sol: &SoftSolution) -> f64 {
    let mut worst: f64 = 0.0;
    for s in 0..mdp.states() {
        let v = if alpha == 0.0 {
            sol.q[s].iter().copied().fold(f64::NEG_INFINITY, f64::max)
        } else {
            let m = sol.q[s].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m + alpha * sol.q[s].iter().map(|q| ((q - m) / alpha).exp()).sum::<f64>().ln()
        };
        worst = worst.max((v - sol.v[s]).abs());
        for a in 0..mdp.actions() {
            let next: f64 = mdp.transition(s, a).iter().zip(&sol.v).map(|(p, v)| p * v).sum();
            let q = mdp.reward(s, a) + mdp.gamma() * next;
            worst = worst.max((q - sol.q[s][a]).abs());
        }
    }
    worst
}

pub struct OracleReport {
    pub residual: f64,
    pub closed_form: f64,
    pub hard_limit: f64,
    pub monotone: bool,
    pub bandit_root: f64,
}

/// Binary entropy in nats.
pub fn binary_entropy(p: f64) -> f64 {
    let h = |x: f64| if x <= 0.0 { 0.0 } else { -x * x.ln() };
    h(p) + h(1.0 - p)
}

/// Root of `binary_entropy(σ(1/α)) = target` by plain bisection in `ln α`.
pub fn bandit_alpha(target: f64) -> f64 {
    let f = |ln_a: f64| binary_entropy(1.0 / (1.0 + (-1.0 / ln_a.exp()).exp())) - target;
    let (mut lo, mut hi) = (-10.0, 10.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0.5 * (lo + hi)).exp()
}

pub fn oracle_report(seeds: u64) -> OracleReport {
    let mut residual: f64 = 0.0;
    let mut hard_limit: f64 = 0.0;
    let mut monotone = true;
    for seed in 0..seeds {
        let mdp = TabularMdp::random(5, 3, 0.9, seed).unwrap();
        for alpha in [0.05, 0.3, 1.0, 4.0] {
            let sol = soft_value_iteration(&mdp, alpha, 1e-12).unwrap();
            residual = residual.max(bellman_residual(&mdp, alpha, &sol));
        }
        let soft = soft_value_iteration(&mdp, 1e-4, 1e-12).unwrap();
        let hard = value_iteration(&mdp, 1e-12).unwrap();
        for s in 0..5 {
            hard_limit = hard_limit.max((soft.v[s] - hard.v[s]).abs());
        }
        let mut last = 0.0;
        for t in [0.1, 0.3, 0.5, 0.7, 0.9, 1.0] {
            let c = calibrate_alpha(&mdp, t, 1e-9).unwrap();
            monotone &= c.alpha > last;
            last = c.alpha;
        }
    }
    let geo = soft_value_iteration(&TabularMdp::bandit(&[1.0], 0.5).unwrap(), 1.0, 1e-14).unwrap();
    let sym = soft_value_iteration(&TabularMdp::bandit(&[0.0, 0.0], 0.5).unwrap(), 1.0, 1e-14).unwrap();
    let ln2 = std::f64::consts::LN_2;
    let closed_form = [
        (geo.q[0][0] - 2.0).abs(),
        (geo.v[0] - 2.0).abs(),
        (sym.v[0] - 2.0 * ln2).abs(),
        (sym.q[0][0] - ln2).abs(),
        (sym.q[0][1] - ln2).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    let bandit = TabularMdp::bandit(&[1.0, 0.0], 0.5).unwrap();
    let found = calibrate_alpha(&bandit, 0.5, 1e-12).unwrap().alpha;
    OracleReport {
        residual,
        closed_form,
        hard_limit,
        monotone,
        bandit_root: (found - bandit_alpha(0.5)).abs() / bandit_alpha(0.5),
    }
}
