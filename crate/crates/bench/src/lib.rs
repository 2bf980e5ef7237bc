//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sac_core::{Env, EnvKind, Learner, OutputPaths, TrainerConfig, Transition};

/// Random-action transitions from `kind`, episode boundaries included.
pub fn random_transitions(kind: EnvKind, n: usize, seed: u64) -> Vec<Transition> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = kind.make();
    let dim = kind.spec().action_dim;
    let mut obs = env.reset(seed);
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let action: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let step = env.step(&action).expect("env step");
        let end = step.done.is_done();
        out.push(Transition {
            obs: obs.clone(),
            action,
            reward: step.reward,
            next_obs: step.obs.clone(),
            done: end && step.done != sac_core::DoneReason::TimeLimit,
            episode_end: end,
            timestamp: t as u64,
        });
        obs = if end { env.reset(seed + t as u64) } else { step.obs };
    }
    out
}

/// A learner with `fill` random transitions in replay and training gated
/// off, ready for `gradient_step`.
pub fn primed_learner(kind: EnvKind, hidden: &[usize], batch: usize, fill: usize) -> Learner {
    let cfg = TrainerConfig {
        env: kind,
        hidden: hidden.to_vec(),
        batch_size: batch,
        total_steps: u64::MAX / 2,
        initial_random_steps: u64::MAX / 4,
        eval_interval: u64::MAX / 4,
        checkpoint_interval: u64::MAX / 4,
        ..TrainerConfig::default()
    };
    let mut learner = Learner::new(cfg, &OutputPaths::default()).expect("learner");
    learner.ingest(random_transitions(kind, fill, 1)).expect("ingest");
    learner
}
