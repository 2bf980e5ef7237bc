//! The soft actor-critic training loop: agent state, the learner that owns
//! the replay buffer and performs gradient steps, the collector that rolls
//! out episodes, evaluation, and CSV logging.

use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::config::{ConfigError, TrainerConfig, UpdateSchedule};
use crate::critic::{policy_loss_and_grads, q_loss_and_grads, CriticError, CriticPair};
use crate::envs::{DoneReason, Env, EnvError, EnvKind};
use crate::harness::checkpoint::{checkpoint_path, Checkpoint, CheckpointError, RngState};
use crate::harness::wire::RawRecord;
use crate::net::{AdamConfig, AdamState, Matrix, NetError};
use crate::policy::{sample_action, PolicyHead};
use crate::replay::{Minibatch, ReplayBuffer, ReplayError, Transition};
use crate::temperature::{TemperatureError, TemperatureState};

pub const CSV_HEADER: &str = "step,episodes,eval_return_mean,eval_return_min,eval_return_max,entropy_estimate,alpha,q_loss,policy_loss,alpha_loss";

/// Seed-derivation domains; keep stable, they define every random stream.
pub mod tag {
    pub const POLICY: u64 = 1;
    pub const Q1: u64 = 2;
    pub const Q2: u64 = 3;
    pub const LEARNER: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const ACTOR: u64 = 6;
    pub const RANDOM_BASELINE: u64 = 7;
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Critic(#[from] CriticError),
    #[error(transparent)]
    Temperature(#[from] TemperatureError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error(
        "non-finite loss at gradient step {grad_step}: q1={q1} q2={q2} policy={policy} alpha={alpha_loss}; batch indices {indices:?}"
    )]
    NonFiniteLoss {
        grad_step: u64,
        indices: Vec<usize>,
        q1: f64,
        q2: f64,
        policy: f64,
        alpha_loss: f64,
    },
    #[error("checkpoint does not fit config: {0}")]
    Schema(String),
    #[error("{0}")]
    Invalid(String),
}

/// All trainable state: policy, twin critics with targets, temperature, and
/// one Adam state per network.
#[derive(Clone, Debug, PartialEq)]
pub struct Agent {
    pub policy: PolicyHead,
    pub critic: CriticPair,
    pub temperature: TemperatureState,
    pub policy_opt: AdamState,
    pub q1_opt: AdamState,
    pub q2_opt: AdamState,
    /// Temperature learning is disabled when set.
    pub fixed_alpha: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateStats {
    pub q1_loss: f64,
    pub q2_loss: f64,
    pub policy_loss: f64,
    pub alpha_loss: f64,
    pub entropy: f64,
    pub log_alpha_before: f64,
    pub log_alpha_after: f64,
}

impl UpdateStats {
    pub fn q_loss(&self) -> f64 {
        0.5 * (self.q1_loss + self.q2_loss)
    }

    fn is_finite(&self) -> bool {
        [self.q1_loss, self.q2_loss, self.policy_loss, self.alpha_loss]
            .iter()
            .all(|v| v.is_finite())
    }
}

impl Agent {
    pub fn init(cfg: &TrainerConfig) -> Result<Self, TrainError> {
        let (obs_dim, act_dim) = (cfg.obs_dim(), cfg.action_dim());
        let policy = PolicyHead::init(obs_dim, act_dim, &cfg.hidden, derive_seed(cfg.seed, &[tag::POLICY]))?;
        let critic = CriticPair::init(
            obs_dim,
            act_dim,
            &cfg.hidden,
            (derive_seed(cfg.seed, &[tag::Q1]), derive_seed(cfg.seed, &[tag::Q2])),
            cfg.tau,
        )?;
        let adam = AdamConfig::with_learning_rate(cfg.learning_rate);
        let log_alpha = cfg.fixed_alpha.map_or(cfg.initial_log_alpha, f64::ln);
        Ok(Agent {
            policy_opt: AdamState::for_network(&policy.net, adam),
            q1_opt: AdamState::for_network(&critic.q1, adam),
            q2_opt: AdamState::for_network(&critic.q2, adam),
            temperature: TemperatureState::with_log_alpha(log_alpha, cfg.resolved_target_entropy(), cfg.learning_rate)
                .with_rule(cfg.alpha_update),
            policy,
            critic,
            fixed_alpha: cfg.fixed_alpha,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.temperature.alpha()
    }

    /// One gradient phase: both critics, then the policy against the updated
    /// critics, then the temperature from the policy step's log-probabilities,
    /// then the target networks.
    pub fn update(
        &mut self,
        gamma: f64,
        batch: &Minibatch,
        next_noise: &Matrix,
        noise: &Matrix,
    ) -> Result<UpdateStats, TrainError> {
        let log_alpha_before = self.temperature.log_alpha;
        let alpha = self.alpha();
        let q = q_loss_and_grads(&self.critic, &self.policy, alpha, gamma, batch, next_noise)?;
        if q.loss1.is_finite() && q.loss2.is_finite() {
            self.q1_opt.step_network(&mut self.critic.q1, &q.grads1)?;
            self.q2_opt.step_network(&mut self.critic.q2, &q.grads2)?;
        }
        let p = policy_loss_and_grads(&self.critic, &self.policy, alpha, &batch.obs, noise)?;
        let t = self.temperature.loss_and_grad(&p.log_probs)?;
        let stats = UpdateStats {
            q1_loss: q.loss1,
            q2_loss: q.loss2,
            policy_loss: p.loss,
            alpha_loss: t.loss,
            entropy: t.entropy,
            log_alpha_before,
            log_alpha_after: log_alpha_before,
        };
        if !stats.is_finite() {
            return Ok(stats);
        }
        self.policy_opt.step_network(&mut self.policy.net, &p.grads)?;
        if self.fixed_alpha.is_none() {
            self.temperature.update(t.d_log_alpha)?;
        }
        self.critic.target_update();
        Ok(UpdateStats {
            log_alpha_after: self.temperature.log_alpha,
            ..stats
        })
    }

    /// Checks that a checkpoint's networks fit this agent's shapes.
    fn check_shapes(&self, c: &Checkpoint) -> Result<(), TrainError> {
        let ok = c.policy.same_shape(&self.policy.net)
            && [&c.q1, &c.q2, &c.target1, &c.target2]
                .iter()
                .all(|n| n.same_shape(&self.critic.q1))
            && c.policy_opt.len() == self.policy_opt.len()
            && c.q1_opt.len() == self.q1_opt.len()
            && c.q2_opt.len() == self.q2_opt.len()
            && c.alpha_opt.len() == 1;
        if ok {
            Ok(())
        } else {
            Err(TrainError::Schema("network shapes differ".into()))
        }
    }
}

/// Statistics of deterministic-policy evaluation episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalStats {
    pub returns: Vec<f64>,
    pub lengths: Vec<usize>,
    /// Episodes ending in a terminal state (goal reached, fall).
    pub terminal: usize,
}

impl EvalStats {
    pub fn mean(&self) -> f64 {
        mean(&self.returns)
    }

    pub fn min(&self) -> f64 {
        self.returns.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.returns.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean_length(&self) -> f64 {
        self.lengths.iter().sum::<usize>() as f64 / self.lengths.len().max(1) as f64
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Rolls out `episodes` deterministic episodes, each in a fresh environment
/// reset from a seed derived from `seed` and the episode index.
pub fn evaluate(
    policy: &PolicyHead,
    kind: EnvKind,
    history: usize,
    episodes: usize,
    seed: u64,
) -> Result<EvalStats, TrainError> {
    let mut stats = EvalStats {
        returns: Vec::with_capacity(episodes),
        lengths: Vec::with_capacity(episodes),
        terminal: 0,
    };
    for i in 0..episodes {
        let mut env = kind.make_wrapped(history);
        let mut obs = env.reset(derive_seed(seed, &[tag::EVAL, i as u64]));
        let (mut ret, mut len) = (0.0, 0);
        loop {
            let step = env.step(&policy.deterministic_action(&obs)?)?;
            ret += step.reward;
            len += 1;
            obs = step.obs;
            if step.done.is_done() {
                if step.done.is_terminal() {
                    stats.terminal += 1;
                }
                break;
            }
        }
        stats.returns.push(ret);
        stats.lengths.push(len);
    }
    Ok(stats)
}

/// Returns of uniformly random actions, plus an optional per-episode
/// progress measure read from the final raw state.
pub fn random_rollouts(
    kind: EnvKind,
    episodes: usize,
    seed: u64,
    progress: impl Fn(&[f64]) -> f64,
) -> Result<Vec<(f64, f64)>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[tag::RANDOM_BASELINE]));
    let d = kind.spec().action_dim;
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut env = kind.make();
        env.reset(rng.random());
        let mut ret = 0.0;
        loop {
            let a: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = env.step(&a)?;
            ret += s.reward;
            if s.done.is_done() {
                break;
            }
        }
        out.push((ret, progress(&env.raw_state())));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub step: u64,
    pub episodes: u64,
    pub eval_mean: f64,
    pub eval_min: f64,
    pub eval_max: f64,
    pub entropy: f64,
    pub alpha: f64,
    pub q_loss: f64,
    pub policy_loss: f64,
    pub alpha_loss: f64,
}

/// Shortest round-trip decimal; NaN prints as `nan`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:?}")
    }
}

impl CsvRow {
    pub fn to_line(&self) -> String {
        let mut s = format!("{},{}", self.step, self.episodes);
        for v in [
            self.eval_mean,
            self.eval_min,
            self.eval_max,
            self.entropy,
            self.alpha,
            self.q_loss,
            self.policy_loss,
            self.alpha_loss,
        ] {
            let _ = write!(s, ",{}", fmt_f64(v));
        }
        s
    }

    pub fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 10 {
            return None;
        }
        let num = |s: &str| -> Option<f64> {
            if s == "nan" {
                Some(f64::NAN)
            } else {
                s.parse().ok()
            }
        };
        Some(CsvRow {
            step: f[0].parse().ok()?,
            episodes: f[1].parse().ok()?,
            eval_mean: num(f[2])?,
            eval_min: num(f[3])?,
            eval_max: num(f[4])?,
            entropy: num(f[5])?,
            alpha: num(f[6])?,
            q_loss: num(f[7])?,
            policy_loss: num(f[8])?,
            alpha_loss: num(f[9])?,
        })
    }
}

/// Comment block echoing the resolved config and its hash.
pub fn config_echo(cfg: &TrainerConfig) -> String {
    let mut s: String = cfg.to_text().lines().map(|l| format!("# {l}\n")).collect();
    let _ = writeln!(s, "# config_hash={:016x}", cfg.hash());
    s
}

/// Rows of a training CSV, skipping the comment block and header.
pub fn read_csv_rows(text: &str) -> Vec<CsvRow> {
    text.lines()
        .filter(|l| !l.starts_with('#') && *l != CSV_HEADER && !l.trim().is_empty())
        .filter_map(CsvRow::parse)
        .collect()
}

#[derive(Default, Debug, Clone)]
struct Window {
    q: f64,
    policy: f64,
    alpha: f64,
    entropy: f64,
    n: u64,
}

impl Window {
    fn add(&mut self, s: &UpdateStats) {
        self.q += s.q_loss();
        self.policy += s.policy_loss;
        self.alpha += s.alpha_loss;
        self.entropy += s.entropy;
        self.n += 1;
    }

    fn means(&self) -> [f64; 4] {
        if self.n == 0 {
            return [f64::NAN; 4];
        }
        let n = self.n as f64;
        [self.entropy / n, self.q / n, self.policy / n, self.alpha / n]
    }
}

/// Where a learner writes its artifacts. Every field is optional.
#[derive(Default, Debug, Clone)]
pub struct OutputPaths {
    pub csv: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Per-gradient-step losses as raw bit patterns, for exact comparisons.
    pub trace: Option<PathBuf>,
}

/// Owns the agent and replay buffer; turns ingested transitions into
/// gradient steps, log rows and checkpoints.
pub struct Learner {
    pub config: TrainerConfig,
    pub agent: Agent,
    pub replay: ReplayBuffer,
    rng: ChaCha8Rng,
    pub env_steps: u64,
    pub grad_steps: u64,
    pub episodes: u64,
    pub version: u64,
    pub rows: Vec<CsvRow>,
    /// Publish a checkpoint after every ingestion instead of on the interval.
    pub publish_every_ingest: bool,
    window: Window,
    next_eval: u64,
    next_checkpoint: u64,
    csv: Option<BufWriter<File>>,
    trace: Option<BufWriter<File>>,
    checkpoint_dir: Option<PathBuf>,
}

impl Learner {
    pub fn new(config: TrainerConfig, outputs: &OutputPaths) -> Result<Self, TrainError> {
        config.validate()?;
        let agent = Agent::init(&config)?;
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[tag::LEARNER]));
        Self::assemble(config, agent, rng, 0, outputs, false)
    }

    /// Resumes from a checkpoint with an empty replay buffer. Existing CSV
    /// and trace files are cut back to the checkpoint and appended to.
    pub fn resume(config: TrainerConfig, ckpt: Checkpoint, outputs: &OutputPaths) -> Result<Self, TrainError> {
        config.validate()?;
        if ckpt.config_hash != config.hash() {
            return Err(CheckpointError::ConfigMismatch {
                expected: config.hash(),
                found: ckpt.config_hash,
            }
            .into());
        }
        let mut agent = Agent::init(&config)?;
        agent.check_shapes(&ckpt)?;
        agent.policy.net = ckpt.policy;
        agent.critic.q1 = ckpt.q1;
        agent.critic.q2 = ckpt.q2;
        agent.critic.target1 = ckpt.target1;
        agent.critic.target2 = ckpt.target2;
        agent.temperature.log_alpha = ckpt.log_alpha;
        agent.temperature.optimizer = ckpt.alpha_opt;
        agent.policy_opt = ckpt.policy_opt;
        agent.q1_opt = ckpt.q1_opt;
        agent.q2_opt = ckpt.q2_opt;
        if let Some(p) = outputs.csv.as_deref().filter(|p| p.exists()) {
            truncate_lines(p, |l| {
                l.starts_with('#') || l == CSV_HEADER || CsvRow::parse(l).is_some_and(|r| r.step <= ckpt.env_steps)
            })?;
        }
        if let Some(p) = outputs.trace.as_deref().filter(|p| p.exists()) {
            truncate_lines(p, |l| {
                l.split(',')
                    .next()
                    .and_then(|s| s.parse::<u64>().ok())
                    .is_some_and(|g| g <= ckpt.grad_steps)
            })?;
        }
        let mut l = Self::assemble(config, agent, ckpt.rng.restore(), ckpt.version, outputs, true)?;
        l.env_steps = ckpt.env_steps;
        l.grad_steps = ckpt.grad_steps;
        l.episodes = ckpt.episodes;
        l.next_eval = next_multiple(l.env_steps, l.config.eval_interval);
        l.next_checkpoint = next_multiple(l.env_steps, l.config.checkpoint_interval);
        Ok(l)
    }

    fn assemble(
        config: TrainerConfig,
        agent: Agent,
        rng: ChaCha8Rng,
        version: u64,
        outputs: &OutputPaths,
        append: bool,
    ) -> Result<Self, TrainError> {
        let replay = ReplayBuffer::new(config.buffer_capacity, config.obs_dim(), config.action_dim())?;
        let open = |p: &Path| -> io::Result<(BufWriter<File>, bool)> {
            let fresh = !(append && p.exists());
            let f = if fresh {
                File::create(p)?
            } else {
                OpenOptions::new().append(true).open(p)?
            };
            Ok((BufWriter::new(f), fresh))
        };
        let csv = match &outputs.csv {
            Some(p) => {
                let (mut w, fresh) = open(p)?;
                if fresh {
                    w.write_all(config_echo(&config).as_bytes())?;
                    writeln!(w, "{CSV_HEADER}")?;
                    w.flush()?;
                }
                Some(w)
            }
            None => None,
        };
        let trace = match &outputs.trace {
            Some(p) => Some(open(p)?.0),
            None => None,
        };
        if let Some(dir) = &outputs.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
        }
        Ok(Learner {
            next_eval: config.eval_interval,
            next_checkpoint: config.checkpoint_interval,
            config,
            agent,
            replay,
            rng,
            env_steps: 0,
            grad_steps: 0,
            episodes: 0,
            version,
            rows: Vec::new(),
            publish_every_ingest: false,
            window: Window::default(),
            csv,
            trace,
            checkpoint_dir: outputs.checkpoint_dir.clone(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: self.config.hash(),
            version: self.version,
            env_steps: self.env_steps,
            grad_steps: self.grad_steps,
            episodes: self.episodes,
            policy: self.agent.policy.net.clone(),
            q1: self.agent.critic.q1.clone(),
            q2: self.agent.critic.q2.clone(),
            target1: self.agent.critic.target1.clone(),
            target2: self.agent.critic.target2.clone(),
            log_alpha: self.agent.temperature.log_alpha,
            policy_opt: self.agent.policy_opt.clone(),
            q1_opt: self.agent.q1_opt.clone(),
            q2_opt: self.agent.q2_opt.clone(),
            alpha_opt: self.agent.temperature.optimizer.clone(),
            rng: RngState::capture(&self.rng),
        }
    }

    /// Writes the current state under the current version, if a checkpoint
    /// directory is configured.
    pub fn save_checkpoint(&self) -> Result<Option<PathBuf>, TrainError> {
        match &self.checkpoint_dir {
            Some(dir) => {
                let path = checkpoint_path(dir);
                self.checkpoint().save_atomic(&path)?;
                Ok(Some(path))
            }
            None => Ok(None),
        }
    }

    fn publish(&mut self) -> Result<(), TrainError> {
        self.version += 1;
        self.save_checkpoint()?;
        log::debug!("published checkpoint v{} at {} env steps", self.version, self.env_steps);
        Ok(())
    }

    pub fn remaining_steps(&self) -> u64 {
        self.config.total_steps.saturating_sub(self.env_steps)
    }

    pub fn is_finished(&self) -> bool {
        self.env_steps >= self.config.total_steps
    }

    /// One gradient step on a fresh minibatch.
    pub fn gradient_step(&mut self) -> Result<UpdateStats, TrainError> {
        let b = self.config.batch_size;
        let d = self.config.action_dim();
        let batch = self.replay.sample(b, &mut self.rng)?;
        let next_noise = normal_matrix(&mut self.rng, b, d);
        let noise = normal_matrix(&mut self.rng, b, d);
        let stats = self.agent.update(self.config.gamma, &batch, &next_noise, &noise)?;
        self.grad_steps += 1;
        if !stats.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                grad_step: self.grad_steps,
                indices: batch.indices,
                q1: stats.q1_loss,
                q2: stats.q2_loss,
                policy: stats.policy_loss,
                alpha_loss: stats.alpha_loss,
            });
        }
        self.window.add(&stats);
        if let Some(t) = &mut self.trace {
            writeln!(
                t,
                "{},{:016x},{:016x},{:016x},{:016x},{:016x},{:016x},{:016x}",
                self.grad_steps,
                stats.q1_loss.to_bits(),
                stats.q2_loss.to_bits(),
                stats.policy_loss.to_bits(),
                stats.alpha_loss.to_bits(),
                stats.entropy.to_bits(),
                stats.log_alpha_before.to_bits(),
                stats.log_alpha_after.to_bits(),
            )?;
        }
        Ok(stats)
    }

    fn train(&mut self, n: u64) -> Result<(), TrainError> {
        if self.replay.len() < self.config.batch_size {
            return Ok(());
        }
        for _ in 0..n * self.config.gradient_steps as u64 {
            self.gradient_step()?;
        }
        Ok(())
    }

    /// Adds transitions (rewards scaled by the configured factor) and runs
    /// the gradient steps they pay for. Transitions beyond the step budget
    /// are dropped. Returns how many were taken.
    pub fn ingest(&mut self, transitions: Vec<Transition>) -> Result<usize, TrainError> {
        let take = (self.remaining_steps().min(transitions.len() as u64)) as usize;
        let mut taken = 0;
        for mut t in transitions.into_iter().take(take) {
            t.reward *= self.config.reward_scale;
            let end = t.episode_end;
            self.replay.push(t)?;
            self.env_steps += 1;
            if end {
                self.episodes += 1;
            }
            taken += 1;
            if self.config.update_schedule == UpdateSchedule::Step {
                self.train(1)?;
            }
        }
        if self.config.update_schedule == UpdateSchedule::Episode {
            self.train(taken as u64)?;
        }
        if taken == 0 {
            return Ok(0);
        }
        if self.env_steps >= self.next_eval {
            self.log_row()?;
            self.next_eval = next_multiple(self.env_steps, self.config.eval_interval);
        }
        if self.publish_every_ingest {
            self.publish()?;
        } else if self.env_steps >= self.next_checkpoint {
            self.publish()?;
            self.next_checkpoint = next_multiple(self.env_steps, self.config.checkpoint_interval);
        }
        Ok(taken)
    }

    fn log_row(&mut self) -> Result<(), TrainError> {
        let eval = evaluate(
            &self.agent.policy,
            self.config.env,
            self.config.history_len(),
            self.config.eval_episodes,
            self.config.seed,
        )?;
        let [entropy, q_loss, policy_loss, alpha_loss] = self.window.means();
        let row = CsvRow {
            step: self.env_steps,
            episodes: self.episodes,
            eval_mean: eval.mean(),
            eval_min: eval.min(),
            eval_max: eval.max(),
            entropy,
            alpha: self.agent.alpha(),
            q_loss,
            policy_loss,
            alpha_loss,
        };
        log::info!(
            "step {} episodes {} return {:.2} entropy {:.3} alpha {:.4}",
            row.step,
            row.episodes,
            row.eval_mean,
            row.entropy,
            row.alpha
        );
        if let Some(w) = &mut self.csv {
            writeln!(w, "{}", row.to_line())?;
            w.flush()?;
        }
        self.rows.push(row);
        self.window = Window::default();
        Ok(())
    }

    /// Final log row and checkpoint once the step budget is spent.
    pub fn finish(&mut self) -> Result<(), TrainError> {
        if self.env_steps > 0 && self.rows.last().map(|r| r.step) != Some(self.env_steps) {
            self.log_row()?;
        }
        if let Some(t) = &mut self.trace {
            t.flush()?;
        }
        if let Some(w) = &mut self.csv {
            w.flush()?;
        }
        self.save_checkpoint()?;
        Ok(())
    }
}

fn truncate_lines(path: &Path, keep: impl Fn(&str) -> bool) -> io::Result<()> {
    let text = std::fs::read_to_string(path)?;
    let kept: String = text
        .split_inclusive('\n')
        .filter(|l| l.ends_with('\n') && keep(l.trim_end()))
        .collect();
    std::fs::write(path, kept)
}

fn next_multiple(x: u64, k: u64) -> u64 {
    (x / k + 1) * k
}

pub fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data).expect("length matches")
}

/// Identity and limits of one rollout worker.
#[derive(Clone, Debug)]
pub struct CollectorConfig {
    pub kind: EnvKind,
    pub history: usize,
    pub seed: u64,
    pub actor: u64,
    pub incarnation: u32,
    /// Uniform random actions while the worker's own step count is below this.
    pub random_steps: u64,
    pub smoothing_episodes: u64,
    /// Total steps this worker may take; the last one is cut as a time limit.
    pub budget: Option<u64>,
    /// Clock offset added to step indices to form timestamps.
    pub epoch: u64,
}

impl CollectorConfig {
    pub fn from_trainer(cfg: &TrainerConfig, actor: u64, incarnation: u32, actors: u64) -> Self {
        CollectorConfig {
            kind: cfg.env,
            history: cfg.history_len(),
            seed: cfg.seed,
            actor,
            incarnation,
            random_steps: cfg.initial_random_steps.div_ceil(actors.max(1)),
            smoothing_episodes: cfg.action_smoothing_episodes,
            budget: None,
            epoch: 0,
        }
    }
}

/// One environment step, both as a training transition and as the raw log
/// record an actor ships to the labeler.
#[derive(Clone, Debug, PartialEq)]
pub struct CollectedStep {
    pub transition: Transition,
    pub record: RawRecord,
}

pub struct Collector {
    pub config: CollectorConfig,
    env: Box<dyn Env + Send>,
    /// Steps taken across all episodes.
    pub steps: u64,
    /// Episodes started.
    pub episode_index: u64,
    obs: Vec<f64>,
    rng: ChaCha8Rng,
    t: u32,
    smoothed: Vec<f64>,
    in_episode: bool,
}

impl Collector {
    pub fn new(config: CollectorConfig) -> Self {
        let env = config.kind.make_wrapped(config.history);
        let d = config.kind.spec().action_dim;
        Collector {
            config,
            env,
            steps: 0,
            episode_index: 0,
            obs: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(0),
            t: 0,
            smoothed: vec![0.0; d],
            in_episode: false,
        }
    }

    /// Episode id as carried on the wire: incarnation in the high half.
    pub fn episode_id(&self) -> u64 {
        ((self.config.incarnation as u64) << 32) | self.episode_index.saturating_sub(1)
    }

    pub fn exhausted(&self) -> bool {
        self.config.budget.is_some_and(|b| self.steps >= b)
    }

    pub fn in_episode(&self) -> bool {
        self.in_episode
    }

    fn begin_episode(&mut self) {
        let c = &self.config;
        self.rng = ChaCha8Rng::seed_from_u64(derive_seed(
            c.seed,
            &[tag::ACTOR, c.actor, c.incarnation as u64, self.episode_index],
        ));
        self.obs = self.env.reset(self.rng.random());
        self.episode_index += 1;
        self.t = 0;
        self.smoothed.iter_mut().for_each(|a| *a = 0.0);
        self.in_episode = true;
    }

    pub fn step(&mut self, policy: &PolicyHead) -> Result<CollectedStep, TrainError> {
        if self.exhausted() {
            return Err(TrainError::Invalid("collector step budget spent".into()));
        }
        if !self.in_episode {
            self.begin_episode();
        }
        let d = self.smoothed.len();
        let mut action: Vec<f64> = if self.steps < self.config.random_steps {
            (0..d).map(|_| self.rng.random_range(-1.0..1.0)).collect()
        } else {
            let (m, s) = policy.distribution(&self.obs)?;
            let noise: Vec<f64> = (0..d).map(|_| self.rng.sample(StandardNormal)).collect();
            sample_action(&m, &s, &noise).action
        };
        if self.episode_index <= self.config.smoothing_episodes {
            for (s, a) in self.smoothed.iter_mut().zip(action.iter_mut()) {
                *s = 0.8 * *s + 0.2 * *a;
                *a = *s;
            }
        }
        let state = self.env.raw_state();
        let step = self.env.step(&action)?;
        let next_state = self.env.raw_state();
        let mut done = step.done;
        self.steps += 1;
        if done == DoneReason::Running && self.exhausted() {
            done = DoneReason::TimeLimit;
        }
        let timestamp = self.config.epoch + self.steps - 1;
        let transition = Transition {
            obs: std::mem::replace(&mut self.obs, step.obs.clone()),
            action: action.clone(),
            reward: step.reward,
            next_obs: step.obs,
            done: done.is_terminal(),
            episode_end: done.is_done(),
            timestamp,
        };
        let record = RawRecord {
            step: self.t,
            timestamp,
            done,
            state,
            action,
            next_state,
        };
        self.t += 1;
        if done.is_done() {
            self.in_episode = false;
        }
        Ok(CollectedStep { transition, record })
    }

    /// Steps until the current (or a new) episode ends.
    pub fn run_episode(&mut self, policy: &PolicyHead) -> Result<Vec<CollectedStep>, TrainError> {
        let mut out = Vec::new();
        loop {
            let s = self.step(policy)?;
            let end = s.transition.episode_end;
            out.push(s);
            if end {
                return Ok(out);
            }
        }
    }
}

/// Outcome of a completed run.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub rows: Vec<CsvRow>,
    pub env_steps: u64,
    pub grad_steps: u64,
    pub episodes: u64,
    pub version: u64,
    pub agent: Agent,
}

impl TrainSummary {
    fn from_learner(l: Learner) -> Self {
        TrainSummary {
            rows: l.rows,
            env_steps: l.env_steps,
            grad_steps: l.grad_steps,
            episodes: l.episodes,
            version: l.version,
            agent: l.agent,
        }
    }

    /// Mean eval return over rows within the trailing `window` env steps.
    pub fn final_return(&self, window: u64) -> f64 {
        final_window_mean(&self.rows, window, |r| r.eval_mean)
    }
}

pub fn final_window_mean(rows: &[CsvRow], window: u64, f: impl Fn(&CsvRow) -> f64) -> f64 {
    let last = rows.last().map_or(0, |r| r.step);
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.step + window > last)
        .map(f)
        .collect();
    mean(&v)
}

/// Single-threaded training: collect, ingest, train, log.
pub fn train_sync(config: TrainerConfig, outputs: &OutputPaths) -> Result<TrainSummary, TrainError> {
    let mut learner = Learner::new(config, outputs)?;
    learner.save_checkpoint()?;
    let mut cc = CollectorConfig::from_trainer(&learner.config, 0, 0, 1);
    cc.budget = Some(learner.config.total_steps);
    let mut collector = Collector::new(cc);
    while !learner.is_finished() {
        let batch: Vec<Transition> = match learner.config.update_schedule {
            UpdateSchedule::Step => vec![collector.step(&learner.agent.policy)?.transition],
            UpdateSchedule::Episode => collector
                .run_episode(&learner.agent.policy)?
                .into_iter()
                .map(|s| s.transition)
                .collect(),
        };
        learner.ingest(batch)?;
    }
    learner.finish()?;
    Ok(TrainSummary::from_learner(learner))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    TargetEntropy,
    RewardScale,
}

impl std::str::FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "target-entropy" => Ok(SweepAxis::TargetEntropy),
            "reward-scale" => Ok(SweepAxis::RewardScale),
            other => Err(format!("unknown sweep axis {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub final_return: f64,
}

/// Config for one sweep point. The reward-scale axis runs at a fixed
/// temperature of 1.
pub fn sweep_config(base: &TrainerConfig, axis: SweepAxis, value: f64, seed: u64) -> TrainerConfig {
    let mut c = base.clone();
    c.seed = seed;
    match axis {
        SweepAxis::TargetEntropy => c.target_entropy = crate::config::TargetEntropy::Value(value),
        SweepAxis::RewardScale => {
            c.reward_scale = value;
            c.fixed_alpha = Some(1.0);
        }
    }
    c
}

pub fn sweep(
    base: &TrainerConfig,
    axis: SweepAxis,
    values: &[f64],
    seeds: &[u64],
    mut on_row: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>, TrainError> {
    if values.len() < 2 {
        return Err(TrainError::Invalid("a sweep needs at least two values".into()));
    }
    if seeds.is_empty() {
        return Err(TrainError::Invalid("a sweep needs at least one seed".into()));
    }
    let mut rows = Vec::with_capacity(values.len() * seeds.len());
    for &value in values {
        for &seed in seeds {
            let cfg = sweep_config(base, axis, value, seed);
            let window = cfg.final_window;
            let summary = train_sync(cfg, &OutputPaths::default())?;
            let row = SweepRow {
                value,
                seed,
                final_return: summary.final_return(window),
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// `(max − min) / mean|x|` of the per-value mean returns.
pub fn relative_spread(rows: &[SweepRow]) -> f64 {
    let mut values: Vec<f64> = rows.iter().map(|r| r.value).collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let means: Vec<f64> = values
        .iter()
        .map(|v| {
            let x: Vec<f64> = rows.iter().filter(|r| r.value == *v).map(|r| r.final_return).collect();
            mean(&x)
        })
        .collect();
    let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
    let scale = means.iter().map(|m| m.abs()).sum::<f64>() / means.len() as f64;
    (hi - lo) / scale
}

pub fn load_checkpoint_for(cfg: &TrainerConfig, path: &Path) -> Result<Checkpoint, TrainError> {
    let ckpt = Checkpoint::decode(&std::fs::read(path)?).map_err(CheckpointError::from)?;
    let policy_in = ckpt.policy.input_dim();
    let policy_out = ckpt.policy.output_dim();
    if policy_in != cfg.obs_dim() || policy_out != 2 * cfg.action_dim() {
        return Err(TrainError::Schema(format!(
            "policy maps {policy_in} -> {policy_out}, {} expects {} -> {}",
            cfg.env,
            cfg.obs_dim(),
            2 * cfg.action_dim()
        )));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(env: &str) -> TrainerConfig {
        let mut c = TrainerConfig::default();
        c.apply_text(&format!(
            "env={env}\nsteps=300\nbatch_size=16\nhidden=8,8\ninitial_random_steps=50\neval_interval=100\neval_episodes=2\ncheckpoint_interval=100"
        ))
        .unwrap();
        c
    }

    #[test]
    fn seeds_are_distinct_per_part() {
        let a = derive_seed(0, &[tag::ACTOR, 0, 0, 1]);
        let b = derive_seed(0, &[tag::ACTOR, 0, 1, 0]);
        assert_ne!(a, b);
        assert_eq!(a, derive_seed(0, &[tag::ACTOR, 0, 0, 1]));
    }

    #[test]
    fn zero_steps_logs_nothing() {
        let mut c = tiny("pendulum");
        c.total_steps = 0;
        let s = train_sync(c, &OutputPaths::default()).unwrap();
        assert!(s.rows.is_empty());
        assert_eq!((s.version, s.grad_steps), (0, 0));
    }

    #[test]
    fn runs_are_deterministic() {
        let a = train_sync(tiny("pointmass"), &OutputPaths::default()).unwrap();
        let b = train_sync(tiny("pointmass"), &OutputPaths::default()).unwrap();
        assert_eq!(a.rows.len(), 3);
        let lines = |s: &TrainSummary| s.rows.iter().map(CsvRow::to_line).collect::<Vec<_>>();
        assert_eq!(lines(&a), lines(&b));
        assert_eq!(a.agent, b.agent);
    }

    #[test]
    fn gradient_steps_wait_for_a_full_batch() {
        let mut c = tiny("pendulum");
        c.total_steps = 20;
        let s = train_sync(c, &OutputPaths::default()).unwrap();
        assert_eq!(s.grad_steps, 5);
        assert_eq!(s.env_steps, 20);
    }

    #[test]
    fn budget_cuts_last_episode() {
        let mut cc = CollectorConfig::from_trainer(&tiny("pendulum"), 0, 0, 1);
        cc.budget = Some(250);
        let mut col = Collector::new(cc);
        let policy = PolicyHead::init(3, 1, &[4], 0).unwrap();
        let first = col.run_episode(&policy).unwrap();
        assert_eq!(first.len(), 200);
        let second = col.run_episode(&policy).unwrap();
        assert_eq!(second.len(), 50);
        assert_eq!(second.last().unwrap().record.done, DoneReason::TimeLimit);
        assert!(col.exhausted());
        assert!(col.step(&policy).is_err());
    }

    #[test]
    fn collected_rewards_match_raw_labels() {
        let cfg = tiny("crawler");
        let mut col = Collector::new(CollectorConfig::from_trainer(&cfg, 0, 0, 1));
        let policy = PolicyHead::init(cfg.obs_dim(), 2, &[4], 0).unwrap();
        for s in col.run_episode(&policy).unwrap() {
            let r = cfg.env.reward(&s.record.state, &s.record.action, &s.record.next_state).unwrap();
            assert_eq!(r.to_bits(), s.transition.reward.to_bits());
        }
    }

    #[test]
    fn csv_row_roundtrip() {
        let r = CsvRow {
            step: 10,
            episodes: 1,
            eval_mean: -1.5,
            eval_min: -2.0,
            eval_max: -1.0,
            entropy: f64::NAN,
            alpha: 1.0,
            q_loss: 0.1,
            policy_loss: f64::NAN,
            alpha_loss: 1e-300,
        };
        let line = r.to_line();
        assert!(line.contains(",nan,"));
        let back = CsvRow::parse(&line).unwrap();
        assert_eq!(back.to_line(), line);
    }

    #[test]
    fn resume_restores_everything() {
        let dir = tempfile::tempdir().unwrap();
        let out = OutputPaths {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let s = train_sync(tiny("pendulum"), &out).unwrap();
        let ckpt = Checkpoint::load(&checkpoint_path(dir.path()), None).unwrap();
        assert_eq!(ckpt.version, s.version);
        let l = Learner::resume(tiny("pendulum"), ckpt.clone(), &OutputPaths::default()).unwrap();
        assert_eq!(l.agent, s.agent);
        assert_eq!(l.checkpoint(), ckpt);
        assert!(l.replay.is_empty());
    }

    #[test]
    fn sweep_needs_two_values() {
        assert!(sweep(&tiny("pendulum"), SweepAxis::RewardScale, &[1.0], &[0], |_| {}).is_err());
    }

    #[test]
    fn spread_of_constant_returns_is_zero() {
        let rows: Vec<SweepRow> = (0..3)
            .map(|i| SweepRow {
                value: i as f64,
                seed: 0,
                final_return: -5.0,
            })
            .collect();
        assert_eq!(relative_spread(&rows), 0.0);
    }
}
