//! Trainer configuration as a flat `key=value` text file.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::envs::EnvKind;
use crate::temperature::{default_target_entropy, UpdateRule};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key=value, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}: {reason}")]
    Value {
        key: String,
        value: String,
        reason: String,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("reading config: {0}")]
    Io(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TargetEntropy {
    /// −1 per action dimension.
    Auto,
    Value(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateSchedule {
    /// Gradient steps after every environment step.
    Step,
    /// Collect a whole episode, then take its gradient steps.
    Episode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub env: EnvKind,
    pub target_entropy: TargetEntropy,
    /// Fixed temperature; disables temperature learning when set.
    pub fixed_alpha: Option<f64>,
    pub alpha_update: UpdateRule,
    pub initial_log_alpha: f64,
    pub gamma: f64,
    pub tau: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub total_steps: u64,
    pub gradient_steps: usize,
    /// Past (observation, action) pairs appended to observations; `None`
    /// picks 5 for the crawler and 0 elsewhere.
    pub history: Option<usize>,
    pub hidden: Vec<usize>,
    pub seed: u64,
    pub initial_random_steps: u64,
    pub action_smoothing_episodes: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub checkpoint_interval: u64,
    pub reward_scale: f64,
    pub update_schedule: UpdateSchedule,
    /// Trailing window, in environment steps, for final-return summaries.
    pub final_window: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            env: EnvKind::Pendulum,
            target_entropy: TargetEntropy::Auto,
            fixed_alpha: None,
            alpha_update: UpdateRule::Adam,
            initial_log_alpha: 0.0,
            gamma: 0.99,
            tau: 0.005,
            learning_rate: 3e-4,
            batch_size: 256,
            buffer_capacity: 1_000_000,
            total_steps: 30_000,
            gradient_steps: 1,
            history: None,
            hidden: vec![256, 256],
            seed: 0,
            initial_random_steps: 1000,
            action_smoothing_episodes: 0,
            eval_interval: 1000,
            eval_episodes: 10,
            checkpoint_interval: 1000,
            reward_scale: 1.0,
            update_schedule: UpdateSchedule::Step,
            final_window: 5000,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn bad(key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

impl TrainerConfig {
    pub const KEYS: &'static [&'static str] = &[
        "env",
        "target_entropy",
        "alpha",
        "alpha_update",
        "initial_log_alpha",
        "gamma",
        "tau",
        "learning_rate",
        "batch_size",
        "buffer_capacity",
        "steps",
        "gradient_steps",
        "history",
        "hidden",
        "seed",
        "initial_random_steps",
        "action_smoothing_episodes",
        "eval_interval",
        "eval_episodes",
        "checkpoint_interval",
        "reward_scale",
        "update_schedule",
        "final_window",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match key.trim() {
            "env" => self.env = value.parse().map_err(|e: crate::envs::EnvError| bad(key, value, &e.to_string()))?,
            "target_entropy" => {
                self.target_entropy = if value == "auto" {
                    TargetEntropy::Auto
                } else {
                    TargetEntropy::Value(parse_num(key, value)?)
                }
            }
            "alpha" => {
                self.fixed_alpha = if value == "auto" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "alpha_update" => {
                self.alpha_update = match value {
                    "adam" => UpdateRule::Adam,
                    "plain" => UpdateRule::Plain,
                    _ => return Err(bad(key, value, "expected adam or plain")),
                }
            }
            "initial_log_alpha" => self.initial_log_alpha = parse_num(key, value)?,
            "gamma" => self.gamma = parse_num(key, value)?,
            "tau" => self.tau = parse_num(key, value)?,
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "buffer_capacity" => self.buffer_capacity = parse_num(key, value)?,
            "steps" => self.total_steps = parse_num(key, value)?,
            "gradient_steps" => self.gradient_steps = parse_num(key, value)?,
            "history" => {
                self.history = if value == "auto" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "hidden" => {
                self.hidden = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse_num(key, s.trim()))
                    .collect::<Result<_, _>>()?
            }
            "seed" => self.seed = parse_num(key, value)?,
            "initial_random_steps" => self.initial_random_steps = parse_num(key, value)?,
            "action_smoothing_episodes" => self.action_smoothing_episodes = parse_num(key, value)?,
            "eval_interval" => self.eval_interval = parse_num(key, value)?,
            "eval_episodes" => self.eval_episodes = parse_num(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = parse_num(key, value)?,
            "reward_scale" => self.reward_scale = parse_num(key, value)?,
            "update_schedule" => {
                self.update_schedule = match value {
                    "step" => UpdateSchedule::Step,
                    "episode" => UpdateSchedule::Episode,
                    _ => return Err(bad(key, value, "expected step or episode")),
                }
            }
            "final_window" => self.final_window = parse_num(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: line.to_string(),
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        if !(0.0..1.0).contains(&self.gamma) {
            return fail(format!("gamma {} outside [0, 1)", self.gamma));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return fail(format!("tau {} outside (0, 1]", self.tau));
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate must be positive".into());
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 || self.gradient_steps == 0 {
            return fail("batch_size, buffer_capacity and gradient_steps must be positive".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return fail("hidden needs at least one positive width".into());
        }
        if self.eval_interval == 0 || self.eval_episodes == 0 || self.checkpoint_interval == 0 {
            return fail("eval_interval, eval_episodes and checkpoint_interval must be positive".into());
        }
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite()) {
            return fail("reward_scale must be positive".into());
        }
        if let Some(a) = self.fixed_alpha {
            if !(a > 0.0 && a.is_finite()) {
                return fail(format!("fixed alpha {a} must be positive"));
            }
        }
        if let TargetEntropy::Value(h) = self.target_entropy {
            if !h.is_finite() {
                return fail("target_entropy must be finite".into());
            }
        }
        if !self.initial_log_alpha.is_finite() {
            return fail("initial_log_alpha must be finite".into());
        }
        Ok(())
    }

    pub fn history_len(&self) -> usize {
        self.history.unwrap_or(match self.env {
            EnvKind::Crawler(_) => 5,
            _ => 0,
        })
    }

    pub fn obs_dim(&self) -> usize {
        let spec = self.env.spec();
        crate::envs::wrapped_obs_dim(spec.obs_dim, spec.action_dim, self.history_len())
    }

    pub fn action_dim(&self) -> usize {
        self.env.spec().action_dim
    }

    pub fn resolved_target_entropy(&self) -> f64 {
        match self.target_entropy {
            TargetEntropy::Auto => default_target_entropy(self.action_dim()),
            TargetEntropy::Value(h) => h,
        }
    }

    /// Canonical resolved form: one `key=value` per line in [`Self::KEYS`]
    /// order, with `auto` entries expanded.
    pub fn to_text(&self) -> String {
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        let values = [
            self.env.name().to_string(),
            format!("{:?}", self.resolved_target_entropy()),
            self.fixed_alpha.map_or("auto".to_string(), |a| format!("{a:?}")),
            match self.alpha_update {
                UpdateRule::Adam => "adam".into(),
                UpdateRule::Plain => "plain".into(),
            },
            format!("{:?}", self.initial_log_alpha),
            format!("{:?}", self.gamma),
            format!("{:?}", self.tau),
            format!("{:?}", self.learning_rate),
            self.batch_size.to_string(),
            self.buffer_capacity.to_string(),
            self.total_steps.to_string(),
            self.gradient_steps.to_string(),
            self.history_len().to_string(),
            hidden.join(","),
            self.seed.to_string(),
            self.initial_random_steps.to_string(),
            self.action_smoothing_episodes.to_string(),
            self.eval_interval.to_string(),
            self.eval_episodes.to_string(),
            self.checkpoint_interval.to_string(),
            format!("{:?}", self.reward_scale),
            match self.update_schedule {
                UpdateSchedule::Step => "step".into(),
                UpdateSchedule::Episode => "episode".into(),
            },
            self.final_window.to_string(),
        ];
        Self::KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// First eight bytes of SHA-256 over [`Self::to_text`], little-endian.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_text().as_bytes());
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reported_settings() {
        let c = TrainerConfig::default();
        assert_eq!(c.learning_rate, 0.0003);
        assert_eq!(c.hidden, vec![256, 256]);
        assert_eq!(c.resolved_target_entropy(), -1.0);
        assert_eq!((c.gamma, c.tau, c.batch_size), (0.99, 0.005, 256));
        c.validate().unwrap();
    }

    #[test]
    fn text_roundtrip_preserves_hash() {
        let mut c = TrainerConfig::default();
        c.apply_text("env=crawler\nsteps=123\nhidden=64,32\n# comment\nalpha=0.5\n").unwrap();
        let again = TrainerConfig::parse(&c.to_text()).unwrap();
        assert_eq!(again.to_text(), c.to_text());
        assert_eq!(again.hash(), c.hash());
        assert_eq!(c.history_len(), 5);
        assert_eq!(c.obs_dim(), 5 + 5 * 7);
        assert_eq!(c.resolved_target_entropy(), -2.0);
    }

    #[test]
    fn hash_changes_with_config() {
        let a = TrainerConfig::default();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(TrainerConfig::parse("nonsense"), Err(ConfigError::Syntax { .. })));
        assert!(matches!(TrainerConfig::parse("foo=1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(TrainerConfig::parse("gamma=1.0"), Err(ConfigError::Invalid(_))));
        assert!(matches!(TrainerConfig::parse("env=cheetah"), Err(ConfigError::Value { .. })));
        assert!(matches!(TrainerConfig::parse("batch_size=-3"), Err(ConfigError::Value { .. })));
    }
}
