//! Soft actor-critic with automatic temperature adjustment, the environments
//! it is exercised on, a tabular oracle, and an asynchronous
//! actor/labeler/learner harness.

pub mod config;
pub mod critic;
pub mod envs;
pub mod harness;
pub mod net;
pub mod oracle;
pub mod policy;
pub mod replay;
pub mod temperature;
pub mod trainer;

pub use config::{ConfigError, TargetEntropy, TrainerConfig, UpdateSchedule};
pub use critic::CriticPair;
pub use envs::{DoneReason, Env, EnvKind, EnvSpec, Step};
pub use net::{AdamConfig, AdamState, Matrix, Mlp};
pub use policy::PolicyHead;
pub use replay::{Minibatch, ReplayBuffer, Transition};
pub use temperature::{TemperatureState, UpdateRule};
pub use trainer::{Agent, Learner, OutputPaths, TrainError, TrainSummary};
