//! Entry point for the child processes the async supervisor spawns.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};

use sac_core::config::TrainerConfig;
use sac_core::harness::actor::{actor_loop, ActorOptions};
use sac_core::harness::checkpoint::checkpoint_path;
use sac_core::harness::labeler::{labeler_loop, LabelerOptions};
use sac_core::harness::learner::{learner_loop, LearnerOptions};
use sac_core::harness::HarnessError;
use sac_core::trainer::{OutputPaths, TrainError};

/// Exit status of a learner that hit a non-finite loss. The supervisor
/// treats it as fatal instead of restarting.
pub const EXIT_NON_FINITE: u8 = 3;

pub const CHUNK_LEN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Role {
    Learner,
    Labeler,
    Actor,
}

#[derive(Args, Debug)]
pub struct WorkerArgs {
    #[arg(value_enum)]
    pub role: Role,
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory holding the checkpoint and logs.
    #[arg(long)]
    pub dir: PathBuf,
    #[arg(long)]
    pub learner: SocketAddr,
    #[arg(long)]
    pub labeler: SocketAddr,
    #[arg(long, default_value_t = 0)]
    pub index: u64,
    #[arg(long, default_value_t = 1)]
    pub actors: u64,
    #[arg(long, default_value_t = 0)]
    pub incarnation: u32,
    #[arg(long, default_value_t = 0)]
    pub epoch: u64,
    #[arg(long)]
    pub lockstep: bool,
    #[arg(long)]
    pub csv_out: Option<PathBuf>,
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
}

fn load_config(path: &PathBuf) -> Result<TrainerConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = TrainerConfig::default();
    cfg.apply_text(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(args: WorkerArgs) -> ExitCode {
    // Children outlive a SIGKILLed supervisor otherwise.
    let parent = std::os::unix::process::parent_id();
    let orphaned = move || std::os::unix::process::parent_id() != parent;
    let result = load_config(&args.config).and_then(|cfg| match args.role {
        Role::Learner => {
            let opts = LearnerOptions {
                config: cfg,
                listen: args.learner,
                outputs: OutputPaths {
                    csv: args.csv_out.clone(),
                    checkpoint_dir: Some(args.dir.clone()),
                    trace: args.trace_out.clone(),
                },
                ingest_log: args.dir.join("ingest.log"),
                lockstep: args.lockstep,
                incarnation: args.incarnation,
                epoch: args.epoch,
            };
            match learner_loop(&opts, &orphaned) {
                Ok(true) => {
                    log::info!("learner reached its step budget");
                    Ok(ExitCode::SUCCESS)
                }
                Ok(false) => Ok(ExitCode::SUCCESS),
                Err(HarnessError::Train(e @ TrainError::NonFiniteLoss { .. })) => {
                    eprintln!("error: {e}");
                    Ok(ExitCode::from(EXIT_NON_FINITE))
                }
                Err(e) => Err(e.into()),
            }
        }
        Role::Labeler => {
            let opts = LabelerOptions {
                kind: cfg.env,
                history: cfg.history_len(),
                listen: args.labeler,
                learner: args.learner,
                incarnation: args.incarnation,
                log: Some(args.dir.join("labeler.log")),
            };
            labeler_loop(&opts, &orphaned)?;
            Ok(ExitCode::SUCCESS)
        }
        Role::Actor => {
            let opts = ActorOptions {
                config: cfg,
                index: args.index,
                incarnation: args.incarnation,
                actors: args.actors,
                labeler: args.labeler,
                checkpoint: checkpoint_path(&args.dir),
                lockstep: args.lockstep,
                chunk_len: CHUNK_LEN,
            };
            actor_loop(&opts, &orphaned)?;
            Ok(ExitCode::SUCCESS)
        }
    });
    result.unwrap_or_else(|e| {
        eprintln!("error: {:?} worker: {e:#}", args.role);
        ExitCode::FAILURE
    })
}
