use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use sac_core::config::{TargetEntropy, TrainerConfig};

mod commands;
mod supervisor;
mod worker;

#[derive(Parser)]
#[command(name = "sac", version, about = "Soft actor-critic with automatic temperature adjustment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent, synchronously or with separate actor/labeler/learner processes.
    Train(TrainArgs),
    /// Evaluate a checkpoint's deterministic policy.
    Eval(commands::EvalArgs),
    /// Independent runs over a grid of target entropies or reward scales.
    Sweep(commands::SweepArgs),
    /// Tabular soft value iteration dumps.
    Oracle(commands::OracleArgs),
    #[command(hide = true)]
    Worker(worker::WorkerArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Sync,
    Async,
}

/// Flags shared by every command that builds a trainer config.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// key=value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    env: Option<String>,
    /// `auto` (−1 per action dimension) or a value in nats.
    #[arg(long)]
    target_entropy: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra config overrides, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<TrainerConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                let mut c = TrainerConfig::default();
                c.apply_text(&text)?;
                c
            }
            None => TrainerConfig::default(),
        };
        if let Some(e) = &self.env {
            cfg.set("env", e)?;
        }
        if let Some(h) = &self.target_entropy {
            cfg.target_entropy = if h == "auto" {
                TargetEntropy::Auto
            } else {
                TargetEntropy::Value(h.parse().with_context(|| format!("target entropy {h:?}"))?)
            };
        }
        if let Some(s) = self.steps {
            cfg.total_steps = s;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        for o in &self.overrides {
            let Some((k, v)) = o.split_once('=') else {
                bail!("--set expects key=value, got {o:?}");
            };
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    csv_out: Option<PathBuf>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "sync")]
    mode: Mode,
    #[arg(long, default_value_t = 1)]
    actors: u64,
    /// Barrier after every episode; with one actor this reproduces the
    /// synchronous trainer under `update_schedule=episode`.
    #[arg(long)]
    lockstep: bool,
    /// Per-gradient-step loss bit patterns.
    #[arg(long)]
    trace_out: Option<PathBuf>,
    /// Kill and restart each subsystem once at a random point (async only).
    #[arg(long, hide = true)]
    chaos: Option<u64>,
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    match args.mode {
        Mode::Sync => {
            if args.lockstep || args.chaos.is_some() || args.actors != 1 {
                bail!("--actors, --lockstep and --chaos apply to --mode async");
            }
            commands::train_sync(cfg, args.csv_out, args.checkpoint_dir, args.trace_out)
        }
        Mode::Async => supervisor::train_async(supervisor::AsyncPlan {
            config: cfg,
            actors: args.actors,
            lockstep: args.lockstep,
            chaos: args.chaos,
            csv: args.csv_out,
            checkpoint_dir: args
                .checkpoint_dir
                .context("--mode async needs --checkpoint-dir for the shared checkpoint")?,
            trace: args.trace_out,
        }),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Oracle(a) => commands::oracle(a),
        Command::Worker(a) => return worker::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
