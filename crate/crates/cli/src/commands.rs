use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand, ValueEnum};

use sac_core::config::TrainerConfig;
use sac_core::envs::{history_len_for, EnvKind};
use sac_core::harness::checkpoint::Checkpoint;
use sac_core::oracle::{
    calibrate_alpha, entropy_of, mean_entropy, soft_policy, soft_value_iteration, OracleError, TabularMdp,
};
use sac_core::policy::PolicyHead;
use sac_core::trainer::{self, config_echo, evaluate, fmt_f64, OutputPaths, SweepAxis};

use crate::ConfigArgs;

pub fn train_sync(
    cfg: TrainerConfig,
    csv: Option<PathBuf>,
    checkpoint_dir: Option<PathBuf>,
    trace: Option<PathBuf>,
) -> Result<()> {
    let outputs = OutputPaths {
        csv,
        checkpoint_dir,
        trace,
    };
    let start = std::time::Instant::now();
    let s = trainer::train_sync(cfg, &outputs)?;
    let last = s.rows.last();
    log::info!(
        "done: {} env steps, {} gradient steps, {} episodes in {:.1}s; final eval return {}",
        s.env_steps,
        s.grad_steps,
        s.episodes,
        start.elapsed().as_secs_f64(),
        last.map_or("n/a".into(), |r| fmt_f64(r.eval_mean))
    );
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    env: String,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    csv_out: Option<PathBuf>,
}

pub const EVAL_HEADER: &str = "episodes,return_mean,return_min,return_max,mean_length,terminal_episodes";

pub fn eval(args: EvalArgs) -> Result<()> {
    if args.episodes == 0 {
        bail!("--episodes must be at least 1");
    }
    let kind: EnvKind = args.env.parse()?;
    let bytes = std::fs::read(&args.checkpoint).with_context(|| format!("reading {}", args.checkpoint.display()))?;
    let ckpt = Checkpoint::decode(&bytes)?;
    let spec = kind.spec();
    let input = ckpt.policy.input_dim();
    let Some(history) = history_len_for(input, spec.obs_dim, spec.action_dim) else {
        bail!("checkpoint policy takes {input} inputs, which no history length of {kind} produces");
    };
    let policy = PolicyHead::new(ckpt.policy, spec.action_dim).map_err(|e| {
        anyhow::anyhow!("checkpoint policy does not fit {kind}'s {} action dims: {e}", spec.action_dim)
    })?;
    let stats = evaluate(&policy, kind, history, args.episodes, args.seed)?;
    let mut out = format!("{EVAL_HEADER}\n");
    let _ = writeln!(
        out,
        "{},{},{},{},{},{}",
        args.episodes,
        fmt_f64(stats.mean()),
        fmt_f64(stats.min()),
        fmt_f64(stats.max()),
        fmt_f64(stats.mean_length()),
        stats.terminal
    );
    match args.csv_out {
        Some(p) => std::fs::write(&p, out).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{out}"),
    }
    Ok(())
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_parser = parse_axis)]
    axis: SweepAxis,
    /// Comma-separated grid, at least two values.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    values: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long)]
    csv_out: Option<PathBuf>,
}

fn parse_axis(s: &str) -> Result<SweepAxis, String> {
    s.parse()
}

pub const SWEEP_HEADER: &str = "axis,value,seed,final_return";

pub fn sweep(args: SweepArgs) -> Result<()> {
    let base = args.config.resolve()?;
    if args.values.len() < 2 {
        bail!("a sweep needs at least two values");
    }
    let axis = match args.axis {
        SweepAxis::TargetEntropy => "target-entropy",
        SweepAxis::RewardScale => "reward-scale",
    };
    let mut out = config_echo(&base);
    out.push_str(SWEEP_HEADER);
    out.push('\n');
    let write = |text: &str| -> Result<()> {
        if let Some(p) = &args.csv_out {
            std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
        }
        Ok(())
    };
    write(&out)?;
    let mut failed = None;
    let rows = trainer::sweep(&base, args.axis, &args.values, &args.seeds, |r| {
        log::info!("{axis}={} seed={} final return {}", r.value, r.seed, fmt_f64(r.final_return));
        let _ = writeln!(out, "{axis},{},{},{}", fmt_f64(r.value), r.seed, fmt_f64(r.final_return));
        if let Err(e) = write(&out) {
            failed.get_or_insert(e);
        }
    })?;
    if let Some(e) = failed {
        return Err(e);
    }
    log::info!("relative spread of final returns: {}", fmt_f64(trainer::relative_spread(&rows)));
    if args.csv_out.is_none() {
        print!("{out}");
    }
    Ok(())
}

#[derive(Args)]
pub struct OracleArgs {
    #[command(subcommand)]
    what: OracleCommand,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MdpKind {
    /// Seeded random transition and reward tables.
    Random,
    /// One state, one action, reward 1.
    Geometric,
    /// One state, two actions with equal reward 0.
    Symmetric,
    /// One state with the rewards from `--rewards`.
    Bandit,
}

#[derive(Args, Clone)]
struct MdpArgs {
    #[arg(long, value_enum, default_value = "random")]
    mdp: MdpKind,
    #[arg(long, default_value_t = 5)]
    states: usize,
    #[arg(long, default_value_t = 3)]
    actions: usize,
    #[arg(long, default_value_t = 0.9)]
    gamma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "1,0")]
    rewards: Vec<f64>,
}

impl MdpArgs {
    fn build(&self) -> Result<TabularMdp, OracleError> {
        match self.mdp {
            MdpKind::Random => TabularMdp::random(self.states, self.actions, self.gamma, self.seed),
            MdpKind::Geometric => TabularMdp::bandit(&[1.0], self.gamma),
            MdpKind::Symmetric => TabularMdp::bandit(&[0.0, 0.0], self.gamma),
            MdpKind::Bandit => TabularMdp::bandit(&self.rewards, self.gamma),
        }
    }
}

#[derive(Subcommand)]
enum OracleCommand {
    /// Soft-optimal Q, V and policy at one temperature.
    QTable {
        #[command(flatten)]
        mdp: MdpArgs,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
        #[arg(long)]
        csv_out: Option<PathBuf>,
    },
    /// Temperature reaching each target mean entropy, plus the entropy
    /// curve over a log-spaced temperature grid.
    Calibrate {
        #[command(flatten)]
        mdp: MdpArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        targets: Vec<f64>,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long)]
        csv_out: Option<PathBuf>,
        /// Entropy curve output.
        #[arg(long)]
        curve_out: Option<PathBuf>,
    },
}

fn emit(text: String, path: Option<PathBuf>) -> Result<()> {
    match path {
        Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn oracle(args: OracleArgs) -> Result<()> {
    match args.what {
        OracleCommand::QTable {
            mdp,
            alpha,
            tol,
            csv_out,
        } => {
            let m = mdp.build()?;
            let sol = soft_value_iteration(&m, alpha, tol)?;
            let pi = soft_policy(&sol.q, alpha)?;
            let h = entropy_of(&pi);
            let mut out = String::from("state,action,q,v,pi,entropy\n");
            for s in 0..m.states() {
                for a in 0..m.actions() {
                    let _ = writeln!(
                        out,
                        "{s},{a},{},{},{},{}",
                        fmt_f64(sol.q[s][a]),
                        fmt_f64(sol.v[s]),
                        fmt_f64(pi[s][a]),
                        fmt_f64(h[s])
                    );
                }
            }
            log::info!("converged after {} sweeps", sol.iterations);
            emit(out, csv_out)
        }
        OracleCommand::Calibrate {
            mdp,
            targets,
            tol,
            csv_out,
            curve_out,
        } => {
            let m = mdp.build()?;
            let mut out = String::from("target,alpha,entropy,iterations,status\n");
            for t in targets {
                match calibrate_alpha(&m, t, tol) {
                    Ok(c) => {
                        let _ = writeln!(
                            out,
                            "{},{},{},{},ok",
                            fmt_f64(t),
                            fmt_f64(c.alpha),
                            fmt_f64(c.entropy),
                            c.iterations
                        );
                    }
                    Err(e @ (OracleError::Unattainable { .. } | OracleError::InvalidTarget { .. })) => {
                        log::warn!("target {t}: {e}");
                        let _ = writeln!(out, "{},nan,nan,0,unattainable", fmt_f64(t));
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            if curve_out.is_some() {
                let mut curve = String::from("alpha,mean_entropy\n");
                for i in 0..=48 {
                    let alpha = 10f64.powf(-4.0 + i as f64 / 6.0);
                    let h = mean_entropy(&m, alpha, 1e-10)?;
                    let _ = writeln!(curve, "{},{}", fmt_f64(alpha), fmt_f64(h));
                }
                emit(curve, curve_out)?;
            }
            emit(out, csv_out)
        }
    }
}
