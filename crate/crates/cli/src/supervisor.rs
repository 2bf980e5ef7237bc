//! Spawns and babysits the learner, labeler, and actor processes.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};

use sac_core::config::TrainerConfig;
use sac_core::harness::learner::VERSIONS_LOG;
use sac_core::trainer::splitmix64;

use crate::worker::EXIT_NON_FINITE;

/// Restarts allowed per subsystem before the run is abandoned.
const MAX_RESTARTS: u32 = 20;
pub const CHAOS_LOG: &str = "chaos.log";
const LOCK_FILE: &str = "supervisor.lock";

pub struct AsyncPlan {
    pub config: TrainerConfig,
    pub actors: u64,
    pub lockstep: bool,
    pub chaos: Option<u64>,
    pub csv: Option<PathBuf>,
    pub checkpoint_dir: PathBuf,
    pub trace: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Learner,
    Labeler,
    Actor(u64),
}

impl Slot {
    fn name(self) -> String {
        match self {
            Slot::Learner => "learner".into(),
            Slot::Labeler => "labeler".into(),
            Slot::Actor(i) => format!("actor{i}"),
        }
    }
}

struct Worker {
    slot: Slot,
    child: Child,
    incarnation: u32,
    /// Published env-step count at which chaos kills this worker, if still
    /// armed.
    kill_at: Option<u64>,
}

struct Spawner {
    exe: PathBuf,
    config_file: PathBuf,
    dir: PathBuf,
    learner: SocketAddr,
    labeler: SocketAddr,
    actors: u64,
    epoch: u64,
    lockstep: bool,
    csv: Option<PathBuf>,
    trace: Option<PathBuf>,
}

impl Spawner {
    fn spawn(&self, slot: Slot, incarnation: u32) -> Result<Child> {
        let mut cmd = Command::new(&self.exe);
        cmd.arg("worker");
        match slot {
            Slot::Learner => cmd.arg("learner"),
            Slot::Labeler => cmd.arg("labeler"),
            Slot::Actor(i) => cmd.args(["actor", "--index", &i.to_string()]),
        };
        cmd.arg("--config")
            .arg(&self.config_file)
            .arg("--dir")
            .arg(&self.dir)
            .args(["--learner", &self.learner.to_string()])
            .args(["--labeler", &self.labeler.to_string()])
            .args(["--actors", &self.actors.to_string()])
            .args(["--incarnation", &incarnation.to_string()])
            .args(["--epoch", &self.epoch.to_string()]);
        if self.lockstep {
            cmd.arg("--lockstep");
        }
        if slot == Slot::Learner {
            if let Some(p) = &self.csv {
                cmd.arg("--csv-out").arg(p);
            }
            if let Some(p) = &self.trace {
                cmd.arg("--trace-out").arg(p);
            }
        }
        cmd.spawn().with_context(|| format!("spawning {}", slot.name()))
    }
}

fn free_port() -> Result<SocketAddr> {
    Ok(TcpListener::bind("127.0.0.1:0")?.local_addr()?)
}

/// Removes the lock file when the supervisor returns by any path.
struct Lock(PathBuf);

impl Lock {
    fn take(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| {
                format!(
                    "{} exists: another supervisor uses this directory (delete the file if it is stale)",
                    path.display()
                )
            })?;
        Ok(Lock(path))
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn kill_all(workers: &mut [Worker]) {
    for w in workers.iter_mut() {
        let _ = w.child.kill();
    }
    for w in workers.iter_mut() {
        let _ = w.child.wait();
    }
}

fn describe(status: ExitStatus) -> String {
    use std::os::unix::process::ExitStatusExt;
    match (status.code(), status.signal()) {
        (Some(c), _) => format!("exit code {c}"),
        (None, Some(s)) => format!("signal {s}"),
        _ => "unknown status".into(),
    }
}

/// Env steps covered by the newest published checkpoint.
fn published_steps(versions_log: &Path) -> Option<u64> {
    let text = fs::read_to_string(versions_log).ok()?;
    read_last_steps(&text)
}

fn read_last_steps(text: &str) -> Option<u64> {
    text.lines().rev().find_map(|l| l.split_whitespace().nth(2)?.parse().ok())
}

pub fn train_async(plan: AsyncPlan) -> Result<()> {
    if plan.actors == 0 {
        bail!("--actors must be at least 1");
    }
    if plan.lockstep && plan.actors != 1 {
        bail!("--lockstep needs exactly one actor");
    }
    let dir = plan.checkpoint_dir.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let _lock = Lock::take(&dir)?;
    let config_file = dir.join("config.txt");
    fs::write(&config_file, plan.config.to_text())?;

    let interrupted = Arc::new(AtomicBool::new(false));
    {
        let flag = interrupted.clone();
        ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)).context("installing ctrl-c handler")?;
    }

    let epoch = if plan.lockstep {
        0
    } else {
        SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
    };
    let spawner = Spawner {
        exe: std::env::current_exe()?,
        config_file,
        dir: dir.clone(),
        learner: free_port()?,
        labeler: free_port()?,
        actors: plan.actors,
        epoch,
        lockstep: plan.lockstep,
        csv: plan.csv.clone(),
        trace: plan.trace.clone(),
    };

    let mut slots = vec![Slot::Learner, Slot::Labeler];
    slots.extend((0..plan.actors).map(Slot::Actor));
    let mut rng = plan.chaos.unwrap_or(0);
    // Kill points fall between 5% and 70% of the step budget.
    let total = plan.config.total_steps;
    let (lo, hi) = (total / 20, (total * 7 / 10).max(total / 20 + 1));
    let mut workers = Vec::with_capacity(slots.len());
    for slot in slots {
        let kill_at = plan.chaos.map(|_| {
            rng = splitmix64(rng);
            lo + rng % (hi - lo)
        });
        if let Some(v) = kill_at {
            log::info!("chaos: {} will be killed after {v} env steps", slot.name());
        }
        let child = match spawner.spawn(slot, 0) {
            Ok(c) => c,
            Err(e) => {
                kill_all(&mut workers);
                return Err(e);
            }
        };
        workers.push(Worker {
            slot,
            child,
            incarnation: 0,
            kill_at,
        });
    }

    let versions_log = dir.join(VERSIONS_LOG);
    let chaos_log = dir.join(CHAOS_LOG);
    let result = loop {
        if interrupted.load(Ordering::SeqCst) {
            break Err(anyhow::anyhow!("interrupted"));
        }
        std::thread::sleep(Duration::from_millis(20));
        let steps = if plan.chaos.is_some() { published_steps(&versions_log) } else { None };
        let mut outcome = None;
        for w in workers.iter_mut() {
            if let (Some(at), Some(v)) = (w.kill_at, steps) {
                if v >= at {
                    w.kill_at = None;
                    log::warn!("chaos: killing {} at {v} published env steps", w.slot.name());
                    let _ = w.child.kill();
                    let line = format!("{} {} {v}\n", w.slot.name(), w.incarnation);
                    if let Err(e) = OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(&chaos_log)
                        .and_then(|mut f| f.write_all(line.as_bytes()))
                    {
                        outcome = Some(Err(anyhow::anyhow!("writing {}: {e}", chaos_log.display())));
                        break;
                    }
                }
            }
            let status = match w.child.try_wait() {
                Ok(Some(s)) => s,
                Ok(None) => continue,
                Err(e) => {
                    outcome = Some(Err(anyhow::anyhow!("waiting on {}: {e}", w.slot.name())));
                    break;
                }
            };
            if w.slot == Slot::Learner && status.success() {
                outcome = Some(Ok(()));
                break;
            }
            if w.slot == Slot::Learner && status.code() == Some(EXIT_NON_FINITE as i32) {
                outcome = Some(Err(anyhow::anyhow!(
                    "learner stopped on a non-finite loss; see {}",
                    dir.join("diagnostic.txt").display()
                )));
                break;
            }
            if w.incarnation >= MAX_RESTARTS {
                outcome = Some(Err(anyhow::anyhow!(
                    "{} keeps dying ({}), giving up",
                    w.slot.name(),
                    describe(status)
                )));
                break;
            }
            w.incarnation += 1;
            log::warn!(
                "{} exited with {}; restarting as incarnation {}",
                w.slot.name(),
                describe(status),
                w.incarnation
            );
            match spawner.spawn(w.slot, w.incarnation) {
                Ok(c) => w.child = c,
                Err(e) => {
                    outcome = Some(Err(e));
                    break;
                }
            }
        }
        if let Some(r) = outcome {
            break r;
        }
    };
    kill_all(&mut workers);
    result
}
