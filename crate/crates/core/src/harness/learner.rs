//! The learner process: ingests labeled batches, trains, publishes
//! checkpoints.

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use super::checkpoint::{checkpoint_path, Checkpoint};
use super::link::{Acceptor, Link, Polled};
use super::wire::{encode_u64, Frame, LabeledBatch, MessageKind, Sequencer};
use super::{HarnessError, LEARNER_ID};
use crate::config::TrainerConfig;
use crate::replay::Transition;
use crate::trainer::{Learner, OutputPaths, TrainError};

/// Key identifying one environment step across the whole system.
pub type StepKey = (u64, u64, u32);

/// Append-only record of every transition that entered the replay buffer.
/// Doubles as the dedup set, and survives learner restarts.
pub struct IngestionLog {
    seen: HashSet<StepKey>,
    file: BufWriter<File>,
}

impl IngestionLog {
    pub fn open(path: &Path) -> Result<Self, HarnessError> {
        let seen = if path.exists() {
            read_ingestion_log(path)?.into_iter().collect()
        } else {
            HashSet::new()
        };
        let file = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
        Ok(IngestionLog { seen, file })
    }

    pub fn contains(&self, key: &StepKey) -> bool {
        self.seen.contains(key)
    }

    pub fn record(&mut self, keys: &[StepKey]) -> Result<(), HarnessError> {
        for k in keys {
            self.seen.insert(*k);
            writeln!(self.file, "{} {} {}", k.0, k.1, k.2)?;
        }
        self.file.flush()?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }
}

/// Every line of an ingestion log, in order, duplicates included. A torn
/// final line is ignored.
pub fn read_ingestion_log(path: &Path) -> Result<Vec<StepKey>, HarnessError> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter_map(|l| {
            let mut it = l.split_whitespace();
            let k = (it.next()?.parse().ok()?, it.next()?.parse().ok()?, it.next()?.parse().ok()?);
            it.next().is_none().then_some(k)
        })
        .collect())
}

pub struct LearnerOptions {
    pub config: TrainerConfig,
    pub listen: SocketAddr,
    /// Must name a checkpoint directory.
    pub outputs: OutputPaths,
    pub ingest_log: PathBuf,
    pub lockstep: bool,
    pub incarnation: u32,
    /// Clock origin broadcast to the other subsystems.
    pub epoch: u64,
}

pub const VERSIONS_LOG: &str = "versions.log";

/// Appends `incarnation version env_steps` for every published checkpoint.
fn log_version(dir: &Path, incarnation: u32, learner: &Learner) -> Result<(), HarnessError> {
    let mut f = OpenOptions::new().create(true).append(true).open(dir.join(VERSIONS_LOG))?;
    writeln!(f, "{incarnation} {} {}", learner.version, learner.env_steps)?;
    Ok(())
}

/// Reads back the versions log as `(incarnation, version, env_steps)`.
pub fn read_versions_log(path: &Path) -> Result<Vec<(u32, u64, u64)>, HarnessError> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter_map(|l| {
            let mut it = l.split_whitespace();
            Some((it.next()?.parse().ok()?, it.next()?.parse().ok()?, it.next()?.parse().ok()?))
        })
        .collect())
}

/// Trains until the step budget is spent or `stop` returns true. Returns
/// whether the budget was reached.
pub fn learner_loop(opts: &LearnerOptions, stop: &dyn Fn() -> bool) -> Result<bool, HarnessError> {
    let dir = opts
        .outputs
        .checkpoint_dir
        .clone()
        .ok_or_else(|| HarnessError::Setup("learner needs a checkpoint directory".into()))?;
    let ckpt_file = checkpoint_path(&dir);
    let mut learner = if ckpt_file.exists() {
        let ckpt = Checkpoint::load(&ckpt_file, Some(opts.config.hash()))?;
        log::info!("learner resuming from checkpoint v{} ({} env steps)", ckpt.version, ckpt.env_steps);
        Learner::resume(opts.config.clone(), ckpt, &opts.outputs)?
    } else {
        log::warn!(
            "NO CHECKPOINT at {}: learner starting from fresh initialization, version 0",
            ckpt_file.display()
        );
        let l = Learner::new(opts.config.clone(), &opts.outputs)?;
        l.save_checkpoint()?;
        log_version(&dir, opts.incarnation, &l)?;
        l
    };
    learner.publish_every_ingest = opts.lockstep;
    let mut ingested = IngestionLog::open(&opts.ingest_log)?;
    let acceptor = Acceptor::bind(opts.listen)?;
    let mut seq = Sequencer::new(LEARNER_ID, opts.incarnation);
    let mut link: Option<Link> = None;
    let mut last_beat = Instant::now();

    while !stop() {
        if learner.is_finished() {
            learner.finish()?;
            return Ok(true);
        }
        if let Some(mut fresh) = acceptor.try_accept()? {
            let hello = [
                seq.message(MessageKind::ClockSync, encode_u64(opts.epoch)),
                seq.message(MessageKind::CheckpointNotice, encode_u64(learner.version)),
            ];
            if fresh.send_all(&hello).is_ok() {
                log::info!("learner accepted labeler at {}", fresh.peer);
                link = Some(fresh);
            }
        }
        let Some(l) = &mut link else {
            std::thread::sleep(Duration::from_millis(5));
            continue;
        };
        let frames = match l.poll() {
            Polled::Frames(f) => f,
            Polled::Closed(e) => {
                log::warn!("learner lost labeler: {e:?}");
                link = None;
                continue;
            }
            Polled::Corrupt(e) => {
                log::error!("learner dropping corrupt stream: {e}");
                link = None;
                continue;
            }
        };
        for f in frames {
            let m = match f {
                Frame::Message(m) => m,
                Frame::Unknown { kind, sender, .. } => {
                    log::warn!("learner skipped frame of unknown kind {kind} from {sender}");
                    continue;
                }
            };
            if m.kind != MessageKind::LabeledBatch {
                continue;
            }
            let batch = match LabeledBatch::decode(&m.payload) {
                Ok(b) => b,
                Err(e) => {
                    log::error!("bad labeled batch: {e}");
                    continue;
                }
            };
            let mut keys = Vec::with_capacity(batch.steps.len());
            let mut fresh: Vec<Transition> = Vec::with_capacity(batch.steps.len());
            for (step, t) in batch.steps.iter().zip(batch.transitions) {
                let key = (batch.actor, batch.episode, *step);
                if ingested.contains(&key) {
                    continue;
                }
                keys.push(key);
                fresh.push(t);
            }
            if fresh.is_empty() {
                continue;
            }
            let before = learner.version;
            let taken = match learner.ingest(fresh) {
                Ok(n) => n,
                Err(e @ TrainError::NonFiniteLoss { .. }) => {
                    let dump = dir.join("diagnostic.txt");
                    let _ = fs::write(&dump, format!("env_steps={}\n{e}\n", learner.env_steps));
                    log::error!("{e}; diagnostics in {}", dump.display());
                    return Err(e.into());
                }
                Err(e) => return Err(e.into()),
            };
            ingested.record(&keys[..taken])?;
            if learner.version != before {
                log_version(&dir, opts.incarnation, &learner)?;
                let notice = seq.message(MessageKind::CheckpointNotice, encode_u64(learner.version));
                if l.send(&notice).is_err() {
                    link = None;
                    break;
                }
            }
            if learner.is_finished() {
                break;
            }
        }
        if let Some(l) = &mut link {
            if last_beat.elapsed() > Duration::from_secs(1) {
                last_beat = Instant::now();
                if l.send(&seq.message(MessageKind::Heartbeat, Vec::new())).is_err() {
                    link = None;
                }
            }
        }
    }
    Ok(false)
}
