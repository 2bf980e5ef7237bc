//! The actor process: rolls out episodes with the newest checkpointed policy
//! and ships raw records to the labeler.

use std::collections::VecDeque;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use super::checkpoint::{peek_version, Checkpoint};
use super::link::{Link, Polled};
use super::wire::{decode_u64, Frame, MessageKind, RawRecord, Sequencer, TrajectoryChunk, WireMessage};
use super::{actor_id, HarnessError};
use crate::config::TrainerConfig;
use crate::policy::PolicyHead;
use crate::trainer::{Agent, Collector, CollectorConfig};

pub const MAX_BUFFERED_EPISODES: usize = 10;

pub struct ActorOptions {
    pub config: TrainerConfig,
    pub index: u64,
    pub incarnation: u32,
    /// Number of actors sharing the warm-up budget.
    pub actors: u64,
    pub labeler: SocketAddr,
    pub checkpoint: PathBuf,
    /// Wait for a newer checkpoint after every episode, and stop after the
    /// configured step budget.
    pub lockstep: bool,
    pub chunk_len: usize,
}

struct PolicySource {
    path: PathBuf,
    hash: u64,
    action_dim: usize,
    version: u64,
    policy: PolicyHead,
    env_steps: u64,
}

impl PolicySource {
    fn open(opts: &ActorOptions) -> Result<Self, HarnessError> {
        let mut src = PolicySource {
            path: opts.checkpoint.clone(),
            hash: opts.config.hash(),
            action_dim: opts.config.action_dim(),
            version: 0,
            policy: Agent::init(&opts.config)?.policy,
            env_steps: 0,
        };
        if !src.path.exists() {
            log::warn!(
                "NO CHECKPOINT at {}: actor starting from fresh initialization, version 0",
                src.path.display()
            );
        } else if !src.reload(true) {
            log::warn!("actor keeps its fresh initialization");
        }
        Ok(src)
    }

    /// Loads the file if it holds a newer version (or any version when
    /// `force`). Malformed files are reported and skipped.
    fn reload(&mut self, force: bool) -> bool {
        if !force && peek_version(&self.path).is_none_or(|v| v <= self.version) {
            return false;
        }
        let loaded = Checkpoint::load(&self.path, Some(self.hash))
            .map_err(|e| e.to_string())
            .and_then(|c| {
                PolicyHead::new(c.policy.clone(), self.action_dim)
                    .map(|p| (c, p))
                    .map_err(|e| e.to_string())
            });
        match loaded {
            Ok((c, p)) if force || c.version > self.version => {
                self.version = c.version;
                self.env_steps = c.env_steps;
                self.policy = p;
                true
            }
            Ok(_) => false,
            Err(e) => {
                log::error!("ignoring malformed checkpoint {}: {e}", self.path.display());
                false
            }
        }
    }
}

fn episode_messages(
    seq: &mut Sequencer,
    episode: u64,
    version: u64,
    records: Vec<RawRecord>,
    chunk_len: usize,
) -> Vec<WireMessage> {
    let chunks: Vec<Vec<RawRecord>> = records.chunks(chunk_len.max(1)).map(<[_]>::to_vec).collect();
    let count = chunks.len() as u32;
    chunks
        .into_iter()
        .enumerate()
        .map(|(i, records)| {
            let c = TrajectoryChunk {
                episode,
                chunk_index: i as u32,
                chunk_count: count,
                policy_version: version,
                records,
            };
            seq.message(MessageKind::TrajectoryChunk, c.encode())
        })
        .collect()
}

/// Runs until `stop` returns true.
pub fn actor_loop(opts: &ActorOptions, stop: &dyn Fn() -> bool) -> Result<(), HarnessError> {
    let mut source = PolicySource::open(opts)?;
    let mut cc = CollectorConfig::from_trainer(&opts.config, opts.index, opts.incarnation, opts.actors);
    if source.env_steps >= opts.config.initial_random_steps {
        cc.random_steps = 0;
    }
    if opts.lockstep {
        cc.budget = Some(opts.config.total_steps);
    }
    let mut seq = Sequencer::new(actor_id(opts.index), opts.incarnation);
    let mut link: Option<Link> = None;
    let mut epoch: Option<u64> = None;
    let mut notified = 0u64;
    let mut queue: VecDeque<Vec<WireMessage>> = VecDeque::new();
    let mut collector: Option<Collector> = None;
    let mut last_connect = Instant::now() - Duration::from_secs(1);
    let mut held_for_episode: Option<u64> = None;

    while !stop() {
        if link.is_none() && last_connect.elapsed() > Duration::from_millis(100) {
            last_connect = Instant::now();
            if let Ok(l) = Link::connect(opts.labeler) {
                log::info!("actor {} connected to labeler", opts.index);
                link = Some(l);
            }
        }
        if let Some(l) = &mut link {
            match l.poll() {
                Polled::Frames(frames) => {
                    for f in frames {
                        let Frame::Message(m) = f else { continue };
                        match m.kind {
                            MessageKind::ClockSync => epoch = decode_u64(&m.payload).ok().or(epoch),
                            MessageKind::CheckpointNotice => {
                                if let Ok(v) = decode_u64(&m.payload) {
                                    notified = notified.max(v);
                                }
                            }
                            _ => {}
                        }
                    }
                }
                Polled::Closed(_) | Polled::Corrupt(_) => link = None,
            }
        }
        while let (Some(l), Some(front)) = (&mut link, queue.front()) {
            if l.send_all(front).is_ok() {
                queue.pop_front();
            } else {
                link = None;
            }
        }
        if queue.len() >= MAX_BUFFERED_EPISODES {
            // Sink unreachable and local buffer full: block until it drains.
            std::thread::sleep(Duration::from_millis(20));
            continue;
        }
        let Some(epoch) = epoch else {
            std::thread::sleep(Duration::from_millis(5));
            continue;
        };
        let col = collector.get_or_insert_with(|| {
            let mut c = cc.clone();
            c.epoch = epoch;
            Collector::new(c)
        });
        if col.exhausted() {
            std::thread::sleep(Duration::from_millis(20));
            continue;
        }

        // Between episodes: pick up the newest checkpoint. In lockstep the
        // next episode waits for one newer than the last episode used.
        if notified > source.version || !opts.lockstep {
            source.reload(false);
        }
        if opts.lockstep && held_for_episode.is_some_and(|v| source.version <= v) {
            source.reload(false);
            if source.version <= held_for_episode.unwrap_or(0) {
                std::thread::sleep(Duration::from_millis(2));
                continue;
            }
        }
        held_for_episode = Some(source.version);
        let steps = col.run_episode(&source.policy)?;
        let records: Vec<RawRecord> = steps.into_iter().map(|s| s.record).collect();
        let msgs = episode_messages(&mut seq, col.episode_id(), source.version, records, opts.chunk_len);
        queue.push_back(msgs);
        if queue.len() > 1 {
            log::warn!("actor {} holding {} unsent episodes", opts.index, queue.len());
        }
    }
    Ok(())
}
