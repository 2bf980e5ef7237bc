//! Reward labeling: reassembles trajectory chunks into episodes and turns
//! raw records into transitions.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use thiserror::Error;

use super::link::{Acceptor, Link, Polled};
use super::wire::{
    Frame, LabeledBatch, MessageKind, RawRecord, Sequencer, TrajectoryChunk, WireMessage,
};
use super::{HarnessError, LABELER_ID};
use crate::envs::{EnvError, EnvKind, History};
use crate::replay::Transition;

#[derive(Debug, Error, PartialEq)]
pub enum LabelError {
    #[error("episode has no records")]
    Empty,
    #[error("step indices jump from {after} to {next}")]
    Gap { after: i64, next: u32 },
    #[error("episode ends before its last record")]
    EarlyEnd,
    #[error("last record is not marked done")]
    Unfinished,
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Labels one complete episode. Records may arrive in any order; they are
/// sorted by step index and must then cover `0..n` without gaps.
pub fn label_episode(
    kind: EnvKind,
    history: usize,
    mut records: Vec<RawRecord>,
) -> Result<(Vec<u32>, Vec<Transition>), LabelError> {
    if records.is_empty() {
        return Err(LabelError::Empty);
    }
    records.sort_by_key(|r| r.step);
    for (i, r) in records.iter().enumerate() {
        if r.step as usize != i {
            return Err(LabelError::Gap {
                after: i as i64 - 1,
                next: r.step,
            });
        }
        let last = i + 1 == records.len();
        if r.done.is_done() != last {
            return Err(if last { LabelError::Unfinished } else { LabelError::EarlyEnd });
        }
    }
    let spec = kind.spec();
    let mut hist = History::new(history, spec.obs_dim, spec.action_dim);
    let mut steps = Vec::with_capacity(records.len());
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let reward = kind.reward(&r.state, &r.action, &r.next_state)?;
        let o = kind.observe(&r.state);
        let obs = hist.wrap(&o);
        hist.record(&o, &r.action);
        let next_obs = hist.wrap(&kind.observe(&r.next_state));
        steps.push(r.step);
        out.push(Transition {
            obs,
            action: r.action,
            reward,
            next_obs,
            done: r.done.is_terminal(),
            episode_end: r.done.is_done(),
            timestamp: r.timestamp,
        });
    }
    Ok((steps, out))
}

#[derive(Debug, Default)]
struct Pending {
    count: u32,
    chunks: BTreeMap<u32, Vec<RawRecord>>,
    touched: Option<Instant>,
}

/// Collects chunks per (sender, episode) until an episode is complete.
#[derive(Debug, Default)]
pub struct EpisodeAssembler {
    pending: HashMap<(u64, u64), Pending>,
}

#[derive(Debug, PartialEq)]
pub enum Assembled {
    Incomplete,
    Complete(Vec<RawRecord>),
    /// The chunk contradicts earlier ones; the whole episode is dropped.
    Dropped(String),
}

impl EpisodeAssembler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn add(&mut self, sender: u64, chunk: TrajectoryChunk) -> Assembled {
        let key = (sender, chunk.episode);
        let p = self.pending.entry(key).or_insert_with(|| Pending {
            count: chunk.chunk_count,
            ..Default::default()
        });
        p.touched = Some(Instant::now());
        if p.count != chunk.chunk_count {
            self.pending.remove(&key);
            return Assembled::Dropped("chunk count changed mid-episode".into());
        }
        if p.chunks.insert(chunk.chunk_index, chunk.records).is_some() {
            self.pending.remove(&key);
            return Assembled::Dropped(format!("chunk {} delivered twice", chunk.chunk_index));
        }
        if p.chunks.len() as u32 == p.count {
            let p = self.pending.remove(&key).expect("present");
            return Assembled::Complete(p.chunks.into_values().flatten().collect());
        }
        Assembled::Incomplete
    }

    /// Forgets episodes that have not progressed for `age`; returns their
    /// keys.
    pub fn expire(&mut self, age: Duration) -> Vec<(u64, u64)> {
        let now = Instant::now();
        let old: Vec<(u64, u64)> = self
            .pending
            .iter()
            .filter(|(_, p)| p.touched.is_some_and(|t| now - t > age))
            .map(|(k, _)| *k)
            .collect();
        for k in &old {
            self.pending.remove(k);
        }
        old
    }
}

pub struct LabelerOptions {
    pub kind: EnvKind,
    pub history: usize,
    pub listen: SocketAddr,
    pub learner: SocketAddr,
    pub incarnation: u32,
    /// Appends `sender seq episode chunk` per received chunk.
    pub log: Option<PathBuf>,
}

/// Runs until `stop` returns true. Labeled batches wait in memory while the
/// learner is unreachable.
pub fn labeler_loop(opts: &LabelerOptions, stop: &dyn Fn() -> bool) -> Result<(), HarnessError> {
    let acceptor = Acceptor::bind(opts.listen)?;
    let mut seq = Sequencer::new(LABELER_ID, opts.incarnation);
    let mut actors: Vec<Link> = Vec::new();
    let mut learner: Option<Link> = None;
    let mut outbox: Vec<WireMessage> = Vec::new();
    let mut assembler = EpisodeAssembler::new();
    let mut last_seq: HashMap<u64, u64> = HashMap::new();
    let mut log: Option<BufWriter<File>> = match &opts.log {
        Some(p) => Some(BufWriter::new(OpenOptions::new().create(true).append(true).open(p)?)),
        None => None,
    };
    // Latest downstream payloads, replayed to actors that connect later.
    let mut clock: Option<Vec<u8>> = None;
    let mut notice: Option<Vec<u8>> = None;
    let mut last_connect = Instant::now() - Duration::from_secs(1);
    let mut last_beat = Instant::now();

    while !stop() {
        while let Some(mut link) = acceptor.try_accept()? {
            let mut hello = Vec::new();
            if let Some(p) = &clock {
                hello.push(seq.message(MessageKind::ClockSync, p.clone()));
            }
            if let Some(p) = &notice {
                hello.push(seq.message(MessageKind::CheckpointNotice, p.clone()));
            }
            if link.send_all(&hello).is_ok() {
                actors.push(link);
            }
        }

        if learner.is_none() && last_connect.elapsed() > Duration::from_millis(100) {
            last_connect = Instant::now();
            if let Ok(link) = Link::connect(opts.learner) {
                log::info!("labeler connected to learner at {}", opts.learner);
                learner = Some(link);
            }
        }

        let mut downstream = Vec::new();
        if let Some(link) = &mut learner {
            match link.poll() {
                Polled::Frames(frames) => {
                    for f in frames {
                        match f {
                            Frame::Message(m) if m.kind == MessageKind::ClockSync => {
                                clock = Some(m.payload.clone());
                                downstream.push(seq.message(m.kind, m.payload));
                            }
                            Frame::Message(m) if m.kind == MessageKind::CheckpointNotice => {
                                notice = Some(m.payload.clone());
                                downstream.push(seq.message(m.kind, m.payload));
                            }
                            Frame::Message(_) => {}
                            Frame::Unknown { kind, sender, .. } => {
                                log::warn!("labeler skipped frame of unknown kind {kind} from {sender}")
                            }
                        }
                    }
                }
                Polled::Closed(e) => {
                    log::warn!("labeler lost learner: {e:?}");
                    learner = None;
                }
                Polled::Corrupt(e) => {
                    log::error!("labeler dropping corrupt learner stream: {e}");
                    learner = None;
                }
            }
        }
        if !downstream.is_empty() {
            actors.retain_mut(|a| a.send_all(&downstream).is_ok());
        }

        let mut i = 0;
        while i < actors.len() {
            let frames = match actors[i].poll() {
                Polled::Frames(f) => f,
                Polled::Closed(_) | Polled::Corrupt(_) => {
                    let gone = actors.remove(i);
                    log::info!("actor at {} disconnected", gone.peer);
                    continue;
                }
            };
            i += 1;
            for f in frames {
                let m = match f {
                    Frame::Message(m) => m,
                    Frame::Unknown { kind, sender, .. } => {
                        log::warn!("labeler skipped frame of unknown kind {kind} from {sender}");
                        continue;
                    }
                };
                if let Some(prev) = last_seq.insert(m.sender, m.seq) {
                    if m.seq <= prev {
                        log::error!("sender {} sequence went from {prev} to {}", m.sender, m.seq);
                    }
                }
                if m.kind != MessageKind::TrajectoryChunk {
                    continue;
                }
                let chunk = match TrajectoryChunk::decode(&m.payload) {
                    Ok(c) => c,
                    Err(e) => {
                        log::error!("bad chunk from {}: {e}", m.sender);
                        continue;
                    }
                };
                if let Some(w) = &mut log {
                    writeln!(w, "{} {} {} {}", m.sender, m.seq, chunk.episode, chunk.chunk_index)?;
                }
                let episode = chunk.episode;
                match assembler.add(m.sender, chunk) {
                    Assembled::Incomplete => {}
                    Assembled::Dropped(why) => {
                        log::error!("dropping episode {episode:x} from {}: {why}", m.sender)
                    }
                    Assembled::Complete(records) => match label_episode(opts.kind, opts.history, records) {
                        Ok((steps, transitions)) => {
                            let batch = LabeledBatch {
                                actor: m.sender,
                                episode,
                                steps,
                                transitions,
                            };
                            outbox.push(seq.message(MessageKind::LabeledBatch, batch.encode()));
                        }
                        Err(e) => log::error!("dropping episode {episode:x} from {}: {e}", m.sender),
                    },
                }
            }
        }
        if let Some(w) = &mut log {
            w.flush()?;
        }
        for (sender, episode) in assembler.expire(Duration::from_secs(120)) {
            log::warn!("abandoning incomplete episode {episode:x} from {sender}");
        }

        if last_beat.elapsed() > Duration::from_secs(1) {
            last_beat = Instant::now();
            outbox.push(seq.message(MessageKind::Heartbeat, Vec::new()));
        }
        if let Some(link) = &mut learner {
            if !outbox.is_empty() {
                match link.send_all(&outbox) {
                    Ok(()) => outbox.clear(),
                    Err(e) => {
                        log::warn!("labeler send to learner failed: {e}");
                        learner = None;
                    }
                }
            }
        } else {
            outbox.retain(|m| m.kind != MessageKind::Heartbeat);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::DoneReason;

    fn record(step: u32, done: DoneReason) -> RawRecord {
        let x = step as f64 * 0.1;
        RawRecord {
            step,
            timestamp: step as u64,
            done,
            state: vec![x, 0.0],
            action: vec![0.5],
            next_state: vec![x + 0.1, 0.0],
        }
    }

    fn episode(n: u32) -> Vec<RawRecord> {
        (0..n)
            .map(|i| record(i, if i + 1 == n { DoneReason::TimeLimit } else { DoneReason::Running }))
            .collect()
    }

    #[test]
    fn gap_drops_episode() {
        let mut e = episode(5);
        e.remove(2);
        assert_eq!(
            label_episode(EnvKind::Pendulum, 0, e),
            Err(LabelError::Gap { after: 1, next: 3 })
        );
    }

    #[test]
    fn unfinished_episode_rejected() {
        let mut e = episode(3);
        e[2].done = DoneReason::Running;
        assert_eq!(label_episode(EnvKind::Pendulum, 0, e), Err(LabelError::Unfinished));
    }

    #[test]
    fn history_matches_wrapped_env_layout() {
        let (_, t) = label_episode(EnvKind::Pendulum, 2, episode(3)).unwrap();
        assert_eq!(t[0].obs.len(), 3 + 2 * 4);
        assert_eq!(&t[0].obs[3..], &[0.0; 8]);
        assert_eq!(t[1].obs[3..6], t[0].obs[..3]);
        assert_eq!(t[1].obs[6], 0.5);
        assert_eq!(t[0].next_obs, t[1].obs);
    }

    #[test]
    fn assembler_waits_for_all_chunks() {
        let recs = episode(6);
        let mut a = EpisodeAssembler::new();
        let chunk = |i: u32| TrajectoryChunk {
            episode: 9,
            chunk_index: i,
            chunk_count: 3,
            policy_version: 0,
            records: recs[2 * i as usize..2 * i as usize + 2].to_vec(),
        };
        assert_eq!(a.add(100, chunk(2)), Assembled::Incomplete);
        assert_eq!(a.add(100, chunk(0)), Assembled::Incomplete);
        assert_eq!(a.add(101, chunk(1)), Assembled::Incomplete);
        let all = recs.clone();
        assert_eq!(a.add(100, chunk(1)), Assembled::Complete(all));
        assert_eq!(a.pending(), 1);
        assert!(matches!(a.add(101, chunk(1)), Assembled::Dropped(_)));
        assert_eq!(a.pending(), 0);
    }
}
