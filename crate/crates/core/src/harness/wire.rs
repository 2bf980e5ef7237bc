//! Length-prefixed message frames and their payloads.
//!
//! Frame layout, all little-endian:
//!
//! ```text
//! u32 payload length | u8 kind | u64 sequence | u64 sender | payload
//! ```
//!
//! Vectors inside payloads are a `u32` element count followed by `f64`
//! values.

use std::io::{self, Read, Write};

use super::codec::{DecodeError, Reader, Writer};
use crate::envs::DoneReason;
use crate::replay::Transition;

pub const HEADER_LEN: usize = 4 + 1 + 8 + 8;
/// Upper bound on a single payload; anything larger is treated as corrupt.
pub const MAX_PAYLOAD: usize = 64 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MessageKind {
    TrajectoryChunk,
    LabeledBatch,
    CheckpointNotice,
    ClockSync,
    Heartbeat,
}

impl MessageKind {
    pub fn code(self) -> u8 {
        match self {
            MessageKind::TrajectoryChunk => 1,
            MessageKind::LabeledBatch => 2,
            MessageKind::CheckpointNotice => 3,
            MessageKind::ClockSync => 4,
            MessageKind::Heartbeat => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => MessageKind::TrajectoryChunk,
            2 => MessageKind::LabeledBatch,
            3 => MessageKind::CheckpointNotice,
            4 => MessageKind::ClockSync,
            5 => MessageKind::Heartbeat,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WireMessage {
    pub kind: MessageKind,
    pub seq: u64,
    pub sender: u64,
    pub payload: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Frame {
    Message(WireMessage),
    /// A well-formed frame of a kind this build does not know; skipped.
    Unknown { kind: u8, seq: u64, sender: u64 },
}

impl WireMessage {
    pub fn new(kind: MessageKind, seq: u64, sender: u64, payload: Vec<u8>) -> Self {
        WireMessage {
            kind,
            seq,
            sender,
            payload,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.payload.len() as u32)
            .u8(self.kind.code())
            .u64(self.seq)
            .u64(self.sender)
            .bytes(&self.payload);
        w.finish()
    }
}

/// Decodes one frame from the front of `buf`, returning it and the number of
/// bytes consumed. A short buffer yields [`DecodeError::Truncated`].
pub fn decode_frame(buf: &[u8]) -> Result<(Frame, usize), DecodeError> {
    let mut r = Reader::new(buf);
    let len = r.u32()? as usize;
    if len > MAX_PAYLOAD {
        return Err(DecodeError::Invalid {
            offset: 0,
            reason: format!("payload length {len} exceeds limit"),
        });
    }
    let kind = r.u8()?;
    let seq = r.u64()?;
    let sender = r.u64()?;
    let payload = r.take(len)?;
    let frame = match MessageKind::from_code(kind) {
        Some(kind) => Frame::Message(WireMessage {
            kind,
            seq,
            sender,
            payload: payload.to_vec(),
        }),
        None => Frame::Unknown { kind, seq, sender },
    };
    Ok((frame, HEADER_LEN + len))
}

/// Incremental frame extraction over a byte stream.
#[derive(Default, Debug)]
pub struct FrameBuffer {
    buf: Vec<u8>,
    consumed: usize,
}

impl FrameBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn extend(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete frame, `Ok(None)` if more bytes are needed.
    pub fn next_frame(&mut self) -> Result<Option<Frame>, DecodeError> {
        match decode_frame(&self.buf) {
            Ok((frame, used)) => {
                self.buf.drain(..used);
                self.consumed += used;
                Ok(Some(frame))
            }
            Err(DecodeError::Truncated { .. }) => Ok(None),
            Err(DecodeError::Invalid { offset, reason }) => Err(DecodeError::Invalid {
                offset: self.consumed + offset,
                reason,
            }),
        }
    }

    pub fn pending_bytes(&self) -> usize {
        self.buf.len()
    }
}

pub fn write_message<W: Write>(w: &mut W, msg: &WireMessage) -> io::Result<()> {
    w.write_all(&msg.encode())?;
    w.flush()
}

/// Reads whatever is available into `frames`; returns `Ok(false)` on EOF.
/// Timeouts and would-block are not errors.
pub fn pump<R: Read>(r: &mut R, frames: &mut FrameBuffer) -> io::Result<bool> {
    let mut chunk = [0u8; 64 * 1024];
    loop {
        match r.read(&mut chunk) {
            Ok(0) => return Ok(false),
            Ok(n) => {
                frames.extend(&chunk[..n]);
                if n < chunk.len() {
                    return Ok(true);
                }
            }
            Err(e)
                if matches!(
                    e.kind(),
                    io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut | io::ErrorKind::Interrupted
                ) =>
            {
                return Ok(true)
            }
            Err(e) => return Err(e),
        }
    }
}

/// One environment step as logged by an actor: no reward.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRecord {
    pub step: u32,
    pub timestamp: u64,
    pub done: DoneReason,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_state: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryChunk {
    pub episode: u64,
    pub chunk_index: u32,
    pub chunk_count: u32,
    pub policy_version: u64,
    pub records: Vec<RawRecord>,
}

impl TrajectoryChunk {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.episode)
            .u32(self.chunk_index)
            .u32(self.chunk_count)
            .u64(self.policy_version)
            .u32(self.records.len() as u32);
        for r in &self.records {
            w.u32(r.step)
                .u64(r.timestamp)
                .u8(r.done.code())
                .vec(&r.state)
                .vec(&r.action)
                .vec(&r.next_state);
        }
        w.finish()
    }

    pub fn decode(payload: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::with_base(payload, HEADER_LEN);
        let episode = r.u64()?;
        let chunk_index = r.u32()?;
        let chunk_count = r.u32()?;
        let policy_version = r.u64()?;
        let n = r.u32()? as usize;
        let mut records = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let step = r.u32()?;
            let timestamp = r.u64()?;
            let code = r.u8()?;
            let done = DoneReason::from_code(code).ok_or_else(|| r.invalid("unknown done code"))?;
            records.push(RawRecord {
                step,
                timestamp,
                done,
                state: r.vec()?,
                action: r.vec()?,
                next_state: r.vec()?,
            });
        }
        r.finish()?;
        if chunk_index >= chunk_count {
            return Err(r.invalid("chunk index beyond count"));
        }
        Ok(TrajectoryChunk {
            episode,
            chunk_index,
            chunk_count,
            policy_version,
            records,
        })
    }
}

/// A fully labeled episode (or part of one) on its way to the learner.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub actor: u64,
    pub episode: u64,
    /// Step index of each transition within its episode.
    pub steps: Vec<u32>,
    pub transitions: Vec<Transition>,
}

impl LabeledBatch {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.actor)
            .u64(self.episode)
            .u32(self.transitions.len() as u32);
        for (step, t) in self.steps.iter().zip(&self.transitions) {
            let flags = u8::from(t.done) | (u8::from(t.episode_end) << 1);
            w.u32(*step)
                .u64(t.timestamp)
                .f64(t.reward)
                .u8(flags)
                .vec(&t.obs)
                .vec(&t.action)
                .vec(&t.next_obs);
        }
        w.finish()
    }

    pub fn decode(payload: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::with_base(payload, HEADER_LEN);
        let actor = r.u64()?;
        let episode = r.u64()?;
        let n = r.u32()? as usize;
        let mut steps = Vec::with_capacity(n.min(4096));
        let mut transitions = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            steps.push(r.u32()?);
            let timestamp = r.u64()?;
            let reward = r.f64()?;
            let flags = r.u8()?;
            if flags > 3 {
                return Err(r.invalid("unknown transition flags"));
            }
            transitions.push(Transition {
                timestamp,
                reward,
                done: flags & 1 != 0,
                episode_end: flags & 2 != 0,
                obs: r.vec()?,
                action: r.vec()?,
                next_obs: r.vec()?,
            });
        }
        r.finish()?;
        Ok(LabeledBatch {
            actor,
            episode,
            steps,
            transitions,
        })
    }
}

pub fn encode_u64(v: u64) -> Vec<u8> {
    v.to_le_bytes().to_vec()
}

pub fn decode_u64(payload: &[u8]) -> Result<u64, DecodeError> {
    let mut r = Reader::with_base(payload, HEADER_LEN);
    let v = r.u64()?;
    r.finish()?;
    Ok(v)
}

/// Per-sender monotonic sequence numbers. The incarnation occupies the high
/// bits so a restarted process never reuses a number.
#[derive(Clone, Debug)]
pub struct Sequencer {
    sender: u64,
    next: u64,
}

impl Sequencer {
    pub fn new(sender: u64, incarnation: u32) -> Self {
        Sequencer {
            sender,
            next: (incarnation as u64) << 40,
        }
    }

    pub fn sender(&self) -> u64 {
        self.sender
    }

    pub fn message(&mut self, kind: MessageKind, payload: Vec<u8>) -> WireMessage {
        let seq = self.next;
        self.next += 1;
        WireMessage::new(kind, seq, self.sender, payload)
    }
}
