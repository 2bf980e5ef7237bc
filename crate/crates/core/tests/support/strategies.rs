//! Proptest strategies for wire messages and checkpoints.

#![allow(dead_code)]

use proptest::collection::vec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sac_core::envs::DoneReason;
use sac_core::harness::checkpoint::{Checkpoint, RngState};
use sac_core::harness::wire::{LabeledBatch, MessageKind, RawRecord, TrajectoryChunk, WireMessage};
use sac_core::net::{Activation, AdamConfig, AdamState, Layer, Mlp};
use sac_core::replay::Transition;

pub fn kind() -> impl Strategy<Value = MessageKind> {
    prop_oneof![
        Just(MessageKind::TrajectoryChunk),
        Just(MessageKind::LabeledBatch),
        Just(MessageKind::CheckpointNotice),
        Just(MessageKind::ClockSync),
        Just(MessageKind::Heartbeat),
    ]
}

pub fn message() -> impl Strategy<Value = WireMessage> {
    (kind(), any::<u64>(), any::<u64>(), vec(any::<u8>(), 0..200))
        .prop_map(|(k, seq, sender, payload)| WireMessage::new(k, seq, sender, payload))
}

/// Any bit pattern, NaNs included.
pub fn bits() -> impl Strategy<Value = f64> {
    any::<u64>().prop_map(f64::from_bits)
}

/// Every finite bit pattern: normals, subnormals, signed zeros.
pub fn finite() -> impl Strategy<Value = f64> {
    use prop::num::f64::{NEGATIVE, NORMAL, POSITIVE, SUBNORMAL, ZERO};
    POSITIVE | NEGATIVE | NORMAL | SUBNORMAL | ZERO
}

pub fn done() -> impl Strategy<Value = DoneReason> {
    prop_oneof![Just(DoneReason::Running), Just(DoneReason::TimeLimit), Just(DoneReason::Terminal)]
}

pub fn chunk() -> impl Strategy<Value = TrajectoryChunk> {
    (1usize..4, 1usize..3, 0u32..5).prop_flat_map(|(obs, act, extra)| {
        let record = (any::<u32>(), any::<u64>(), done(), vec(bits(), obs), vec(bits(), act), vec(bits(), obs))
            .prop_map(|(step, timestamp, done, state, action, next_state)| RawRecord {
                step,
                timestamp,
                done,
                state,
                action,
                next_state,
            });
        (any::<u64>(), 0..=extra, any::<u64>(), vec(record, 0..6)).prop_map(move |(episode, idx, v, records)| {
            TrajectoryChunk {
                episode,
                chunk_index: idx,
                chunk_count: extra + 1,
                policy_version: v,
                records,
            }
        })
    })
}

pub fn batch() -> impl Strategy<Value = LabeledBatch> {
    (1usize..4, 1usize..3).prop_flat_map(|(obs, act)| {
        let t = (vec(bits(), obs), vec(bits(), act), bits(), vec(bits(), obs), any::<bool>(), any::<bool>(), any::<u64>())
            .prop_map(|(obs, action, reward, next_obs, done, episode_end, timestamp)| Transition {
                obs,
                action,
                reward,
                next_obs,
                done,
                episode_end,
                timestamp,
            });
        (any::<u64>(), any::<u64>(), vec((any::<u32>(), t), 0..6)).prop_map(|(actor, episode, rows)| {
            let (steps, transitions) = rows.into_iter().unzip();
            LabeledBatch {
                actor,
                episode,
                steps,
                transitions,
            }
        })
    })
}

pub fn net(dims: Vec<usize>) -> impl Strategy<Value = Mlp> {
    let shapes: Vec<(usize, usize)> = dims.windows(2).map(|w| (w[0], w[1])).collect();
    let last = shapes.len() - 1;
    shapes
        .into_iter()
        .enumerate()
        .map(|(i, (inp, out))| {
            (vec(finite(), inp * out), vec(finite(), out)).prop_map(move |(weights, bias)| {
                let mut l = Layer::zeros(inp, out, if i == last { Activation::Identity } else { Activation::Relu });
                l.weights = weights;
                l.bias = bias;
                l
            })
        })
        .collect::<Vec<_>>()
        .prop_map(|layers| Mlp::from_layers(layers).unwrap())
}

pub fn adam(len: usize) -> impl Strategy<Value = AdamState> {
    (any::<u64>(), vec(finite(), len), vec(finite(), len)).prop_map(move |(step, m, v)| {
        let mut a = AdamState::new(len, AdamConfig::default());
        a.step = step;
        a.first_moment = m;
        a.second_moment = v;
        a
    })
}

pub fn checkpoint() -> impl Strategy<Value = Checkpoint> {
    (1usize..4, 1usize..3, 1usize..4).prop_flat_map(|(obs, act, hidden)| {
        let pol = vec![obs, hidden, 2 * act];
        let q = vec![obs + act, hidden, 1];
        let (np, nq) = (
            obs * hidden + hidden + hidden * 2 * act + 2 * act,
            (obs + act) * hidden + hidden + hidden + 1,
        );
        (
            (any::<u64>(), any::<u64>(), any::<u64>(), any::<u64>(), any::<u64>(), finite()),
            (net(pol), net(q.clone()), net(q.clone()), net(q.clone()), net(q)),
            (adam(np), adam(nq), adam(nq), adam(1)),
            (any::<u64>(), any::<u64>(), any::<u64>()),
        )
            .prop_map(|(h, nets, opts, r)| {
                let mut rng = ChaCha8Rng::seed_from_u64(r.0);
                rng.set_stream(r.1);
                rng.set_word_pos(r.2 as u128);
                Checkpoint {
                    config_hash: h.0,
                    version: h.1,
                    env_steps: h.2,
                    grad_steps: h.3,
                    episodes: h.4,
                    log_alpha: h.5,
                    policy: nets.0,
                    q1: nets.1,
                    q2: nets.2,
                    target1: nets.3,
                    target2: nets.4,
                    policy_opt: opts.0,
                    q1_opt: opts.1,
                    q2_opt: opts.2,
                    alpha_opt: opts.3,
                    rng: RngState::capture(&rng),
                }
            })
    })
}

