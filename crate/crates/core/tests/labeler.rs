use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sac_core::envs::{DoneReason, EnvKind};
use sac_core::harness::labeler::{label_episode, Assembled, EpisodeAssembler};
use sac_core::harness::wire::{RawRecord, TrajectoryChunk};
use sac_core::policy::PolicyHead;
use sac_core::trainer::{CollectedStep, Collector, CollectorConfig};

fn crawler() -> EnvKind {
    "crawler".parse().unwrap()
}

fn collect(kind: EnvKind, history: usize, seed: u64) -> Vec<CollectedStep> {
    let spec = kind.spec();
    let obs = spec.obs_dim + history * (spec.obs_dim + spec.action_dim);
    let policy = PolicyHead::init(obs, spec.action_dim, &[16], seed).unwrap();
    let mut c = Collector::new(CollectorConfig {
        kind,
        history,
        seed,
        actor: 0,
        incarnation: 0,
        random_steps: 50,
        smoothing_episodes: 1,
        budget: None,
        epoch: 1000,
    });
    c.run_episode(&policy).unwrap()
}

#[test]
fn shuffled_chunks_label_identically() {
    for seed in 0..4 {
        let steps = collect(crawler(), 5, seed);
        let records: Vec<RawRecord> = steps.iter().map(|s| s.record.clone()).collect();
        let (ordered_steps, ordered) = label_episode(crawler(), 5, records.clone()).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chunks: Vec<TrajectoryChunk> = records
            .chunks(37)
            .enumerate()
            .map(|(i, r)| {
                let mut r = r.to_vec();
                r.shuffle(&mut rng);
                TrajectoryChunk {
                    episode: 7,
                    chunk_index: i as u32,
                    chunk_count: records.len().div_ceil(37) as u32,
                    policy_version: 0,
                    records: r,
                }
            })
            .collect();
        chunks.shuffle(&mut rng);
        let mut asm = EpisodeAssembler::new();
        let mut complete = None;
        for c in chunks {
            if let Assembled::Complete(r) = asm.add(100, c) {
                complete = Some(r);
            }
        }
        let (shuffled_steps, shuffled) = label_episode(crawler(), 5, complete.expect("episode assembles")).unwrap();
        assert_eq!(shuffled_steps, ordered_steps);
        assert_eq!(shuffled, ordered);

        // The labeler reproduces what the actor's environment computed.
        let local: Vec<_> = steps.into_iter().map(|s| s.transition).collect();
        assert_eq!(ordered.len(), local.len());
        for (a, b) in ordered.iter().zip(&local) {
            assert_eq!(a.reward.to_bits(), b.reward.to_bits());
            assert_eq!(a, b);
        }
    }
}

#[test]
fn idle_crawler_earns_nothing() {
    let kind = crawler();
    let mut env = kind.make();
    env.reset(3);
    let zero = vec![0.0; kind.spec().action_dim];
    let mut records = Vec::new();
    for step in 0u32.. {
        let state = env.raw_state();
        let s = env.step(&zero).unwrap();
        records.push(RawRecord {
            step,
            timestamp: step as u64,
            done: s.done,
            state,
            action: zero.clone(),
            next_state: env.raw_state(),
        });
        if s.done != DoneReason::Running {
            break;
        }
    }
    let (_, t) = label_episode(kind, 0, records).unwrap();
    assert_eq!(t.len(), kind.spec().max_steps);
    assert!(t.iter().all(|t| t.reward == 0.0));
}
