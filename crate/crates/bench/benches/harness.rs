use criterion::{criterion_group, criterion_main, Criterion};

use sac_bench::primed_learner;
use sac_core::harness::checkpoint::Checkpoint;
use sac_core::harness::wire::{decode_frame, MessageKind, RawRecord, TrajectoryChunk, WireMessage};
use sac_core::DoneReason;

fn chunk() -> TrajectoryChunk {
    let records = (0..64)
        .map(|i| RawRecord {
            step: i,
            timestamp: 1_000 + u64::from(i),
            done: DoneReason::Running,
            state: vec![0.1 * f64::from(i); 11],
            action: vec![0.5, -0.5],
            next_state: vec![0.2 * f64::from(i); 11],
        })
        .collect();
    TrajectoryChunk {
        episode: 7,
        chunk_index: 0,
        chunk_count: 8,
        policy_version: 3,
        records,
    }
}

fn wire(c: &mut Criterion) {
    let chunk = chunk();
    c.bench_function("chunk_encode", |b| b.iter(|| chunk.encode()));
    let frame = WireMessage::new(MessageKind::TrajectoryChunk, 1, 100, chunk.encode()).encode();
    c.bench_function("chunk_frame_decode", |b| {
        b.iter(|| {
            let (f, _) = decode_frame(&frame).unwrap();
            f
        })
    });
    let payload = chunk.encode();
    c.bench_function("chunk_payload_decode", |b| b.iter(|| TrajectoryChunk::decode(&payload).unwrap()));
}

fn checkpoint(c: &mut Criterion) {
    let ckpt = primed_learner("pendulum".parse().unwrap(), &[256, 256], 256, 300).checkpoint();
    let bytes = ckpt.encode();
    let mut g = c.benchmark_group("checkpoint_256x256");
    g.sample_size(20);
    g.bench_function("encode", |b| b.iter(|| ckpt.encode()));
    g.bench_function("decode", |b| b.iter(|| Checkpoint::decode(&bytes).unwrap()));
    g.finish();
}

criterion_group!(benches, wire, checkpoint);
criterion_main!(benches);
