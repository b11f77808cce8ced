use std::collections::HashMap;

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use swarm_core::allocation::choose_interval;
use swarm_core::routing::plan_chain;
use swarm_core::{BlockRange, ServerEntry, ServerId, ServerState};

const BLOCKS: usize = 24;

fn swarm(n_servers: usize, n_blocks: usize) -> (Vec<ServerEntry>, HashMap<ServerId, f64>) {
    let mut entries = Vec::new();
    let mut rtts = HashMap::new();
    let mut next = 0;
    for i in 0..n_servers {
        let span = 4 + i % 5;
        let start = if next < n_blocks {
            next.min(n_blocks - span)
        } else {
            (i * 7) % (n_blocks - span + 1)
        };
        next = next.max(start + span);
        let mut id = [0u8; 16];
        id[..8].copy_from_slice(&(i as u64).to_le_bytes());
        let e = ServerEntry {
            server_id: ServerId(id),
            address: format!("10.0.{}.{}:1", i / 250, i % 250),
            range: BlockRange { start, end: start + span },
            throughput: 1.0 + (i % 9) as f64,
            bandwidth_bps: Some(1e8),
            announced_at: 0,
            ttl_ms: u64::MAX / 2,
            state: ServerState::Online,
        };
        rtts.insert(e.server_id, 5.0 + (i * 13 % 90) as f64);
        entries.push(e);
    }
    (entries, rtts)
}

fn routing(c: &mut Criterion) {
    let mut g = c.benchmark_group("plan_chain");
    for n in [8, 64, 256] {
        let (entries, rtts) = swarm(n, BLOCKS);
        for beam in [4, 16] {
            g.bench_function(BenchmarkId::new(format!("beam{beam}"), n), |b| {
                b.iter(|| plan_chain(black_box(&entries), &rtts, BLOCKS, 4096, beam).unwrap())
            });
        }
    }
    g.finish();
}

fn allocation(c: &mut Criterion) {
    let t: Vec<f64> = (0..70).map(|i| (i * 31 % 17) as f64).collect();
    c.bench_function("choose_interval_70_blocks_span_8", |b| {
        b.iter(|| choose_interval(black_box(&t), 8, 3.0).unwrap())
    });
}

criterion_group!(benches, routing, allocation);
criterion_main!(benches);
