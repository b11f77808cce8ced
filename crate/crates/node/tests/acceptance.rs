//! End-to-end acceptance suite. Runs without the libtest harness so every
//! criterion executes in sequence, timing measurements never share the CPU
//! with another test, and the PASS/FAIL lines are always printed.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use swarm_core::allocation::{block_throughputs, choose_interval, should_rebalance, swarm_throughput};
use swarm_core::footprint::{memory_footprint, offload_upper_bound};
use swarm_core::model::{gen_checkpoint, HeadWeights, Sampler};
use swarm_core::quant::{dequantize_blockwise, quantize_blockwise, DEFAULT_BLOCK_SIZE};
use swarm_core::registry::{merge, RegistrySnapshot, ServerEntry, ServerId, ServerState};
use swarm_core::routing::{plan_chain, validate_chain};
use swarm_core::tuning::{AdamConfig, PromptTuneState};
use swarm_core::wire::{decode_tensor, encode_tensor, MsgType, WireEncoding};
use swarm_core::{reference, BlockRange, Checkpoint, Model, ModelConfig, SwarmView, Tensor};
use swarm_node::client::{ClientConfig, InferenceSession, SwarmClient};
use swarm_node::events::EventKind;
use swarm_node::harness::{bench_prompt, measure_concurrent, measure_inference, LocalSwarm, ServerSpec, SwarmOptions};
use swarm_node::registry::{now_ms, LookupReq, RegistryNode};
use swarm_node::rpc::RpcClient;
use swarm_node::server::ServerInfo;
use swarm_node::shaper::LinkShape;

type Outcome = Result<(bool, String), Box<dyn std::error::Error + Send + Sync>>;

const MAX_SEQ: usize = 128;

fn toy() -> Arc<Checkpoint> {
    Arc::new(gen_checkpoint(42, ModelConfig::new(12, 256, 8, 256, MAX_SEQ)).unwrap())
}

fn chain_specs() -> Vec<ServerSpec> {
    vec![
        ServerSpec::range(0, 4).with_throughput(100.0),
        ServerSpec::range(4, 8).with_throughput(100.0),
        ServerSpec::range(8, 12).with_throughput(100.0),
    ]
}

fn fast_client() -> ClientConfig {
    ClientConfig {
        backoff: vec![Duration::from_millis(200); 3],
        ping_deadline: Duration::from_millis(500),
        ..ClientConfig::default()
    }
}

fn embed(head: &HeadWeights, tokens: &[u32]) -> Tensor {
    Tensor::new(vec![tokens.len(), head.config.hidden], head.embed(tokens).unwrap()).unwrap()
}

fn last_logits(head: &HeadWeights, h: &Tensor) -> Vec<f32> {
    let d = head.config.hidden;
    head.lm_head(&h.data[h.data.len() - d..]).unwrap()
}

/// Greedy decoding through `session`, calling `hook` before each step.
async fn greedy_session(
    session: &mut InferenceSession,
    head: &HeadWeights,
    prompt: &[u32],
    n_new: usize,
    mut hook: impl FnMut(usize),
) -> Result<Vec<u32>, Box<dyn std::error::Error + Send + Sync>> {
    let mut input = prompt.to_vec();
    let mut out = Vec::with_capacity(n_new);
    for step in 0..n_new {
        hook(step);
        let h = session.step(&embed(head, &input)).await?;
        let tok = Sampler::greedy().sample(&last_logits(head, &h))?;
        out.push(tok);
        input = vec![tok];
    }
    Ok(out)
}

async fn c1_equivalence(ckpt: &Arc<Checkpoint>, prompt: &[u32], expected: &[u32]) -> Outcome {
    let swarm = LocalSwarm::launch(ckpt.clone(), &chain_specs(), SwarmOptions::default()).await?;
    let client = swarm.client(fast_client());
    let out = client.generate(prompt, 64, &mut Sampler::greedy(), |_| {}).await?;
    let first_diff = out.tokens.iter().zip(expected).position(|(a, b)| a != b);
    Ok((
        out.tokens == expected,
        format!("64 greedy tokens over 3 hops, first mismatch {first_diff:?}"),
    ))
}

async fn c2_fault_tolerance(ckpt: &Arc<Checkpoint>, prompt: &[u32], expected: &[u32]) -> Outcome {
    let mut specs = chain_specs();
    specs.push(ServerSpec::range(0, 12).with_throughput(1.0));
    let swarm = LocalSwarm::launch(ckpt.clone(), &specs, SwarmOptions::default()).await?;
    let client = swarm.client(fast_client());
    let head = client.head().clone();
    let mut session = client.open_session(prompt.len() + 63).await?;
    let chain = session.chain();
    if chain.len() != 3 {
        return Ok((false, format!("expected a 3-hop chain, got {}", chain.len())));
    }
    let victim = swarm.index_of(&chain[1].server.address).ok_or("victim not found")?;
    let out = greedy_session(&mut session, &head, prompt, 64, |step| {
        if step == 32 {
            swarm.kill(victim);
        }
    })
    .await?;
    session.close().await;
    let recoveries = swarm.events.count(|e| matches!(e, EventKind::Recovery { .. }));
    Ok((
        out == expected && recoveries >= 1,
        format!("killed hop 2 at step 32; tokens match: {}, recovery events: {recoveries}", out == expected),
    ))
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Teacher-forced decoding; returns final logits and bytes per decode step.
async fn forced_run(client: &SwarmClient, prompt: &[u32], forced: &[u32]) -> Result<(Vec<f32>, f64), Box<dyn std::error::Error + Send + Sync>> {
    let head = client.head().clone();
    let mut session = client.open_session(prompt.len() + forced.len()).await?;
    let mut h = session.step(&embed(&head, prompt)).await?;
    let before = client.rpc().stats().total();
    for &tok in forced {
        h = session.step(&embed(&head, &[tok])).await?;
    }
    let bytes = (client.rpc().stats().total() - before) as f64 / forced.len() as f64;
    session.close().await;
    Ok((last_logits(&head, &h), bytes))
}

async fn c3_quantized_transport(ckpt: &Arc<Checkpoint>, prompt: &[u32], expected: &[u32]) -> Outcome {
    let swarm = LocalSwarm::launch(ckpt.clone(), &chain_specs(), SwarmOptions::default()).await?;
    let forced = &expected[..32];
    let fp32 = swarm.client(fast_client());
    let int8 = swarm.client(ClientConfig {
        encoding: WireEncoding::Int8,
        ..fast_client()
    });
    let (l32, b32) = forced_run(&fp32, prompt, forced).await?;
    let (l8, b8) = forced_run(&int8, prompt, forced).await?;
    let ratio = b8 / b32;
    let cos = cosine(&l32, &l8);
    Ok((
        ratio < 0.51 && cos >= 0.99,
        format!("wire bytes/step {b8:.0} vs {b32:.0} (ratio {ratio:.3}), final logits cosine {cos:.5}"),
    ))
}

fn c4_quant_round_trip() -> Outcome {
    let mut rng = StdRng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for i in 0..10_000 {
        let n = rng.random_range(1..400);
        let mag = 10f32.powf(rng.random_range(-4.0..4.0));
        let mut data: Vec<f32> = (0..n).map(|_| rng.random_range(-mag..mag)).collect();
        if i % 10 == 0 {
            let j = rng.random_range(0..n);
            data[j] *= 50.0;
        }
        let t = Tensor::new(vec![n], data)?;
        let q = quantize_blockwise(&t, DEFAULT_BLOCK_SIZE)?;
        let back = dequantize_blockwise(&q)?;
        let wire = decode_tensor(&encode_tensor(&t, WireEncoding::Int8)?)?;
        for (j, ((x, y), z)) in t.data.iter().zip(&back.data).zip(&wire.data).enumerate() {
            let half = q.scales[j / DEFAULT_BLOCK_SIZE] as f64 / 2.0;
            let ulp = f32::EPSILON as f64 * (*y as f64).abs();
            let err = (*x as f64 - *y as f64).abs();
            worst = worst.max(err / half.max(f64::MIN_POSITIVE));
            if err > half + ulp || y != z {
                failures += 1;
            }
        }
    }
    let zero = Tensor::zeros(vec![3, 70]);
    let zq = quantize_blockwise(&zero, DEFAULT_BLOCK_SIZE)?;
    let zero_fixed = dequantize_blockwise(&zq)? == zero && zq.codes.iter().all(|&c| c == 0);
    Ok((
        failures == 0 && zero_fixed,
        format!("10000 tensors, {failures} elements over scale/2 (worst {worst:.4} of bound), zero fixed point: {zero_fixed}"),
    ))
}

fn c5_footprint() -> Outcome {
    let params = 176_000_000_000u64;
    let half = memory_footprint(params, 16, 8_000_000_000);
    let int8 = memory_footprint(params, 8, 8_000_000_000);
    let a = offload_upper_bound(params, 8, 256.0);
    let b = offload_upper_bound(params, 8, 128.0);
    let ok = half.bytes_total == 352_000_000_000
        && half.servers_needed == 44
        && int8.bytes_total == 176_000_000_000
        && int8.servers_needed == 22
        && a == 5.5
        && b == 11.0
        && offload_upper_bound(0, 8, 256.0) == 0.0;
    Ok((
        ok,
        format!(
            "16-bit {} GB / {} servers, 8-bit {} GB / {} servers, offload {a} s and {b} s",
            half.bytes_total / 1_000_000_000,
            half.servers_needed,
            int8.bytes_total / 1_000_000_000,
            int8.servers_needed
        ),
    ))
}

/// Every multiset of `n` starts in `0..m`, as non-decreasing vectors.
fn multisets(m: usize, n: usize) -> Vec<Vec<usize>> {
    fn rec(m: usize, n: usize, lo: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        for s in lo..m {
            cur.push(s);
            rec(m, n, s, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(m, n, 0, &mut Vec::new(), &mut out);
    out
}

fn coverage_min(l: usize, k: usize, starts: &[usize]) -> f64 {
    let mut c = vec![0.0; l];
    for &s in starts {
        for v in &mut c[s..s + k] {
            *v += 1.0;
        }
    }
    c.into_iter().fold(f64::INFINITY, f64::min)
}

fn c6_allocation() -> Outcome {
    let (mut instances, mut sims, mut worst_ratio, mut max_calls) = (0, 0usize, f64::INFINITY, 0.0f64);
    let mut problems = Vec::new();
    for l in 1..=10 {
        for n in 1..=5 {
            for k in 1..=4.min(l) {
                instances += 1;
                let mut t = vec![0.0; l];
                for _ in 0..n {
                    let s = choose_interval(&t, k, 1.0)?;
                    for v in &mut t[s..s + k] {
                        *v += 1.0;
                    }
                }
                let greedy = swarm_throughput(&t);
                let all = multisets(l - k + 1, n);
                let opt = all.iter().map(|s| coverage_min(l, k, s)).fold(0.0, f64::max);
                if opt > 0.0 {
                    worst_ratio = worst_ratio.min(greedy / opt);
                }
                if greedy < 0.5 * opt {
                    problems.push(format!("greedy L={l} n={n} k={k}: {greedy} vs {opt}"));
                }
                for starts in &all {
                    sims += 1;
                    let mut ranges: Vec<usize> = starts.clone();
                    let view = |r: &[usize]| {
                        r.iter().enumerate().fold(SwarmView::new(l), |v, (id, &s)| {
                            v.with_server(id, BlockRange { start: s, end: s + k }, 1.0)
                        })
                    };
                    let (mut call, mut quiet, mut last_move) = (0, 0, 0);
                    while quiet < n && call < 100 * n * l {
                        let id = call % n;
                        call += 1;
                        match should_rebalance(&view(&ranges), &id, 0.2) {
                            Some(s) => {
                                ranges[id] = s;
                                last_move = call;
                                quiet = 0;
                            }
                            None => quiet += 1,
                        }
                    }
                    max_calls = max_calls.max(last_move as f64 / (n * l) as f64);
                    if quiet < n {
                        problems.push(format!("no fixed point L={l} n={n} k={k} from {starts:?}"));
                    } else if last_move > n * l {
                        problems.push(format!("slow fixed point L={l} n={n} k={k} from {starts:?}: {last_move}"));
                    } else if n * k >= l && block_throughputs(&view(&ranges)).contains(&0.0) {
                        problems.push(format!("gap left L={l} n={n} k={k} from {starts:?} -> {ranges:?}"));
                    }
                }
            }
        }
    }
    Ok((
        problems.is_empty(),
        format!(
            "{instances} instances, {sims} rebalancing runs, worst greedy/optimum {worst_ratio:.3}, max calls/(n*L) {max_calls:.2}{}",
            problems.first().map(|p| format!("; first problem: {p}")).unwrap_or_default()
        ),
    ))
}

fn entry(id: u8, start: usize, end: usize, tp: f64, bw: Option<f64>) -> ServerEntry {
    ServerEntry {
        server_id: ServerId([id; 16]),
        address: format!("10.0.0.{id}:1"),
        range: BlockRange { start, end },
        throughput: tp,
        bandwidth_bps: bw,
        announced_at: now_ms(),
        ttl_ms: 60_000,
        state: ServerState::Online,
    }
}

struct RouteOracle<'a> {
    servers: &'a [ServerEntry],
    rtt: &'a HashMap<ServerId, f64>,
    n_blocks: usize,
    payload: f64,
}

impl RouteOracle<'_> {
    fn leg(&self, s: &ServerEntry, prev: Option<&ServerEntry>, blocks: usize) -> f64 {
        let r = self.rtt[&s.server_id] / 1000.0;
        let latency = match prev {
            None => r / 2.0,
            Some(p) => (self.rtt[&p.server_id] / 1000.0 + r) / 4.0,
        };
        let transfer = s.bandwidth_bps.map_or(0.0, |bw| self.payload * 8.0 / bw);
        latency + transfer + blocks as f64 / s.throughput
    }

    /// Cheapest completion from `block`, having just left `prev`.
    fn best(&self, block: usize, prev: Option<&ServerEntry>) -> f64 {
        if block == self.n_blocks {
            let p = prev.expect("non-empty chain");
            return self.rtt[&p.server_id] / 2000.0;
        }
        self.servers
            .iter()
            .filter(|s| s.range.start <= block && block < s.range.end)
            .map(|s| {
                let end = s.range.end.min(self.n_blocks);
                self.leg(s, prev, end - block) + self.best(end, Some(s))
            })
            .fold(f64::INFINITY, f64::min)
    }
}

fn c7_routing() -> Outcome {
    let mut rng = StdRng::seed_from_u64(7);
    let (mut checked, mut worst) = (0, 0.0f64);
    let mut problems = Vec::new();
    while checked < 1000 {
        let n_blocks = rng.random_range(1..=10);
        let n = rng.random_range(1..=6);
        let servers: Vec<ServerEntry> = (0..n)
            .map(|i| {
                let start = rng.random_range(0..n_blocks);
                let end = rng.random_range(start + 1..=n_blocks);
                let bw = rng.random_bool(0.7).then(|| rng.random_range(1e6..1e9));
                entry(i as u8, start, end, rng.random_range(0.5..200.0), bw)
            })
            .collect();
        if (0..n_blocks).any(|b| !servers.iter().any(|s| s.range.contains(b))) {
            continue;
        }
        let rtt: HashMap<ServerId, f64> = servers
            .iter()
            .map(|s| (s.server_id, rng.random_range(0.1..300.0)))
            .collect();
        let oracle = RouteOracle {
            servers: &servers,
            rtt: &rtt,
            n_blocks,
            payload: 1024.0,
        };
        let want = oracle.best(0, None);
        let plan = plan_chain(&servers, &rtt, n_blocks, 1024, n)?;
        validate_chain(&plan, BlockRange { start: 0, end: n_blocks })?;
        let mut got = 0.0;
        let mut prev: Option<&ServerEntry> = None;
        for hop in &plan {
            got += oracle.leg(&hop.server, prev, hop.blocks.len());
            if hop.blocks.end != hop.server.range.end.min(n_blocks) {
                problems.push("hop stops before its server's last block".to_string());
            }
            prev = Some(&hop.server);
        }
        got += rtt[&plan.last().unwrap().server.server_id] / 2000.0;
        let rel = (got - want).abs() / want.max(1e-12);
        worst = worst.max(rel);
        if rel > 1e-9 {
            problems.push(format!("instance {checked}: planned {got} vs optimum {want}"));
        }
        checked += 1;
    }
    Ok((
        problems.is_empty(),
        format!("{checked} instances, worst relative gap {worst:.2e}"),
    ))
}

async fn step_time(ckpt: &Arc<Checkpoint>, shape: Option<LinkShape>) -> Result<(f64, f64), Box<dyn std::error::Error + Send + Sync>> {
    let opts = SwarmOptions {
        shape,
        ..SwarmOptions::default()
    };
    let swarm = LocalSwarm::launch(ckpt.clone(), &chain_specs(), opts).await?;
    let client = swarm.client(fast_client());
    measure_inference(&client, 8, 2).await?;
    let s = measure_inference(&client, 8, 20).await?;
    Ok((s.median_step_s, s.steps_per_s))
}

async fn c8_latency(ckpt: &Arc<Checkpoint>) -> Outcome {
    let hops = 3.0;
    let (solo, _) = step_time(ckpt, None).await?;
    let mut ok = true;
    let mut parts = vec![format!("compute_solo {:.1} ms", solo * 1e3)];
    let mut prev = 0.0;
    for lat_ms in [4.0, 50.0, 100.0] {
        let (t, _) = step_time(ckpt, Some(LinkShape::new(lat_ms, None))).await?;
        let lo = 2.0 * hops * lat_ms / 1e3;
        let hi = 1.25 * (lo + solo);
        let inside = t >= lo && t <= hi && t > prev;
        ok &= inside;
        parts.push(format!(
            "l={lat_ms} ms: {:.1} ms in [{:.1}, {:.1}] {}",
            t * 1e3,
            lo * 1e3,
            hi * 1e3,
            if inside { "ok" } else { "out" }
        ));
        prev = t;
    }
    let (_, fast) = step_time(ckpt, Some(LinkShape::new(20.0, Some(1000.0)))).await?;
    let (_, slow) = step_time(ckpt, Some(LinkShape::new(20.0, Some(100.0)))).await?;
    let change = (fast - slow).abs() / fast;
    ok &= change < 0.15;
    parts.push(format!("1 Gbit {fast:.2} vs 100 Mbit {slow:.2} steps/s ({:.1}%)", change * 100.0));
    Ok((ok, parts.join("; ")))
}

async fn c9_concurrency(ckpt: &Arc<Checkpoint>) -> Outcome {
    let opts = SwarmOptions {
        shape: Some(LinkShape::new(50.0, None)),
        ..SwarmOptions::default()
    };
    let swarm = LocalSwarm::launch(ckpt.clone(), &chain_specs(), opts).await?;
    let client = swarm.client(fast_client());
    let mut solo = Vec::new();
    for _ in 0..3 {
        solo.push(measure_inference(&client, 8, 12).await?.steps_per_s);
    }
    solo.sort_by(f64::total_cmp);
    let solo = solo[1];
    let clients: Vec<SwarmClient> = (0..8).map(|_| swarm.client(fast_client())).collect();
    let rates = measure_concurrent(&clients, 8, 12).await?;
    let mean = rates.iter().map(|r| solo / r - 1.0).sum::<f64>() / rates.len() as f64;
    Ok((
        mean <= 0.35,
        format!("solo {solo:.2} steps/s, 8 concurrent mean slowdown {:.1}%", mean * 100.0),
    ))
}

async fn weight_hashes(swarm: &LocalSwarm) -> Result<Vec<String>, Box<dyn std::error::Error + Send + Sync>> {
    let rpc = RpcClient::new(None);
    let mut out = Vec::new();
    for s in swarm.servers() {
        let info: ServerInfo =
            serde_json::from_slice(&rpc.call(s.addr(), MsgType::Info, Vec::new(), Duration::from_secs(5)).await?)?;
        out.push(info.weight_hash);
    }
    Ok(out)
}

fn tuning_data() -> (Vec<Vec<u32>>, Vec<usize>) {
    let mut rng = StdRng::seed_from_u64(10);
    let mut batch = Vec::new();
    let mut labels = Vec::new();
    for i in 0..16 {
        let label = i % 2;
        let base = if label == 0 { 97 } else { 110 };
        batch.push((0..6).map(|_| base + rng.random_range(0..13)).collect());
        labels.push(label);
    }
    (batch, labels)
}

async fn c10_training() -> Outcome {
    let ckpt = Arc::new(gen_checkpoint(42, ModelConfig::new(6, 64, 4, 256, 64))?);
    let specs = [
        ServerSpec::range(0, 3).with_throughput(10.0),
        ServerSpec::range(0, 3).with_throughput(20.0),
        ServerSpec::range(3, 6).with_throughput(10.0),
    ];
    let swarm = LocalSwarm::launch(ckpt.clone(), &specs, SwarmOptions::default()).await?;
    let hashes_before = weight_hashes(&swarm).await?;
    let client = swarm.client(fast_client());
    let stages = client.plan_stages().await?;
    let (batch, labels) = tuning_data();
    let mut state = PromptTuneState::new(4, 64, 2, 3);

    let (_, grads) = client.loss_and_grads(&stages, &state, &batch, &labels).await?;
    let mut rng = StdRng::seed_from_u64(11);
    let (mut num, mut den) = (0.0f64, 0.0f64);
    let h = 1e-2f32;
    for _ in 0..12 {
        let i = rng.random_range(0..state.prompts.len());
        let mut plus = state.clone();
        plus.prompts[i] += h;
        let mut minus = state.clone();
        minus.prompts[i] -= h;
        let step = (plus.prompts[i] - minus.prompts[i]) as f64;
        let fd = (reference::classifier_loss(&ckpt, &plus, &batch, &labels)
            - reference::classifier_loss(&ckpt, &minus, &batch, &labels))
            / step;
        num += (grads.prompts[i] as f64 - fd).powi(2);
        den += fd.powi(2);
    }
    for _ in 0..4 {
        let i = rng.random_range(0..state.head_w.len());
        let mut plus = state.clone();
        plus.head_w[i] += h;
        let mut minus = state.clone();
        minus.head_w[i] -= h;
        let step = (plus.head_w[i] - minus.head_w[i]) as f64;
        let fd = (reference::classifier_loss(&ckpt, &plus, &batch, &labels)
            - reference::classifier_loss(&ckpt, &minus, &batch, &labels))
            / step;
        num += (grads.head_w[i] as f64 - fd).powi(2);
        den += fd.powi(2);
    }
    let grad_err = (num / den).sqrt();

    let adam = AdamConfig {
        lr: 1e-2,
        ..AdamConfig::default()
    };
    let first = client.eval_loss(&stages, &state, &batch, &labels).await? as f64;
    let mut last = first;
    for _ in 0..200 {
        last = client.train_step(&stages, &mut state, &batch, &labels, &adam).await? as f64;
    }
    let final_loss = client.eval_loss(&stages, &state, &batch, &labels).await? as f64;
    let drop = 1.0 - final_loss / first;
    let unchanged = weight_hashes(&swarm).await? == hashes_before;
    Ok((
        grad_err <= 1e-3 && drop >= 0.5 && unchanged,
        format!(
            "gradient rel err {grad_err:.2e}; loss {first:.4} -> {final_loss:.4} ({:.1}% drop, last step {last:.4}); server weights unchanged: {unchanged}",
            drop * 100.0
        ),
    ))
}

fn random_snapshot(rng: &mut StdRng) -> RegistrySnapshot {
    let mut s = RegistrySnapshot::new();
    for _ in 0..rng.random_range(0..6) {
        let mut e = entry(rng.random_range(0..4), 0, 2, rng.random_range(1.0..5.0f64).round(), None);
        e.announced_at = rng.random_range(0..4);
        e.ttl_ms = u64::MAX / 4;
        e.state = if rng.random_bool(0.3) { ServerState::Offline } else { ServerState::Online };
        s.upsert(e);
    }
    s
}

async fn c11_registry() -> Outcome {
    let mut nodes = Vec::new();
    for _ in 0..4 {
        nodes.push(RegistryNode::start("127.0.0.1:0", Vec::new(), Duration::from_secs(3600), None).await?);
    }
    for i in 0..4 {
        nodes[i].replica.add_peer(&nodes[(i + 1) % 4].addr.clone());
        nodes[i].replica.announce(entry(i as u8, i, i + 1, 1.0, None))?;
    }
    let rpc = RpcClient::new(None);
    let mut converged_at = None;
    for round in 1..=3 {
        futures::future::join_all(nodes.iter().map(|n| n.replica.gossip_all(&rpc, Some(&n.addr)))).await;
        let snaps: Vec<_> = nodes.iter().map(|n| n.replica.snapshot()).collect();
        if snaps.iter().all(|s| s == &snaps[0] && s.len() == 4) {
            converged_at = Some(round);
            break;
        }
    }

    let mut short = entry(9, 0, 1, 1.0, None);
    short.ttl_ms = 300;
    nodes[0].replica.announce(short)?;
    for _ in 0..2 {
        futures::future::join_all(nodes.iter().map(|n| n.replica.gossip_all(&rpc, Some(&n.addr)))).await;
    }
    let all = LookupReq {
        range: None,
        include_inactive: true,
    };
    let seen = nodes.iter().all(|n| n.replica.lookup(&all, now_ms()).len() == 5);
    tokio::time::sleep(Duration::from_millis(400)).await;
    let expired = nodes.iter().all(|n| n.replica.lookup(&all, now_ms()).len() == 4);

    let mut rng = StdRng::seed_from_u64(11);
    let mut law_failures = 0;
    for _ in 0..500 {
        let (a, b, c) = (random_snapshot(&mut rng), random_snapshot(&mut rng), random_snapshot(&mut rng));
        if merge(&a, &a) != a
            || merge(&a, &b) != merge(&b, &a)
            || merge(&merge(&a, &b), &c) != merge(&a, &merge(&b, &c))
        {
            law_failures += 1;
        }
    }
    Ok((
        converged_at.is_some() && seen && expired && law_failures == 0,
        format!(
            "4-node ring converged in round {converged_at:?}; short-TTL entry replicated: {seen}, expired everywhere: {expired}; merge law violations in 500 triples: {law_failures}"
        ),
    ))
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    if args.iter().any(|a| !a.starts_with('-') && !"acceptance".contains(a.as_str())) {
        return;
    }
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()
        .unwrap();
    let failed = rt.block_on(run());
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
    println!("all 11 criteria passed");
}

async fn run() -> Vec<usize> {
    let ckpt = toy();
    let prompt = bench_prompt(8, 256);
    let expected = Model::from_checkpoint(&ckpt).generate(&prompt, 64, &mut Sampler::greedy()).unwrap();

    let names = [
        "distributed equivalence",
        "fault tolerance",
        "quantized transport",
        "quantization round trip",
        "footprint and offload arithmetic",
        "allocation optimality",
        "routing optimality",
        "latency scaling",
        "concurrent clients",
        "training",
        "registry",
    ];
    let mut results = Vec::new();
    results.push(c1_equivalence(&ckpt, &prompt, &expected).await);
    results.push(c2_fault_tolerance(&ckpt, &prompt, &expected).await);
    results.push(c3_quantized_transport(&ckpt, &prompt, &expected).await);
    results.push(c4_quant_round_trip());
    results.push(c5_footprint());
    results.push(c6_allocation());
    results.push(c7_routing());
    results.push(c8_latency(&ckpt).await);
    results.push(c9_concurrency(&ckpt).await);
    results.push(c10_training().await);
    results.push(c11_registry().await);

    let mut failed = Vec::new();
    for (i, (name, r)) in names.iter().zip(results).enumerate() {
        let (ok, detail) = r.unwrap_or_else(|e| (false, format!("error: {e}")));
        println!("criterion {:>2} {} {name}: {detail}", i + 1, if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed.push(i + 1);
        }
    }
    failed
}
