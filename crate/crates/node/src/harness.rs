//! In-process swarm launcher plus the measurement and fault-injection
//! drivers used by the CLI and the integration tests.

use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use swarm_core::model::{HeadWeights, Sampler};
use swarm_core::{Checkpoint, Model, Tensor};
use tokio::time::Instant;

use crate::client::{ClientConfig, ClientError, SwarmClient};
use crate::events::{EventKind, EventLog};
use crate::registry::{now_ms, RegistryNode};
use crate::server::{start_server, BlockPolicy, QuantMode, RebalanceConfig, ServerConfig, ServerHandle, StartError};
use crate::shaper::LinkShape;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Start(#[from] StartError),
    #[error("registry: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Model(#[from] swarm_core::Error),
    #[error("{0}")]
    Invalid(String),
    #[error("timed out waiting for {0}")]
    Timeout(String),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

/// How to launch one server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerSpec {
    /// `"auto"` or `"start:end"`.
    #[serde(default = "auto")]
    pub blocks: String,
    #[serde(default = "one")]
    pub span: usize,
    /// Announced throughput instead of a measured one.
    #[serde(default)]
    pub throughput: Option<f64>,
    #[serde(default)]
    pub quantize: QuantMode,
}

fn auto() -> String {
    "auto".into()
}

fn one() -> usize {
    1
}

impl ServerSpec {
    pub fn range(start: usize, end: usize) -> Self {
        Self {
            blocks: format!("{start}:{end}"),
            span: end - start,
            throughput: None,
            quantize: QuantMode::None,
        }
    }

    pub fn with_throughput(mut self, tp: f64) -> Self {
        self.throughput = Some(tp);
        self
    }

    pub fn auto(span: usize) -> Self {
        Self {
            blocks: auto(),
            span,
            throughput: None,
            quantize: QuantMode::None,
        }
    }
}

/// Settings shared by every node of a local swarm.
#[derive(Debug, Clone)]
pub struct SwarmOptions {
    pub shape: Option<LinkShape>,
    pub ttl_ms: u64,
    pub gossip_period: Duration,
    pub rebalance: Option<RebalanceConfig>,
    pub capacity: usize,
}

impl Default for SwarmOptions {
    fn default() -> Self {
        Self {
            shape: None,
            ttl_ms: 30_000,
            gossip_period: Duration::from_millis(500),
            rebalance: None,
            capacity: 64,
        }
    }
}

/// A registry seed and a set of servers, all in this process.
pub struct LocalSwarm {
    pub ckpt: Arc<Checkpoint>,
    pub events: EventLog,
    pub opts: SwarmOptions,
    registry: RegistryNode,
    servers: Vec<ServerHandle>,
}

impl LocalSwarm {
    pub async fn launch(ckpt: Arc<Checkpoint>, specs: &[ServerSpec], opts: SwarmOptions) -> Result<Self> {
        let registry = RegistryNode::start("127.0.0.1:0", Vec::new(), opts.gossip_period, opts.shape).await?;
        let mut swarm = Self {
            ckpt,
            events: EventLog::new(),
            opts,
            registry,
            servers: Vec::new(),
        };
        for spec in specs {
            swarm.start_server(spec).await?;
        }
        Ok(swarm)
    }

    pub fn server_config(&self, spec: &ServerSpec) -> Result<ServerConfig> {
        let blocks = BlockPolicy::from_str(&spec.blocks)?;
        Ok(ServerConfig {
            blocks,
            span: match blocks {
                BlockPolicy::Explicit(r) => r.len(),
                BlockPolicy::Auto => spec.span,
            },
            quantize: spec.quantize,
            bootstrap: self.bootstrap(),
            shape: self.opts.shape,
            capacity: self.opts.capacity,
            ttl_ms: self.opts.ttl_ms,
            gossip_period: self.opts.gossip_period,
            rebalance: self.opts.rebalance,
            throughput: spec.throughput,
            ..ServerConfig::default()
        })
    }

    /// Starts one more server; returns its index.
    pub async fn start_server(&mut self, spec: &ServerSpec) -> Result<usize> {
        let cfg = self.server_config(spec)?;
        let handle = start_server(cfg, self.ckpt.clone(), self.events.clone()).await?;
        self.events.push(EventKind::ServerStarted {
            server: handle.addr().to_string(),
            range: handle.node.range(),
        });
        self.servers.push(handle);
        Ok(self.servers.len() - 1)
    }

    pub fn bootstrap(&self) -> Vec<String> {
        vec![self.registry.addr.clone()]
    }

    pub fn registry(&self) -> &RegistryNode {
        &self.registry
    }

    pub fn servers(&self) -> &[ServerHandle] {
        &self.servers
    }

    pub fn server(&self, i: usize) -> &ServerHandle {
        &self.servers[i]
    }

    /// Index of the server listening on `addr`.
    pub fn index_of(&self, addr: &str) -> Option<usize> {
        self.servers.iter().position(|s| s.addr() == addr)
    }

    /// Crashes server `i` without a tombstone.
    pub fn kill(&self, i: usize) {
        let s = &self.servers[i];
        if !s.is_stopped() {
            s.kill();
            self.events.push(EventKind::ServerKilled {
                server: s.addr().to_string(),
            });
        }
    }

    pub fn head(&self) -> Arc<HeadWeights> {
        Arc::new(HeadWeights::from_checkpoint(&self.ckpt))
    }

    /// A client bootstrapped from this swarm; unset shaping falls back to the
    /// swarm's.
    pub fn client(&self, mut cfg: ClientConfig) -> SwarmClient {
        cfg.bootstrap = self.bootstrap();
        if cfg.shape.is_none() {
            cfg.shape = self.opts.shape;
        }
        SwarmClient::new(cfg, self.head(), self.events.clone())
    }

    /// Online servers per block, as the registry sees it now.
    pub fn coverage(&self) -> Vec<usize> {
        let n = self.ckpt.config.n_layers;
        let view = self.registry.replica.snapshot().swarm_view(n, now_ms());
        let mut cov = vec![0; n];
        for s in &view.servers {
            for c in &mut cov[s.range.start..s.range.end.min(n)] {
                *c += 1;
            }
        }
        cov
    }

    /// Polls `cond` every 20 ms until it holds.
    pub async fn wait_until(&self, what: &str, timeout: Duration, cond: impl Fn(&Self) -> bool) -> Result<()> {
        let deadline = Instant::now() + timeout;
        while !cond(self) {
            if Instant::now() >= deadline {
                return Err(HarnessError::Timeout(what.to_string()));
            }
            tokio::time::sleep(Duration::from_millis(20)).await;
        }
        Ok(())
    }

    /// Emulates a network split between two nodes' registry replicas.
    pub fn partition(&self, a: &str, b: &str, on: bool) -> Result<()> {
        let ra = self.replica_of(a)?;
        let rb = self.replica_of(b)?;
        ra.block_peer(&self.addr_of(b)?, on);
        rb.block_peer(&self.addr_of(a)?, on);
        Ok(())
    }

    fn addr_of(&self, node: &str) -> Result<String> {
        if node == "registry" {
            return Ok(self.registry.addr.clone());
        }
        let i = parse_server_ref(node)?;
        self.servers
            .get(i)
            .map(|s| s.addr().to_string())
            .ok_or_else(|| HarnessError::Invalid(format!("no server {node}")))
    }

    fn replica_of(&self, node: &str) -> Result<Arc<crate::registry::Replica>> {
        if node == "registry" {
            return Ok(self.registry.replica.clone());
        }
        let i = parse_server_ref(node)?;
        self.servers
            .get(i)
            .map(|s| s.node.replica().clone())
            .ok_or_else(|| HarnessError::Invalid(format!("no server {node}")))
    }
}

fn parse_server_ref(node: &str) -> Result<usize> {
    node.strip_prefix('s')
        .and_then(|i| i.parse().ok())
        .ok_or_else(|| HarnessError::Invalid(format!("node {node:?} is neither \"registry\" nor s<index>")))
}

/// Deterministic prompt of `len` tokens.
pub fn bench_prompt(len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|i| ((i * 7 + 3) % vocab) as u32).collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Decode-phase timing of one generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceSample {
    pub steps_per_s: f64,
    pub median_step_s: f64,
}

/// Prefills `prompt_len` tokens, then times `steps` single-token steps.
pub async fn measure_inference(client: &SwarmClient, prompt_len: usize, steps: usize) -> Result<InferenceSample> {
    let prompt = bench_prompt(prompt_len, client.head().config.vocab);
    let out = client.generate(&prompt, steps + 1, &mut Sampler::greedy(), |_| {}).await?;
    let decode = &out.step_times[1..];
    let total: f64 = decode.iter().sum();
    Ok(InferenceSample {
        steps_per_s: decode.len() as f64 / total.max(1e-9),
        median_step_s: median(decode.to_vec()),
    })
}

/// Tokens per second of one batched forward pass through the whole model.
pub async fn measure_forward(client: &SwarmClient, batch: usize, len: usize) -> Result<f64> {
    let cfg = &client.head().config;
    let stages = client.plan_stages().await?;
    let mut data = Vec::with_capacity(batch * len * cfg.hidden);
    for _ in 0..batch {
        data.extend(client.head().embed(&bench_prompt(len, cfg.vocab))?);
    }
    let x = Tensor::new(vec![batch, len, cfg.hidden], data)?;
    let start = Instant::now();
    client.forward(&stages, &x, false).await?;
    Ok((batch * len) as f64 / start.elapsed().as_secs_f64().max(1e-9))
}

/// Runs `n` generations at once; returns each one's decode steps/s.
pub async fn measure_concurrent(
    clients: &[SwarmClient],
    prompt_len: usize,
    steps: usize,
) -> Result<Vec<f64>> {
    let runs = clients.iter().map(|c| measure_inference(c, prompt_len, steps));
    futures::future::join_all(runs)
        .await
        .into_iter()
        .map(|r| r.map(|s| s.steps_per_s))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub scenario: String,
    pub servers: Vec<ServerSpec>,
    /// `latency_ms:mbps` or `latency_ms:inf`; `None` for unshaped loopback.
    pub shaping: Option<String>,
    pub prompt_len: usize,
    pub steps: usize,
    pub batch: usize,
    pub forward_len: usize,
    pub n_clients: usize,
    pub runs: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            scenario: "local".into(),
            servers: vec![ServerSpec::range(0, 4), ServerSpec::range(4, 8), ServerSpec::range(8, 12)],
            shaping: None,
            prompt_len: 16,
            steps: 32,
            batch: 8,
            forward_len: 32,
            n_clients: 1,
            runs: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub scenario: String,
    pub config: BenchConfig,
    pub single_batch_steps_per_s: f64,
    pub median_step_s: f64,
    pub parallel_forward_tokens_per_s: f64,
    pub per_client_steps_per_s: Vec<f64>,
    /// `solo / concurrent - 1` per client.
    pub per_client_slowdown: Vec<f64>,
    pub mean_slowdown: Option<f64>,
}

fn parse_shape(s: &Option<String>) -> Result<Option<LinkShape>> {
    s.as_deref()
        .map(|s| s.parse().map_err(|e| HarnessError::Invalid(format!("{e}"))))
        .transpose()
}

/// Measures a swarm that is already running.
pub async fn bench_swarm(swarm: &LocalSwarm, cfg: &BenchConfig) -> Result<BenchReport> {
    let client = swarm.client(ClientConfig::default());
    let mut solo = Vec::new();
    for _ in 0..cfg.runs.max(1) {
        solo.push(measure_inference(&client, cfg.prompt_len, cfg.steps).await?);
    }
    let steps_per_s = median(solo.iter().map(|s| s.steps_per_s).collect());
    let median_step_s = median(solo.iter().map(|s| s.median_step_s).collect());
    let mut forward = Vec::new();
    for _ in 0..cfg.runs.max(1) {
        forward.push(measure_forward(&client, cfg.batch, cfg.forward_len).await?);
    }
    let (per_client, slowdown, mean) = if cfg.n_clients > 1 {
        let clients: Vec<_> = (0..cfg.n_clients).map(|_| swarm.client(ClientConfig::default())).collect();
        let rates = measure_concurrent(&clients, cfg.prompt_len, cfg.steps).await?;
        let slow: Vec<f64> = rates.iter().map(|r| steps_per_s / r - 1.0).collect();
        let mean = slow.iter().sum::<f64>() / slow.len() as f64;
        (rates, slow, Some(mean))
    } else {
        (vec![steps_per_s], vec![0.0], None)
    };
    Ok(BenchReport {
        scenario: cfg.scenario.clone(),
        config: cfg.clone(),
        single_batch_steps_per_s: steps_per_s,
        median_step_s,
        parallel_forward_tokens_per_s: median(forward),
        per_client_steps_per_s: per_client,
        per_client_slowdown: slowdown,
        mean_slowdown: mean,
    })
}

/// Launches a fresh swarm for `cfg`, measures it, and tears it down.
pub async fn bench_inference(ckpt: Arc<Checkpoint>, cfg: &BenchConfig) -> Result<BenchReport> {
    let opts = SwarmOptions {
        shape: parse_shape(&cfg.shaping)?,
        ..SwarmOptions::default()
    };
    let swarm = LocalSwarm::launch(ckpt, &cfg.servers, opts).await?;
    bench_swarm(&swarm, cfg).await
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub shaping: String,
    /// Decode steps/s after a prefix of each `seq_lens` length.
    pub inference_steps_per_s: Vec<f64>,
    /// Forward tokens/s for each `batches` size.
    pub forward_tokens_per_s: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub servers: Vec<ServerSpec>,
    pub seq_lens: Vec<usize>,
    pub batches: Vec<usize>,
    pub forward_len: usize,
    pub rows: Vec<TableRow>,
}

impl BenchTable {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<16}", "network");
        for s in &self.seq_lens {
            let _ = write!(out, " {:>14}", format!("steps/s@{s}"));
        }
        for b in &self.batches {
            let _ = write!(out, " {:>14}", format!("tok/s@b{b}"));
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{:<16}", row.shaping);
            for v in row.inference_steps_per_s.iter().chain(&row.forward_tokens_per_s) {
                let _ = write!(out, " {v:>14.2}");
            }
            out.push('\n');
        }
        out
    }
}

/// One row per shaping setting, each on a fresh swarm.
pub async fn bench_table(
    ckpt: Arc<Checkpoint>,
    servers: &[ServerSpec],
    shapings: &[Option<String>],
    seq_lens: &[usize],
    batches: &[usize],
    steps: usize,
    forward_len: usize,
) -> Result<BenchTable> {
    let max_seq = ckpt.config.max_seq;
    if seq_lens.iter().any(|&s| s == 0 || s + steps > max_seq) || forward_len == 0 || forward_len > max_seq {
        return Err(HarnessError::Invalid(format!(
            "sequence lengths plus {steps} steps must fit in {max_seq} positions"
        )));
    }
    let mut rows = Vec::with_capacity(shapings.len());
    for shaping in shapings {
        let opts = SwarmOptions {
            shape: parse_shape(shaping)?,
            ..SwarmOptions::default()
        };
        let swarm = LocalSwarm::launch(ckpt.clone(), servers, opts).await?;
        let client = swarm.client(ClientConfig::default());
        let mut inference = Vec::new();
        for &s in seq_lens {
            inference.push(measure_inference(&client, s, steps).await?.steps_per_s);
        }
        let mut forward = Vec::new();
        for &b in batches {
            forward.push(measure_forward(&client, b, forward_len).await?);
        }
        rows.push(TableRow {
            shaping: shaping.clone().unwrap_or_else(|| "loopback".into()),
            inference_steps_per_s: inference,
            forward_tokens_per_s: forward,
        });
    }
    Ok(BenchTable {
        servers: servers.to_vec(),
        seq_lens: seq_lens.to_vec(),
        batches: batches.to_vec(),
        forward_len,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "lowercase")]
pub enum ChurnAction {
    Kill { server: usize },
    Start { server: ServerSpec },
    /// Nodes are `"registry"` or `s<index>`.
    Partition { a: String, b: String },
    Heal { a: String, b: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChurnEvent {
    pub t_ms: u64,
    #[serde(flatten)]
    pub action: ChurnAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChurnScenario {
    pub seed: u64,
    pub servers: Vec<ServerSpec>,
    #[serde(default)]
    pub events: Vec<ChurnEvent>,
    pub duration_ms: u64,
    #[serde(default = "default_prompt_len")]
    pub prompt_len: usize,
    #[serde(default = "default_new")]
    pub n_new: usize,
    /// Enables periodic rebalancing with this period.
    #[serde(default)]
    pub rebalance_period_ms: Option<u64>,
    #[serde(default = "default_ttl")]
    pub ttl_ms: u64,
    /// `latency_ms:mbps` applied to every link.
    #[serde(default)]
    pub shaping: Option<String>,
}

fn default_prompt_len() -> usize {
    8
}

fn default_new() -> usize {
    32
}

fn default_ttl() -> u64 {
    3_000
}

impl ChurnScenario {
    pub fn validate(&self) -> Result<()> {
        if self.events.windows(2).any(|w| w[0].t_ms > w[1].t_ms) {
            return Err(HarnessError::Invalid("churn events must be time-ordered".into()));
        }
        if self.n_new == 0 || self.prompt_len == 0 {
            return Err(HarnessError::Invalid("prompt_len and n_new must be positive".into()));
        }
        parse_shape(&self.shaping)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChurnMetrics {
    pub sessions: usize,
    pub failed_sessions: usize,
    /// Completed generations that differ from the local reference.
    pub mismatched_sessions: usize,
    pub recoveries: usize,
    pub rebalances: usize,
    pub time_to_recover_ms: Vec<u64>,
    /// Lengths of intervals during which some block had no online server.
    pub coverage_gap_ms: Vec<u64>,
    pub final_coverage: Vec<usize>,
}

/// Runs `scenario` against `swarm` while one client generates back to back.
pub async fn run_churn(swarm: &mut LocalSwarm, scenario: &ChurnScenario) -> Result<ChurnMetrics> {
    scenario.validate()?;
    let reference = Model::from_checkpoint(&swarm.ckpt);
    let prompt = bench_prompt(scenario.prompt_len, swarm.ckpt.config.vocab);
    let expected = reference.generate(&prompt, scenario.n_new, &mut Sampler::greedy())?;
    let client = swarm.client(ClientConfig::default());
    let events_before = swarm.events.events().len();
    let start = Instant::now();
    let duration = Duration::from_millis(scenario.duration_ms);

    let gen = tokio::spawn({
        let client = client.clone();
        let prompt = prompt.clone();
        let n_new = scenario.n_new;
        async move {
            let (mut sessions, mut failed, mut mismatched) = (0, 0, 0);
            while start.elapsed() < duration {
                sessions += 1;
                match client.generate(&prompt, n_new, &mut Sampler::greedy(), |_| {}).await {
                    Ok(g) if g.tokens == expected => {}
                    Ok(_) => mismatched += 1,
                    Err(e) => {
                        tracing::warn!("churn session failed: {e}");
                        failed += 1;
                        tokio::time::sleep(Duration::from_millis(100)).await;
                    }
                }
            }
            (sessions, failed, mismatched)
        }
    });

    let mut gaps = Vec::new();
    let mut gap_start: Option<Instant> = None;
    let mut pending = scenario.events.iter().peekable();
    while start.elapsed() < duration || !gen.is_finished() {
        while let Some(ev) = pending.next_if(|e| start.elapsed() >= Duration::from_millis(e.t_ms)) {
            match &ev.action {
                ChurnAction::Kill { server } => {
                    if *server >= swarm.servers().len() {
                        return Err(HarnessError::Invalid(format!("no server s{server}")));
                    }
                    swarm.kill(*server);
                }
                ChurnAction::Start { server } => {
                    swarm.start_server(server).await?;
                }
                ChurnAction::Partition { a, b } => swarm.partition(a, b, true)?,
                ChurnAction::Heal { a, b } => swarm.partition(a, b, false)?,
            }
        }
        let has_gap = swarm.coverage().contains(&0);
        match (has_gap, gap_start) {
            (true, None) => gap_start = Some(Instant::now()),
            (false, Some(s)) => {
                gaps.push(s.elapsed().as_millis() as u64);
                gap_start = None;
            }
            _ => {}
        }
        tokio::time::sleep(Duration::from_millis(25)).await;
    }
    if let Some(s) = gap_start {
        gaps.push(s.elapsed().as_millis() as u64);
    }
    let (sessions, failed, mismatched) = gen.await.map_err(|e| HarnessError::Invalid(e.to_string()))?;
    let events = &swarm.events.events()[events_before..];
    let mut metrics = ChurnMetrics {
        sessions,
        failed_sessions: failed,
        mismatched_sessions: mismatched,
        recoveries: 0,
        rebalances: 0,
        time_to_recover_ms: Vec::new(),
        coverage_gap_ms: gaps,
        final_coverage: swarm.coverage(),
    };
    for e in events {
        match &e.kind {
            EventKind::Recovery { duration_ms, .. } => {
                metrics.recoveries += 1;
                metrics.time_to_recover_ms.push(*duration_ms);
            }
            EventKind::Rebalance { .. } => metrics.rebalances += 1,
            _ => {}
        }
    }
    Ok(metrics)
}

/// Launches the scenario's swarm and runs it.
pub async fn churn_sim(ckpt: Arc<Checkpoint>, scenario: &ChurnScenario) -> Result<ChurnMetrics> {
    scenario.validate()?;
    let opts = SwarmOptions {
        shape: parse_shape(&scenario.shaping)?,
        ttl_ms: scenario.ttl_ms,
        gossip_period: Duration::from_millis(scenario.ttl_ms / 6).max(Duration::from_millis(50)),
        rebalance: scenario.rebalance_period_ms.map(|p| RebalanceConfig {
            min_period: Duration::from_millis(p),
            max_period: Duration::from_millis(p * 2),
            ..RebalanceConfig::default()
        }),
        ..SwarmOptions::default()
    };
    let mut swarm = LocalSwarm::launch(ckpt, &scenario.servers, opts).await?;
    run_churn(&mut swarm, scenario).await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_json_round_trip() {
        let json = r#"{
            "seed": 42,
            "servers": [{"blocks": "0:2"}, {"blocks": "auto", "span": 2}],
            "events": [
                {"t_ms": 100, "action": "kill", "server": 0},
                {"t_ms": 200, "action": "partition", "a": "registry", "b": "s1"}
            ],
            "duration_ms": 1000
        }"#;
        let s: ChurnScenario = serde_json::from_str(json).unwrap();
        assert_eq!(s.events[0].action, ChurnAction::Kill { server: 0 });
        assert_eq!(s.n_new, 32);
        s.validate().unwrap();
        let back: ChurnScenario = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn unordered_events_are_rejected() {
        let mut s: ChurnScenario =
            serde_json::from_str(r#"{"seed": 1, "servers": [], "duration_ms": 10}"#).unwrap();
        s.events = vec![
            ChurnEvent { t_ms: 5, action: ChurnAction::Kill { server: 0 } },
            ChurnEvent { t_ms: 1, action: ChurnAction::Kill { server: 0 } },
        ];
        assert!(s.validate().is_err());
    }

    #[test]
    fn server_refs() {
        assert_eq!(parse_server_ref("s3").unwrap(), 3);
        assert!(parse_server_ref("x").is_err());
    }

    #[test]
    fn table_renders_every_row() {
        let t = BenchTable {
            servers: vec![],
            seq_lens: vec![16],
            batches: vec![1, 8],
            forward_len: 8,
            rows: vec![TableRow {
                shaping: "loopback".into(),
                inference_steps_per_s: vec![10.0],
                forward_tokens_per_s: vec![100.0, 400.0],
            }],
        };
        let text = t.render();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("400.00"));
    }
}
