//! A server process hosting a contiguous block range.

use std::collections::{HashMap, HashSet};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use swarm_core::allocation::{choose_interval, should_rebalance, server_throughput};
use swarm_core::model::{ActivationTape, Block, KvCache};
use swarm_core::quant::DEFAULT_OUTLIER_THRESHOLD;
use swarm_core::registry::{ServerEntry, ServerId, ServerState, DEFAULT_TTL_MS};
use swarm_core::rng::SplitMix64;
use swarm_core::wire::{
    decode_session_id, decode_tensor, encode_tensor, tensor_encoding, ErrorCode, ForwardReq, MsgType,
    OpenSessionReq, SessionId, StepReq, TapedTensor, WireEncoding,
};
use swarm_core::{BlockRange, Checkpoint, Tensor};
use tokio::net::TcpListener;
use tokio::sync::{watch, Mutex as AsyncMutex};
use tokio::task::JoinHandle;
use tokio::time::Instant;

use crate::events::{EventKind, EventLog};
use crate::registry::{announce_to, lookup_any, now_ms, LookupReq, Replica, DEFAULT_GOSSIP_PERIOD};
use crate::rpc::{serve, Handler, HandlerError, RpcClient};
use crate::shaper::LinkShape;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockPolicy {
    Auto,
    Explicit(BlockRange),
}

impl FromStr for BlockPolicy {
    type Err = swarm_core::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "auto" {
            Ok(BlockPolicy::Auto)
        } else {
            s.parse().map(BlockPolicy::Explicit)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    #[default]
    None,
    Activations,
    Weights,
    Both,
}

impl QuantMode {
    pub fn weights(self) -> bool {
        matches!(self, QuantMode::Weights | QuantMode::Both)
    }

    pub fn activations(self) -> bool {
        matches!(self, QuantMode::Activations | QuantMode::Both)
    }
}

impl FromStr for QuantMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "none" => QuantMode::None,
            "activations" => QuantMode::Activations,
            "weights" => QuantMode::Weights,
            "both" => QuantMode::Both,
            other => return Err(format!("unknown quantize mode {other:?}")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RebalanceConfig {
    pub eps: f64,
    pub min_period: Duration,
    pub max_period: Duration,
}

impl Default for RebalanceConfig {
    fn default() -> Self {
        Self {
            eps: 0.2,
            min_period: Duration::from_secs(5),
            max_period: Duration::from_secs(10),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub listen: String,
    pub blocks: BlockPolicy,
    pub span: usize,
    pub quantize: QuantMode,
    pub bootstrap: Vec<String>,
    pub shape: Option<LinkShape>,
    pub capacity: usize,
    pub token_budget: usize,
    pub idle_timeout: Duration,
    pub tape_ttl: Duration,
    pub ttl_ms: u64,
    pub gossip_period: Duration,
    pub rebalance: Option<RebalanceConfig>,
    pub remeasure_period: Duration,
    /// Announce this instead of measuring.
    pub throughput: Option<f64>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:0".into(),
            blocks: BlockPolicy::Auto,
            span: 1,
            quantize: QuantMode::None,
            bootstrap: Vec::new(),
            shape: None,
            capacity: 64,
            token_budget: 65_536,
            idle_timeout: Duration::from_secs(120),
            tape_ttl: Duration::from_secs(60),
            ttl_ms: DEFAULT_TTL_MS,
            gossip_period: DEFAULT_GOSSIP_PERIOD,
            rebalance: Some(RebalanceConfig::default()),
            remeasure_period: Duration::from_secs(60),
            throughput: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StartError {
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },
    #[error("invalid server configuration: {0}")]
    Config(String),
}

/// `INFO` reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerInfo {
    pub server_id: ServerId,
    pub range: BlockRange,
    pub throughput: f64,
    pub position_capacity: usize,
    pub version: u64,
    pub weight_hash: String,
    pub state: ServerState,
    pub active_sessions: usize,
}

struct Hosted {
    server_id: ServerId,
    range: BlockRange,
    blocks: Arc<Vec<Block>>,
    throughput: f64,
    state: ServerState,
    announced_at: u64,
}

struct LastStep {
    start_pos: usize,
    input: Vec<u8>,
    reply: Vec<u8>,
}

struct Slot {
    caches: Vec<KvCache>,
    blocks: Arc<Vec<Block>>,
    offset: usize,
    position: usize,
    max_len: usize,
    last: Option<LastStep>,
}

struct Usage {
    tokens: usize,
    last_active: Instant,
}

#[derive(Default)]
struct Sessions {
    slots: HashMap<SessionId, Arc<AsyncMutex<Slot>>>,
    usage: HashMap<SessionId, Usage>,
    evicted: HashSet<SessionId>,
}

struct Tape {
    created: Instant,
    blocks: Arc<Vec<Block>>,
    offset: usize,
    len: usize,
    /// Per batch row, per block.
    tapes: Vec<Vec<ActivationTape>>,
    shape: Vec<usize>,
}

pub struct ServerNode {
    cfg: ServerConfig,
    ckpt: Arc<Checkpoint>,
    addr: String,
    hosted: RwLock<Hosted>,
    sessions: Mutex<Sessions>,
    tapes: Mutex<HashMap<u64, Tape>>,
    next_tape: AtomicU64,
    replica: Arc<Replica>,
    rpc: RpcClient,
    events: EventLog,
}

fn new_server_id() -> ServerId {
    ServerId(rand::rng().random())
}

fn load_blocks(ckpt: &Checkpoint, range: BlockRange, quantize: QuantMode) -> swarm_core::Result<Vec<Block>> {
    ckpt.blocks[range.start..range.end]
        .iter()
        .map(|w| {
            if quantize.weights() {
                Block::int8(&ckpt.config, w, DEFAULT_OUTLIER_THRESHOLD)
            } else {
                Ok(Block::dense(&ckpt.config, w))
            }
        })
        .collect()
}

/// Tokens per second over `steps` single-token steps through `blocks`.
pub fn measure_compute(blocks: &[Block], max_seq: usize, steps: usize) -> f64 {
    let Some(first) = blocks.first() else {
        return 0.0;
    };
    let d = first.hidden();
    let mut rng = SplitMix64::new(7);
    let x: Vec<f32> = (0..d).map(|_| rng.next_uniform_f32(-1.0, 1.0)).collect();
    let mut caches: Vec<KvCache> = blocks.iter().map(Block::new_cache).collect();
    let start = std::time::Instant::now();
    for step in 0..steps {
        let pos = step % max_seq;
        if pos == 0 {
            caches.iter_mut().for_each(KvCache::clear);
        }
        let mut h = x.clone();
        for (b, c) in blocks.iter().zip(caches.iter_mut()) {
            h = b.forward(&h, c, pos, false).expect("synthetic step").0;
        }
    }
    steps as f64 / start.elapsed().as_secs_f64().max(1e-9)
}

/// Caps `compute` by what the configured link can carry.
fn cap_by_network(cfg: &ServerConfig, compute: f64, hidden: usize) -> f64 {
    let bytes_per_token = hidden as f64 * if cfg.quantize.activations() { 1.0625 } else { 4.0 };
    match cfg.shape.and_then(|s| s.bandwidth_bps) {
        Some(bw) => server_throughput(compute, bw / 8.0, bytes_per_token),
        None => compute,
    }
}

fn hash_blocks(blocks: &[Block]) -> String {
    let mut h = Sha256::new();
    for b in blocks {
        h.update(b.param_bytes());
    }
    hex::encode(h.finalize())
}

fn err(code: ErrorCode, msg: impl Into<String>) -> HandlerError {
    HandlerError::new(code, msg)
}

/// `[.., d]` tensor as `t` rows of width `d`.
fn rows(t: &Tensor, d: usize) -> Result<usize, HandlerError> {
    let n = t.numel();
    if n == 0 || !n.is_multiple_of(d) || t.shape.last() != Some(&d) {
        return Err(HandlerError::bad_request(format!(
            "hidden tensor {:?} does not end in width {d}",
            t.shape
        )));
    }
    if !t.is_finite() {
        return Err(HandlerError::bad_request("hidden tensor is not finite"));
    }
    Ok(n / d)
}

impl ServerNode {
    pub fn addr(&self) -> &str {
        &self.addr
    }

    pub fn range(&self) -> BlockRange {
        self.hosted.read().unwrap().range
    }

    pub fn server_id(&self) -> ServerId {
        self.hosted.read().unwrap().server_id
    }

    pub fn replica(&self) -> &Arc<Replica> {
        &self.replica
    }

    pub fn weight_hash(&self) -> String {
        hash_blocks(&self.hosted.read().unwrap().blocks)
    }

    pub fn info(&self) -> ServerInfo {
        let h = self.hosted.read().unwrap();
        ServerInfo {
            server_id: h.server_id,
            range: h.range,
            throughput: h.throughput,
            position_capacity: self.cfg.token_budget,
            version: h.announced_at,
            weight_hash: hash_blocks(&h.blocks),
            state: h.state,
            active_sessions: self.sessions.lock().unwrap().slots.len(),
        }
    }

    fn entry(&self) -> ServerEntry {
        let h = self.hosted.read().unwrap();
        ServerEntry {
            server_id: h.server_id,
            address: self.addr.clone(),
            range: h.range,
            throughput: h.throughput,
            bandwidth_bps: self.cfg.shape.and_then(|s| s.bandwidth_bps),
            announced_at: h.announced_at,
            ttl_ms: self.cfg.ttl_ms,
            state: h.state,
        }
    }

    /// Stamps a fresh announcement in `state` and publishes it.
    async fn announce(&self, state: ServerState) {
        let entry = {
            let mut h = self.hosted.write().unwrap();
            h.state = state;
            // Strictly increasing so a quick re-announce still wins.
            h.announced_at = now_ms().max(h.announced_at + 1);
            drop(h);
            self.entry()
        };
        if let Err(e) = self.replica.announce(entry.clone()) {
            tracing::warn!("local announce rejected: {e}");
        }
        announce_to(&self.rpc, &self.cfg.bootstrap, &entry).await;
    }

    fn reply_encoding(&self, request: WireEncoding) -> WireEncoding {
        if self.cfg.quantize.activations() {
            WireEncoding::Int8
        } else {
            request
        }
    }

    fn open_session(&self, req: OpenSessionReq) -> Result<Vec<u8>, HandlerError> {
        let h = self.hosted.read().unwrap();
        let want = BlockRange {
            start: req.block_start as usize,
            end: req.block_end as usize,
        };
        if want.is_empty() || !h.range.covers(&want) {
            return Err(err(
                ErrorCode::WrongBlocks,
                format!("blocks {want} not within hosted {}", h.range),
            ));
        }
        let max_len = req.max_len as usize;
        if max_len == 0 || max_len > self.ckpt.config.max_seq {
            return Err(err(ErrorCode::Capacity, format!("max_len {max_len} not supported")));
        }
        let mut s = self.sessions.lock().unwrap();
        if s.slots.contains_key(&req.session_id) {
            return Err(err(ErrorCode::Duplicate, "session id already open"));
        }
        if s.slots.len() >= self.cfg.capacity {
            return Err(err(ErrorCode::Busy, "session capacity exhausted"));
        }
        let offset = want.start - h.range.start;
        let slot = Slot {
            caches: (0..want.len()).map(|i| h.blocks[offset + i].new_cache()).collect(),
            blocks: h.blocks.clone(),
            offset,
            position: 0,
            max_len,
            last: None,
        };
        s.evicted.remove(&req.session_id);
        s.slots.insert(req.session_id, Arc::new(AsyncMutex::new(slot)));
        s.usage.insert(
            req.session_id,
            Usage {
                tokens: 0,
                last_active: Instant::now(),
            },
        );
        Ok(Vec::new())
    }

    fn lookup_slot(&self, id: &SessionId) -> Result<Arc<AsyncMutex<Slot>>, HandlerError> {
        let mut s = self.sessions.lock().unwrap();
        if let Some(slot) = s.slots.get(id).cloned() {
            if let Some(u) = s.usage.get_mut(id) {
                u.last_active = Instant::now();
            }
            return Ok(slot);
        }
        if s.evicted.contains(id) {
            return Err(err(ErrorCode::Desync, "session cache was evicted"));
        }
        Err(err(ErrorCode::UnknownSession, "unknown session"))
    }

    /// Reserves `t` more cached tokens for `id`, evicting idle sessions first.
    fn reserve_tokens(&self, id: &SessionId, t: usize) -> Result<(), HandlerError> {
        let mut s = self.sessions.lock().unwrap();
        loop {
            let used: usize = s.usage.values().map(|u| u.tokens).sum();
            if used + t <= self.cfg.token_budget {
                break;
            }
            let victim = s
                .usage
                .iter()
                .filter(|(k, _)| *k != id)
                .min_by_key(|(_, u)| u.last_active)
                .map(|(k, _)| *k);
            let Some(victim) = victim else {
                return Err(err(ErrorCode::Capacity, "attention cache budget exhausted"));
            };
            s.slots.remove(&victim);
            s.usage.remove(&victim);
            s.evicted.insert(victim);
            tracing::info!("evicted session {} to free cache budget", hex::encode(&victim[..4]));
        }
        if let Some(u) = s.usage.get_mut(id) {
            u.tokens += t;
        }
        Ok(())
    }

    async fn step(&self, req: StepReq) -> Result<Vec<u8>, HandlerError> {
        let slot = self.lookup_slot(&req.session_id)?;
        let mut slot = slot.lock().await;
        let start_pos = req.start_pos as usize;
        let input = decode_tensor(&req.tensor)?;
        let d = self.ckpt.config.hidden;
        let t = rows(&input, d)?;
        if start_pos != slot.position {
            if let Some(last) = &slot.last {
                if last.start_pos == start_pos
                    && start_pos + t == slot.position
                    && last.input == req.tensor
                {
                    return Ok(last.reply.clone());
                }
            }
            return Err(err(
                ErrorCode::Desync,
                format!("step at {start_pos}, session is at {}", slot.position),
            ));
        }
        if start_pos + t > slot.max_len {
            return Err(err(
                ErrorCode::Capacity,
                format!("positions up to {} exceed max_len {}", start_pos + t, slot.max_len),
            ));
        }
        self.reserve_tokens(&req.session_id, t)?;
        let enc = self.reply_encoding(tensor_encoding(&req.tensor)?);

        let blocks = slot.blocks.clone();
        let offset = slot.offset;
        let mut caches = std::mem::take(&mut slot.caches);
        let shape = input.shape.clone();
        let (caches, out) = tokio::task::spawn_blocking(move || {
            let mut h = input.data;
            for (i, cache) in caches.iter_mut().enumerate() {
                match blocks[offset + i].forward(&h, cache, start_pos, false) {
                    Ok((y, _)) => h = y,
                    Err(e) => return (caches, Err(e)),
                }
            }
            (caches, Ok(h))
        })
        .await
        .map_err(|e| err(ErrorCode::Internal, e.to_string()))?;
        slot.caches = caches;
        let out = out?;
        let reply = encode_tensor(&Tensor::new(shape, out)?, enc)?;
        slot.position += t;
        slot.last = Some(LastStep {
            start_pos,
            input: req.tensor,
            reply: reply.clone(),
        });
        Ok(reply)
    }

    fn close_session(&self, id: &SessionId) {
        let mut s = self.sessions.lock().unwrap();
        s.slots.remove(id);
        s.usage.remove(id);
    }

    async fn forward(&self, req: ForwardReq) -> Result<Vec<u8>, HandlerError> {
        let want = BlockRange {
            start: req.block_start as usize,
            end: req.block_end as usize,
        };
        let (blocks, offset) = {
            let h = self.hosted.read().unwrap();
            if want.is_empty() || !h.range.covers(&want) {
                return Err(err(
                    ErrorCode::WrongBlocks,
                    format!("blocks {want} not within hosted {}", h.range),
                ));
            }
            (h.blocks.clone(), want.start - h.range.start)
        };
        let input = decode_tensor(&req.tensor)?;
        let d = self.ckpt.config.hidden;
        let enc = self.reply_encoding(tensor_encoding(&req.tensor)?);
        let [b, t, _] = input.shape[..] else {
            return Err(HandlerError::bad_request("forward expects [batch, seq, hidden]"));
        };
        rows(&input, d)?;
        if t > self.ckpt.config.max_seq {
            return Err(err(ErrorCode::Capacity, "sequence longer than max_seq"));
        }
        let want_tape = req.want_tape;
        let shape = input.shape.clone();
        let task_blocks = blocks.clone();
        let (out, tapes) = tokio::task::spawn_blocking(move || {
            let mut out = Vec::with_capacity(input.data.len());
            let mut tapes = Vec::new();
            for row in input.data.chunks(t * d) {
                let mut h = row.to_vec();
                let mut row_tapes = Vec::new();
                for blk in &task_blocks[offset..offset + want.len()] {
                    let mut cache = blk.new_cache();
                    let (y, tape) = blk.forward(&h, &mut cache, 0, want_tape)?;
                    h = y;
                    row_tapes.extend(tape);
                }
                out.extend(h);
                tapes.push(row_tapes);
            }
            Ok::<_, swarm_core::Error>((out, tapes))
        })
        .await
        .map_err(|e| err(ErrorCode::Internal, e.to_string()))??;
        debug_assert_eq!(tapes.len(), b);
        let tape_id = if want_tape {
            let id = self.next_tape.fetch_add(1, Ordering::Relaxed);
            self.tapes.lock().unwrap().insert(
                id,
                Tape {
                    created: Instant::now(),
                    blocks,
                    offset,
                    len: want.len(),
                    tapes,
                    shape: shape.clone(),
                },
            );
            id
        } else {
            0
        };
        let tensor = encode_tensor(&Tensor::new(shape, out)?, enc)?;
        Ok(TapedTensor { tape_id, tensor }.encode())
    }

    async fn backward(&self, req: TapedTensor) -> Result<Vec<u8>, HandlerError> {
        let tape = self.tapes.lock().unwrap().remove(&req.tape_id);
        let tape = match tape {
            Some(t) if t.created.elapsed() <= self.cfg.tape_ttl => t,
            _ => return Err(err(ErrorCode::UnknownTape, format!("no tape {}", req.tape_id))),
        };
        let grad = decode_tensor(&req.tensor)?;
        if grad.shape != tape.shape {
            return Err(HandlerError::bad_request(format!(
                "gradient shape {:?} does not match forward {:?}",
                grad.shape, tape.shape
            )));
        }
        let enc = self.reply_encoding(tensor_encoding(&req.tensor)?);
        let row_len = tape.shape[1] * tape.shape[2];
        let shape = grad.shape.clone();
        let out = tokio::task::spawn_blocking(move || {
            let mut out = Vec::with_capacity(grad.data.len());
            for (row, row_tapes) in grad.data.chunks(row_len).zip(&tape.tapes) {
                let mut g = row.to_vec();
                for (i, tp) in row_tapes.iter().enumerate().rev() {
                    g = tape.blocks[tape.offset + i].backward(tp, &g)?;
                }
                debug_assert_eq!(row_tapes.len(), tape.len);
                out.extend(g);
            }
            Ok::<_, swarm_core::Error>(out)
        })
        .await
        .map_err(|e| err(ErrorCode::Internal, e.to_string()))??;
        Ok(encode_tensor(&Tensor::new(shape, out)?, enc)?)
    }

    fn sweep(&self) {
        let idle = self.cfg.idle_timeout;
        {
            let mut s = self.sessions.lock().unwrap();
            let stale: Vec<SessionId> = s
                .usage
                .iter()
                .filter(|(_, u)| u.last_active.elapsed() > idle)
                .map(|(k, _)| *k)
                .collect();
            for id in stale {
                s.slots.remove(&id);
                s.usage.remove(&id);
            }
            if s.evicted.len() > 4 * self.cfg.capacity {
                s.evicted.clear();
            }
        }
        let ttl = self.cfg.tape_ttl;
        self.tapes.lock().unwrap().retain(|_, t| t.created.elapsed() <= ttl);
    }

    /// Moves to blocks starting at `new_start`: tombstones the old identity,
    /// loads the new blocks, and announces under a fresh id.
    async fn move_to(&self, new_start: usize) -> swarm_core::Result<()> {
        let k = self.range().len();
        let new_range = BlockRange::checked(new_start, new_start + k, self.ckpt.config.n_layers)?;
        let old = self.range();
        self.announce(ServerState::Offline).await;
        let ckpt = self.ckpt.clone();
        let quantize = self.cfg.quantize;
        let blocks = tokio::task::spawn_blocking(move || load_blocks(&ckpt, new_range, quantize))
            .await
            .expect("block loading task")?;
        {
            let mut h = self.hosted.write().unwrap();
            h.server_id = new_server_id();
            h.range = new_range;
            h.blocks = Arc::new(blocks);
            h.state = ServerState::Joining;
            h.announced_at = 0;
        }
        *self.sessions.lock().unwrap() = Sessions::default();
        self.tapes.lock().unwrap().clear();
        self.announce(ServerState::Online).await;
        self.events.push(EventKind::Rebalance {
            server: self.addr.clone(),
            from: old,
            to: new_range,
        });
        tracing::info!("{} moved from {old} to {new_range}", self.addr);
        Ok(())
    }

    async fn rebalance_check(&self, eps: f64) {
        let n = self.ckpt.config.n_layers;
        let view = self.replica.snapshot().swarm_view(n, now_ms());
        let me = self.server_id();
        if view.get(&me).is_none() {
            return;
        }
        if let Some(start) = should_rebalance(&view, &me, eps) {
            if let Err(e) = self.move_to(start).await {
                tracing::warn!("rebalance failed: {e}");
            }
        }
    }
}

impl Handler for ServerNode {
    async fn handle(self: Arc<Self>, msg_type: MsgType, payload: Vec<u8>) -> Result<Vec<u8>, HandlerError> {
        match msg_type {
            MsgType::Ping => Ok(Vec::new()),
            MsgType::Info => Ok(serde_json::to_vec(&self.info()).unwrap()),
            MsgType::OpenSession => self.open_session(OpenSessionReq::decode(&payload)?),
            MsgType::Step => self.step(StepReq::decode(&payload)?).await,
            MsgType::CloseSession => {
                self.close_session(&decode_session_id(&payload)?);
                Ok(Vec::new())
            }
            MsgType::Forward => self.forward(ForwardReq::decode(&payload)?).await,
            MsgType::Backward => self.backward(TapedTensor::decode(&payload)?).await,
            other => self.replica.handle(other, &payload, None).unwrap_or_else(|| {
                Err(HandlerError::bad_request(format!("unexpected {other:?}")))
            }),
        }
    }
}

/// A running server and its background tasks.
pub struct ServerHandle {
    pub node: Arc<ServerNode>,
    stop: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> &str {
        self.node.addr()
    }

    /// Stops abruptly, as if the process crashed: no tombstone, connections cut.
    pub fn kill(&self) {
        let _ = self.stop.send(true);
        for t in &self.tasks {
            t.abort();
        }
    }

    /// Announces an `offline` tombstone, then stops.
    pub async fn shutdown(&self) {
        self.node.announce(ServerState::Offline).await;
        self.kill();
    }

    pub fn is_stopped(&self) -> bool {
        *self.stop.borrow()
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.kill();
    }
}

/// Loads blocks, measures, announces, and starts serving.
pub async fn start_server(
    cfg: ServerConfig,
    ckpt: Arc<Checkpoint>,
    events: EventLog,
) -> Result<ServerHandle, StartError> {
    let n = ckpt.config.n_layers;
    if cfg.span == 0 || cfg.span > n {
        return Err(StartError::Config(format!("span {} outside 1..={n}", cfg.span)));
    }
    if cfg.token_budget < ckpt.config.max_seq {
        return Err(StartError::Config("cache budget below max_seq".into()));
    }
    let listener = TcpListener::bind(&cfg.listen)
        .await
        .map_err(|source| StartError::Bind {
            addr: cfg.listen.clone(),
            source,
        })?;
    let addr = listener
        .local_addr()
        .map_err(|source| StartError::Bind {
            addr: cfg.listen.clone(),
            source,
        })?
        .to_string();
    let shape = cfg.shape.unwrap_or(LinkShape::UNSHAPED);
    let rpc = RpcClient::new(cfg.shape);
    let replica = Arc::new(Replica::new(Some(n), cfg.bootstrap.clone()));
    let cfg_err = |e: swarm_core::Error| StartError::Config(e.to_string());

    let k = match cfg.blocks {
        BlockPolicy::Explicit(r) => r.len(),
        BlockPolicy::Auto => cfg.span,
    };
    let measure = |blocks: Vec<Block>, ckpt: Arc<Checkpoint>, fixed: Option<f64>| async move {
        if let Some(tp) = fixed {
            return (blocks, tp);
        }
        tokio::task::spawn_blocking(move || {
            let tp = measure_compute(&blocks, ckpt.config.max_seq, 100);
            (blocks, tp)
        })
        .await
        .expect("measurement task")
    };
    let with_network = |compute: f64| cap_by_network(&cfg, compute, ckpt.config.hidden);

    let range = match cfg.blocks {
        BlockPolicy::Explicit(r) => BlockRange::checked(r.start, r.end, n).map_err(cfg_err)?,
        BlockPolicy::Auto => {
            let probe = load_blocks(&ckpt, BlockRange { start: 0, end: k }, cfg.quantize).map_err(cfg_err)?;
            let (_, compute) = measure(probe, ckpt.clone(), cfg.throughput).await;
            let req = LookupReq {
                range: None,
                include_inactive: true,
            };
            let entries = lookup_any(&rpc, &cfg.bootstrap, &req, Duration::from_secs(5))
                .await
                .unwrap_or_default();
            for e in &entries {
                let _ = replica.announce(e.clone());
            }
            let t = swarm_core::allocation::block_throughputs(&replica.snapshot().swarm_view(n, now_ms()));
            let start = choose_interval(&t, k, with_network(compute)).map_err(cfg_err)?;
            BlockRange { start, end: start + k }
        }
    };
    let blocks = load_blocks(&ckpt, range, cfg.quantize).map_err(cfg_err)?;
    let (blocks, compute) = measure(blocks, ckpt.clone(), cfg.throughput).await;
    let throughput = with_network(compute);

    let node = Arc::new(ServerNode {
        addr: addr.clone(),
        hosted: RwLock::new(Hosted {
            server_id: new_server_id(),
            range,
            blocks: Arc::new(blocks),
            throughput,
            state: ServerState::Joining,
            announced_at: 0,
        }),
        sessions: Mutex::default(),
        tapes: Mutex::default(),
        next_tape: AtomicU64::new(1),
        replica,
        rpc,
        events,
        ckpt,
        cfg,
    });
    node.announce(ServerState::Joining).await;
    let (stop, stop_rx) = watch::channel(false);
    let mut tasks = vec![tokio::spawn(serve(listener, node.clone(), shape, stop_rx))];
    node.announce(ServerState::Online).await;
    tracing::info!("server {addr} online with blocks {range}, {throughput:.1} tok/s");

    tasks.push(tokio::spawn({
        let node = node.clone();
        async move {
            let mut tick = tokio::time::interval(node.cfg.gossip_period);
            loop {
                tick.tick().await;
                node.replica.gossip_all(&node.rpc, Some(&node.addr)).await;
            }
        }
    }));
    tasks.push(tokio::spawn({
        let node = node.clone();
        async move {
            let period = Duration::from_millis((node.cfg.ttl_ms / 3).max(1));
            loop {
                tokio::time::sleep(period).await;
                let state = node.hosted.read().unwrap().state;
                node.announce(state).await;
            }
        }
    }));
    tasks.push(tokio::spawn({
        let node = node.clone();
        async move {
            let period = (node.cfg.idle_timeout / 4).min(Duration::from_secs(5));
            loop {
                tokio::time::sleep(period).await;
                node.sweep();
            }
        }
    }));
    if node.cfg.throughput.is_none() {
        tasks.push(tokio::spawn({
            let node = node.clone();
            async move {
                loop {
                    tokio::time::sleep(node.cfg.remeasure_period).await;
                    let blocks = node.hosted.read().unwrap().blocks.clone();
                    let max_seq = node.ckpt.config.max_seq;
                    let Ok(compute) =
                        tokio::task::spawn_blocking(move || measure_compute(&blocks, max_seq, 100)).await
                    else {
                        continue;
                    };
                    let tp = cap_by_network(&node.cfg, compute, node.ckpt.config.hidden);
                    node.hosted.write().unwrap().throughput = tp;
                    node.announce(ServerState::Online).await;
                }
            }
        }));
    }
    if let Some(rb) = node.cfg.rebalance {
        tasks.push(tokio::spawn({
            let node = node.clone();
            async move {
                loop {
                    let wait = if rb.max_period > rb.min_period {
                        rand::rng().random_range(rb.min_period..rb.max_period)
                    } else {
                        rb.min_period
                    };
                    tokio::time::sleep(wait).await;
                    node.rebalance_check(rb.eps).await;
                }
            }
        }));
    }
    Ok(ServerHandle { node, stop, tasks })
}
