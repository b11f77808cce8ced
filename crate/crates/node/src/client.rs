//! Client library: discovery, chain planning, fault-tolerant inference
//! sessions, distributed forward/backward, and soft-prompt training.

use std::collections::{HashMap, HashSet};
use std::ops::Range;
use std::sync::Arc;
use std::time::Duration;

use futures::stream::{self, StreamExt};
use swarm_core::model::{HeadWeights, Sampler};
use swarm_core::registry::{ServerEntry, ServerId};
use swarm_core::routing::{plan_segment, split_batch, CostModel, HopPlan, DEFAULT_BEAM_WIDTH};
use swarm_core::tuning::{AdamConfig, PromptTuneState, TuneGrads};
use swarm_core::wire::{
    decode_tensor, encode_tensor, ErrorCode, ForwardReq, MsgType, OpenSessionReq,
    SessionId, StepReq, TapedTensor, WireEncoding,
};
use swarm_core::{BlockRange, Tensor};
use tokio::time::Instant;

use crate::events::{EventKind, EventLog};
use crate::registry::{lookup_any, LookupReq};
use crate::rpc::{RpcClient, RpcError, DEFAULT_DEADLINE};
use crate::server::ServerInfo;
use crate::shaper::LinkShape;

const PING_FANOUT: usize = 16;

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub bootstrap: Vec<String>,
    pub shape: Option<LinkShape>,
    pub encoding: WireEncoding,
    pub beam_width: usize,
    pub deadline: Duration,
    /// Waits between re-planning attempts when no replacement is found.
    pub backoff: Vec<Duration>,
    pub ping_count: usize,
    pub ping_deadline: Duration,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            bootstrap: Vec::new(),
            shape: None,
            encoding: WireEncoding::F32,
            beam_width: DEFAULT_BEAM_WIDTH,
            deadline: DEFAULT_DEADLINE,
            backoff: vec![
                Duration::from_secs(1),
                Duration::from_secs(2),
                Duration::from_secs(4),
            ],
            ping_count: 3,
            ping_deadline: Duration::from_secs(2),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error(transparent)]
    Model(#[from] swarm_core::Error),
    #[error(transparent)]
    Rpc(#[from] RpcError),
    #[error("session failed after retries: {0}")]
    Exhausted(String),
}

impl ClientError {
    /// Blocks nobody serves, when that is why the call failed.
    pub fn missing_blocks(&self) -> Option<&[usize]> {
        match self {
            ClientError::Model(swarm_core::Error::NoRoute { missing }) => Some(missing),
            _ => None,
        }
    }
}

pub type Result<T, E = ClientError> = std::result::Result<T, E>;

/// Shared client state; cheap to clone.
#[derive(Clone)]
pub struct SwarmClient {
    cfg: Arc<ClientConfig>,
    rpc: Arc<RpcClient>,
    head: Arc<HeadWeights>,
    events: EventLog,
}

/// Result of a full generation.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub steps_per_s: f64,
    pub recoveries: usize,
    /// Seconds per step, in order.
    pub step_times: Vec<f64>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

impl SwarmClient {
    pub fn new(cfg: ClientConfig, head: Arc<HeadWeights>, events: EventLog) -> Self {
        Self {
            rpc: Arc::new(RpcClient::new(cfg.shape)),
            cfg: Arc::new(cfg),
            head,
            events,
        }
    }

    pub fn config(&self) -> &ClientConfig {
        &self.cfg
    }

    pub fn head(&self) -> &HeadWeights {
        &self.head
    }

    pub fn rpc(&self) -> &RpcClient {
        &self.rpc
    }

    pub fn events(&self) -> &EventLog {
        &self.events
    }

    pub fn n_blocks(&self) -> usize {
        self.head.config.n_layers
    }

    /// Online entries intersecting `range`.
    pub async fn lookup(&self, range: Option<BlockRange>) -> Result<Vec<ServerEntry>> {
        let req = LookupReq {
            range,
            include_inactive: false,
        };
        Ok(lookup_any(&self.rpc, &self.cfg.bootstrap, &req, self.cfg.deadline).await?)
    }

    /// Median of several PINGs per server, in milliseconds. Unreachable
    /// servers are left out.
    pub async fn ping_servers(&self, entries: &[ServerEntry]) -> HashMap<ServerId, f64> {
        let count = self.cfg.ping_count.max(1);
        stream::iter(entries.iter().cloned())
            .map(|e| async move {
                let mut samples = Vec::with_capacity(count);
                for _ in 0..count {
                    match self.rpc.ping(&e.address, self.cfg.ping_deadline).await {
                        Ok(rtt) => samples.push(rtt.as_secs_f64() * 1000.0),
                        Err(_) => return None,
                    }
                }
                Some((e.server_id, median(samples)))
            })
            .buffer_unordered(PING_FANOUT)
            .filter_map(|x| async move { x })
            .collect()
            .await
    }

    fn bytes_per_token(&self) -> f64 {
        let d = self.head.config.hidden as f64;
        match self.cfg.encoding {
            WireEncoding::F32 => d * 4.0,
            WireEncoding::Int8 => d * 1.0625,
        }
    }

    /// Plans hops covering `target`, avoiding `banned` servers.
    pub async fn plan(&self, target: BlockRange, banned: &HashSet<ServerId>) -> Result<Vec<HopPlan>> {
        let entries: Vec<ServerEntry> = self
            .lookup(Some(target))
            .await?
            .into_iter()
            .filter(|e| !banned.contains(&e.server_id))
            .collect();
        let rtts = self.ping_servers(&entries).await;
        let cost = CostModel {
            payload_bytes: self.bytes_per_token(),
        };
        Ok(plan_segment(&entries, &rtts, target, cost, self.cfg.beam_width)?)
    }

    pub async fn server_info(&self, addr: &str) -> Result<ServerInfo> {
        let reply = self
            .rpc
            .call(addr, MsgType::Info, Vec::new(), self.cfg.deadline)
            .await?;
        serde_json::from_slice(&reply).map_err(|e| RpcError::Protocol(e.to_string()).into())
    }

    async fn call(&self, addr: &str, msg: MsgType, payload: Vec<u8>) -> Result<Vec<u8>, RpcError> {
        self.rpc.call(addr, msg, payload, self.cfg.deadline).await
    }

    pub async fn open_session(&self, max_len: usize) -> Result<InferenceSession> {
        let max_len = max_len.min(self.head.config.max_seq);
        let target = BlockRange::new(0, self.n_blocks())?;
        let mut banned = HashSet::new();
        let mut attempt = 0;
        loop {
            let res = match self.plan(target, &banned).await {
                Ok(chain) => self.open_hops(chain, max_len).await,
                Err(e) => Err((e, None)),
            };
            match res {
                Ok(hops) => {
                    return Ok(InferenceSession {
                        client: self.clone(),
                        hops,
                        position: 0,
                        max_len,
                        banned,
                        recoveries: 0,
                    })
                }
                Err((e, bad)) => {
                    banned.extend(bad);
                    let Some(wait) = self.cfg.backoff.get(attempt) else {
                        return Err(e);
                    };
                    tracing::warn!("opening session failed ({e}); retrying in {wait:?}");
                    tokio::time::sleep(*wait).await;
                    attempt += 1;
                }
            }
        }
    }

    /// Opens a session on every hop; on failure reports the server at fault.
    async fn open_hops(
        &self,
        chain: Vec<HopPlan>,
        max_len: usize,
    ) -> std::result::Result<Vec<Hop>, (ClientError, Option<ServerId>)> {
        let mut hops = Vec::with_capacity(chain.len());
        for plan in chain {
            match self.open_one(&plan, max_len).await {
                Ok(session_id) => hops.push(Hop {
                    plan,
                    session_id,
                    log: Vec::new(),
                }),
                Err(e) => {
                    for h in &hops {
                        self.close_hop(h).await;
                    }
                    return Err((e.into(), Some(plan.server.server_id)));
                }
            }
        }
        Ok(hops)
    }

    async fn open_one(&self, plan: &HopPlan, max_len: usize) -> Result<SessionId, RpcError> {
        let session_id: SessionId = rand::random();
        let req = OpenSessionReq {
            session_id,
            max_len: max_len as u32,
            block_start: plan.blocks.start as u32,
            block_end: plan.blocks.end as u32,
        };
        self.call(&plan.server.address, MsgType::OpenSession, req.encode())
            .await?;
        Ok(session_id)
    }

    async fn close_hop(&self, hop: &Hop) {
        let _ = self
            .rpc
            .call(
                &hop.plan.server.address,
                MsgType::CloseSession,
                hop.session_id.to_vec(),
                Duration::from_secs(2),
            )
            .await;
    }

    /// Prefills `prompt`, then generates `n_new` tokens, calling `on_token`
    /// after each one.
    pub async fn generate(
        &self,
        prompt: &[u32],
        n_new: usize,
        sampler: &mut Sampler,
        mut on_token: impl FnMut(u32),
    ) -> Result<Generation> {
        if prompt.is_empty() {
            return Err(swarm_core::Error::Input("empty prompt".into()).into());
        }
        let mut session = self.open_session(prompt.len() + n_new.saturating_sub(1)).await?;
        let res = self.run_generation(&mut session, prompt, n_new, sampler, &mut on_token).await;
        session.close().await;
        res
    }

    async fn run_generation(
        &self,
        session: &mut InferenceSession,
        prompt: &[u32],
        n_new: usize,
        sampler: &mut Sampler,
        on_token: &mut impl FnMut(u32),
    ) -> Result<Generation> {
        let d = self.head.config.hidden;
        let mut tokens = Vec::with_capacity(n_new);
        let mut input = prompt.to_vec();
        let mut step_times = Vec::with_capacity(n_new);
        let start = Instant::now();
        for _ in 0..n_new {
            let x = Tensor::new(vec![input.len(), d], self.head.embed(&input)?)?;
            let t0 = Instant::now();
            let h = session.step(&x).await?;
            step_times.push(t0.elapsed().as_secs_f64());
            let logits = self.head.lm_head(&h.data[h.data.len() - d..])?;
            let tok = sampler.sample(&logits)?;
            tokens.push(tok);
            on_token(tok);
            input = vec![tok];
        }
        let elapsed = start.elapsed().as_secs_f64().max(1e-9);
        Ok(Generation {
            tokens,
            steps_per_s: n_new as f64 / elapsed,
            recoveries: session.recoveries,
            step_times,
        })
    }

    /// Groups servers for a training pass: each stage is one hop of the
    /// planned chain plus every other server that covers the same blocks.
    pub async fn plan_stages(&self) -> Result<Vec<Stage>> {
        let target = BlockRange::new(0, self.n_blocks())?;
        let entries = self.lookup(Some(target)).await?;
        let chain = self.plan(target, &HashSet::new()).await?;
        Ok(chain
            .into_iter()
            .map(|hop| {
                let mut servers = vec![hop.server.clone()];
                servers.extend(
                    entries
                        .iter()
                        .filter(|e| e.server_id != hop.server.server_id && e.range.covers(&hop.blocks))
                        .cloned(),
                );
                Stage {
                    blocks: hop.blocks,
                    servers,
                }
            })
            .collect())
    }

    async fn forward_part(
        &self,
        addr: &str,
        blocks: BlockRange,
        x: &Tensor,
        want_tape: bool,
    ) -> Result<(Tensor, u64)> {
        let req = ForwardReq {
            block_start: blocks.start as u32,
            block_end: blocks.end as u32,
            want_tape,
            tensor: encode_tensor(x, self.cfg.encoding)?,
        };
        let reply = TapedTensor::decode(&self.call(addr, MsgType::Forward, req.encode()).await?)?;
        Ok((decode_tensor(&reply.tensor)?, reply.tape_id))
    }

    /// Runs `x` `[B, t, d]` through every stage, splitting each batch across
    /// the stage's servers by announced throughput.
    pub async fn forward(&self, stages: &[Stage], x: &Tensor, want_tape: bool) -> Result<(Tensor, ForwardTrace)> {
        let [b, t, d] = x.shape[..] else {
            return Err(swarm_core::Error::Input("forward expects [batch, seq, hidden]".into()).into());
        };
        let mut h = x.clone();
        let mut trace = ForwardTrace { stages: Vec::new() };
        for stage in stages {
            let shares = split_batch(b, &stage.servers.iter().map(|s| s.throughput).collect::<Vec<_>>());
            let mut parts = Vec::new();
            let mut row = 0;
            for (server, n) in stage.servers.iter().zip(shares) {
                if n > 0 {
                    parts.push((server.address.clone(), row..row + n));
                    row += n;
                }
            }
            let results = futures::future::join_all(parts.iter().map(|(addr, rows)| {
                let sub = slice_rows(&h, rows.clone(), t * d);
                async move { self.forward_part(addr, stage.blocks, &sub, want_tape).await }
            }))
            .await;
            let mut out = Vec::with_capacity(h.data.len());
            let mut done = Vec::new();
            for ((addr, rows), res) in parts.into_iter().zip(results) {
                let (y, tape_id) = res?;
                out.extend(y.data);
                done.push(Part { addr, rows, tape_id });
            }
            trace.stages.push(StageTrace {
                blocks: stage.blocks,
                input: h,
                parts: done,
            });
            h = Tensor::new(vec![b, t, d], out)?;
        }
        Ok((h, trace))
    }

    /// Gradient with respect to the input of [`SwarmClient::forward`].
    pub async fn backward(&self, trace: &ForwardTrace, grad: &Tensor) -> Result<Tensor> {
        let [b, t, d] = grad.shape[..] else {
            return Err(swarm_core::Error::Input("gradient must be [batch, seq, hidden]".into()).into());
        };
        let row_len = t * d;
        let mut g = grad.clone();
        for stage in trace.stages.iter().rev() {
            let results = futures::future::join_all(stage.parts.iter().map(|part| {
                let sub = slice_rows(&g, part.rows.clone(), row_len);
                async move { self.backward_part(stage, part, &sub, row_len).await }
            }))
            .await;
            let mut out = Vec::with_capacity(g.data.len());
            for res in results {
                out.extend(res?.data);
            }
            g = Tensor::new(vec![b, t, d], out)?;
        }
        Ok(g)
    }

    async fn backward_part(&self, stage: &StageTrace, part: &Part, grad: &Tensor, row_len: usize) -> Result<Tensor> {
        let send = |tape_id: u64| {
            let payload = encode_tensor(grad, self.cfg.encoding).map(|tensor| TapedTensor { tape_id, tensor }.encode());
            async move { self.call(&part.addr, MsgType::Backward, payload?).await.map_err(ClientError::from) }
        };
        let reply = match send(part.tape_id).await {
            Err(ClientError::Rpc(e)) if e.remote_code() == Some(ErrorCode::UnknownTape) => {
                tracing::info!("tape expired on {}; re-running forward", part.addr);
                let input = slice_rows(&stage.input, part.rows.clone(), row_len);
                let (_, tape_id) = self.forward_part(&part.addr, stage.blocks, &input, true).await?;
                send(tape_id).await?
            }
            other => other?,
        };
        Ok(decode_tensor(&reply)?)
    }

    /// Mean classifier loss without gradients.
    pub async fn eval_loss(
        &self,
        stages: &[Stage],
        state: &PromptTuneState,
        batch: &[Vec<u32>],
        labels: &[usize],
    ) -> Result<f32> {
        let x = state.build_inputs(&self.head, batch)?;
        let (out, _) = self.forward(stages, &x, false).await?;
        Ok(state.head_loss(&self.head.final_ln, &out, labels)?.loss)
    }

    /// Loss and gradients for every client-owned parameter.
    pub async fn loss_and_grads(
        &self,
        stages: &[Stage],
        state: &PromptTuneState,
        batch: &[Vec<u32>],
        labels: &[usize],
    ) -> Result<(f32, TuneGrads)> {
        let x = state.build_inputs(&self.head, batch)?;
        let (out, trace) = self.forward(stages, &x, true).await?;
        let head = state.head_loss(&self.head.final_ln, &out, labels)?;
        let grad_in = self.backward(&trace, &head.grad_hidden).await?;
        let grads = TuneGrads {
            prompts: state.prompt_grad(&grad_in)?,
            head_w: head.grad_head_w,
            head_b: head.grad_head_b,
        };
        Ok((head.loss, grads))
    }

    /// One optimizer step on prompts and head; server weights are untouched.
    pub async fn train_step(
        &self,
        stages: &[Stage],
        state: &mut PromptTuneState,
        batch: &[Vec<u32>],
        labels: &[usize],
        adam: &AdamConfig,
    ) -> Result<f32> {
        let (loss, grads) = self.loss_and_grads(stages, state, batch, labels).await?;
        state.apply_adam(&grads, adam)?;
        Ok(loss)
    }
}

fn slice_rows(t: &Tensor, rows: Range<usize>, row_len: usize) -> Tensor {
    let mut shape = t.shape.clone();
    shape[0] = rows.len();
    Tensor {
        shape,
        data: t.data[rows.start * row_len..rows.end * row_len].to_vec(),
    }
}

/// Servers able to run one chain segment.
#[derive(Debug, Clone)]
pub struct Stage {
    pub blocks: BlockRange,
    pub servers: Vec<ServerEntry>,
}

#[derive(Debug, Clone)]
struct Part {
    addr: String,
    rows: Range<usize>,
    tape_id: u64,
}

#[derive(Debug, Clone)]
struct StageTrace {
    blocks: BlockRange,
    input: Tensor,
    parts: Vec<Part>,
}

/// Tape handles from a forward pass, consumed by the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    stages: Vec<StageTrace>,
}

struct Hop {
    plan: HopPlan,
    session_id: SessionId,
    /// Inputs sent to this hop, in order; rows sum to the session position.
    log: Vec<Tensor>,
}

/// A stateful generation context spanning a chain of servers.
pub struct InferenceSession {
    client: SwarmClient,
    hops: Vec<Hop>,
    position: usize,
    max_len: usize,
    banned: HashSet<ServerId>,
    recoveries: usize,
}

impl InferenceSession {
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn recoveries(&self) -> usize {
        self.recoveries
    }

    pub fn chain(&self) -> Vec<HopPlan> {
        self.hops.iter().map(|h| h.plan.clone()).collect()
    }

    /// Total rows logged for each hop.
    pub fn logged_rows(&self) -> Vec<usize> {
        let d = self.client.head.config.hidden;
        self.hops
            .iter()
            .map(|h| h.log.iter().map(|t| t.numel() / d).sum())
            .collect()
    }

    async fn send_step(&self, hop: &Hop, start_pos: usize, x: &Tensor) -> Result<Tensor> {
        let req = StepReq {
            session_id: hop.session_id,
            start_pos: start_pos as u32,
            tensor: encode_tensor(x, self.client.cfg.encoding)?,
        };
        let payload = req.encode();
        let addr = &hop.plan.server.address;
        let reply = match self.client.call(addr, MsgType::Step, payload.clone()).await {
            // A retried step is answered from the server's reply cache.
            Err(RpcError::Timeout) => self.client.call(addr, MsgType::Step, payload).await?,
            other => other?,
        };
        let mut out = decode_tensor(&reply)?;
        if out.numel() != x.numel() {
            return Err(RpcError::Protocol("step reply has the wrong size".into()).into());
        }
        out.shape = x.shape.clone();
        Ok(out)
    }

    /// Runs `x` (`[t, d]`) through the chain at the current position.
    pub async fn step(&mut self, x: &Tensor) -> Result<Tensor> {
        let d = self.client.head.config.hidden;
        if x.shape.last() != Some(&d) || x.numel() == 0 {
            return Err(swarm_core::Error::Input(format!("step input {:?} is not [t, {d}]", x.shape)).into());
        }
        let t = x.numel() / d;
        if self.position + t > self.max_len {
            return Err(swarm_core::Error::Capacity(format!(
                "positions up to {} exceed session max_len {}",
                self.position + t,
                self.max_len
            ))
            .into());
        }
        let mut h = x.clone();
        let mut i = 0;
        while i < self.hops.len() {
            match self.send_step(&self.hops[i], self.position, &h).await {
                Ok(out) => {
                    self.hops[i].log.push(std::mem::replace(&mut h, out));
                    i += 1;
                }
                Err(ClientError::Rpc(e)) if e.is_peer_failure() => {
                    tracing::warn!("hop {} ({}) failed: {e}", i, self.hops[i].plan.server.address);
                    if e.remote_code() != Some(ErrorCode::Desync) {
                        self.banned.insert(self.hops[i].plan.server.server_id);
                    }
                    self.recover(i).await?;
                }
                Err(e) => return Err(e),
            }
        }
        self.position += t;
        Ok(h)
    }

    /// Replaces hop `i` with fresh servers and replays its logged inputs.
    async fn recover(&mut self, i: usize) -> Result<()> {
        let started = Instant::now();
        let failed = self.hops.remove(i);
        let blocks = failed.plan.blocks;
        let d = self.client.head.config.hidden;
        let replay = if failed.log.is_empty() {
            None
        } else {
            let rows: usize = failed.log.iter().map(|t| t.numel() / d).sum();
            let data = failed.log.iter().flat_map(|t| t.data.iter().copied()).collect();
            Some(Tensor::new(vec![rows, d], data)?)
        };
        let mut attempt = 0;
        loop {
            match self.try_replace(blocks, replay.clone()).await {
                Ok(new_hops) => {
                    let replacements = new_hops.iter().map(|h| h.plan.server.address.clone()).collect();
                    for (j, hop) in new_hops.into_iter().enumerate() {
                        self.hops.insert(i + j, hop);
                    }
                    self.recoveries += 1;
                    self.client.events.push(EventKind::Recovery {
                        failed: failed.plan.server.address.clone(),
                        blocks,
                        replacements,
                        replayed_tokens: replay.as_ref().map_or(0, |t| t.numel() / d),
                        duration_ms: started.elapsed().as_millis() as u64,
                    });
                    return Ok(());
                }
                Err(e) => {
                    let Some(wait) = self.client.cfg.backoff.get(attempt) else {
                        self.client.events.push(EventKind::SessionFailed { reason: e.to_string() });
                        return Err(ClientError::Exhausted(e.to_string()));
                    };
                    tracing::warn!("no replacement for blocks {blocks} yet ({e}); retrying in {wait:?}");
                    tokio::time::sleep(*wait).await;
                    attempt += 1;
                }
            }
        }
    }

    async fn try_replace(&mut self, blocks: BlockRange, replay: Option<Tensor>) -> Result<Vec<Hop>> {
        let chain = self.client.plan(blocks, &self.banned).await?;
        let hops = match self.client.open_hops(chain, self.max_len).await {
            Ok(h) => h,
            Err((e, bad)) => {
                self.banned.extend(bad);
                return Err(e);
            }
        };
        let Some(mut x) = replay else {
            return Ok(hops);
        };
        let mut done = Vec::with_capacity(hops.len());
        let mut pending = hops.into_iter();
        while let Some(mut hop) = pending.next() {
            match self.send_step(&hop, 0, &x).await {
                Ok(out) => {
                    hop.log.push(std::mem::replace(&mut x, out));
                    done.push(hop);
                }
                Err(e) => {
                    self.banned.insert(hop.plan.server.server_id);
                    for h in done.iter().chain(std::iter::once(&hop)).chain(pending.as_slice()) {
                        self.client.close_hop(h).await;
                    }
                    return Err(e);
                }
            }
        }
        Ok(done)
    }

    /// Releases server-side caches; failures are ignored.
    pub async fn close(&mut self) {
        for hop in &self.hops {
            self.client.close_hop(hop).await;
        }
    }
}
