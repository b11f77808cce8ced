//! HTTP and WebSocket front end over a [`SwarmClient`]. Holds no swarm
//! state of its own; every request runs its own inference session.

use std::collections::HashMap;
use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{ConnectInfo, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::SinkExt;
use serde::{Deserialize, Serialize};
use swarm_core::allocation::{block_throughputs, swarm_throughput};
use swarm_core::model::{Sampler, Sampling};
use swarm_core::{SwarmView, ServerId};
use tokio::net::TcpListener;
use tokio::sync::mpsc;
use tower_http::services::ServeDir;

use crate::client::{ClientError, SwarmClient};
use crate::registry::now_ms;

pub const STREAM_PROTOCOL: &str = "petal-stream-v1";
pub const MAX_NEW_TOKENS: usize = 512;
pub const DEFAULT_PER_IP_LIMIT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Greedy,
    Temperature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    #[serde(default = "default_new_tokens")]
    pub max_new_tokens: usize,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_new_tokens() -> usize {
    64
}

impl GenerateRequest {
    pub fn greedy(prompt: impl Into<String>, max_new_tokens: usize) -> Self {
        Self {
            prompt: prompt.into(),
            max_new_tokens,
            strategy: Strategy::Greedy,
            temperature: None,
            seed: None,
        }
    }

    pub fn sampler(&self) -> Result<Sampler, String> {
        let mode = match self.strategy {
            Strategy::Greedy => Sampling::Greedy,
            Strategy::Temperature => Sampling::Temperature {
                tau: self.temperature.ok_or("temperature strategy needs \"temperature\"")?,
                seed: self.seed.unwrap_or(0),
            },
        };
        Sampler::new(mode).map_err(|e| e.to_string())
    }

    /// Byte tokens, truncated from the left so the whole session fits in
    /// `max_seq` positions.
    pub fn tokens(&self, max_seq: usize) -> Result<Vec<u32>, String> {
        if self.prompt.is_empty() {
            return Err("prompt must not be empty".into());
        }
        if self.max_new_tokens == 0 || self.max_new_tokens > MAX_NEW_TOKENS {
            return Err(format!("max_new_tokens must be in 1..={MAX_NEW_TOKENS}"));
        }
        if self.max_new_tokens >= max_seq {
            return Err(format!("max_new_tokens must be below the context length {max_seq}"));
        }
        let room = max_seq + 1 - self.max_new_tokens;
        let bytes = self.prompt.as_bytes();
        Ok(bytes[bytes.len().saturating_sub(room)..].iter().map(|&b| b as u32).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub text: String,
    pub tokens: Vec<u32>,
    pub steps_per_s: f64,
}

/// Display text of one byte token.
pub fn token_text(token: u32) -> String {
    String::from_utf8_lossy(&[token as u8]).into_owned()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerStatus {
    pub server_id: ServerId,
    pub address: String,
    pub start: usize,
    pub end: usize,
    pub throughput: f64,
    pub age_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwarmStatus {
    pub n_blocks: usize,
    pub coverage: Vec<usize>,
    pub servers: Vec<ServerStatus>,
    pub bottleneck: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum StreamFrame {
    Token { text: String },
    Done { steps_per_s: f64 },
    Error { code: u16, message: String },
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub per_ip_limit: usize,
    pub static_dir: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            per_ip_limit: DEFAULT_PER_IP_LIMIT,
            static_dir: None,
        }
    }
}

struct Gateway {
    client: SwarmClient,
    cfg: GatewayConfig,
    active: Mutex<HashMap<IpAddr, usize>>,
}

/// Releases one per-IP slot on drop.
struct Permit {
    gw: Arc<Gateway>,
    ip: IpAddr,
}

impl Drop for Permit {
    fn drop(&mut self) {
        let mut active = self.gw.active.lock().unwrap();
        if let Some(n) = active.get_mut(&self.ip) {
            *n -= 1;
            if *n == 0 {
                active.remove(&self.ip);
            }
        }
    }
}

struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            body: serde_json::json!({ "error": message.into() }),
        }
    }

    fn code(&self) -> u16 {
        self.status.as_u16()
    }

    fn message(&self) -> String {
        match &self.body["error"] {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        }
    }
}

impl From<ClientError> for ApiError {
    fn from(e: ClientError) -> Self {
        match e.missing_blocks() {
            Some(missing) => Self {
                status: StatusCode::SERVICE_UNAVAILABLE,
                body: serde_json::json!({ "error": e.to_string(), "missing_blocks": missing }),
            },
            None => Self::new(StatusCode::GATEWAY_TIMEOUT, e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl Gateway {
    fn admit(self: &Arc<Self>, ip: IpAddr) -> Result<Permit, ApiError> {
        let mut active = self.active.lock().unwrap();
        let n = active.entry(ip).or_default();
        if *n >= self.cfg.per_ip_limit {
            return Err(ApiError::new(
                StatusCode::TOO_MANY_REQUESTS,
                format!("at most {} concurrent sessions per address", self.cfg.per_ip_limit),
            ));
        }
        *n += 1;
        Ok(Permit { gw: self.clone(), ip })
    }

    fn parse(&self, body: &[u8]) -> Result<(GenerateRequest, Vec<u32>, Sampler), ApiError> {
        let bad = |m: String| ApiError::new(StatusCode::BAD_REQUEST, m);
        let req: GenerateRequest = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
        let tokens = req.tokens(self.client.head().config.max_seq).map_err(bad)?;
        let sampler = req.sampler().map_err(bad)?;
        Ok((req, tokens, sampler))
    }

    async fn status(&self) -> SwarmStatus {
        let n = self.client.n_blocks();
        let entries = self.client.lookup(None).await.unwrap_or_default();
        let now = now_ms();
        let mut coverage = vec![0; n];
        let mut view = SwarmView::new(n);
        let mut servers = Vec::with_capacity(entries.len());
        for e in entries {
            for c in &mut coverage[e.range.start.min(n)..e.range.end.min(n)] {
                *c += 1;
            }
            view = view.with_server(e.server_id, e.range, e.throughput);
            servers.push(ServerStatus {
                server_id: e.server_id,
                address: e.address,
                start: e.range.start,
                end: e.range.end,
                throughput: e.throughput,
                age_ms: now.saturating_sub(e.announced_at),
            });
        }
        servers.sort_by_key(|s| (s.start, s.end, s.address.clone()));
        SwarmStatus {
            n_blocks: n,
            coverage,
            servers,
            bottleneck: swarm_throughput(&block_throughputs(&view)),
        }
    }
}

async fn generate(
    State(gw): State<Arc<Gateway>>,
    ConnectInfo(peer): ConnectInfo<SocketAddr>,
    body: Bytes,
) -> Result<Json<GenerateResponse>, ApiError> {
    let (req, prompt, mut sampler) = gw.parse(&body)?;
    let _permit = gw.admit(peer.ip())?;
    let out = gw
        .client
        .generate(&prompt, req.max_new_tokens, &mut sampler, |_| {})
        .await?;
    Ok(Json(GenerateResponse {
        text: out.tokens.iter().map(|&t| token_text(t)).collect(),
        tokens: out.tokens,
        steps_per_s: out.steps_per_s,
    }))
}

async fn swarm(State(gw): State<Arc<Gateway>>) -> Json<SwarmStatus> {
    Json(gw.status().await)
}

async fn stream(
    State(gw): State<Arc<Gateway>>,
    ConnectInfo(peer): ConnectInfo<SocketAddr>,
    ws: WebSocketUpgrade,
) -> Response {
    ws.protocols([STREAM_PROTOCOL])
        .on_upgrade(move |socket| run_stream(gw, peer.ip(), socket))
}

async fn send_frame(socket: &mut WebSocket, frame: &StreamFrame) -> bool {
    let text = serde_json::to_string(frame).expect("frame serializes");
    socket.send(Message::Text(text.into())).await.is_ok()
}

async fn run_stream(gw: Arc<Gateway>, ip: IpAddr, mut socket: WebSocket) {
    let body = loop {
        match socket.recv().await {
            Some(Ok(Message::Text(t))) => break Bytes::from(t.as_str().to_owned()),
            Some(Ok(Message::Binary(b))) => break b,
            Some(Ok(Message::Ping(_) | Message::Pong(_))) => continue,
            _ => return,
        }
    };
    let fail = |e: ApiError| StreamFrame::Error {
        code: e.code(),
        message: e.message(),
    };
    let admitted = gw.parse(&body).and_then(|p| Ok((p, gw.admit(ip)?)));
    let ((req, prompt, mut sampler), permit) = match admitted {
        Ok(x) => x,
        Err(e) => {
            send_frame(&mut socket, &fail(e)).await;
            let _ = socket.close().await;
            return;
        }
    };
    let (tx, mut rx) = mpsc::unbounded_channel();
    let client = gw.client.clone();
    let task = tokio::spawn(async move {
        let _permit = permit;
        let token_tx = tx.clone();
        let res = client
            .generate(&prompt, req.max_new_tokens, &mut sampler, move |t| {
                let _ = token_tx.send(StreamFrame::Token { text: token_text(t) });
            })
            .await;
        let last = match res {
            Ok(g) => StreamFrame::Done {
                steps_per_s: g.steps_per_s,
            },
            Err(e) => fail(e.into()),
        };
        let _ = tx.send(last);
    });
    let abort = task.abort_handle();
    while let Some(frame) = rx.recv().await {
        let last = !matches!(frame, StreamFrame::Token { .. });
        if !send_frame(&mut socket, &frame).await {
            abort.abort();
            return;
        }
        if last {
            break;
        }
    }
    let _ = socket.close().await;
}

/// Routes for the three API endpoints, plus static files under `/`.
pub fn router(client: SwarmClient, cfg: GatewayConfig) -> Router {
    let static_dir = cfg.static_dir.clone();
    let gw = Arc::new(Gateway {
        client,
        cfg,
        active: Mutex::default(),
    });
    let api = Router::new()
        .route("/api/v1/generate", post(generate))
        .route("/api/v1/stream", get(stream))
        .route("/api/v1/swarm", get(swarm))
        .with_state(gw);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves the gateway on `listener` until the task is dropped.
pub async fn serve_gateway(listener: TcpListener, client: SwarmClient, cfg: GatewayConfig) -> std::io::Result<()> {
    axum::serve(
        listener,
        router(client, cfg).into_make_service_with_connect_info::<SocketAddr>(),
    )
    .await
}
