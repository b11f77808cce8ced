//! A registry replica that answers `ANNOUNCE`, `LOOKUP` and `GOSSIP`, and
//! the standalone seed process built around one.

use std::collections::HashSet;
use std::sync::{Arc, RwLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use swarm_core::registry::{merge, RegistrySnapshot, ServerEntry};
use swarm_core::wire::{ErrorCode, MsgType};
use swarm_core::BlockRange;
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::JoinHandle;

use crate::rpc::{serve, Handler, HandlerError, RpcClient, RpcError};
use crate::shaper::LinkShape;

pub const DEFAULT_GOSSIP_PERIOD: Duration = Duration::from_millis(2000);
const GOSSIP_DEADLINE: Duration = Duration::from_secs(2);

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// `LOOKUP` request body.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LookupReq {
    /// Blocks of interest; `None` means all.
    #[serde(default)]
    pub range: Option<BlockRange>,
    /// Also return joining and offline entries (still only unexpired ones).
    #[serde(default)]
    pub include_inactive: bool,
}

#[derive(Debug, Default)]
pub struct Replica {
    snapshot: RwLock<RegistrySnapshot>,
    n_blocks: Option<usize>,
    peers: RwLock<Vec<String>>,
    blocked: RwLock<HashSet<String>>,
}

impl Replica {
    pub fn new(n_blocks: Option<usize>, peers: Vec<String>) -> Self {
        Self {
            n_blocks,
            peers: RwLock::new(peers),
            ..Default::default()
        }
    }

    pub fn snapshot(&self) -> RegistrySnapshot {
        self.snapshot.read().unwrap().clone()
    }

    pub fn peers(&self) -> Vec<String> {
        self.peers.read().unwrap().clone()
    }

    pub fn add_peer(&self, addr: &str) {
        let mut peers = self.peers.write().unwrap();
        if !peers.iter().any(|p| p == addr) {
            peers.push(addr.to_string());
        }
    }

    /// Refuses gossip to and from `addr` (emulated partition).
    pub fn block_peer(&self, addr: &str, blocked: bool) {
        let mut set = self.blocked.write().unwrap();
        if blocked {
            set.insert(addr.to_string());
        } else {
            set.remove(addr);
        }
    }

    fn is_blocked(&self, addr: &str) -> bool {
        self.blocked.read().unwrap().contains(addr)
    }

    pub fn announce(&self, entry: ServerEntry) -> swarm_core::Result<bool> {
        self.snapshot.write().unwrap().announce(entry, self.n_blocks)
    }

    pub fn lookup(&self, req: &LookupReq, now: u64) -> Vec<ServerEntry> {
        let snap = self.snapshot.read().unwrap();
        if req.include_inactive {
            return snap
                .entries
                .values()
                .filter(|e| e.is_live(now))
                .filter(|e| req.range.is_none_or(|r| e.range.intersects(&r)))
                .cloned()
                .collect();
        }
        let range = req.range.unwrap_or(BlockRange {
            start: 0,
            end: usize::MAX,
        });
        snap.get_module_infos(&range, now)
    }

    pub fn merge_from(&self, remote: &RegistrySnapshot) -> RegistrySnapshot {
        let mut snap = self.snapshot.write().unwrap();
        *snap = merge(&snap, remote);
        snap.prune(now_ms());
        snap.clone()
    }

    /// One push-pull exchange with `peer`. On failure nothing changes.
    pub async fn gossip_round(&self, rpc: &RpcClient, peer: &str) -> Result<(), RpcError> {
        if self.is_blocked(peer) {
            return Err(RpcError::Timeout);
        }
        let body = serde_json::to_vec(&self.snapshot()).expect("snapshot serializes");
        let reply = rpc.call(peer, MsgType::Gossip, body, GOSSIP_DEADLINE).await?;
        let remote: RegistrySnapshot =
            serde_json::from_slice(&reply).map_err(|e| RpcError::Protocol(e.to_string()))?;
        self.merge_from(&remote);
        Ok(())
    }

    /// Gossips with every known peer once.
    pub async fn gossip_all(&self, rpc: &RpcClient, self_addr: Option<&str>) {
        for peer in self.peers() {
            if Some(peer.as_str()) == self_addr {
                continue;
            }
            if let Err(e) = self.gossip_round(rpc, &peer).await {
                tracing::debug!("gossip with {peer} failed: {e}");
            }
        }
    }

    /// Serves the registry message types; `None` for anything else.
    pub fn handle(
        &self,
        msg_type: MsgType,
        payload: &[u8],
        from_addr: Option<&str>,
    ) -> Option<Result<Vec<u8>, HandlerError>> {
        let bad = |e: serde_json::Error| HandlerError::bad_request(e.to_string());
        Some(match msg_type {
            MsgType::Announce => serde_json::from_slice::<ServerEntry>(payload)
                .map_err(bad)
                .and_then(|entry| {
                    let fresh = self.announce(entry)?;
                    Ok(serde_json::to_vec(&serde_json::json!({ "stored": fresh })).unwrap())
                }),
            MsgType::Lookup => {
                let req: Result<LookupReq, _> = if payload.is_empty() {
                    Ok(LookupReq::default())
                } else {
                    serde_json::from_slice(payload)
                };
                req.map_err(bad)
                    .map(|req| serde_json::to_vec(&self.lookup(&req, now_ms())).unwrap())
            }
            MsgType::Gossip => {
                if from_addr.is_some_and(|a| self.is_blocked(a)) {
                    return Some(Err(HandlerError::new(ErrorCode::Busy, "partitioned")));
                }
                serde_json::from_slice::<RegistrySnapshot>(payload)
                    .map_err(bad)
                    .map(|remote| serde_json::to_vec(&self.merge_from(&remote)).unwrap())
            }
            _ => return None,
        })
    }
}

/// Fetches entries from the first bootstrap peer that answers.
pub async fn lookup_any(
    rpc: &RpcClient,
    peers: &[String],
    req: &LookupReq,
    deadline: Duration,
) -> Result<Vec<ServerEntry>, RpcError> {
    let body = serde_json::to_vec(req).expect("lookup serializes");
    let mut last = RpcError::Refused("no bootstrap peers".into());
    for peer in peers {
        match rpc.call(peer, MsgType::Lookup, body.clone(), deadline).await {
            Ok(reply) => {
                return serde_json::from_slice(&reply).map_err(|e| RpcError::Protocol(e.to_string()))
            }
            Err(e) => last = e,
        }
    }
    Err(last)
}

/// Sends `entry` to each peer, ignoring failures.
pub async fn announce_to(rpc: &RpcClient, peers: &[String], entry: &ServerEntry) {
    let body = serde_json::to_vec(entry).expect("entry serializes");
    for peer in peers {
        if peer == &entry.address {
            continue;
        }
        if let Err(e) = rpc
            .call(peer, MsgType::Announce, body.clone(), GOSSIP_DEADLINE)
            .await
        {
            tracing::debug!("announce to {peer} failed: {e}");
        }
    }
}

struct SeedHandler {
    replica: Arc<Replica>,
}

impl Handler for SeedHandler {
    async fn handle(self: Arc<Self>, msg_type: MsgType, payload: Vec<u8>) -> Result<Vec<u8>, HandlerError> {
        match msg_type {
            MsgType::Ping => Ok(Vec::new()),
            MsgType::Info => Ok(serde_json::to_vec(&serde_json::json!({
                "role": "registry",
                "entries": self.replica.snapshot().len(),
                "version": self.replica.snapshot().version(),
            }))
            .unwrap()),
            other => self.replica.handle(other, &payload, None).unwrap_or_else(|| {
                Err(HandlerError::bad_request(format!("{other:?} is not served by a registry")))
            }),
        }
    }
}

/// A standalone registry seed.
pub struct RegistryNode {
    pub addr: String,
    pub replica: Arc<Replica>,
    stop: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

impl RegistryNode {
    pub async fn start(
        listen: &str,
        peers: Vec<String>,
        gossip_period: Duration,
        shape: Option<LinkShape>,
    ) -> std::io::Result<Self> {
        let listener = TcpListener::bind(listen).await?;
        let addr = listener.local_addr()?.to_string();
        let replica = Arc::new(Replica::new(None, peers));
        let (stop, stop_rx) = watch::channel(false);
        let shape = shape.unwrap_or(LinkShape::UNSHAPED);
        let server = tokio::spawn(serve(
            listener,
            Arc::new(SeedHandler {
                replica: replica.clone(),
            }),
            shape,
            stop_rx,
        ));
        let gossip = {
            let replica = replica.clone();
            let addr = addr.clone();
            tokio::spawn(async move {
                let rpc = RpcClient::new(Some(shape));
                let mut tick = tokio::time::interval(gossip_period);
                loop {
                    tick.tick().await;
                    replica.gossip_all(&rpc, Some(&addr)).await;
                }
            })
        };
        Ok(Self {
            addr,
            replica,
            stop,
            tasks: vec![server, gossip],
        })
    }

    pub fn stop(&self) {
        let _ = self.stop.send(true);
        for t in &self.tasks {
            t.abort();
        }
    }
}

impl Drop for RegistryNode {
    fn drop(&mut self) {
        self.stop();
    }
}
