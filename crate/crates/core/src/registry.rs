//! Announcement store mapping blocks to live servers.
//!
//! Each replica holds one entry per server id. Replicas converge by
//! exchanging whole snapshots and keeping, per id, the last writer.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::allocation::{BlockRange, SwarmServer, SwarmView};
use crate::error::{Error, Result};

pub const DEFAULT_TTL_MS: u64 = 30_000;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ServerId(pub [u8; 16]);

impl ServerId {
    pub fn from_hex(s: &str) -> Result<Self> {
        let bytes = hex::decode(s).map_err(|e| Error::input(format!("bad server id: {e}")))?;
        let arr: [u8; 16] = bytes
            .try_into()
            .map_err(|_| Error::input("server id must be 16 bytes"))?;
        Ok(Self(arr))
    }

    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl fmt::Display for ServerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for ServerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ServerId({})", self.short())
    }
}

impl Serialize for ServerId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ServerId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ServerId::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServerState {
    Joining,
    Online,
    Offline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerEntry {
    pub server_id: ServerId,
    pub address: String,
    pub range: BlockRange,
    /// Tokens per second, the lesser of compute and network rates.
    pub throughput: f64,
    /// Outgoing link rate in bits per second, when the server knows it.
    #[serde(default)]
    pub bandwidth_bps: Option<f64>,
    pub announced_at: u64,
    pub ttl_ms: u64,
    pub state: ServerState,
}

impl ServerEntry {
    pub fn expires_at(&self) -> u64 {
        self.announced_at.saturating_add(self.ttl_ms)
    }

    pub fn is_live(&self, now: u64) -> bool {
        now < self.expires_at()
    }

    pub fn validate(&self, n_blocks: Option<usize>) -> Result<()> {
        if self.range.start >= self.range.end {
            return Err(Error::input(format!("malformed range {}", self.range)));
        }
        if let Some(n) = n_blocks {
            if self.range.end > n {
                return Err(Error::input(format!(
                    "range {} exceeds {n} blocks",
                    self.range
                )));
            }
        }
        if self.state == ServerState::Online && !(self.throughput > 0.0) {
            return Err(Error::input("online server must report positive throughput"));
        }
        Ok(())
    }

    /// Total order used to pick a winner between two versions of one id.
    fn lww_cmp(&self, other: &Self) -> Ordering {
        self.announced_at
            .cmp(&other.announced_at)
            .then_with(|| self.server_id.cmp(&other.server_id))
            .then_with(|| self.state.cmp(&other.state))
            .then_with(|| self.ttl_ms.cmp(&other.ttl_ms))
            .then_with(|| self.range.cmp(&other.range))
            .then_with(|| self.address.cmp(&other.address))
            .then_with(|| self.throughput.total_cmp(&other.throughput))
            .then_with(|| {
                let a = self.bandwidth_bps.unwrap_or(-1.0);
                let b = other.bandwidth_bps.unwrap_or(-1.0);
                a.total_cmp(&b)
            })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegistrySnapshot {
    pub entries: BTreeMap<ServerId, ServerEntry>,
}

impl RegistrySnapshot {
    pub fn new() -> Self {
        Self::default()
    }

    /// Logical version: the newest announcement held.
    pub fn version(&self) -> u64 {
        self.entries.values().map(|e| e.announced_at).max().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Inserts `entry` if it beats the stored version. Returns whether it did.
    pub fn upsert(&mut self, entry: ServerEntry) -> bool {
        match self.entries.get(&entry.server_id) {
            Some(cur) if cur.lww_cmp(&entry) != Ordering::Less => false,
            _ => {
                self.entries.insert(entry.server_id, entry);
                true
            }
        }
    }

    pub fn announce(&mut self, entry: ServerEntry, n_blocks: Option<usize>) -> Result<bool> {
        entry.validate(n_blocks)?;
        Ok(self.upsert(entry))
    }

    /// Online, unexpired entries intersecting `range`, ordered by
    /// `(range.start, server_id)`.
    pub fn get_module_infos(&self, range: &BlockRange, now: u64) -> Vec<ServerEntry> {
        let mut out: Vec<ServerEntry> = self
            .entries
            .values()
            .filter(|e| e.state == ServerState::Online && e.is_live(now) && e.range.intersects(range))
            .cloned()
            .collect();
        out.sort_by(|a, b| {
            a.range
                .start
                .cmp(&b.range.start)
                .then_with(|| a.server_id.cmp(&b.server_id))
        });
        out
    }

    /// Drops entries that expired before `now`.
    pub fn prune(&mut self, now: u64) {
        self.entries.retain(|_, e| e.is_live(now));
    }

    /// Servers that count toward block coverage: unexpired and not offline.
    pub fn swarm_view(&self, n_blocks: usize, now: u64) -> SwarmView<ServerId> {
        SwarmView {
            n_blocks,
            servers: self
                .entries
                .values()
                .filter(|e| e.state != ServerState::Offline && e.is_live(now))
                .map(|e| SwarmServer {
                    id: e.server_id,
                    range: e.range,
                    throughput: e.throughput,
                })
                .collect(),
        }
    }
}

/// Per-id last-writer-wins union of two snapshots.
pub fn merge(local: &RegistrySnapshot, remote: &RegistrySnapshot) -> RegistrySnapshot {
    let mut out = local.clone();
    for e in remote.entries.values() {
        out.upsert(e.clone());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn entry(id: u8, start: usize, end: usize, at: u64) -> ServerEntry {
        ServerEntry {
            server_id: ServerId([id; 16]),
            address: format!("127.0.0.1:{}", 9000 + id as u16),
            range: BlockRange { start, end },
            throughput: 10.0,
            bandwidth_bps: None,
            announced_at: at,
            ttl_ms: DEFAULT_TTL_MS,
            state: ServerState::Online,
        }
    }

    #[test]
    fn announce_then_read() {
        let mut s = RegistrySnapshot::new();
        assert!(s.get_module_infos(&BlockRange { start: 0, end: 4 }, 0).is_empty());
        s.announce(entry(1, 0, 4, 0), Some(4)).unwrap();
        let got = s.get_module_infos(&BlockRange { start: 3, end: 5 }, 1);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].server_id, ServerId([1; 16]));
    }

    #[test]
    fn last_writer_wins() {
        let mut s = RegistrySnapshot::new();
        s.announce(entry(1, 0, 2, 10), None).unwrap();
        assert!(!s.announce(entry(1, 2, 4, 5), None).unwrap());
        assert_eq!(s.entries[&ServerId([1; 16])].announced_at, 10);
    }

    #[test]
    fn rejects_malformed_range() {
        let mut s = RegistrySnapshot::new();
        assert!(s.announce(entry(1, 3, 3, 0), None).is_err());
        assert!(s.announce(entry(1, 0, 9, 0), Some(4)).is_err());
    }

    #[test]
    fn expiry_hides_entries() {
        let mut s = RegistrySnapshot::new();
        s.announce(entry(1, 0, 4, 0), None).unwrap();
        let q = BlockRange { start: 0, end: 4 };
        assert_eq!(s.get_module_infos(&q, 29_999).len(), 1);
        assert!(s.get_module_infos(&q, 30_001).is_empty());
    }

    #[test]
    fn tombstone_hides_server() {
        let mut s = RegistrySnapshot::new();
        s.announce(entry(1, 0, 4, 0), None).unwrap();
        let mut off = entry(1, 0, 4, 5);
        off.state = ServerState::Offline;
        s.announce(off, None).unwrap();
        assert!(s.get_module_infos(&BlockRange { start: 0, end: 4 }, 6).is_empty());
        assert!(s.swarm_view(4, 6).servers.is_empty());
    }

    #[test]
    fn results_sorted_by_start_then_id() {
        let mut s = RegistrySnapshot::new();
        s.announce(entry(3, 2, 4, 0), None).unwrap();
        s.announce(entry(2, 0, 2, 0), None).unwrap();
        s.announce(entry(1, 2, 4, 0), None).unwrap();
        let ids: Vec<u8> = s
            .get_module_infos(&BlockRange { start: 0, end: 4 }, 1)
            .iter()
            .map(|e| e.server_id.0[0])
            .collect();
        assert_eq!(ids, vec![2, 1, 3]);
    }

    #[test]
    fn merge_unions_disjoint_ids() {
        let mut a = RegistrySnapshot::new();
        a.upsert(entry(1, 0, 2, 1));
        let mut b = RegistrySnapshot::new();
        b.upsert(entry(2, 2, 4, 2));
        let m = merge(&a, &b);
        assert_eq!(m.len(), 2);
        assert_eq!(m.version(), 2);
        assert_eq!(merge(&a, &a), a);
    }

    #[test]
    fn entry_json_uses_hex_ids() {
        let id = ServerId([0xab; 16]);
        assert_eq!(ServerId::from_hex(&id.to_string()).unwrap(), id);
        let json = serde_json::to_string(&entry(7, 0, 1, 0)).unwrap();
        assert!(json.contains("\"server_id\":\"07070707070707070707070707070707\""));
        assert!(json.contains("\"state\":\"online\""));
        let back: ServerEntry = serde_json::from_str(&json).unwrap();
        assert_eq!(back, entry(7, 0, 1, 0));
    }
}
