//! Shared, timestamped log of notable swarm events.

use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use swarm_core::BlockRange;

use crate::registry::now_ms;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    /// A client replaced the server behind `blocks` and replayed its inputs.
    Recovery {
        failed: String,
        blocks: BlockRange,
        replacements: Vec<String>,
        replayed_tokens: usize,
        duration_ms: u64,
    },
    Rebalance {
        server: String,
        from: BlockRange,
        to: BlockRange,
    },
    ServerKilled {
        server: String,
    },
    ServerStarted {
        server: String,
        range: BlockRange,
    },
    SessionFailed {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub at_ms: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, Default)]
pub struct EventLog(Arc<Mutex<Vec<Event>>>);

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, kind: EventKind) {
        tracing::info!(?kind, "event");
        self.0.lock().unwrap().push(Event { at_ms: now_ms(), kind });
    }

    pub fn events(&self) -> Vec<Event> {
        self.0.lock().unwrap().clone()
    }

    pub fn count(&self, pred: impl Fn(&EventKind) -> bool) -> usize {
        self.0.lock().unwrap().iter().filter(|e| pred(&e.kind)).count()
    }
}
