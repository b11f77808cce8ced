//! Emulated network links. Every outgoing message waits for the link to be
//! free, occupies it for `bytes * 8 / bandwidth`, then arrives after a fixed
//! one-way latency. Messages on one link stay in order.

use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;
use std::time::Duration;

use tokio::io::{AsyncWrite, AsyncWriteExt};
use tokio::sync::mpsc;
use tokio::task::JoinHandle;
use tokio::time::Instant;

/// Environment variable read by [`LinkShape::from_env`].
pub const SHAPE_ENV: &str = "SWARM_SHAPE";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkShape {
    pub latency_ms: f64,
    /// `None` means unlimited.
    pub bandwidth_bps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid link shape {0:?}: expected latency_ms:bandwidth_mbps")]
pub struct ShapeParseError(String);

impl LinkShape {
    pub const UNSHAPED: LinkShape = LinkShape {
        latency_ms: 0.0,
        bandwidth_bps: None,
    };

    pub fn new(latency_ms: f64, bandwidth_mbps: Option<f64>) -> Self {
        Self {
            latency_ms,
            bandwidth_bps: bandwidth_mbps.map(|m| m * 1e6),
        }
    }

    pub fn from_env() -> Option<Self> {
        std::env::var(SHAPE_ENV).ok().and_then(|s| s.parse().ok())
    }

    pub fn is_passthrough(&self) -> bool {
        self.latency_ms <= 0.0 && self.bandwidth_bps.is_none()
    }

    pub fn latency(&self) -> Duration {
        Duration::from_secs_f64(self.latency_ms.max(0.0) / 1000.0)
    }

    pub fn transmit_time(&self, bytes: usize) -> Duration {
        match self.bandwidth_bps {
            Some(bw) if bw > 0.0 => Duration::from_secs_f64(bytes as f64 * 8.0 / bw),
            _ => Duration::ZERO,
        }
    }
}

impl fmt::Display for LinkShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.bandwidth_bps {
            Some(bw) => write!(f, "{}:{}", self.latency_ms, bw / 1e6),
            None => write!(f, "{}:inf", self.latency_ms),
        }
    }
}

impl FromStr for LinkShape {
    type Err = ShapeParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ShapeParseError(s.to_string());
        let (lat, bw) = s.split_once(':').ok_or_else(bad)?;
        let latency_ms: f64 = lat.trim().parse().map_err(|_| bad())?;
        let bw = bw.trim();
        let bandwidth_mbps = if bw.eq_ignore_ascii_case("inf") {
            None
        } else {
            Some(bw.parse::<f64>().map_err(|_| bad())?)
        };
        if !(latency_ms >= 0.0) || bandwidth_mbps.is_some_and(|b| !(b > 0.0)) {
            return Err(bad());
        }
        Ok(Self::new(latency_ms, bandwidth_mbps))
    }
}

/// Sleeps until `deadline` without the timer wheel's millisecond rounding.
pub async fn sleep_until_precise(deadline: Instant) {
    let coarse = Duration::from_millis(2);
    let now = Instant::now();
    if deadline > now + coarse {
        tokio::time::sleep_until(deadline - coarse).await;
    }
    let rest = deadline.saturating_duration_since(Instant::now());
    if !rest.is_zero() {
        let _ = tokio::task::spawn_blocking(move || std::thread::sleep(rest)).await;
    }
}

/// Outgoing half of a connection, optionally shaped.
pub struct ShapedWriter {
    tx: mpsc::UnboundedSender<(Instant, Vec<u8>)>,
    shape: LinkShape,
    link_free_at: Mutex<Instant>,
    task: JoinHandle<()>,
}

impl ShapedWriter {
    pub fn spawn<W>(mut writer: W, shape: LinkShape) -> Self
    where
        W: AsyncWrite + Unpin + Send + 'static,
    {
        let (tx, mut rx) = mpsc::unbounded_channel::<(Instant, Vec<u8>)>();
        let passthrough = shape.is_passthrough();
        let task = tokio::spawn(async move {
            while let Some((deliver_at, bytes)) = rx.recv().await {
                if !passthrough {
                    sleep_until_precise(deliver_at).await;
                }
                if writer.write_all(&bytes).await.is_err() {
                    break;
                }
            }
            let _ = writer.shutdown().await;
        });
        Self {
            tx,
            shape,
            link_free_at: Mutex::new(Instant::now()),
            task,
        }
    }

    /// Queues `bytes`; returns false once the connection is gone.
    pub fn send(&self, bytes: Vec<u8>) -> bool {
        let deliver_at = {
            let mut free = self.link_free_at.lock().unwrap();
            let start = (*free).max(Instant::now());
            *free = start + self.shape.transmit_time(bytes.len());
            *free + self.shape.latency()
        };
        self.tx.send((deliver_at, bytes)).is_ok()
    }

    pub fn is_closed(&self) -> bool {
        self.tx.is_closed() || self.task.is_finished()
    }
}

impl Drop for ShapedWriter {
    fn drop(&mut self) {
        self.task.abort();
    }
}
