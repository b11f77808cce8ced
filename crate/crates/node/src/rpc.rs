//! Framed request/response RPC over TCP. Requests on one connection are
//! pipelined and their replies matched by request id.

use std::collections::HashMap;
use std::future::Future;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use swarm_core::wire::{
    decode_error, decode_header, encode_error, encode_frame, ErrorCode, Frame, MsgType, HEADER_LEN,
};
use tokio::io::{AsyncRead, AsyncReadExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{oneshot, watch};
use tokio::task::JoinSet;

use crate::shaper::{LinkShape, ShapedWriter};

pub const DEFAULT_DEADLINE: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RpcError {
    #[error("deadline exceeded")]
    Timeout,
    #[error("connection refused by {0}")]
    Refused(String),
    #[error("connection to {0} lost")]
    Disconnected(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("remote error {code}: {message}")]
    Remote { code: u16, message: String },
}

impl RpcError {
    pub fn remote_code(&self) -> Option<ErrorCode> {
        match self {
            RpcError::Remote { code, .. } => ErrorCode::from_u16(*code),
            _ => None,
        }
    }

    /// Whether the peer itself is at fault, so routing around it makes sense.
    pub fn is_peer_failure(&self) -> bool {
        !matches!(
            self.remote_code(),
            Some(ErrorCode::BadRequest) | Some(ErrorCode::Capacity)
        )
    }
}

/// Full frame bytes moved in each direction.
#[derive(Debug, Default)]
pub struct ByteCounters {
    pub sent: AtomicU64,
    pub received: AtomicU64,
}

impl ByteCounters {
    pub fn total(&self) -> u64 {
        self.sent.load(Ordering::Relaxed) + self.received.load(Ordering::Relaxed)
    }
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub async fn read_frame<R: AsyncRead + Unpin>(r: &mut R) -> Result<Option<Frame>, RpcError> {
    let mut header = [0u8; HEADER_LEN];
    match r.read_exact(&mut header).await {
        Ok(_) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(RpcError::Protocol(e.to_string())),
    }
    let (msg_type, request_id, len) =
        decode_header(&header).map_err(|e| RpcError::Protocol(e.to_string()))?;
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)
        .await
        .map_err(|e| RpcError::Protocol(format!("truncated frame: {e}")))?;
    Ok(Some(Frame::new(msg_type, request_id, payload)))
}

type Pending = Mutex<HashMap<u64, oneshot::Sender<Result<Frame, RpcError>>>>;

struct Conn {
    addr: String,
    writer: ShapedWriter,
    pending: Arc<Pending>,
    closed: Arc<AtomicBool>,
    reader: tokio::task::JoinHandle<()>,
}

impl Drop for Conn {
    fn drop(&mut self) {
        self.reader.abort();
    }
}

impl Conn {
    async fn open(addr: &str, shape: LinkShape, stats: Arc<ByteCounters>) -> Result<Self, RpcError> {
        let stream = TcpStream::connect(addr)
            .await
            .map_err(|_| RpcError::Refused(addr.to_string()))?;
        let _ = stream.set_nodelay(true);
        let (mut rd, wr) = stream.into_split();
        let pending: Arc<Pending> = Arc::default();
        let closed = Arc::new(AtomicBool::new(false));
        let reader = {
            let pending = pending.clone();
            let closed = closed.clone();
            let addr = addr.to_string();
            tokio::spawn(async move {
                while let Ok(Some(frame)) = read_frame(&mut rd).await {
                    stats
                        .received
                        .fetch_add(frame.wire_len() as u64, Ordering::Relaxed);
                    if let Some(tx) = pending.lock().unwrap().remove(&frame.request_id) {
                        let _ = tx.send(Ok(frame));
                    }
                }
                closed.store(true, Ordering::SeqCst);
                for (_, tx) in pending.lock().unwrap().drain() {
                    let _ = tx.send(Err(RpcError::Disconnected(addr.clone())));
                }
            })
        };
        Ok(Self {
            addr: addr.to_string(),
            writer: ShapedWriter::spawn(wr, shape),
            pending,
            closed,
            reader,
        })
    }

    fn is_closed(&self) -> bool {
        self.closed.load(Ordering::SeqCst) || self.writer.is_closed()
    }
}

/// Caller side: one pooled connection per address.
pub struct RpcClient {
    shape: LinkShape,
    conns: tokio::sync::Mutex<HashMap<String, Arc<Conn>>>,
    next_id: AtomicU64,
    stats: Arc<ByteCounters>,
}

impl RpcClient {
    pub fn new(shape: Option<LinkShape>) -> Self {
        Self {
            shape: shape.unwrap_or(LinkShape::UNSHAPED),
            conns: Default::default(),
            next_id: AtomicU64::new(1),
            stats: Arc::default(),
        }
    }

    pub fn stats(&self) -> &ByteCounters {
        &self.stats
    }

    async fn conn(&self, addr: &str) -> Result<Arc<Conn>, RpcError> {
        let mut conns = self.conns.lock().await;
        if let Some(c) = conns.get(addr) {
            if !c.is_closed() {
                return Ok(c.clone());
            }
        }
        let c = Arc::new(Conn::open(addr, self.shape, self.stats.clone()).await?);
        conns.insert(addr.to_string(), c.clone());
        Ok(c)
    }

    /// Drops any pooled connection to `addr`.
    pub async fn forget(&self, addr: &str) {
        self.conns.lock().await.remove(addr);
    }

    pub async fn call(
        &self,
        addr: &str,
        msg_type: MsgType,
        payload: Vec<u8>,
        deadline: Duration,
    ) -> Result<Vec<u8>, RpcError> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let frame = Frame::new(msg_type, id, payload);
        let bytes = encode_frame(&frame).map_err(|e| RpcError::Protocol(e.to_string()))?;
        let mut registered: Option<Arc<Conn>> = None;
        let attempt = async {
            let conn = self.conn(addr).await?;
            let (tx, rx) = oneshot::channel();
            conn.pending.lock().unwrap().insert(id, tx);
            registered = Some(conn.clone());
            let len = bytes.len() as u64;
            if !conn.writer.send(bytes) {
                return Err(RpcError::Disconnected(conn.addr.clone()));
            }
            self.stats.sent.fetch_add(len, Ordering::Relaxed);
            rx.await
                .unwrap_or_else(|_| Err(RpcError::Disconnected(conn.addr.clone())))
        };
        let reply = match tokio::time::timeout(deadline, attempt).await {
            Ok(r) => r,
            Err(_) => Err(RpcError::Timeout),
        };
        if let Some(conn) = registered {
            conn.pending.lock().unwrap().remove(&id);
        }
        let reply = reply?;
        if reply.msg_type == MsgType::Error {
            let (code, message) =
                decode_error(&reply.payload).map_err(|e| RpcError::Protocol(e.to_string()))?;
            return Err(RpcError::Remote { code, message });
        }
        if reply.msg_type != msg_type {
            return Err(RpcError::Protocol(format!(
                "reply type {:?} does not match request {:?}",
                reply.msg_type, msg_type
            )));
        }
        Ok(reply.payload)
    }

    /// Round-trip time of one PING.
    pub async fn ping(&self, addr: &str, deadline: Duration) -> Result<Duration, RpcError> {
        let start = tokio::time::Instant::now();
        self.call(addr, MsgType::Ping, Vec::new(), deadline).await?;
        Ok(start.elapsed())
    }
}

/// Error a handler returns; sent back as an `ERROR` frame.
#[derive(Debug, Clone, PartialEq)]
pub struct HandlerError {
    pub code: ErrorCode,
    pub message: String,
}

impl HandlerError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::BadRequest, message)
    }
}

impl From<swarm_core::Error> for HandlerError {
    fn from(e: swarm_core::Error) -> Self {
        let code = match e {
            swarm_core::Error::Capacity(_) => ErrorCode::Capacity,
            _ => ErrorCode::BadRequest,
        };
        Self::new(code, e.to_string())
    }
}

pub trait Handler: Send + Sync + 'static {
    fn handle(
        self: Arc<Self>,
        msg_type: MsgType,
        payload: Vec<u8>,
    ) -> impl Future<Output = Result<Vec<u8>, HandlerError>> + Send;
}

/// Accepts connections until `stop` turns true. Each request runs in its own
/// task; a malformed frame drops only its connection.
pub async fn serve<H: Handler>(
    listener: TcpListener,
    handler: Arc<H>,
    shape: LinkShape,
    mut stop: watch::Receiver<bool>,
) {
    let mut conns = JoinSet::new();
    let conn_stop = stop.clone();
    loop {
        tokio::select! {
            _ = stop.wait_for(|s| *s) => break,
            accepted = listener.accept() => {
                let Ok((stream, _)) = accepted else { continue };
                let _ = stream.set_nodelay(true);
                conns.spawn(serve_conn(stream, handler.clone(), shape, conn_stop.clone()));
            }
            Some(_) = conns.join_next(), if !conns.is_empty() => {}
        }
    }
    conns.abort_all();
}

async fn serve_conn<H: Handler>(
    stream: TcpStream,
    handler: Arc<H>,
    shape: LinkShape,
    mut stop: watch::Receiver<bool>,
) {
    let (mut rd, wr) = stream.into_split();
    let writer = Arc::new(ShapedWriter::spawn(wr, shape));
    let mut requests = JoinSet::new();
    loop {
        let frame = tokio::select! {
            _ = stop.wait_for(|s| *s) => break,
            f = read_frame(&mut rd) => f,
            Some(_) = requests.join_next(), if !requests.is_empty() => continue,
        };
        let frame = match frame {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) => {
                tracing::debug!("dropping connection: {e}");
                break;
            }
        };
        let handler = handler.clone();
        let writer = writer.clone();
        requests.spawn(async move {
            let reply = match handler.handle(frame.msg_type, frame.payload).await {
                Ok(payload) => Frame::new(frame.msg_type, frame.request_id, payload),
                Err(e) => Frame::new(
                    MsgType::Error,
                    frame.request_id,
                    encode_error(e.code as u16, &e.message),
                ),
            };
            if let Ok(bytes) = encode_frame(&reply) {
                writer.send(bytes);
            }
        });
    }
    if *stop.borrow() {
        requests.abort_all();
    } else {
        // Peer closed its side; let in-flight replies drain.
        while requests.join_next().await.is_some() {}
    }
}
