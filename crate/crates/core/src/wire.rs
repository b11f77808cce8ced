//! Binary frame and tensor encodings shared by every node.
//!
//! Frame header (16 bytes): magic `50 54`, version `01`, message type,
//! request id (u64 BE), payload length (u32 BE). Tensor messages carry an
//! encoding byte, rank, big-endian dims, then either raw little-endian f32 or
//! a blockwise int8 body (block size u32 BE, f32 LE scales, i8 codes).

use crate::error::{Error, Result};
use crate::quant::{dequantize_blockwise, quantize_blockwise, QuantizedBlockwise, DEFAULT_BLOCK_SIZE};
use crate::tensor::{numel, Tensor};

pub const FRAME_MAGIC: [u8; 2] = [0x50, 0x54];
pub const PROTOCOL_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;
pub const MAX_PAYLOAD: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Ping = 0x01,
    Info = 0x02,
    OpenSession = 0x10,
    Step = 0x11,
    CloseSession = 0x12,
    Forward = 0x20,
    Backward = 0x21,
    Announce = 0x30,
    Lookup = 0x31,
    Gossip = 0x32,
    Error = 0x7F,
}

impl TryFrom<u8> for MsgType {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        Ok(match v {
            0x01 => MsgType::Ping,
            0x02 => MsgType::Info,
            0x10 => MsgType::OpenSession,
            0x11 => MsgType::Step,
            0x12 => MsgType::CloseSession,
            0x20 => MsgType::Forward,
            0x21 => MsgType::Backward,
            0x30 => MsgType::Announce,
            0x31 => MsgType::Lookup,
            0x32 => MsgType::Gossip,
            0x7F => MsgType::Error,
            other => return Err(Error::protocol(format!("unknown message type {other:#04x}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub request_id: u64,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MsgType, request_id: u64, payload: Vec<u8>) -> Self {
        Self {
            msg_type,
            request_id,
            payload,
        }
    }

    /// Bytes this frame occupies on the wire.
    pub fn wire_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>> {
    if frame.payload.len() >= MAX_PAYLOAD {
        return Err(Error::input(format!(
            "payload of {} bytes exceeds the frame limit",
            frame.payload.len()
        )));
    }
    let mut out = Vec::with_capacity(frame.wire_len());
    out.extend_from_slice(&FRAME_MAGIC);
    out.push(PROTOCOL_VERSION);
    out.push(frame.msg_type as u8);
    out.extend_from_slice(&frame.request_id.to_be_bytes());
    out.extend_from_slice(&(frame.payload.len() as u32).to_be_bytes());
    out.extend_from_slice(&frame.payload);
    Ok(out)
}

/// Parsed header: `(msg_type, request_id, payload_len)`.
pub fn decode_header(h: &[u8; HEADER_LEN]) -> Result<(MsgType, u64, usize)> {
    if h[..2] != FRAME_MAGIC {
        return Err(Error::protocol("bad frame magic"));
    }
    if h[2] != PROTOCOL_VERSION {
        return Err(Error::protocol(format!("unsupported protocol version {}", h[2])));
    }
    let msg_type = MsgType::try_from(h[3])?;
    let request_id = u64::from_be_bytes(h[4..12].try_into().unwrap());
    let len = u32::from_be_bytes(h[12..16].try_into().unwrap()) as usize;
    if len >= MAX_PAYLOAD {
        return Err(Error::protocol(format!("payload length {len} exceeds limit")));
    }
    Ok((msg_type, request_id, len))
}

/// Decodes one frame that must span `bytes` exactly.
pub fn decode_frame(bytes: &[u8]) -> Result<Frame> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::protocol("truncated frame header"));
    }
    let (msg_type, request_id, len) = decode_header(bytes[..HEADER_LEN].try_into().unwrap())?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != len {
        return Err(Error::protocol(format!(
            "frame declares {len} payload bytes, found {}",
            body.len()
        )));
    }
    Ok(Frame::new(msg_type, request_id, body.to_vec()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[repr(u8)]
pub enum WireEncoding {
    #[default]
    F32 = 0,
    Int8 = 1,
}

impl TryFrom<u8> for WireEncoding {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            0 => Ok(WireEncoding::F32),
            1 => Ok(WireEncoding::Int8),
            other => Err(Error::protocol(format!("unknown tensor encoding {other}"))),
        }
    }
}

pub fn encode_tensor(t: &Tensor, encoding: WireEncoding) -> Result<Vec<u8>> {
    encode_tensor_with_block(t, encoding, DEFAULT_BLOCK_SIZE)
}

pub fn encode_tensor_with_block(t: &Tensor, encoding: WireEncoding, block_size: usize) -> Result<Vec<u8>> {
    if t.shape.len() > u8::MAX as usize {
        return Err(Error::input("tensor rank exceeds 255"));
    }
    if numel(&t.shape)? != t.data.len() {
        return Err(Error::input("tensor data does not match its shape"));
    }
    let mut out = Vec::with_capacity(2 + 4 * t.shape.len() + 4 * t.data.len());
    out.push(encoding as u8);
    out.push(t.shape.len() as u8);
    for &d in &t.shape {
        let d = u32::try_from(d).map_err(|_| Error::input(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    match encoding {
        WireEncoding::F32 => {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        WireEncoding::Int8 => {
            let q = quantize_blockwise(t, block_size)?;
            out.extend_from_slice(&(block_size as u32).to_be_bytes());
            for s in &q.scales {
                out.extend_from_slice(&s.to_le_bytes());
            }
            out.extend(q.codes.iter().map(|&c| c as u8));
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::protocol(format!(
                "need {n} more bytes, {} left",
                self.buf.len()
            )));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn id16(&mut self) -> Result<[u8; 16]> {
        Ok(self.take(16)?.try_into().unwrap())
    }

    fn finish(self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(Error::protocol(format!("{} trailing bytes", self.buf.len())))
        }
    }
}

/// Encoding byte of a serialized tensor without decoding it.
pub fn tensor_encoding(bytes: &[u8]) -> Result<WireEncoding> {
    WireEncoding::try_from(*bytes.first().ok_or_else(|| Error::protocol("empty tensor message"))?)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { buf: bytes };
    let encoding = WireEncoding::try_from(r.u8()?)?;
    let ndim = r.u8()? as usize;
    let shape = (0..ndim)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n = numel(&shape)?;
    let t = match encoding {
        WireEncoding::F32 => {
            let body = r.take(n.checked_mul(4).ok_or_else(|| Error::input("tensor too large"))?)?;
            let data = body
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor { shape, data }
        }
        WireEncoding::Int8 => {
            let block_size = r.u32()? as usize;
            if block_size == 0 {
                return Err(Error::protocol("zero quantization block size"));
            }
            let n_blocks = n.div_ceil(block_size);
            let scales = r
                .take(
                    n_blocks
                        .checked_mul(4)
                        .ok_or_else(|| Error::input("tensor too large"))?,
                )?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let codes = r.take(n)?.iter().map(|&b| b as i8).collect();
            let q = QuantizedBlockwise {
                block_size,
                shape,
                scales,
                codes,
            };
            dequantize_blockwise(&q).map_err(|e| Error::protocol(e.to_string()))?
        }
    };
    r.finish()?;
    Ok(t)
}

/// Error codes carried by `ERROR` frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum ErrorCode {
    BadRequest = 1,
    Busy = 2,
    Desync = 3,
    UnknownSession = 4,
    UnknownTape = 5,
    Capacity = 6,
    Internal = 7,
    Duplicate = 8,
    WrongBlocks = 9,
}

impl ErrorCode {
    pub fn from_u16(v: u16) -> Option<Self> {
        Some(match v {
            1 => ErrorCode::BadRequest,
            2 => ErrorCode::Busy,
            3 => ErrorCode::Desync,
            4 => ErrorCode::UnknownSession,
            5 => ErrorCode::UnknownTape,
            6 => ErrorCode::Capacity,
            7 => ErrorCode::Internal,
            8 => ErrorCode::Duplicate,
            9 => ErrorCode::WrongBlocks,
            _ => return None,
        })
    }
}

pub fn encode_error(code: u16, message: &str) -> Vec<u8> {
    let mut out = code.to_be_bytes().to_vec();
    out.extend_from_slice(message.as_bytes());
    out
}

pub fn decode_error(payload: &[u8]) -> Result<(u16, String)> {
    if payload.len() < 2 {
        return Err(Error::protocol("error payload too short"));
    }
    let code = u16::from_be_bytes([payload[0], payload[1]]);
    let msg = String::from_utf8_lossy(&payload[2..]).into_owned();
    Ok((code, msg))
}

pub type SessionId = [u8; 16];

#[derive(Debug, Clone, PartialEq)]
pub struct OpenSessionReq {
    pub session_id: SessionId,
    pub max_len: u32,
    pub block_start: u32,
    pub block_end: u32,
}

impl OpenSessionReq {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.session_id.to_vec();
        out.extend_from_slice(&self.max_len.to_be_bytes());
        out.extend_from_slice(&self.block_start.to_be_bytes());
        out.extend_from_slice(&self.block_end.to_be_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes };
        let req = Self {
            session_id: r.id16()?,
            max_len: r.u32()?,
            block_start: r.u32()?,
            block_end: r.u32()?,
        };
        r.finish()?;
        Ok(req)
    }
}

/// `STEP` request; the hidden tensor stays serialized so the server can
/// answer in the caller's encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReq {
    pub session_id: SessionId,
    pub start_pos: u32,
    pub tensor: Vec<u8>,
}

impl StepReq {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.session_id.to_vec();
        out.extend_from_slice(&self.start_pos.to_be_bytes());
        out.extend_from_slice(&self.tensor);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes };
        let session_id = r.id16()?;
        let start_pos = r.u32()?;
        Ok(Self {
            session_id,
            start_pos,
            tensor: r.buf.to_vec(),
        })
    }
}

pub fn decode_session_id(bytes: &[u8]) -> Result<SessionId> {
    let mut r = Reader { buf: bytes };
    let id = r.id16()?;
    r.finish()?;
    Ok(id)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardReq {
    pub block_start: u32,
    pub block_end: u32,
    pub want_tape: bool,
    pub tensor: Vec<u8>,
}

impl ForwardReq {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.block_start.to_be_bytes().to_vec();
        out.extend_from_slice(&self.block_end.to_be_bytes());
        out.push(self.want_tape as u8);
        out.extend_from_slice(&self.tensor);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes };
        let block_start = r.u32()?;
        let block_end = r.u32()?;
        let want_tape = match r.u8()? {
            0 => false,
            1 => true,
            v => return Err(Error::protocol(format!("bad want_tape flag {v}"))),
        };
        Ok(Self {
            block_start,
            block_end,
            want_tape,
            tensor: r.buf.to_vec(),
        })
    }
}

/// `FORWARD` reply and `BACKWARD` request share this shape: a tape id and a tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TapedTensor {
    pub tape_id: u64,
    pub tensor: Vec<u8>,
}

impl TapedTensor {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.tape_id.to_be_bytes().to_vec();
        out.extend_from_slice(&self.tensor);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes };
        let tape_id = r.u64()?;
        Ok(Self {
            tape_id,
            tensor: r.buf.to_vec(),
        })
    }
}
