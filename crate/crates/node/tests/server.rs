use std::sync::Arc;
use std::time::Duration;

use swarm_core::model::{gen_checkpoint, Block};
use swarm_core::wire::{
    decode_tensor, encode_tensor, ErrorCode, ForwardReq, MsgType, OpenSessionReq, SessionId, StepReq,
    TapedTensor, WireEncoding,
};
use swarm_core::{BlockRange, Checkpoint, ModelConfig, Tensor};
use swarm_node::events::EventLog;
use swarm_node::rpc::{RpcClient, RpcError};
use swarm_node::server::{start_server, BlockPolicy, ServerConfig, ServerHandle, ServerInfo};

const D: usize = 32;
const T: Duration = Duration::from_secs(10);

fn ckpt() -> Arc<Checkpoint> {
    Arc::new(gen_checkpoint(3, ModelConfig::new(4, D, 4, 256, 32)).unwrap())
}

async fn server(ckpt: Arc<Checkpoint>, cfg: ServerConfig) -> ServerHandle {
    start_server(
        ServerConfig {
            blocks: BlockPolicy::Explicit(BlockRange::new(0, 2).unwrap()),
            span: 2,
            throughput: Some(10.0),
            rebalance: None,
            ..cfg
        },
        ckpt,
        EventLog::new(),
    )
    .await
    .unwrap()
}

fn open(id: u8, max_len: u32) -> Vec<u8> {
    OpenSessionReq {
        session_id: sid(id),
        max_len,
        block_start: 0,
        block_end: 2,
    }
    .encode()
}

fn sid(id: u8) -> SessionId {
    [id; 16]
}

fn hidden(t: usize, seed: f32) -> Tensor {
    Tensor::new(vec![t, D], (0..t * D).map(|i| ((i as f32 + seed) * 0.37).sin()).collect()).unwrap()
}

fn step(id: u8, pos: u32, x: &Tensor) -> Vec<u8> {
    StepReq {
        session_id: sid(id),
        start_pos: pos,
        tensor: encode_tensor(x, WireEncoding::F32).unwrap(),
    }
    .encode()
}

fn code(r: Result<Vec<u8>, RpcError>) -> Option<ErrorCode> {
    r.err().and_then(|e| e.remote_code())
}

#[tokio::test]
async fn session_admission_errors() {
    let ck = ckpt();
    let s = server(ck, ServerConfig::default()).await;
    let rpc = RpcClient::new(None);
    for i in 0..64u8 {
        rpc.call(s.addr(), MsgType::OpenSession, open(i, 8), T).await.unwrap();
    }
    assert_eq!(code(rpc.call(s.addr(), MsgType::OpenSession, open(200, 8), T).await), Some(ErrorCode::Busy));
    assert_eq!(code(rpc.call(s.addr(), MsgType::OpenSession, open(3, 8), T).await), Some(ErrorCode::Duplicate));
    rpc.call(s.addr(), MsgType::CloseSession, sid(0).to_vec(), T).await.unwrap();
    rpc.call(s.addr(), MsgType::OpenSession, open(200, 8), T).await.unwrap();

    let wrong = OpenSessionReq {
        session_id: sid(201),
        max_len: 8,
        block_start: 1,
        block_end: 3,
    };
    let r = rpc.call(s.addr(), MsgType::OpenSession, wrong.encode(), T).await;
    assert_eq!(code(r), Some(ErrorCode::WrongBlocks));
    let r = rpc.call(s.addr(), MsgType::OpenSession, open(202, 33), T).await;
    assert_eq!(code(r), Some(ErrorCode::Capacity));
}

#[tokio::test]
async fn step_position_rules() {
    let s = server(ckpt(), ServerConfig::default()).await;
    let rpc = RpcClient::new(None);
    rpc.call(s.addr(), MsgType::OpenSession, open(1, 6), T).await.unwrap();
    let x = hidden(3, 0.0);
    assert_eq!(code(rpc.call(s.addr(), MsgType::Step, step(1, 1, &x), T).await), Some(ErrorCode::Desync));
    let a = rpc.call(s.addr(), MsgType::Step, step(1, 0, &x), T).await.unwrap();
    let retry = rpc.call(s.addr(), MsgType::Step, step(1, 0, &x), T).await.unwrap();
    assert_eq!(a, retry);
    let other = hidden(3, 5.0);
    assert_eq!(code(rpc.call(s.addr(), MsgType::Step, step(1, 0, &other), T).await), Some(ErrorCode::Desync));
    assert_eq!(code(rpc.call(s.addr(), MsgType::Step, step(1, 3, &hidden(4, 1.0)), T).await), Some(ErrorCode::Capacity));
    rpc.call(s.addr(), MsgType::Step, step(1, 3, &hidden(3, 1.0)), T).await.unwrap();
    assert_eq!(code(rpc.call(s.addr(), MsgType::Step, step(9, 0, &x), T).await), Some(ErrorCode::UnknownSession));
}

#[tokio::test]
async fn sessions_are_isolated() {
    let ck = ckpt();
    let s = server(ck.clone(), ServerConfig::default()).await;
    let rpc = RpcClient::new(None);
    let xs: Vec<Tensor> = (0..4).map(|i| hidden(1, i as f32)).collect();
    rpc.call(s.addr(), MsgType::OpenSession, open(1, 8), T).await.unwrap();
    rpc.call(s.addr(), MsgType::OpenSession, open(2, 8), T).await.unwrap();
    let mut out1 = Vec::new();
    for (p, x) in xs.iter().enumerate() {
        out1.push(rpc.call(s.addr(), MsgType::Step, step(1, p as u32, x), T).await.unwrap());
        let noise = hidden(1, 100.0 + p as f32);
        rpc.call(s.addr(), MsgType::Step, step(2, p as u32, &noise), T).await.unwrap();
    }
    let blocks: Vec<Block> = ck.blocks[0..2].iter().map(|w| Block::dense(&ck.config, w)).collect();
    let mut caches: Vec<_> = blocks.iter().map(Block::new_cache).collect();
    for (p, x) in xs.iter().enumerate() {
        let mut h = x.data.clone();
        for (b, c) in blocks.iter().zip(caches.iter_mut()) {
            h = b.forward(&h, c, p, false).unwrap().0;
        }
        assert_eq!(decode_tensor(&out1[p]).unwrap().data, h);
    }
}

#[tokio::test]
async fn tapes_are_consumed_once() {
    let s = server(ckpt(), ServerConfig::default()).await;
    let rpc = RpcClient::new(None);
    let x = Tensor::new(vec![2, 3, D], hidden(6, 0.5).data).unwrap();
    let req = ForwardReq {
        block_start: 0,
        block_end: 2,
        want_tape: true,
        tensor: encode_tensor(&x, WireEncoding::F32).unwrap(),
    };
    let reply = TapedTensor::decode(&rpc.call(s.addr(), MsgType::Forward, req.encode(), T).await.unwrap()).unwrap();
    assert_eq!(decode_tensor(&reply.tensor).unwrap().shape, vec![2, 3, D]);
    let back = TapedTensor {
        tape_id: reply.tape_id,
        tensor: encode_tensor(&x, WireEncoding::F32).unwrap(),
    };
    let g = rpc.call(s.addr(), MsgType::Backward, back.encode(), T).await.unwrap();
    assert_eq!(decode_tensor(&g).unwrap().shape, vec![2, 3, D]);
    assert_eq!(code(rpc.call(s.addr(), MsgType::Backward, back.encode(), T).await), Some(ErrorCode::UnknownTape));
}

#[tokio::test]
async fn info_reports_hosted_state() {
    let s = server(ckpt(), ServerConfig::default()).await;
    let rpc = RpcClient::new(None);
    let info: ServerInfo =
        serde_json::from_slice(&rpc.call(s.addr(), MsgType::Info, Vec::new(), T).await.unwrap()).unwrap();
    assert_eq!(info.range, BlockRange::new(0, 2).unwrap());
    assert_eq!(info.throughput, 10.0);
    assert_eq!(info.weight_hash, s.node.weight_hash());
    assert_eq!(info.weight_hash.len(), 64);
}

#[tokio::test]
async fn killed_server_refuses_connections() {
    let s = server(ckpt(), ServerConfig::default()).await;
    let rpc = RpcClient::new(None);
    rpc.ping(s.addr(), T).await.unwrap();
    s.kill();
    tokio::time::sleep(Duration::from_millis(50)).await;
    let e = rpc.ping(s.addr(), Duration::from_secs(1)).await.unwrap_err();
    assert!(e.is_peer_failure(), "{e:?}");
}
