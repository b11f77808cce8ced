use std::sync::Arc;
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use swarm_core::model::{gen_checkpoint, Sampler};
use swarm_core::{Checkpoint, Model, ModelConfig};
use swarm_node::client::ClientConfig;
use swarm_node::gateway::{
    serve_gateway, GatewayConfig, GenerateRequest, GenerateResponse, StreamFrame, SwarmStatus, STREAM_PROTOCOL,
};
use swarm_node::harness::{LocalSwarm, ServerSpec, SwarmOptions};
use tokio::net::TcpListener;
use tokio_tungstenite::tungstenite::client::IntoClientRequest;
use tokio_tungstenite::tungstenite::Message;

fn ckpt() -> Arc<Checkpoint> {
    Arc::new(gen_checkpoint(11, ModelConfig::new(4, 32, 4, 256, 64)).unwrap())
}

async fn setup() -> (LocalSwarm, String) {
    let swarm = LocalSwarm::launch(
        ckpt(),
        &[
            ServerSpec::range(0, 2).with_throughput(20.0),
            ServerSpec::range(2, 4).with_throughput(10.0),
        ],
        SwarmOptions::default(),
    )
    .await
    .unwrap();
    let client = swarm.client(ClientConfig {
        backoff: vec![Duration::from_millis(50)],
        ping_deadline: Duration::from_millis(300),
        ..ClientConfig::default()
    });
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let url = format!("127.0.0.1:{}", listener.local_addr().unwrap().port());
    tokio::spawn(serve_gateway(listener, client, GatewayConfig::default()));
    (swarm, url)
}

fn expected(ckpt: &Checkpoint, prompt: &str, n: usize) -> String {
    let tokens: Vec<u32> = prompt.bytes().map(u32::from).collect();
    Model::from_checkpoint(ckpt)
        .generate(&tokens, n, &mut Sampler::greedy())
        .unwrap()
        .into_iter()
        .map(swarm_node::gateway::token_text)
        .collect()
}

#[tokio::test]
async fn generate_is_deterministic_and_matches_reference() {
    let (swarm, url) = setup().await;
    let http = reqwest::Client::new();
    let req = GenerateRequest::greedy("hello", 10);
    let mut texts = Vec::new();
    for _ in 0..2 {
        let resp = http
            .post(format!("http://{url}/api/v1/generate"))
            .json(&req)
            .send()
            .await
            .unwrap();
        assert_eq!(resp.status(), 200);
        let body: GenerateResponse = resp.json().await.unwrap();
        assert_eq!(body.tokens.len(), 10);
        assert!(body.steps_per_s > 0.0);
        texts.push(body.text);
    }
    assert_eq!(texts[0], texts[1]);
    assert_eq!(texts[0], expected(&swarm.ckpt, "hello", 10));
}

#[tokio::test]
async fn invalid_bodies_are_rejected() {
    let (_swarm, url) = setup().await;
    let http = reqwest::Client::new();
    let post = |body: &'static str| {
        http.post(format!("http://{url}/api/v1/generate"))
            .header("content-type", "application/json")
            .body(body)
            .send()
    };
    assert_eq!(post(r#"{"prompt": ""}"#).await.unwrap().status(), 400);
    assert_eq!(post("not json").await.unwrap().status(), 400);
    assert_eq!(post(r#"{"prompt": "a", "max_new_tokens": 600}"#).await.unwrap().status(), 400);
    assert_eq!(post(r#"{"prompt": "a", "strategy": "temperature"}"#).await.unwrap().status(), 400);
}

#[tokio::test]
async fn swarm_status_reflects_registry() {
    let (swarm, url) = setup().await;
    let status: SwarmStatus = reqwest::get(format!("http://{url}/api/v1/swarm"))
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(status.coverage, vec![1, 1, 1, 1]);
    assert_eq!(status.bottleneck, 10.0);
    assert_eq!(status.servers.len(), 2);
    assert_eq!(status.servers[0].address, swarm.server(0).addr());
}

#[tokio::test]
async fn missing_coverage_is_503() {
    let (swarm, url) = setup().await;
    swarm.kill(0);
    swarm.kill(1);
    let resp = reqwest::Client::new()
        .post(format!("http://{url}/api/v1/generate"))
        .json(&GenerateRequest::greedy("hi", 3))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 503);
    let body: serde_json::Value = resp.json().await.unwrap();
    assert_eq!(body["missing_blocks"], serde_json::json!([0, 1, 2, 3]));
}

#[tokio::test]
async fn stream_yields_one_frame_per_token() {
    let (swarm, url) = setup().await;
    let mut req = format!("ws://{url}/api/v1/stream").into_client_request().unwrap();
    req.headers_mut()
        .insert("Sec-WebSocket-Protocol", STREAM_PROTOCOL.parse().unwrap());
    let (mut ws, resp) = tokio_tungstenite::connect_async(req).await.unwrap();
    assert_eq!(
        resp.headers().get("sec-websocket-protocol").unwrap(),
        STREAM_PROTOCOL
    );
    let body = serde_json::to_string(&GenerateRequest::greedy("stream me", 7)).unwrap();
    ws.send(Message::Text(body.into())).await.unwrap();
    let mut text = String::new();
    let mut tokens = 0;
    let mut done = 0;
    while let Some(msg) = ws.next().await {
        let Message::Text(t) = msg.unwrap() else { continue };
        match serde_json::from_str::<StreamFrame>(&t).unwrap() {
            StreamFrame::Token { text: piece } => {
                tokens += 1;
                text.push_str(&piece);
            }
            StreamFrame::Done { steps_per_s } => {
                assert!(steps_per_s > 0.0);
                done += 1;
            }
            StreamFrame::Error { message, .. } => panic!("{message}"),
        }
    }
    assert_eq!((tokens, done), (7, 1));
    assert_eq!(text, expected(&swarm.ckpt, "stream me", 7));
}

#[tokio::test]
async fn stream_reports_bad_requests_as_error_frames() {
    let (_swarm, url) = setup().await;
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{url}/api/v1/stream")).await.unwrap();
    ws.send(Message::Text(r#"{"prompt": ""}"#.into())).await.unwrap();
    let Some(Ok(Message::Text(t))) = ws.next().await else { panic!("no frame") };
    let frame: StreamFrame = serde_json::from_str(&t).unwrap();
    assert!(matches!(frame, StreamFrame::Error { code: 400, .. }));
}

#[tokio::test]
async fn concurrent_requests_match_sequential_ones() {
    let (_swarm, url) = setup().await;
    let http = reqwest::Client::new();
    let prompts = ["ab", "cd", "ef"];
    let run = |p: &'static str| {
        let http = http.clone();
        let url = url.clone();
        async move {
            http.post(format!("http://{url}/api/v1/generate"))
                .json(&GenerateRequest::greedy(p, 6))
                .send()
                .await
                .unwrap()
                .json::<GenerateResponse>()
                .await
                .unwrap()
                .text
        }
    };
    let parallel = futures::future::join_all(prompts.iter().map(|p| run(p))).await;
    for (p, got) in prompts.iter().zip(parallel) {
        assert_eq!(got, run(p).await);
    }
}
