use std::sync::Arc;
use std::time::Duration;

use swarm_core::model::{gen_checkpoint, Sampler};
use swarm_core::{Checkpoint, Model, ModelConfig};
use swarm_node::client::ClientConfig;
use swarm_node::events::EventKind;
use swarm_node::harness::{bench_prompt, LocalSwarm, ServerSpec, SwarmOptions};

fn small() -> Arc<Checkpoint> {
    Arc::new(gen_checkpoint(7, ModelConfig::new(4, 32, 4, 256, 64)).unwrap())
}

fn fast_client() -> ClientConfig {
    ClientConfig {
        backoff: vec![Duration::from_millis(100); 3],
        ..ClientConfig::default()
    }
}

#[tokio::test]
async fn two_server_chain_matches_local_model() {
    let ckpt = small();
    let swarm = LocalSwarm::launch(
        ckpt.clone(),
        &[ServerSpec::range(0, 2), ServerSpec::range(2, 4)],
        SwarmOptions::default(),
    )
    .await
    .unwrap();
    let prompt = bench_prompt(5, 256);
    let expected = Model::from_checkpoint(&ckpt)
        .generate(&prompt, 12, &mut Sampler::greedy())
        .unwrap();
    let client = swarm.client(fast_client());
    let got = client.generate(&prompt, 12, &mut Sampler::greedy(), |_| {}).await.unwrap();
    assert_eq!(got.tokens, expected);
    assert_eq!(got.recoveries, 0);
}

#[tokio::test]
async fn killed_hop_is_replaced_and_replayed() {
    let ckpt = small();
    let swarm = LocalSwarm::launch(
        ckpt.clone(),
        &[
            ServerSpec::range(0, 2).with_throughput(100.0),
            ServerSpec::range(2, 4).with_throughput(100.0),
            ServerSpec::range(0, 4).with_throughput(1.0),
        ],
        SwarmOptions::default(),
    )
    .await
    .unwrap();
    let prompt = bench_prompt(4, 256);
    let expected = Model::from_checkpoint(&ckpt)
        .generate(&prompt, 10, &mut Sampler::greedy())
        .unwrap();
    let client = swarm.client(fast_client());
    let mut session = client.open_session(prompt.len() + 9).await.unwrap();
    let first = session.chain()[0].server.address.clone();
    let victim = swarm.index_of(&first).unwrap();
    let head = client.head();
    let d = ckpt.config.hidden;
    let mut input = prompt.clone();
    let mut out = Vec::new();
    for step in 0..10 {
        if step == 5 {
            swarm.kill(victim);
        }
        let x = swarm_core::Tensor::new(vec![input.len(), d], head.embed(&input).unwrap()).unwrap();
        let h = session.step(&x).await.unwrap();
        let logits = head.lm_head(&h.data[h.data.len() - d..]).unwrap();
        let tok = Sampler::greedy().sample(&logits).unwrap();
        out.push(tok);
        input = vec![tok];
    }
    assert_eq!(out, expected);
    assert!(session.recoveries() >= 1);
    assert!(swarm.events.count(|e| matches!(e, EventKind::Recovery { .. })) >= 1);
}
