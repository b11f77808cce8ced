use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use swarm_core::footprint::{memory_footprint, offload_upper_bound};
use swarm_core::model::{gen_checkpoint, HeadWeights};
use swarm_core::wire::WireEncoding;
use swarm_core::{Checkpoint, ModelConfig};
use swarm_node::client::{ClientConfig, SwarmClient};
use swarm_node::events::EventLog;
use swarm_node::gateway::{serve_gateway, token_text, GatewayConfig, GenerateRequest, Strategy};
use swarm_node::harness::{bench_inference, bench_table, churn_sim, BenchConfig, ChurnScenario, ServerSpec};
use swarm_node::registry::{RegistryNode, DEFAULT_GOSSIP_PERIOD};
use swarm_node::server::{start_server, BlockPolicy, QuantMode, RebalanceConfig, ServerConfig};
use swarm_node::shaper::LinkShape;
use tokio::net::TcpListener;

#[derive(Parser)]
#[command(name = "swarm", version, about = "Pipeline-parallel transformer swarm")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a seeded toy checkpoint.
    Genmodel(GenmodelArgs),
    /// Runs a standalone registry replica that servers and clients bootstrap from.
    Registry(RegistryArgs),
    /// Serves a contiguous range of transformer blocks.
    Server(ServerArgs),
    /// Serves the HTTP and WebSocket API in front of a swarm.
    Gateway(GatewayArgs),
    /// Generates text through a running swarm.
    Generate(GenerateArgs),
    /// Measures inference and forward throughput on an in-process swarm.
    Bench(BenchArgs),
    /// Replays a kill/start/partition script against an in-process swarm.
    Churn(ChurnArgs),
    /// Seconds per full-model pass when weights stream over a link.
    OffloadBound(OffloadArgs),
    /// Weight memory and the number of servers needed to hold it.
    Footprint(FootprintArgs),
}

#[derive(Args)]
struct GenmodelArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 12)]
    layers: usize,
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long, default_value_t = 256)]
    vocab: usize,
    #[arg(long, default_value_t = 128)]
    max_seq: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct NetArgs {
    /// Registry replicas, comma separated.
    #[arg(long, value_delimiter = ',')]
    bootstrap: Vec<String>,
    /// Emulated link as `latency_ms:bandwidth_mbps`, bandwidth may be `inf`.
    #[arg(long)]
    shape: Option<LinkShape>,
}

impl NetArgs {
    fn shape(&self) -> Option<LinkShape> {
        self.shape.or_else(LinkShape::from_env)
    }
}

#[derive(Args)]
struct RegistryArgs {
    #[arg(long, default_value = "127.0.0.1:7000")]
    listen: String,
    /// Other registry replicas to gossip with.
    #[arg(long, value_delimiter = ',')]
    peers: Vec<String>,
    #[arg(long)]
    shape: Option<LinkShape>,
}

#[derive(Args)]
struct ServerArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: String,
    /// `auto` or `start:end`.
    #[arg(long, default_value = "auto")]
    blocks: BlockPolicy,
    #[arg(long, default_value_t = 1)]
    span: usize,
    #[arg(long, default_value = "none")]
    quantize: QuantMode,
    /// Announce this throughput instead of measuring it.
    #[arg(long)]
    throughput: Option<f64>,
    #[arg(long)]
    no_rebalance: bool,
    #[arg(long, default_value_t = 64)]
    capacity: usize,
    #[command(flatten)]
    net: NetArgs,
}

#[derive(Args)]
struct GatewayArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: String,
    /// Directory of static UI files served at `/`.
    #[arg(long)]
    static_dir: Option<PathBuf>,
    #[arg(long, default_value_t = swarm_node::gateway::DEFAULT_PER_IP_LIMIT)]
    per_ip_limit: usize,
    #[command(flatten)]
    net: NetArgs,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 32)]
    max_new_tokens: usize,
    /// Samples with this temperature instead of greedy decoding.
    #[arg(long)]
    temperature: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sends activations as blockwise int8.
    #[arg(long)]
    int8: bool,
    #[command(flatten)]
    net: NetArgs,
}

#[derive(Args)]
struct ModelSource {
    /// Checkpoint file; a seeded toy model is generated when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    model_seed: u64,
}

impl ModelSource {
    fn load(&self, max_seq: usize) -> Result<Arc<Checkpoint>> {
        Ok(Arc::new(match &self.checkpoint {
            Some(path) => load_checkpoint(path)?,
            None => gen_checkpoint(self.model_seed, ModelConfig::new(12, 256, 8, 256, max_seq))?,
        }))
    }
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelSource,
    #[arg(long, default_value = "local")]
    scenario: String,
    /// Server ranges such as `0:4,4:8,8:12`, or `auto` entries placed by the servers.
    #[arg(long, value_delimiter = ',', default_value = "0:4,4:8,8:12")]
    servers: Vec<String>,
    #[arg(long, default_value_t = 4)]
    span: usize,
    /// Link shapes; one report (or table row) per entry.
    #[arg(long, value_delimiter = ',')]
    shape: Vec<String>,
    #[arg(long, default_value_t = 16)]
    prompt_len: usize,
    #[arg(long, default_value_t = 32)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 32)]
    forward_len: usize,
    #[arg(long, default_value_t = 1)]
    clients: usize,
    #[arg(long, default_value_t = 3)]
    runs: usize,
    /// Emits a grid of shapes × sequence lengths × batch sizes instead.
    #[arg(long)]
    table: bool,
    #[arg(long, value_delimiter = ',', default_value = "32,128")]
    seq_lens: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,16")]
    batches: Vec<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ChurnArgs {
    #[arg(long)]
    script: PathBuf,
    /// Checkpoint file; otherwise generated from the script's seed.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OffloadArgs {
    #[arg(long)]
    params: f64,
    #[arg(long, default_value_t = 8)]
    bits: u32,
    /// Link speed in Gbit/s.
    #[arg(long)]
    link: f64,
}

#[derive(Args)]
struct FootprintArgs {
    #[arg(long)]
    params: f64,
    #[arg(long, default_value_t = 16)]
    bits: u32,
    /// Memory per server in GB.
    #[arg(long)]
    server_gb: f64,
}

fn load_checkpoint(path: &PathBuf) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn parse_servers(items: &[String], span: usize) -> Result<Vec<ServerSpec>> {
    items
        .iter()
        .map(|s| match s.as_str() {
            "auto" => Ok(ServerSpec::auto(span)),
            range => match range.split_once(':') {
                Some((a, b)) => Ok(ServerSpec::range(a.parse()?, b.parse()?)),
                None => bail!("bad server spec {range:?}: expected start:end or auto"),
            },
        })
        .collect()
}

fn emit<T: Serialize>(value: &T, out: Option<&PathBuf>) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => std::fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))?,
        None => println!("{json}"),
    }
    Ok(())
}

async fn wait_for_shutdown() -> Result<()> {
    tokio::signal::ctrl_c().await.context("waiting for ctrl-c")
}

fn client_for(checkpoint: &PathBuf, net: &NetArgs, encoding: WireEncoding) -> Result<SwarmClient> {
    if net.bootstrap.is_empty() {
        bail!("--bootstrap is required");
    }
    let ckpt = load_checkpoint(checkpoint)?;
    let cfg = ClientConfig {
        bootstrap: net.bootstrap.clone(),
        shape: net.shape(),
        encoding,
        ..ClientConfig::default()
    };
    Ok(SwarmClient::new(cfg, Arc::new(HeadWeights::from_checkpoint(&ckpt)), EventLog::new()))
}

async fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Genmodel(a) => {
            let ckpt = gen_checkpoint(a.seed, ModelConfig::new(a.layers, a.hidden, a.heads, a.vocab, a.max_seq))?;
            ckpt.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
            println!("wrote {} ({} blocks)", a.out.display(), a.layers);
        }
        Command::Registry(a) => {
            let node = RegistryNode::start(&a.listen, a.peers, DEFAULT_GOSSIP_PERIOD, a.shape.or_else(LinkShape::from_env))
                .await
                .with_context(|| format!("listening on {}", a.listen))?;
            println!("registry listening on {}", node.addr);
            wait_for_shutdown().await?;
            node.stop();
        }
        Command::Server(a) => {
            let ckpt = Arc::new(load_checkpoint(&a.checkpoint)?);
            let cfg = ServerConfig {
                listen: a.listen,
                blocks: a.blocks,
                span: a.span,
                quantize: a.quantize,
                bootstrap: a.net.bootstrap.clone(),
                shape: a.net.shape(),
                capacity: a.capacity,
                rebalance: (!a.no_rebalance).then(RebalanceConfig::default),
                throughput: a.throughput,
                ..ServerConfig::default()
            };
            let handle = start_server(cfg, ckpt, EventLog::new()).await?;
            let node = &handle.node;
            println!(
                "server {} serving blocks {} on {}",
                node.server_id(),
                node.range(),
                handle.addr()
            );
            wait_for_shutdown().await?;
            handle.shutdown().await;
        }
        Command::Gateway(a) => {
            let client = client_for(&a.checkpoint, &a.net, WireEncoding::F32)?;
            let listener = TcpListener::bind(&a.listen)
                .await
                .with_context(|| format!("listening on {}", a.listen))?;
            println!("gateway listening on http://{}", listener.local_addr()?);
            let cfg = GatewayConfig {
                per_ip_limit: a.per_ip_limit,
                static_dir: a.static_dir,
            };
            tokio::select! {
                r = serve_gateway(listener, client, cfg) => r?,
                r = wait_for_shutdown() => r?,
            }
        }
        Command::Generate(a) => {
            let encoding = if a.int8 { WireEncoding::Int8 } else { WireEncoding::F32 };
            let client = client_for(&a.checkpoint, &a.net, encoding)?;
            let req = GenerateRequest {
                strategy: if a.temperature.is_some() { Strategy::Temperature } else { Strategy::Greedy },
                temperature: a.temperature,
                seed: a.seed,
                ..GenerateRequest::greedy(a.prompt, a.max_new_tokens)
            };
            let tokens = req.tokens(client.head().config.max_seq).map_err(anyhow::Error::msg)?;
            let mut sampler = req.sampler().map_err(anyhow::Error::msg)?;
            let out = client
                .generate(&tokens, a.max_new_tokens, &mut sampler, |t| {
                    print!("{}", token_text(t));
                    let _ = std::io::Write::flush(&mut std::io::stdout());
                })
                .await?;
            println!();
            eprintln!("{:.2} steps/s, {} recoveries", out.steps_per_s, out.recoveries);
        }
        Command::Bench(a) => {
            let servers = parse_servers(&a.servers, a.span)?;
            let shapes: Vec<Option<String>> = if a.shape.is_empty() {
                vec![None]
            } else {
                a.shape.iter().map(|s| Some(s.clone())).collect()
            };
            for s in shapes.iter().flatten() {
                s.parse::<LinkShape>()?;
            }
            if a.table {
                let need = a.seq_lens.iter().max().copied().unwrap_or(0) + a.steps;
                let ckpt = a.model.load(need.max(a.forward_len).max(128))?;
                let table = bench_table(ckpt, &servers, &shapes, &a.seq_lens, &a.batches, a.steps, a.forward_len).await?;
                eprint!("{}", table.render());
                emit(&table, a.out.as_ref())?;
            } else {
                let ckpt = a.model.load(128)?;
                let mut reports = Vec::new();
                for shaping in shapes {
                    let cfg = BenchConfig {
                        scenario: a.scenario.clone(),
                        servers: servers.clone(),
                        shaping,
                        prompt_len: a.prompt_len,
                        steps: a.steps,
                        batch: a.batch,
                        forward_len: a.forward_len,
                        n_clients: a.clients,
                        runs: a.runs,
                    };
                    let r = bench_inference(ckpt.clone(), &cfg).await?;
                    eprintln!(
                        "{:<12} {:>8.2} steps/s  {:>10.1} forward tok/s{}",
                        cfg.shaping.as_deref().unwrap_or("loopback"),
                        r.single_batch_steps_per_s,
                        r.parallel_forward_tokens_per_s,
                        r.mean_slowdown
                            .map(|m| format!("  mean slowdown {:.1}%", m * 100.0))
                            .unwrap_or_default()
                    );
                    reports.push(r);
                }
                emit(&reports, a.out.as_ref())?;
            }
        }
        Command::Churn(a) => {
            let text = std::fs::read_to_string(&a.script).with_context(|| format!("reading {}", a.script.display()))?;
            let scenario: ChurnScenario = serde_json::from_str(&text).context("parsing churn script")?;
            let ckpt = Arc::new(match &a.checkpoint {
                Some(path) => load_checkpoint(path)?,
                None => gen_checkpoint(scenario.seed, ModelConfig::new(12, 256, 8, 256, 128))?,
            });
            let metrics = churn_sim(ckpt, &scenario).await?;
            emit(&metrics, a.out.as_ref())?;
        }
        Command::OffloadBound(a) => {
            if !(a.params >= 0.0) || !(a.link > 0.0) || a.bits == 0 {
                bail!("params must be non-negative, bits and link positive");
            }
            let secs = offload_upper_bound(a.params as u64, a.bits, a.link);
            println!("{secs} s per full-model pass");
        }
        Command::Footprint(a) => {
            if !(a.params >= 0.0) || !(a.server_gb > 0.0) || a.bits == 0 {
                bail!("params must be non-negative, bits and server memory positive");
            }
            let r = memory_footprint(a.params as u64, a.bits, (a.server_gb * 1e9) as u64);
            println!("{} bytes of weights, {} servers", r.bytes_total, r.servers_needed);
        }
    }
    Ok(())
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    run(Cli::parse()).await
}
