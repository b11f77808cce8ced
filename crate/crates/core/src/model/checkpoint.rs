//! Deterministic toy weights and the `PTCK` checkpoint file.
//!
//! Layout: magic `PTCK`, version byte, six big-endian u32 config fields
//! (layers, hidden, heads, vocab, max_seq, mlp_ratio), then every tensor in
//! traversal order as little-endian f32.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::rng::SplitMix64;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PTCK";
pub const CHECKPOINT_VERSION: u8 = 1;
const INIT_RANGE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormWeights {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

impl LayerNormWeights {
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
        }
    }
}

/// Raw weights of one transformer block. Matrices are `[in x out]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1: LayerNormWeights,
    pub w_qkv: Vec<f32>,
    pub b_qkv: Vec<f32>,
    pub w_o: Vec<f32>,
    pub b_o: Vec<f32>,
    pub ln2: LayerNormWeights,
    pub w_in: Vec<f32>,
    pub b_in: Vec<f32>,
    pub w_out: Vec<f32>,
    pub b_out: Vec<f32>,
}

impl BlockWeights {
    fn tensors(&self) -> [&Vec<f32>; 12] {
        [
            &self.ln1.gamma,
            &self.ln1.beta,
            &self.w_qkv,
            &self.b_qkv,
            &self.w_o,
            &self.b_o,
            &self.ln2.gamma,
            &self.ln2.beta,
            &self.w_in,
            &self.b_in,
            &self.w_out,
            &self.b_out,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f32>; 12] {
        [
            &mut self.ln1.gamma,
            &mut self.ln1.beta,
            &mut self.w_qkv,
            &mut self.b_qkv,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.ln2.gamma,
            &mut self.ln2.beta,
            &mut self.w_in,
            &mut self.b_in,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.hidden;
        let m = cfg.mlp_hidden();
        Self {
            ln1: LayerNormWeights::identity(d),
            w_qkv: vec![0.0; d * 3 * d],
            b_qkv: vec![0.0; 3 * d],
            w_o: vec![0.0; d * d],
            b_o: vec![0.0; d],
            ln2: LayerNormWeights::identity(d),
            w_in: vec![0.0; d * m],
            b_in: vec![0.0; m],
            w_out: vec![0.0; m * d],
            b_out: vec![0.0; d],
        }
    }

    /// Little-endian bytes of every tensor in traversal order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for t in self.tensors() {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// `[vocab x hidden]`; also the transposed LM head.
    pub embed: Vec<f32>,
    pub blocks: Vec<BlockWeights>,
    pub final_ln: LayerNormWeights,
}

fn fill_uniform(seed: u64, path: &str, out: &mut [f32]) {
    let mut rng = SplitMix64::keyed(seed, path);
    for v in out.iter_mut() {
        *v = rng.next_uniform_f32(-INIT_RANGE, INIT_RANGE);
    }
}

pub fn gen_checkpoint(seed: u64, config: ModelConfig) -> Result<Checkpoint> {
    config.validate()?;
    let d = config.hidden;
    let mut embed = vec![0.0; config.vocab * d];
    fill_uniform(seed, "embed", &mut embed);
    let blocks = (0..config.n_layers)
        .map(|i| {
            let mut b = BlockWeights::zeros(&config);
            fill_uniform(seed, &format!("blocks.{i}.attn.qkv.weight"), &mut b.w_qkv);
            fill_uniform(seed, &format!("blocks.{i}.attn.out.weight"), &mut b.w_o);
            fill_uniform(seed, &format!("blocks.{i}.mlp.in.weight"), &mut b.w_in);
            fill_uniform(seed, &format!("blocks.{i}.mlp.out.weight"), &mut b.w_out);
            b
        })
        .collect();
    Ok(Checkpoint {
        config,
        embed,
        blocks,
        final_ln: LayerNormWeights::identity(d),
    })
}

fn write_f32s(w: &mut impl Write, values: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_f32s(r: &mut impl Read, out: &mut [f32]) -> Result<()> {
    let mut buf = vec![0u8; out.len() * 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::corrupt(format!("truncated checkpoint: {e}")))?;
    for (v, chunk) in out.iter_mut().zip(buf.chunks_exact(4)) {
        *v = f32::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok(())
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let c = &self.config;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&[CHECKPOINT_VERSION])?;
        for field in [c.n_layers, c.hidden, c.n_heads, c.vocab, c.max_seq, c.mlp_ratio] {
            w.write_all(&(field as u32).to_be_bytes())?;
        }
        write_f32s(w, &self.embed)?;
        for b in &self.blocks {
            for t in b.tensors() {
                write_f32s(w, t)?;
            }
        }
        write_f32s(w, &self.final_ln.gamma)?;
        write_f32s(w, &self.final_ln.beta)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut header = [0u8; 5];
        r.read_exact(&mut header)
            .map_err(|_| Error::corrupt("checkpoint header truncated"))?;
        if &header[..4] != CHECKPOINT_MAGIC {
            return Err(Error::corrupt("bad checkpoint magic"));
        }
        if header[4] != CHECKPOINT_VERSION {
            return Err(Error::corrupt(format!(
                "unsupported checkpoint version {}",
                header[4]
            )));
        }
        let mut fields = [0usize; 6];
        for f in fields.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|_| Error::corrupt("checkpoint config truncated"))?;
            *f = u32::from_be_bytes(b) as usize;
        }
        let config = ModelConfig {
            n_layers: fields[0],
            hidden: fields[1],
            n_heads: fields[2],
            vocab: fields[3],
            max_seq: fields[4],
            mlp_ratio: fields[5],
        };
        config.validate().map_err(|e| Error::corrupt(e.to_string()))?;
        let mut embed = vec![0.0; config.vocab * config.hidden];
        read_f32s(r, &mut embed)?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mut b = BlockWeights::zeros(&config);
            for t in b.tensors_mut() {
                read_f32s(r, t)?;
            }
            blocks.push(b);
        }
        let mut final_ln = LayerNormWeights::identity(config.hidden);
        read_f32s(r, &mut final_ln.gamma)?;
        read_f32s(r, &mut final_ln.beta)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| Error::corrupt(e.to_string()))? != 0 {
            return Err(Error::corrupt("trailing bytes after checkpoint"));
        }
        let ckpt = Checkpoint {
            config,
            embed,
            blocks,
            final_ln,
        };
        if !ckpt.is_finite() {
            return Err(Error::corrupt("checkpoint contains non-finite weights"));
        }
        Ok(ckpt)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path.as_ref()).map_err(|e| {
            Error::input(format!("cannot open {}: {e}", path.as_ref().display()))
        })?;
        Self::read_from(&mut std::io::BufReader::new(f))
    }

    pub fn is_finite(&self) -> bool {
        self.embed.iter().all(|v| v.is_finite())
            && self.blocks.iter().all(BlockWeights::is_finite)
            && self
                .final_ln
                .gamma
                .iter()
                .chain(&self.final_ln.beta)
                .all(|v| v.is_finite())
    }
}
