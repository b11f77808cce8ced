//! Client-owned parameters for soft-prompt classification: trainable prompt
//! rows prepended to the token embeddings, and a linear head over the last
//! position's representation. Server-side blocks never change.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{HeadWeights, LayerNormWeights};
use crate::ops;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const ADAPTER_MAGIC: &[u8; 4] = b"PTAD";
pub const ADAPTER_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTuneState {
    pub pre_seq_len: usize,
    pub hidden: usize,
    pub n_classes: usize,
    /// `[pre_seq_len x hidden]`
    pub prompts: Vec<f32>,
    /// `[hidden x n_classes]`
    pub head_w: Vec<f32>,
    pub head_b: Vec<f32>,
    /// Adam moments over `prompts ++ head_w ++ head_b`.
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

/// Gradients for every trainable parameter, laid out like the state.
#[derive(Debug, Clone, PartialEq)]
pub struct TuneGrads {
    pub prompts: Vec<f32>,
    pub head_w: Vec<f32>,
    pub head_b: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub loss: f32,
    /// `[batch x n_classes]`
    pub logits: Vec<f32>,
    /// Gradient with respect to the block outputs, same shape as them.
    pub grad_hidden: Tensor,
    pub grad_head_w: Vec<f32>,
    pub grad_head_b: Vec<f32>,
}

impl PromptTuneState {
    pub fn new(pre_seq_len: usize, hidden: usize, n_classes: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::keyed(seed, "prompts");
        let prompts = (0..pre_seq_len * hidden)
            .map(|_| rng.next_uniform_f32(-0.05, 0.05))
            .collect();
        let mut rng = SplitMix64::keyed(seed, "head.weight");
        let head_w = (0..hidden * n_classes)
            .map(|_| rng.next_uniform_f32(-0.05, 0.05))
            .collect();
        let n = pre_seq_len * hidden + hidden * n_classes + n_classes;
        Self {
            pre_seq_len,
            hidden,
            n_classes,
            prompts,
            head_w,
            head_b: vec![0.0; n_classes],
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn n_params(&self) -> usize {
        self.prompts.len() + self.head_w.len() + self.head_b.len()
    }

    /// `[batch, pre_seq_len + t, hidden]`: prompt rows then token embeddings.
    pub fn build_inputs(&self, head: &HeadWeights, batch: &[Vec<u32>]) -> Result<Tensor> {
        let t = batch.first().map(Vec::len).unwrap_or(0);
        if batch.is_empty() || t == 0 {
            return Err(Error::input("empty training batch"));
        }
        if batch.iter().any(|s| s.len() != t) {
            return Err(Error::input("all sequences in a batch must share one length"));
        }
        if head.config.hidden != self.hidden {
            return Err(Error::input("prompt width does not match the model"));
        }
        let mut data = Vec::with_capacity(batch.len() * (self.pre_seq_len + t) * self.hidden);
        for seq in batch {
            data.extend_from_slice(&self.prompts);
            data.extend(head.embed(seq)?);
        }
        Tensor::new(vec![batch.len(), self.pre_seq_len + t, self.hidden], data)
    }

    /// Cross-entropy of the head over the final layer-normed last position,
    /// with gradients for the head and for the block outputs.
    pub fn head_loss(
        &self,
        final_ln: &LayerNormWeights,
        outputs: &Tensor,
        labels: &[usize],
    ) -> Result<HeadOutput> {
        let [b, s, d] = outputs.shape[..] else {
            return Err(Error::input("outputs must be [batch, seq, hidden]"));
        };
        if d != self.hidden || labels.len() != b {
            return Err(Error::input("outputs or labels do not match the batch"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.n_classes) {
            return Err(Error::input(format!("label {bad} outside {} classes", self.n_classes)));
        }
        let c = self.n_classes;
        let mut pooled = Vec::with_capacity(b * d);
        for i in 0..b {
            let last = (i * s + s - 1) * d;
            pooled.extend_from_slice(&outputs.data[last..last + d]);
        }
        let (normed, xhat, rstd) = ops::layer_norm(&pooled, &final_ln.gamma, &final_ln.beta, d);
        let mut logits = ops::matmul(&normed, &self.head_w, b, d, c);
        ops::add_bias(&mut logits, &self.head_b);

        let mut loss = 0.0f32;
        let mut d_logits = vec![0.0f32; b * c];
        for i in 0..b {
            let mut probs = logits[i * c..(i + 1) * c].to_vec();
            ops::softmax_in_place(&mut probs);
            loss -= probs[labels[i]].max(f32::MIN_POSITIVE).ln();
            for k in 0..c {
                let target = if k == labels[i] { 1.0 } else { 0.0 };
                d_logits[i * c + k] = (probs[k] - target) / b as f32;
            }
        }
        loss /= b as f32;
        if !loss.is_finite() {
            return Err(Error::input(format!("loss is not finite ({loss})")));
        }

        // head_w gradient: normed^T . d_logits
        let mut grad_head_w = vec![0.0f32; d * c];
        for i in 0..b {
            for r in 0..d {
                let x = normed[i * d + r];
                for k in 0..c {
                    grad_head_w[r * c + k] += x * d_logits[i * c + k];
                }
            }
        }
        let mut grad_head_b = vec![0.0f32; c];
        for row in d_logits.chunks(c) {
            ops::add_in_place(&mut grad_head_b, row);
        }
        let d_normed = ops::matmul_bt(&d_logits, &self.head_w, b, c, d);
        let d_pooled = ops::layer_norm_backward(&d_normed, &xhat, &rstd, &final_ln.gamma, d);
        let mut grad_hidden = Tensor::zeros(outputs.shape.clone());
        for i in 0..b {
            let last = (i * s + s - 1) * d;
            grad_hidden.data[last..last + d].copy_from_slice(&d_pooled[i * d..(i + 1) * d]);
        }
        Ok(HeadOutput {
            loss,
            logits,
            grad_hidden,
            grad_head_w,
            grad_head_b,
        })
    }

    /// Sums the prompt rows' input gradients over the batch.
    pub fn prompt_grad(&self, grad_inputs: &Tensor) -> Result<Vec<f32>> {
        let [b, s, d] = grad_inputs.shape[..] else {
            return Err(Error::input("gradient must be [batch, seq, hidden]"));
        };
        if d != self.hidden || s < self.pre_seq_len {
            return Err(Error::input("gradient does not cover the prompt rows"));
        }
        let mut g = vec![0.0f32; self.prompts.len()];
        for i in 0..b {
            let base = i * s * d;
            ops::add_in_place(&mut g, &grad_inputs.data[base..base + self.prompts.len()]);
        }
        Ok(g)
    }

    /// One bias-corrected Adam step over prompts and head only.
    pub fn apply_adam(&mut self, grads: &TuneGrads, cfg: &AdamConfig) -> Result<()> {
        if grads.prompts.len() != self.prompts.len()
            || grads.head_w.len() != self.head_w.len()
            || grads.head_b.len() != self.head_b.len()
        {
            return Err(Error::input("gradient shapes do not match parameters"));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let params = self
            .prompts
            .iter_mut()
            .chain(self.head_w.iter_mut())
            .chain(self.head_b.iter_mut());
        let g = grads
            .prompts
            .iter()
            .chain(&grads.head_w)
            .chain(&grads.head_b);
        for (((p, &g), m), v) in params.zip(g).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(ADAPTER_MAGIC)?;
        w.write_all(&[ADAPTER_VERSION])?;
        for v in [self.pre_seq_len, self.hidden, self.n_classes] {
            w.write_all(&(v as u32).to_be_bytes())?;
        }
        w.write_all(&self.step.to_be_bytes())?;
        for arr in [&self.prompts, &self.head_w, &self.head_b, &self.m, &self.v] {
            for x in arr.iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::corrupt(e.to_string()))?;
        if bytes.len() < 25 || &bytes[..4] != ADAPTER_MAGIC {
            return Err(Error::corrupt("not a prompt-tuning checkpoint"));
        }
        if bytes[4] != ADAPTER_VERSION {
            return Err(Error::corrupt(format!("unsupported version {}", bytes[4])));
        }
        let field = |i: usize| u32::from_be_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize;
        let (p, d, c) = (field(0), field(1), field(2));
        let step = u64::from_be_bytes(bytes[17..25].try_into().unwrap());
        let n = p * d + d * c + c;
        let body = &bytes[25..];
        if body.len() != 3 * n * 4 {
            return Err(Error::corrupt("prompt-tuning checkpoint has the wrong length"));
        }
        let floats: Vec<f32> = body
            .chunks_exact(4)
            .map(|ch| f32::from_le_bytes(ch.try_into().unwrap()))
            .collect();
        let (params, moments) = floats.split_at(n);
        Ok(Self {
            pre_seq_len: p,
            hidden: d,
            n_classes: c,
            prompts: params[..p * d].to_vec(),
            head_w: params[p * d..p * d + d * c].to_vec(),
            head_b: params[p * d + d * c..].to_vec(),
            m: moments[..n].to_vec(),
            v: moments[n..].to_vec(),
            step,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::input(e.to_string()))?;
        Self::read_from(&mut f)
    }
}
