//! One pre-LayerNorm transformer block: causal ALiBi attention with a KV
//! cache, then a GELU MLP, each wrapped in a residual connection.

use crate::error::{Error, Result};
use crate::model::checkpoint::{BlockWeights, LayerNormWeights};
use crate::model::config::{alibi_slope, ModelConfig};
use crate::ops;
use crate::quant::{quantize_weights_int8, Int8Weights};

/// A projection `x [n x in] -> [n x out]`, stored dense or as mixed int8.
#[derive(Debug, Clone)]
pub enum Linear {
    Dense {
        w: Vec<f32>,
        inputs: usize,
        outputs: usize,
    },
    /// Holds the transposed matrix so that input features are the columns.
    Int8(Int8Weights),
}

impl Linear {
    pub fn dense(w: Vec<f32>, inputs: usize, outputs: usize) -> Self {
        Linear::Dense { w, inputs, outputs }
    }

    pub fn int8(w: &[f32], inputs: usize, outputs: usize, threshold: f32) -> Result<Self> {
        let mut wt = vec![0.0f32; w.len()];
        for i in 0..inputs {
            for o in 0..outputs {
                wt[o * inputs + i] = w[i * outputs + o];
            }
        }
        Ok(Linear::Int8(quantize_weights_int8(&wt, outputs, inputs, threshold)?))
    }

    pub fn inputs(&self) -> usize {
        match self {
            Linear::Dense { inputs, .. } => *inputs,
            Linear::Int8(q) => q.cols,
        }
    }

    pub fn outputs(&self) -> usize {
        match self {
            Linear::Dense { outputs, .. } => *outputs,
            Linear::Int8(q) => q.rows,
        }
    }

    pub fn forward(&self, x: &[f32], n: usize) -> Vec<f32> {
        match self {
            Linear::Dense { w, inputs, outputs } => ops::matmul(x, w, n, *inputs, *outputs),
            Linear::Int8(q) => q.apply_rows(x, n).expect("shape checked by caller"),
        }
    }

    /// Stored parameters as bytes, in whatever form this projection keeps them.
    pub fn param_bytes(&self, out: &mut Vec<u8>) {
        match self {
            Linear::Dense { w, .. } => w.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Linear::Int8(q) => {
                out.extend(q.regular.iter().map(|&c| c as u8));
                for x in q.col_scales.iter().chain(&q.outlier_data) {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }

    /// `grad [n x out] -> grad . W^T [n x in]`
    pub fn backward_input(&self, grad: &[f32], n: usize) -> Vec<f32> {
        match self {
            Linear::Dense { w, inputs, outputs } => ops::matmul_bt(grad, w, n, *outputs, *inputs),
            Linear::Int8(q) => ops::matmul(grad, &q.reconstruct(), n, q.rows, q.cols),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    /// `[len x hidden]`, heads interleaved along the row.
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
    width: usize,
}

impl KvCache {
    pub fn new(hidden: usize) -> Self {
        Self {
            keys: Vec::new(),
            values: Vec::new(),
            width: hidden,
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn clear(&mut self) {
        self.keys.clear();
        self.values.clear();
    }
}

/// Everything the backward pass needs from one forward call.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTape {
    pub t: usize,
    pub start_pos: usize,
    pub x: Vec<f32>,
    pub ln1_xhat: Vec<f32>,
    pub ln1_rstd: Vec<f32>,
    pub q: Vec<f32>,
    /// Keys and values over all `start_pos + t` positions.
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
    /// `[heads x t x (start_pos + t)]`, zero above the causal diagonal.
    pub probs: Vec<f32>,
    pub attn: Vec<f32>,
    pub h1: Vec<f32>,
    pub ln2_xhat: Vec<f32>,
    pub ln2_rstd: Vec<f32>,
    pub pre: Vec<f32>,
    pub act: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Block {
    hidden: usize,
    n_heads: usize,
    max_seq: usize,
    ln1: LayerNormWeights,
    qkv: Linear,
    b_qkv: Vec<f32>,
    out: Linear,
    b_o: Vec<f32>,
    ln2: LayerNormWeights,
    mlp_in: Linear,
    b_in: Vec<f32>,
    mlp_out: Linear,
    b_out: Vec<f32>,
}

impl Block {
    pub fn dense(cfg: &ModelConfig, w: &BlockWeights) -> Self {
        let d = cfg.hidden;
        let m = cfg.mlp_hidden();
        Self {
            hidden: d,
            n_heads: cfg.n_heads,
            max_seq: cfg.max_seq,
            ln1: w.ln1.clone(),
            qkv: Linear::dense(w.w_qkv.clone(), d, 3 * d),
            b_qkv: w.b_qkv.clone(),
            out: Linear::dense(w.w_o.clone(), d, d),
            b_o: w.b_o.clone(),
            ln2: w.ln2.clone(),
            mlp_in: Linear::dense(w.w_in.clone(), d, m),
            b_in: w.b_in.clone(),
            mlp_out: Linear::dense(w.w_out.clone(), m, d),
            b_out: w.b_out.clone(),
        }
    }

    /// Same block with every projection stored as mixed int8.
    pub fn int8(cfg: &ModelConfig, w: &BlockWeights, threshold: f32) -> Result<Self> {
        let d = cfg.hidden;
        let m = cfg.mlp_hidden();
        let mut b = Self::dense(cfg, w);
        b.qkv = Linear::int8(&w.w_qkv, d, 3 * d, threshold)?;
        b.out = Linear::int8(&w.w_o, d, d, threshold)?;
        b.mlp_in = Linear::int8(&w.w_in, d, m, threshold)?;
        b.mlp_out = Linear::int8(&w.w_out, m, d, threshold)?;
        Ok(b)
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Every parameter the block holds, serialized in a fixed order.
    pub fn param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let floats = |out: &mut Vec<u8>, v: &[f32]| v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        floats(&mut out, &self.ln1.gamma);
        floats(&mut out, &self.ln1.beta);
        self.qkv.param_bytes(&mut out);
        floats(&mut out, &self.b_qkv);
        self.out.param_bytes(&mut out);
        floats(&mut out, &self.b_o);
        floats(&mut out, &self.ln2.gamma);
        floats(&mut out, &self.ln2.beta);
        self.mlp_in.param_bytes(&mut out);
        floats(&mut out, &self.b_in);
        self.mlp_out.param_bytes(&mut out);
        floats(&mut out, &self.b_out);
        out
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(self.hidden)
    }

    /// Runs `t` new positions starting at `start_pos`, appending their keys
    /// and values to `cache`.
    pub fn forward(
        &self,
        hidden: &[f32],
        cache: &mut KvCache,
        start_pos: usize,
        want_tape: bool,
    ) -> Result<(Vec<f32>, Option<ActivationTape>)> {
        let d = self.hidden;
        if hidden.is_empty() || !hidden.len().is_multiple_of(d) {
            return Err(Error::input(format!(
                "hidden has {} values, not a positive multiple of {d}",
                hidden.len()
            )));
        }
        if cache.width != d {
            return Err(Error::input("cache width does not match block"));
        }
        let t = hidden.len() / d;
        if start_pos != cache.len() {
            return Err(Error::input(format!(
                "start_pos {start_pos} does not match cache length {}",
                cache.len()
            )));
        }
        if start_pos + t > self.max_seq {
            return Err(Error::Capacity(format!(
                "positions {}..{} exceed max_seq {}",
                start_pos,
                start_pos + t,
                self.max_seq
            )));
        }

        let (ln1_out, ln1_xhat, ln1_rstd) =
            ops::layer_norm(hidden, &self.ln1.gamma, &self.ln1.beta, d);
        let mut qkv = self.qkv.forward(&ln1_out, t);
        ops::add_bias(&mut qkv, &self.b_qkv);
        let mut q = Vec::with_capacity(t * d);
        for row in qkv.chunks(3 * d) {
            q.extend_from_slice(&row[..d]);
            cache.keys.extend_from_slice(&row[d..2 * d]);
            cache.values.extend_from_slice(&row[2 * d..]);
        }

        let total = start_pos + t;
        let hd = d / self.n_heads;
        let scale = 1.0 / (hd as f32).sqrt();
        let mut attn = vec![0.0f32; t * d];
        let mut probs = if want_tape {
            vec![0.0f32; self.n_heads * t * total]
        } else {
            Vec::new()
        };
        let mut scores = Vec::with_capacity(total);
        for h in 0..self.n_heads {
            let slope = alibi_slope(h, self.n_heads);
            let cols = h * hd..(h + 1) * hd;
            for i in 0..t {
                let pos = start_pos + i;
                let qi = &q[i * d + cols.start..i * d + cols.end];
                scores.clear();
                for j in 0..=pos {
                    let kj = &cache.keys[j * d + cols.start..j * d + cols.end];
                    scores.push(ops::dot(qi, kj) * scale + slope * (j as f32 - pos as f32));
                }
                ops::softmax_in_place(&mut scores);
                let out = &mut attn[i * d + cols.start..i * d + cols.end];
                for (j, &p) in scores.iter().enumerate() {
                    let vj = &cache.values[j * d + cols.start..j * d + cols.end];
                    for (o, &v) in out.iter_mut().zip(vj) {
                        *o += p * v;
                    }
                }
                if want_tape {
                    let base = (h * t + i) * total;
                    probs[base..base + scores.len()].copy_from_slice(&scores);
                }
            }
        }

        let mut h1 = self.out.forward(&attn, t);
        ops::add_bias(&mut h1, &self.b_o);
        ops::add_in_place(&mut h1, hidden);

        let (ln2_out, ln2_xhat, ln2_rstd) =
            ops::layer_norm(&h1, &self.ln2.gamma, &self.ln2.beta, d);
        let mut pre = self.mlp_in.forward(&ln2_out, t);
        ops::add_bias(&mut pre, &self.b_in);
        let act: Vec<f32> = pre.iter().map(|&v| ops::gelu(v)).collect();
        let mut y = self.mlp_out.forward(&act, t);
        ops::add_bias(&mut y, &self.b_out);
        ops::add_in_place(&mut y, &h1);

        let tape = want_tape.then(|| ActivationTape {
            t,
            start_pos,
            x: hidden.to_vec(),
            ln1_xhat,
            ln1_rstd,
            q,
            keys: cache.keys.clone(),
            values: cache.values.clone(),
            probs,
            attn,
            h1,
            ln2_xhat,
            ln2_rstd,
            pre,
            act,
        });
        Ok((y, tape))
    }

    /// Gradient of the block output with respect to its new input rows.
    /// Cached keys and values from earlier calls are treated as constants.
    pub fn backward(&self, tape: &ActivationTape, grad_out: &[f32]) -> Result<Vec<f32>> {
        let d = self.hidden;
        let t = tape.t;
        if grad_out.len() != t * d || tape.x.len() != t * d {
            return Err(Error::input(format!(
                "gradient has {} values, tape expects {}",
                grad_out.len(),
                t * d
            )));
        }
        let m = self.mlp_in.outputs();

        // MLP branch.
        let d_act = self.mlp_out.backward_input(grad_out, t);
        let d_pre: Vec<f32> = d_act
            .iter()
            .zip(&tape.pre)
            .map(|(g, &x)| g * ops::gelu_grad(x))
            .collect();
        debug_assert_eq!(d_pre.len(), t * m);
        let d_ln2 = self.mlp_in.backward_input(&d_pre, t);
        let mut d_h1 =
            ops::layer_norm_backward(&d_ln2, &tape.ln2_xhat, &tape.ln2_rstd, &self.ln2.gamma, d);
        ops::add_in_place(&mut d_h1, grad_out);

        // Attention branch.
        let d_attn = self.out.backward_input(&d_h1, t);
        let total = tape.start_pos + t;
        let hd = d / self.n_heads;
        let scale = 1.0 / (hd as f32).sqrt();
        let mut d_qkv = vec![0.0f32; t * 3 * d];
        let mut d_keys = vec![0.0f32; total * d];
        let mut d_values = vec![0.0f32; total * d];
        let mut d_scores = vec![0.0f32; total];
        for h in 0..self.n_heads {
            let cols = h * hd..(h + 1) * hd;
            for i in 0..t {
                let pos = tape.start_pos + i;
                let p_row = &tape.probs[(h * t + i) * total..(h * t + i) * total + pos + 1];
                let d_oi = &d_attn[i * d + cols.start..i * d + cols.end];
                let mut weighted = 0.0f32;
                for j in 0..=pos {
                    let vj = &tape.values[j * d + cols.start..j * d + cols.end];
                    let dp = ops::dot(d_oi, vj);
                    d_scores[j] = dp;
                    weighted += dp * p_row[j];
                    let dv = &mut d_values[j * d + cols.start..j * d + cols.end];
                    for (a, &g) in dv.iter_mut().zip(d_oi) {
                        *a += p_row[j] * g;
                    }
                }
                let qi = &tape.q[i * d + cols.start..i * d + cols.end];
                let dq = &mut d_qkv[i * 3 * d + cols.start..i * 3 * d + cols.end];
                for j in 0..=pos {
                    let ds = p_row[j] * (d_scores[j] - weighted) * scale;
                    let kj = &tape.keys[j * d + cols.start..j * d + cols.end];
                    for (a, &k) in dq.iter_mut().zip(kj) {
                        *a += ds * k;
                    }
                    let dk = &mut d_keys[j * d + cols.start..j * d + cols.end];
                    for (a, &qv) in dk.iter_mut().zip(qi) {
                        *a += ds * qv;
                    }
                }
            }
        }
        for i in 0..t {
            let j = tape.start_pos + i;
            let row = &mut d_qkv[i * 3 * d..(i + 1) * 3 * d];
            row[d..2 * d].copy_from_slice(&d_keys[j * d..(j + 1) * d]);
            row[2 * d..].copy_from_slice(&d_values[j * d..(j + 1) * d]);
        }
        let d_ln1 = self.qkv.backward_input(&d_qkv, t);
        let mut d_x =
            ops::layer_norm_backward(&d_ln1, &tape.ln1_xhat, &tape.ln1_rstd, &self.ln1.gamma, d);
        ops::add_in_place(&mut d_x, &d_h1);
        Ok(d_x)
    }
}

/// Functional form of [`Block::forward`] over raw weights.
pub fn block_forward(
    cfg: &ModelConfig,
    w: &BlockWeights,
    hidden: &[f32],
    cache: &mut KvCache,
    start_pos: usize,
    want_tape: bool,
) -> Result<(Vec<f32>, Option<ActivationTape>)> {
    Block::dense(cfg, w).forward(hidden, cache, start_pos, want_tape)
}

pub fn block_backward(
    cfg: &ModelConfig,
    w: &BlockWeights,
    tape: &ActivationTape,
    grad_out: &[f32],
) -> Result<Vec<f32>> {
    Block::dense(cfg, w).backward(tape, grad_out)
}
