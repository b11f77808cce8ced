//! Straightforward f64 model with no caching, used only to check the f32
//! implementation from tests.

use crate::model::{alibi_slope, BlockWeights, Checkpoint, LayerNormWeights, ModelConfig};
use crate::tuning::PromptTuneState;

const EPS: f64 = 1e-5;

fn wide(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn layer_norm(x: &[f64], ln: &LayerNormWeights, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + EPS).sqrt();
        for (i, v) in row.iter().enumerate() {
            out.push((v - mean) * rstd * ln.gamma[i] as f64 + ln.beta[i] as f64);
        }
    }
    out
}

/// `x [n x k] . w [k x m] + b`
fn linear(x: &[f64], w: &[f32], b: &[f32], k: usize, m: usize) -> Vec<f64> {
    let n = x.len() / k;
    let mut out = vec![0.0; n * m];
    for r in 0..n {
        for c in 0..m {
            let mut acc = b[c] as f64;
            for i in 0..k {
                acc += x[r * k + i] * w[i * m + c] as f64;
            }
            out[r * m + c] = acc;
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// One block over positions `0..t` of a single sequence.
pub fn block_forward(cfg: &ModelConfig, w: &BlockWeights, x: &[f64]) -> Vec<f64> {
    let d = cfg.hidden;
    let t = x.len() / d;
    let hd = d / cfg.n_heads;
    let a = layer_norm(x, &w.ln1, d);
    let qkv = linear(&a, &w.w_qkv, &w.b_qkv, d, 3 * d);
    let mut attn = vec![0.0; t * d];
    for h in 0..cfg.n_heads {
        let slope = alibi_slope(h, cfg.n_heads) as f64;
        for i in 0..t {
            let scores: Vec<f64> = (0..=i)
                .map(|j| {
                    let mut s = 0.0;
                    for c in 0..hd {
                        s += qkv[i * 3 * d + h * hd + c] * qkv[j * 3 * d + d + h * hd + c];
                    }
                    s / (hd as f64).sqrt() + slope * (j as f64 - i as f64)
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                for c in 0..hd {
                    attn[i * d + h * hd + c] += e / z * qkv[j * 3 * d + 2 * d + h * hd + c];
                }
            }
        }
    }
    let mut h1 = linear(&attn, &w.w_o, &w.b_o, d, d);
    for (o, v) in h1.iter_mut().zip(x) {
        *o += v;
    }
    let b = layer_norm(&h1, &w.ln2, d);
    let m = cfg.mlp_hidden();
    let act: Vec<f64> = linear(&b, &w.w_in, &w.b_in, d, m).into_iter().map(gelu).collect();
    let mut y = linear(&act, &w.w_out, &w.b_out, m, d);
    for (o, v) in y.iter_mut().zip(&h1) {
        *o += v;
    }
    y
}

/// Runs blocks `range` over one sequence's hidden states.
pub fn blocks_forward(ckpt: &Checkpoint, range: std::ops::Range<usize>, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for w in &ckpt.blocks[range] {
        h = block_forward(&ckpt.config, w, &h);
    }
    h
}

/// Logits at every position of `tokens`.
pub fn logits(ckpt: &Checkpoint, tokens: &[u32]) -> Vec<f64> {
    let d = ckpt.config.hidden;
    let mut x = Vec::with_capacity(tokens.len() * d);
    for &tok in tokens {
        x.extend(wide(&ckpt.embed[tok as usize * d..(tok as usize + 1) * d]));
    }
    let h = blocks_forward(ckpt, 0..ckpt.blocks.len(), &x);
    let normed = layer_norm(&h, &ckpt.final_ln, d);
    let v = ckpt.config.vocab;
    let mut out = Vec::with_capacity(tokens.len() * v);
    for row in normed.chunks(d) {
        for tok in 0..v {
            let e = &ckpt.embed[tok * d..(tok + 1) * d];
            out.push(row.iter().zip(e).map(|(a, &b)| a * b as f64).sum());
        }
    }
    out
}

/// Mean cross-entropy of the soft-prompt classifier over a batch.
pub fn classifier_loss(
    ckpt: &Checkpoint,
    state: &PromptTuneState,
    batch: &[Vec<u32>],
    labels: &[usize],
) -> f64 {
    let d = ckpt.config.hidden;
    let c = state.n_classes;
    let mut total = 0.0;
    for (seq, &label) in batch.iter().zip(labels) {
        let mut x = wide(&state.prompts);
        for &tok in seq {
            x.extend(wide(&ckpt.embed[tok as usize * d..(tok as usize + 1) * d]));
        }
        let h = blocks_forward(ckpt, 0..ckpt.blocks.len(), &x);
        let last = layer_norm(&h[h.len() - d..], &ckpt.final_ln, d);
        let logits = linear(&last, &state.head_w, &state.head_b, d, c);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[label];
    }
    total / batch.len() as f64
}
