//! Client-side pieces of the model: token embeddings, the tied LM head and
//! next-token sampling.

use crate::error::{Error, Result};
use crate::model::checkpoint::{Checkpoint, LayerNormWeights};
use crate::model::config::ModelConfig;
use crate::ops;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub config: ModelConfig,
    pub embed: Vec<f32>,
    pub final_ln: LayerNormWeights,
}

impl HeadWeights {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Self {
        Self {
            config: ckpt.config,
            embed: ckpt.embed.clone(),
            final_ln: ckpt.final_ln.clone(),
        }
    }

    pub fn embed(&self, tokens: &[u32]) -> Result<Vec<f32>> {
        let d = self.config.hidden;
        let mut out = Vec::with_capacity(tokens.len() * d);
        for &tok in tokens {
            let tok = tok as usize;
            if tok >= self.config.vocab {
                return Err(Error::input(format!(
                    "token {tok} outside vocabulary of {}",
                    self.config.vocab
                )));
            }
            out.extend_from_slice(&self.embed[tok * d..(tok + 1) * d]);
        }
        Ok(out)
    }

    /// Final layer norm followed by `hidden . embed^T`.
    pub fn lm_head(&self, hidden: &[f32]) -> Result<Vec<f32>> {
        let d = self.config.hidden;
        if !hidden.len().is_multiple_of(d) {
            return Err(Error::input(format!(
                "hidden has {} values, not a multiple of {d}",
                hidden.len()
            )));
        }
        let t = hidden.len() / d;
        let (normed, _, _) = ops::layer_norm(hidden, &self.final_ln.gamma, &self.final_ln.beta, d);
        Ok(ops::matmul_bt(&normed, &self.embed, t, d, self.config.vocab))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    Greedy,
    Temperature { tau: f32, seed: u64 },
}

/// Stateful sampler; temperature mode draws from one SplitMix64 stream.
#[derive(Debug, Clone)]
pub struct Sampler {
    mode: Sampling,
    rng: SplitMix64,
}

impl Sampler {
    pub fn new(mode: Sampling) -> Result<Self> {
        let seed = match mode {
            Sampling::Greedy => 0,
            Sampling::Temperature { tau, seed } => {
                if !(tau > 0.0) || !tau.is_finite() {
                    return Err(Error::input("temperature must be positive"));
                }
                seed
            }
        };
        Ok(Self {
            mode,
            rng: SplitMix64::new(seed),
        })
    }

    pub fn greedy() -> Self {
        Self::new(Sampling::Greedy).unwrap()
    }

    pub fn sample(&mut self, logits: &[f32]) -> Result<u32> {
        sample_next(logits, self)
    }
}

pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

pub fn sample_next(logits: &[f32], sampler: &mut Sampler) -> Result<u32> {
    if logits.is_empty() {
        return Err(Error::input("empty logits"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("non-finite logits"));
    }
    match sampler.mode {
        Sampling::Greedy => Ok(argmax(logits) as u32),
        Sampling::Temperature { tau, .. } => {
            let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let weights: Vec<f64> = logits
                .iter()
                .map(|&l| ((l as f64 - max) / tau as f64).exp())
                .collect();
            let total: f64 = weights.iter().sum();
            let target = sampler.rng.next_f64() * total;
            let mut acc = 0.0;
            for (i, w) in weights.iter().enumerate() {
                acc += w;
                if target < acc {
                    return Ok(i as u32);
                }
            }
            Ok((weights.len() - 1) as u32)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::checkpoint::gen_checkpoint;

    fn head() -> HeadWeights {
        HeadWeights::from_checkpoint(&gen_checkpoint(42, ModelConfig::new(2, 8, 2, 32, 16)).unwrap())
    }

    #[test]
    fn greedy_picks_max_with_low_index_ties() {
        let mut s = Sampler::greedy();
        assert_eq!(s.sample(&[0.1, 2.0, -1.0]).unwrap(), 1);
        assert_eq!(s.sample(&[5.0, 5.0, 0.0]).unwrap(), 0);
        assert!(s.sample(&[0.0, f32::NAN]).is_err());
    }

    #[test]
    fn temperature_is_reproducible() {
        let logits = [0.3, 1.2, -0.4, 0.9, 0.0];
        let draw = || {
            let mut s = Sampler::new(Sampling::Temperature { tau: 1.0, seed: 9 }).unwrap();
            (0..20).map(|_| s.sample(&logits).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
        assert!(Sampler::new(Sampling::Temperature { tau: 0.0, seed: 1 }).is_err());
    }

    #[test]
    fn embedding_lookup() {
        let h = head();
        let rows = h.embed(&[3, 3, 0]).unwrap();
        assert_eq!(rows[..8], rows[8..16]);
        // row 3 bits from tests/oracles/splitmix_oracle.py
        let expect = [
            0x3d30b1a6u32, 0xbd448f17, 0x3d3536a6, 0x3ca6d8bf, 0xbbb95148, 0xbbd3b045, 0xbd0de558,
            0xbc9796f1,
        ];
        let got: Vec<u32> = rows[..8].iter().map(|v| v.to_bits()).collect();
        assert_eq!(got, expect);
        assert!(h.embed(&[32]).is_err());
    }

    #[test]
    fn zero_embedding_row_is_zero() {
        let mut h = head();
        h.embed[..8].fill(0.0);
        assert!(h.embed(&[0]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_hidden_gives_zero_logits() {
        let h = head();
        let logits = h.lm_head(&[0.0; 8]).unwrap();
        assert_eq!(logits.len(), 32);
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn argmax_ignores_constant_shift() {
        let h = head();
        let logits = h.lm_head(&h.embed(&[5]).unwrap()).unwrap();
        let shifted: Vec<f32> = logits.iter().map(|v| v + 3.5).collect();
        assert_eq!(argmax(&logits), argmax(&shifted));
    }
}
