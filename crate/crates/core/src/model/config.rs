use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub mlp_ratio: usize,
}

impl ModelConfig {
    pub fn new(n_layers: usize, hidden: usize, n_heads: usize, vocab: usize, max_seq: usize) -> Self {
        Self {
            n_layers,
            hidden,
            n_heads,
            vocab,
            max_seq,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("hidden", self.hidden),
            ("n_heads", self.n_heads),
            ("vocab", self.vocab),
            ("max_seq", self.max_seq),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::input(format!("{name} must be positive")));
            }
            if v > u32::MAX as usize {
                return Err(Error::input(format!("{name} does not fit in u32")));
            }
        }
        if !self.hidden.is_multiple_of(self.n_heads) {
            return Err(Error::input(format!(
                "hidden {} is not a multiple of n_heads {}",
                self.hidden, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.hidden * self.mlp_ratio
    }

    /// Weights held by one block, biases and norms included.
    pub fn params_per_block(&self) -> usize {
        let d = self.hidden;
        let m = self.mlp_hidden();
        4 * d + d * 3 * d + 3 * d + d * d + d + d * m + m + m * d + d
    }
}

/// ALiBi slope for zero-based head `h`: `2^(-8 (h + 1) / n_heads)`.
pub fn alibi_slope(h: usize, n_heads: usize) -> f32 {
    2f64.powf(-8.0 * (h + 1) as f64 / n_heads as f64) as f32
}
