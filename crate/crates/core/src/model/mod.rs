//! Deterministic toy transformer used both by servers (blocks) and clients
//! (embeddings, head), and as the single-process reference.

pub mod block;
pub mod checkpoint;
pub mod config;
pub mod head;

pub use block::{block_backward, block_forward, ActivationTape, Block, KvCache, Linear};
pub use checkpoint::{gen_checkpoint, BlockWeights, Checkpoint, LayerNormWeights};
pub use config::{alibi_slope, ModelConfig};
pub use head::{argmax, sample_next, HeadWeights, Sampler, Sampling};

use crate::error::{Error, Result};

/// The whole model in one process.
#[derive(Debug, Clone)]
pub struct Model {
    pub head: HeadWeights,
    pub blocks: Vec<Block>,
}

impl Model {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Self {
        Self {
            head: HeadWeights::from_checkpoint(ckpt),
            blocks: ckpt
                .blocks
                .iter()
                .map(|w| Block::dense(&ckpt.config, w))
                .collect(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.head.config
    }

    pub fn new_caches(&self) -> Vec<KvCache> {
        self.blocks.iter().map(Block::new_cache).collect()
    }

    /// Runs every block over `hidden`, extending `caches`.
    pub fn forward_blocks(
        &self,
        hidden: &[f32],
        caches: &mut [KvCache],
        start_pos: usize,
    ) -> Result<Vec<f32>> {
        let mut h = hidden.to_vec();
        for (block, cache) in self.blocks.iter().zip(caches.iter_mut()) {
            h = block.forward(&h, cache, start_pos, false)?.0;
        }
        Ok(h)
    }

    /// Hidden states of all positions computed in one pass without reuse.
    pub fn forward_full(&self, tokens: &[u32]) -> Result<Vec<f32>> {
        let x = self.head.embed(tokens)?;
        self.forward_blocks(&x, &mut self.new_caches(), 0)
    }

    /// Prefills `prompt`, then samples `n_new` tokens one step at a time.
    pub fn generate(&self, prompt: &[u32], n_new: usize, sampler: &mut Sampler) -> Result<Vec<u32>> {
        if prompt.is_empty() {
            return Err(Error::input("empty prompt"));
        }
        let d = self.config().hidden;
        let mut caches = self.new_caches();
        let mut pos = 0;
        let mut input = prompt.to_vec();
        let mut out = Vec::with_capacity(n_new);
        for _ in 0..n_new {
            let x = self.head.embed(&input)?;
            let h = self.forward_blocks(&x, &mut caches, pos)?;
            pos += input.len();
            let logits = self.head.lm_head(&h[h.len() - d..])?;
            let tok = sampler.sample(&logits)?;
            out.push(tok);
            input = vec![tok];
        }
        Ok(out)
    }
}
