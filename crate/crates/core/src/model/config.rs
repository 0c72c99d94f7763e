use serde::Serialize;

use crate::error::{Error, Result};
use crate::rope::RopeConfig;
use crate::tokenizer;

/// Shape of the decoder-only transformer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    /// Inner width of the feed-forward block.
    pub ffn_dim: usize,
    pub rope: RopeConfig,
    pub norm_eps: f32,
}

impl ModelConfig {
    /// Builds a config with the conventional 4x feed-forward expansion.
    pub fn new(
        num_layers: usize,
        num_heads: usize,
        head_dim: usize,
        max_position: usize,
    ) -> Result<Self> {
        let config = Self {
            num_layers,
            num_heads,
            head_dim,
            vocab_size: tokenizer::VOCAB_SIZE,
            ffn_dim: 4 * num_heads * head_dim,
            rope: RopeConfig::new(head_dim, 10000.0, max_position)?,
            norm_eps: 1e-5,
        };
        config.validate()?;
        Ok(config)
    }

    /// Desk-scale default: 8 layers, 4 heads of width 32, 512 positions.
    pub fn toy() -> Self {
        Self::new(8, 4, 32, 512).expect("toy config is valid")
    }

    pub fn hidden_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.ffn_dim == 0 {
            return Err(Error::Config(
                "num_layers, num_heads and ffn_dim must be positive".into(),
            ));
        }
        if self.rope.head_dim() != self.head_dim {
            return Err(Error::Config(format!(
                "rope head_dim {} does not match model head_dim {}",
                self.rope.head_dim(),
                self.head_dim
            )));
        }
        if self.vocab_size < tokenizer::VOCAB_SIZE {
            return Err(Error::Config(format!(
                "vocab_size must cover the byte tokenizer ({} entries)",
                tokenizer::VOCAB_SIZE
            )));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        Ok(())
    }
}
