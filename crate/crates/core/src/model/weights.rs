//! Model parameters, seeded initialization and the binary weight file.
//!
//! Weight file layout (little-endian):
//!
//! ```text
//! magic "CFWT" | version u32
//! num_layers u32 | num_heads u32 | head_dim u32 | vocab_size u32 | ffn_dim u32
//! rope_base f32 | max_position u32 | norm_eps f32
//! embed            [vocab_size x hidden]
//! per layer:
//!   attn_norm      [hidden]
//!   wq, wk, wv, wo [hidden x hidden]
//!   ffn_norm       [hidden]
//!   w_up           [ffn_dim x hidden]
//!   w_down         [hidden x ffn_dim]
//! final_norm       [hidden]
//! lm_head          [vocab_size x hidden]
//! ```
//!
//! Every matrix is row-major `[out x in]` and applied as `y = W x`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::binio::{self, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::rope::RopeConfig;

const MAGIC: &[u8; 4] = b"CFWT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub ffn_norm: Vec<f32>,
    pub w_up: Vec<f32>,
    pub w_down: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub embed: Vec<f32>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    pub lm_head: Vec<f32>,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Uniform bound giving unit output variance for a fan-in of `fan_in`.
fn fan_in_scale(fan_in: usize) -> f32 {
    (3.0 / fan_in as f32).sqrt()
}

impl ModelWeights {
    /// Deterministic random initialization. Tensors are drawn in file order.
    pub fn random(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden_dim();
        let f = config.ffn_dim;
        let embed = uniform(&mut rng, config.vocab_size * h, 1.0);
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                attn_norm: vec![1.0; h],
                wq: uniform(&mut rng, h * h, fan_in_scale(h)),
                wk: uniform(&mut rng, h * h, fan_in_scale(h)),
                wv: uniform(&mut rng, h * h, fan_in_scale(h)),
                wo: uniform(&mut rng, h * h, fan_in_scale(h)),
                ffn_norm: vec![1.0; h],
                w_up: uniform(&mut rng, f * h, fan_in_scale(h)),
                w_down: uniform(&mut rng, h * f, fan_in_scale(f)),
            })
            .collect();
        let lm_head = uniform(&mut rng, config.vocab_size * h, fan_in_scale(h));
        Self {
            embed,
            layers,
            final_norm: vec![1.0; h],
            lm_head,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let h = config.hidden_dim();
        let f = config.ffn_dim;
        let check = |name: &str, len: usize, expected: usize| {
            if len == expected {
                Ok(())
            } else {
                Err(Error::Shape(format!(
                    "{name}: expected {expected} values, got {len}"
                )))
            }
        };
        check("embed", self.embed.len(), config.vocab_size * h)?;
        check("layers", self.layers.len(), config.num_layers)?;
        for layer in &self.layers {
            check("attn_norm", layer.attn_norm.len(), h)?;
            check("wq", layer.wq.len(), h * h)?;
            check("wk", layer.wk.len(), h * h)?;
            check("wv", layer.wv.len(), h * h)?;
            check("wo", layer.wo.len(), h * h)?;
            check("ffn_norm", layer.ffn_norm.len(), h)?;
            check("w_up", layer.w_up.len(), f * h)?;
            check("w_down", layer.w_down.len(), h * f)?;
        }
        check("final_norm", self.final_norm.len(), h)?;
        check("lm_head", self.lm_head.len(), config.vocab_size * h)
    }
}

pub(crate) fn encode(config: &ModelConfig, weights: &ModelWeights) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.usize_u32(config.num_layers);
    w.usize_u32(config.num_heads);
    w.usize_u32(config.head_dim);
    w.usize_u32(config.vocab_size);
    w.usize_u32(config.ffn_dim);
    w.f32(config.rope.base());
    w.usize_u32(config.rope.max_position());
    w.f32(config.norm_eps);
    w.f32s(&weights.embed);
    for layer in &weights.layers {
        w.f32s(&layer.attn_norm);
        w.f32s(&layer.wq);
        w.f32s(&layer.wk);
        w.f32s(&layer.wv);
        w.f32s(&layer.wo);
        w.f32s(&layer.ffn_norm);
        w.f32s(&layer.w_up);
        w.f32s(&layer.w_down);
    }
    w.f32s(&weights.final_norm);
    w.f32s(&weights.lm_head);
    w.finish()
}

pub(crate) fn decode(bytes: &[u8], path: &Path) -> Result<(ModelConfig, ModelWeights)> {
    let mut r = ByteReader::new(bytes, path);
    r.expect_magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.corrupt(format!("unsupported weight file version {version}")));
    }
    let num_layers = r.usize()?;
    let num_heads = r.usize()?;
    let head_dim = r.usize()?;
    let vocab_size = r.usize()?;
    let ffn_dim = r.usize()?;
    let base = r.f32()?;
    let max_position = r.usize()?;
    let norm_eps = r.f32()?;
    let config = ModelConfig {
        num_layers,
        num_heads,
        head_dim,
        vocab_size,
        ffn_dim,
        rope: RopeConfig::new(head_dim, base, max_position)?,
        norm_eps,
    };
    config.validate()?;
    let h = config.hidden_dim();
    let embed = r.f32s(vocab_size * h)?;
    let mut layers = Vec::with_capacity(num_layers);
    for _ in 0..num_layers {
        layers.push(LayerWeights {
            attn_norm: r.f32s(h)?,
            wq: r.f32s(h * h)?,
            wk: r.f32s(h * h)?,
            wv: r.f32s(h * h)?,
            wo: r.f32s(h * h)?,
            ffn_norm: r.f32s(h)?,
            w_up: r.f32s(ffn_dim * h)?,
            w_down: r.f32s(h * ffn_dim)?,
        });
    }
    let final_norm = r.f32s(h)?;
    let lm_head = r.f32s(vocab_size * h)?;
    r.finish()?;
    Ok((
        config,
        ModelWeights {
            embed,
            layers,
            final_norm,
            lm_head,
        },
    ))
}

pub(crate) fn save(path: &Path, config: &ModelConfig, weights: &ModelWeights) -> Result<()> {
    binio::write_atomic(path, &encode(config, weights))
}

pub(crate) fn load(path: &Path) -> Result<(ModelConfig, ModelWeights)> {
    decode(&binio::read_file(path)?, path)
}
