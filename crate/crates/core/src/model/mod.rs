//! A minimal pre-norm decoder-only transformer with an explicit KV cache.
//!
//! Blocks are `h += Wo·attn(rmsnorm(h))` followed by
//! `h += W_down·silu(W_up·rmsnorm(h))`, no biases. Queries and keys are
//! rotated with [`crate::rope`] at the per-token positions supplied by the
//! caller, so a cache's tokens can sit anywhere in the positional range.

mod attention;
mod cache;
mod config;
mod weights;

use std::ops::AddAssign;
use std::path::{Path, PathBuf};

use serde::Serialize;

pub use attention::{attention, AttentionMap, AttentionMask, HeadAttention};
pub use cache::{KVCache, LayerCache, Segment};
pub use config::ModelConfig;
pub use weights::{LayerWeights, ModelWeights};

use crate::binio;
use crate::error::{Error, Result};
use crate::rope::Rotation;
use crate::tokenizer::TokenId;
use attention::dot;

/// Default hard limit on cached tokens per session.
pub const DEFAULT_CACHE_LIMIT: usize = 16 * 1024;

/// Where model weights come from.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightSource {
    Seed(u64),
    File(PathBuf),
}

/// Deterministic multiply-accumulate counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct OpCounts {
    /// `Q·K^T` plus `weights·V` multiply-accumulates.
    pub attention_macs: u64,
    /// Projection, feed-forward and output-head multiply-accumulates.
    pub dense_macs: u64,
}

impl AddAssign for OpCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.attention_macs += rhs.attention_macs;
        self.dense_macs += rhs.dense_macs;
    }
}

/// Result of running one layer over a chunk of tokens.
#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub hidden: Vec<f32>,
    pub attention: AttentionMap,
    pub ops: OpCounts,
}

#[derive(Debug, Clone)]
pub struct Prefill {
    pub first_token: TokenId,
    /// Final-layer logits at the last input position.
    pub logits: Vec<f32>,
    pub ops: OpCounts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<TokenId>,
    pub ops: OpCounts,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    weights: ModelWeights,
    fingerprint: [u8; 32],
    cache_limit: usize,
}

fn rms_norm(x: &[f32], gain: &[f32], eps: f32, out: &mut [f32]) {
    let mean_sq = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / (mean_sq + eps).sqrt();
    for ((o, v), g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
}

/// `out = W x` for a row-major `[out.len() x x.len()]` matrix.
fn matvec(w: &[f32], x: &[f32], out: &mut [f32]) {
    let n = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(n)) {
        *o = dot(row, x);
    }
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

pub fn argmax(logits: &[f32]) -> TokenId {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

impl Model {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        weights.validate(&config)?;
        let fingerprint = binio::sha256(&weights::encode(&config, &weights));
        Ok(Self {
            config,
            weights,
            fingerprint,
            cache_limit: DEFAULT_CACHE_LIMIT,
        })
    }

    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        let weights = ModelWeights::random(&config, seed);
        Self::new(config, weights)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config, weights) = weights::load(path)?;
        Self::new(config, weights)
    }

    pub fn from_source(config: ModelConfig, source: &WeightSource) -> Result<Self> {
        match source {
            WeightSource::Seed(seed) => Self::random(config, *seed),
            WeightSource::File(path) => Self::load(path),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        weights::save(path, &self.config, &self.weights)
    }

    pub fn with_cache_limit(mut self, limit: usize) -> Self {
        self.cache_limit = limit;
        self
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    /// SHA-256 over the serialized config and weights.
    pub fn fingerprint(&self) -> [u8; 32] {
        self.fingerprint
    }

    pub fn empty_cache(&self) -> KVCache {
        KVCache::new(
            self.config.num_layers,
            self.config.num_heads,
            self.config.head_dim,
        )
    }

    pub fn embed(&self, tokens: &[TokenId]) -> Result<Vec<f32>> {
        let h = self.config.hidden_dim();
        let mut out = Vec::with_capacity(tokens.len() * h);
        for &t in tokens {
            let t = t as usize;
            if t >= self.config.vocab_size {
                return Err(Error::InvalidArgument(format!(
                    "token {t} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            out.extend_from_slice(&self.weights.embed[t * h..(t + 1) * h]);
        }
        Ok(out)
    }

    /// Final norm and output head applied to one hidden row.
    pub fn logits(&self, hidden_row: &[f32]) -> Vec<f32> {
        let mut normed = vec![0.0; hidden_row.len()];
        rms_norm(hidden_row, &self.weights.final_norm, self.config.norm_eps, &mut normed);
        let mut logits = vec![0.0; self.config.vocab_size];
        matvec(&self.weights.lm_head, &normed, &mut logits);
        logits
    }

    pub(crate) fn head_ops(&self) -> u64 {
        (self.config.vocab_size * self.config.hidden_dim()) as u64
    }

    /// Runs layer `layer` over `hidden` (`positions.len()` rows), appending the
    /// chunk's keys and values to `cache` and attending over the whole cache.
    pub fn forward_layer(
        &self,
        layer: usize,
        hidden: &[f32],
        positions: &[usize],
        segments: &[Segment],
        cache: &mut LayerCache,
    ) -> Result<LayerOutput> {
        let cfg = &self.config;
        let (hd, d, nh) = (cfg.hidden_dim(), cfg.head_dim, cfg.num_heads);
        let n = positions.len();
        if n == 0 || hidden.len() != n * hd || segments.len() != n {
            return Err(Error::Shape(format!(
                "layer input needs {n} rows of width {hd} and {n} segments"
            )));
        }
        if layer >= cfg.num_layers {
            return Err(Error::InvalidArgument(format!("no layer {layer}")));
        }
        if cache.num_heads() != nh || cache.head_dim() != d {
            return Err(Error::Shape("layer cache shape does not match the model".into()));
        }
        let w = &self.weights.layers[layer];
        let past_len = cache.len();

        // Per-head query buffers, token-major within each head.
        let mut queries = vec![vec![0.0f32; n * d]; nh];
        let mut normed = vec![0.0f32; hd];
        let mut q = vec![0.0f32; hd];
        let mut k = vec![0.0f32; hd];
        let mut v = vec![0.0f32; hd];
        for t in 0..n {
            rms_norm(&hidden[t * hd..(t + 1) * hd], &w.attn_norm, cfg.norm_eps, &mut normed);
            matvec(&w.wq, &normed, &mut q);
            matvec(&w.wk, &normed, &mut k);
            matvec(&w.wv, &normed, &mut v);
            let rotation = Rotation::new(&cfg.rope, positions[t] as i64);
            rotation.apply_all(&mut q);
            rotation.apply_all(&mut k);
            for (h, buf) in queries.iter_mut().enumerate() {
                buf[t * d..(t + 1) * d].copy_from_slice(&q[h * d..(h + 1) * d]);
            }
            cache.push(&k, &v, positions[t], segments[t]);
        }

        let padding = cache.padding_mask();
        let mask = AttentionMask::with_padding(past_len, &padding);
        let mut attn_out = vec![0.0f32; n * hd];
        let mut maps = Vec::with_capacity(nh);
        let mut scored = 0u64;
        for (h, qh) in queries.iter().enumerate() {
            let head = attention(qh, cache.head_keys(h), cache.head_values(h), d, mask)?;
            for t in 0..n {
                attn_out[t * hd + h * d..t * hd + (h + 1) * d]
                    .copy_from_slice(&head.output[t * d..(t + 1) * d]);
            }
            scored += head.scored_pairs;
            maps.push(head.weights);
        }

        let mut out = hidden.to_vec();
        let mut proj = vec![0.0f32; hd];
        let mut up = vec![0.0f32; cfg.ffn_dim];
        for t in 0..n {
            let row = &mut out[t * hd..(t + 1) * hd];
            matvec(&w.wo, &attn_out[t * hd..(t + 1) * hd], &mut proj);
            for (x, p) in row.iter_mut().zip(&proj) {
                *x += p;
            }
            rms_norm(row, &w.ffn_norm, cfg.norm_eps, &mut normed);
            matvec(&w.w_up, &normed, &mut up);
            for u in &mut up {
                *u = silu(*u);
            }
            matvec(&w.w_down, &up, &mut proj);
            for (x, p) in row.iter_mut().zip(&proj) {
                *x += p;
            }
        }

        let dense = (n * (4 * hd * hd + 2 * hd * cfg.ffn_dim)) as u64;
        Ok(LayerOutput {
            hidden: out,
            attention: AttentionMap {
                num_heads: nh,
                rows: n,
                cols: cache.len(),
                weights: maps,
                segments: cache.segments().to_vec(),
            },
            ops: OpCounts {
                attention_macs: scored * 2 * d as u64,
                dense_macs: dense,
            },
        })
    }

    /// Runs every layer over `tokens` at explicit `positions`, extending `cache`.
    /// Returns the final-layer hidden states of the chunk.
    pub fn forward(
        &self,
        cache: &mut KVCache,
        tokens: &[TokenId],
        positions: &[usize],
        segments: &[Segment],
        mut on_layer: impl FnMut(usize, &AttentionMap),
    ) -> Result<(Vec<f32>, OpCounts)> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("cannot run the model on zero tokens".into()));
        }
        if tokens.len() != positions.len() || tokens.len() != segments.len() {
            return Err(Error::Shape("tokens, positions and segments differ in length".into()));
        }
        if cache.num_layers() != self.config.num_layers {
            return Err(Error::Shape("cache layer count does not match the model".into()));
        }
        let requested = cache.len() + tokens.len();
        if requested > self.cache_limit {
            return Err(Error::Capacity {
                requested,
                limit: self.cache_limit,
            });
        }
        let max_position = self.config.rope.max_position();
        if let Some(&p) = positions.iter().find(|&&p| p >= max_position) {
            log::warn!("position {p} exceeds max_position {max_position}; rotations extrapolate");
        }
        if let Some(last) = cache.max_position() {
            if positions.iter().any(|&p| p <= last) {
                log::debug!("new tokens reuse positions already in the cache");
            }
        }

        let mut hidden = self.embed(tokens)?;
        let mut ops = OpCounts::default();
        for layer in 0..self.config.num_layers {
            let out = self.forward_layer(layer, &hidden, positions, segments, cache.layer_mut(layer))?;
            on_layer(layer, &out.attention);
            hidden = out.hidden;
            ops += out.ops;
        }
        Ok((hidden, ops))
    }

    /// Processes `tokens` after whatever `cache` holds, at sequential positions
    /// starting one past the cache's maximum position, and greedily picks the next token.
    pub fn prefill(&self, cache: &mut KVCache, tokens: &[TokenId]) -> Result<Prefill> {
        self.prefill_segment(cache, tokens, Segment::Query)
    }

    pub fn prefill_segment(
        &self,
        cache: &mut KVCache,
        tokens: &[TokenId],
        segment: Segment,
    ) -> Result<Prefill> {
        let start = cache.next_position();
        let positions: Vec<usize> = (start..start + tokens.len()).collect();
        let segments = vec![segment; tokens.len()];
        self.prefill_at(cache, tokens, &positions, &segments)
    }

    pub fn prefill_at(
        &self,
        cache: &mut KVCache,
        tokens: &[TokenId],
        positions: &[usize],
        segments: &[Segment],
    ) -> Result<Prefill> {
        let (hidden, mut ops) = self.forward(cache, tokens, positions, segments, |_, _| {})?;
        let hd = self.config.hidden_dim();
        let logits = self.logits(&hidden[hidden.len() - hd..]);
        ops.dense_macs += self.head_ops();
        Ok(Prefill {
            first_token: argmax(&logits),
            logits,
            ops,
        })
    }

    /// Greedy decoding: each step feeds the previous token at the position one
    /// past the cache's maximum and appends the argmax. Stops after `max_tokens`
    /// new tokens or right after emitting `stop`.
    pub fn decode(
        &self,
        cache: &mut KVCache,
        last_token: TokenId,
        max_tokens: usize,
        stop: Option<TokenId>,
    ) -> Result<Decoded> {
        if cache.is_empty() {
            return Err(Error::InvalidArgument("decode needs a pre-filled cache".into()));
        }
        let mut tokens = Vec::with_capacity(max_tokens);
        let mut ops = OpCounts::default();
        let mut prev = last_token;
        for _ in 0..max_tokens {
            let step = self.prefill_segment(cache, &[prev], Segment::Generated)?;
            ops += step.ops;
            tokens.push(step.first_token);
            if Some(step.first_token) == stop {
                break;
            }
            prev = step.first_token;
        }
        Ok(Decoded { tokens, ops })
    }

    /// Prefill into an empty cache, then decode until `max_new_tokens` total
    /// tokens (including the first) have been produced.
    pub fn generate(
        &self,
        tokens: &[TokenId],
        max_new_tokens: usize,
        stop: Option<TokenId>,
    ) -> Result<Vec<TokenId>> {
        let mut cache = self.empty_cache();
        let first = self.prefill(&mut cache, tokens)?.first_token;
        let mut out = vec![first];
        if max_new_tokens > 1 && Some(first) != stop {
            out.extend(self.decode(&mut cache, first, max_new_tokens - 1, stop)?.tokens);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::encode;

    fn small() -> Model {
        Model::random(ModelConfig::new(2, 2, 8, 128).unwrap(), 5).unwrap()
    }

    fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn empty_cache_plus_one_token() {
        let model = small();
        let mut cache = model.empty_cache();
        model.prefill(&mut cache, &[7]).unwrap();
        assert_eq!(cache.len(), 1);
        assert_eq!(cache.positions(), &[0]);
    }

    #[test]
    fn attention_map_shape_with_prefix() {
        let model = small();
        let mut cache = model.empty_cache();
        model.prefill_segment(&mut cache, &encode("abc"), Segment::Prefix).unwrap();
        let tokens = encode("xy");
        let mut shapes = Vec::new();
        model
            .forward(&mut cache, &tokens, &[3, 4], &[Segment::Query; 2], |_, m| {
                shapes.push((m.rows, m.cols));
                for h in 0..m.num_heads {
                    for r in 0..m.rows {
                        let row = m.row(h, r);
                        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
                        // causal inside the query chunk
                        assert!(row[3 + r + 1..].iter().all(|&w| w == 0.0));
                    }
                }
            })
            .unwrap();
        assert_eq!(shapes, vec![(2, 5), (2, 5)]);
    }

    #[test]
    fn chunked_layer_equals_monolithic_layer() {
        let model = small();
        let tokens = encode("hello world");
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let segments = vec![Segment::Query; tokens.len()];
        let hidden = model.embed(&tokens).unwrap();
        let hd = model.config().hidden_dim();

        let mut whole = LayerCache::new(2, 8);
        let full = model.forward_layer(0, &hidden, &positions, &segments, &mut whole).unwrap();

        let split = 4;
        let mut parted = LayerCache::new(2, 8);
        let a = model
            .forward_layer(0, &hidden[..split * hd], &positions[..split], &segments[..split], &mut parted)
            .unwrap();
        let b = model
            .forward_layer(0, &hidden[split * hd..], &positions[split..], &segments[split..], &mut parted)
            .unwrap();
        assert!(max_abs_diff(&full.hidden[..split * hd], &a.hidden) < 1e-5);
        assert!(max_abs_diff(&full.hidden[split * hd..], &b.hidden) < 1e-5);
        assert_eq!(whole, parted);
    }

    #[test]
    fn split_prefill_matches_single_prefill() {
        let model = small();
        let tokens = encode("the quick brown fox");
        let mut one = model.empty_cache();
        let single = model.prefill(&mut one, &tokens).unwrap();
        let mut two = model.empty_cache();
        model.prefill(&mut two, &tokens[..7]).unwrap();
        let split = model.prefill(&mut two, &tokens[7..]).unwrap();
        assert!(max_abs_diff(&single.logits, &split.logits) < 1e-5);
        assert_eq!(single.first_token, split.first_token);
        assert_eq!(one, two);
    }

    #[test]
    fn decode_zero_and_determinism() {
        let model = small();
        assert_eq!(model.generate(&encode("hi"), 1, None).unwrap().len(), 1);
        let mut cache = model.empty_cache();
        let first = model.prefill(&mut cache, &encode("hi")).unwrap().first_token;
        assert!(model.decode(&mut cache.clone(), first, 0, None).unwrap().tokens.is_empty());
        let a = model.decode(&mut cache.clone(), first, 12, None).unwrap();
        let b = model.decode(&mut cache.clone(), first, 12, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tokens.len(), 12);
    }

    #[test]
    fn decode_follows_algorithm_one() {
        // Each decode step consumes the previous output and the updated cache,
        // so the full output equals re-running prefill from scratch on the growing prompt.
        let model = small();
        let prompt = encode("abc");
        let generated = model.generate(&prompt, 5, None).unwrap();
        let mut seq = prompt.clone();
        for &tok in &generated {
            let mut cache = model.empty_cache();
            assert_eq!(model.prefill(&mut cache, &seq).unwrap().first_token, tok);
            seq.push(tok);
        }
    }

    #[test]
    fn decode_positions_follow_maximum() {
        let model = small();
        let mut cache = model.empty_cache();
        model.prefill_at(&mut cache, &[1, 2], &[0, 40], &[Segment::Query; 2]).unwrap();
        model.decode(&mut cache, 3, 2, None).unwrap();
        assert_eq!(cache.positions(), &[0, 40, 41, 42]);
    }

    #[test]
    fn capacity_limit_is_enforced() {
        let model = small().with_cache_limit(4);
        let mut cache = model.empty_cache();
        let err = model.prefill(&mut cache, &encode("hello")).unwrap_err();
        assert!(matches!(err, Error::Capacity { requested: 5, limit: 4 }));
    }

    #[test]
    fn weight_file_round_trip_keeps_fingerprint() {
        let model = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        model.save(&path).unwrap();
        let loaded = Model::load(&path).unwrap();
        assert_eq!(loaded.fingerprint(), model.fingerprint());
        assert_eq!(loaded.weights(), model.weights());
        assert_ne!(Model::random(*model.config(), 6).unwrap().fingerprint(), model.fingerprint());
    }
}
