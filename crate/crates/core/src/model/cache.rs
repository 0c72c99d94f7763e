//! Per-layer key/value storage with explicit per-token positions.

use std::ops::Range;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rope::{PositionedVector, RopeConfig, Rotation};

/// Which source produced a cached token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Segment {
    Prefix,
    Document(u32),
    /// Pad token belonging to a document; masked out of attention.
    Padding(u32),
    Query,
    Generated,
}

impl Segment {
    pub fn is_padding(self) -> bool {
        matches!(self, Segment::Padding(_))
    }

    /// Document index for document and padding tokens.
    pub fn document(self) -> Option<u32> {
        match self {
            Segment::Document(d) | Segment::Padding(d) => Some(d),
            _ => None,
        }
    }

    /// Re-labels document tokens with a new document index.
    pub fn with_document(self, doc: u32) -> Self {
        match self {
            Segment::Document(_) => Segment::Document(doc),
            Segment::Padding(_) => Segment::Padding(doc),
            other => other,
        }
    }
}

/// Keys and values of one layer. Keys are stored rotated at `positions`.
///
/// Storage is head-major: `keys[h]` holds `len * head_dim` floats, token by token.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    num_heads: usize,
    head_dim: usize,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    positions: Vec<usize>,
    segments: Vec<Segment>,
}

impl LayerCache {
    pub fn new(num_heads: usize, head_dim: usize) -> Self {
        Self {
            num_heads,
            head_dim,
            keys: vec![Vec::new(); num_heads],
            values: vec![Vec::new(); num_heads],
            positions: Vec::new(),
            segments: Vec::new(),
        }
    }

    /// Assembles a layer cache from raw head-major buffers.
    pub fn from_parts(
        head_dim: usize,
        keys: Vec<Vec<f32>>,
        values: Vec<Vec<f32>>,
        positions: Vec<usize>,
        segments: Vec<Segment>,
    ) -> Result<Self> {
        let len = positions.len();
        if keys.len() != values.len() || keys.is_empty() {
            return Err(Error::Shape("keys and values need the same, non-zero head count".into()));
        }
        if segments.len() != len {
            return Err(Error::Shape(format!(
                "{} segments for {len} positions",
                segments.len()
            )));
        }
        for (k, v) in keys.iter().zip(&values) {
            if k.len() != len * head_dim || v.len() != len * head_dim {
                return Err(Error::Shape(format!(
                    "head buffers must hold {len} x {head_dim} values"
                )));
            }
        }
        Ok(Self {
            num_heads: keys.len(),
            head_dim,
            keys,
            values,
            positions,
            segments,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn head_keys(&self, head: usize) -> &[f32] {
        &self.keys[head]
    }

    pub fn head_values(&self, head: usize) -> &[f32] {
        &self.values[head]
    }

    pub fn key(&self, token: usize, head: usize) -> PositionedVector {
        let d = self.head_dim;
        PositionedVector {
            values: self.keys[head][token * d..(token + 1) * d].to_vec(),
            position: Some(self.positions[token]),
        }
    }

    pub fn value(&self, token: usize, head: usize) -> &[f32] {
        let d = self.head_dim;
        &self.values[head][token * d..(token + 1) * d]
    }

    pub fn padding_mask(&self) -> Vec<bool> {
        self.segments.iter().map(|s| s.is_padding()).collect()
    }

    /// Appends one token. `keys` and `values` are `num_heads * head_dim` long,
    /// head by head, with keys already rotated at `position`.
    pub fn push(&mut self, keys: &[f32], values: &[f32], position: usize, segment: Segment) {
        let d = self.head_dim;
        debug_assert_eq!(keys.len(), self.num_heads * d);
        for h in 0..self.num_heads {
            self.keys[h].extend_from_slice(&keys[h * d..(h + 1) * d]);
            self.values[h].extend_from_slice(&values[h * d..(h + 1) * d]);
        }
        self.positions.push(position);
        self.segments.push(segment);
    }

    pub fn extend(&mut self, other: &LayerCache) {
        debug_assert_eq!(self.num_heads, other.num_heads);
        debug_assert_eq!(self.head_dim, other.head_dim);
        for h in 0..self.num_heads {
            self.keys[h].extend_from_slice(&other.keys[h]);
            self.values[h].extend_from_slice(&other.values[h]);
        }
        self.positions.extend_from_slice(&other.positions);
        self.segments.extend_from_slice(&other.segments);
    }

    pub fn slice(&self, range: Range<usize>) -> LayerCache {
        let d = self.head_dim;
        let cut = |bufs: &Vec<Vec<f32>>| -> Vec<Vec<f32>> {
            bufs.iter()
                .map(|b| b[range.start * d..range.end * d].to_vec())
                .collect()
        };
        LayerCache {
            num_heads: self.num_heads,
            head_dim: d,
            keys: cut(&self.keys),
            values: cut(&self.values),
            positions: self.positions[range.clone()].to_vec(),
            segments: self.segments[range].to_vec(),
        }
    }

    /// Re-positions every token in `range` by `delta` positions.
    pub fn shift(&mut self, rope: &RopeConfig, range: Range<usize>, delta: i64) {
        if delta == 0 || range.is_empty() {
            return;
        }
        let rotation = Rotation::new(rope, delta);
        let d = self.head_dim;
        for keys in &mut self.keys {
            rotation.apply_all(&mut keys[range.start * d..range.end * d]);
        }
        for p in &mut self.positions[range] {
            *p = usize::try_from(*p as i64 + delta).expect("shift keeps positions non-negative");
        }
    }

    pub fn relabel_documents(&mut self, doc: u32) {
        for s in &mut self.segments {
            *s = s.with_document(doc);
        }
    }
}

/// One [`LayerCache`] per model layer, all holding the same tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct KVCache {
    layers: Vec<LayerCache>,
}

impl KVCache {
    pub fn new(num_layers: usize, num_heads: usize, head_dim: usize) -> Self {
        Self {
            layers: (0..num_layers)
                .map(|_| LayerCache::new(num_heads, head_dim))
                .collect(),
        }
    }

    pub fn from_layers(layers: Vec<LayerCache>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Shape("a KV cache needs at least one layer".into()))?;
        let consistent = layers.iter().all(|l| {
            l.len() == first.len()
                && l.positions == first.positions
                && l.segments == first.segments
                && l.num_heads == first.num_heads
                && l.head_dim == first.head_dim
        });
        if !consistent {
            return Err(Error::Shape(
                "all layers must hold the same tokens at the same positions".into(),
            ));
        }
        Ok(Self { layers })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn len(&self) -> usize {
        self.layers[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layers(&self) -> &[LayerCache] {
        &self.layers
    }

    pub fn layer(&self, layer: usize) -> &LayerCache {
        &self.layers[layer]
    }

    pub fn layer_mut(&mut self, layer: usize) -> &mut LayerCache {
        &mut self.layers[layer]
    }

    pub fn positions(&self) -> &[usize] {
        self.layers[0].positions()
    }

    pub fn segments(&self) -> &[Segment] {
        self.layers[0].segments()
    }

    pub fn max_position(&self) -> Option<usize> {
        self.positions().iter().copied().max()
    }

    /// Position a token appended next would take: one past the maximum occupied.
    pub fn next_position(&self) -> usize {
        self.max_position().map_or(0, |p| p + 1)
    }

    pub fn extend(&mut self, other: &KVCache) {
        for (mine, theirs) in self.layers.iter_mut().zip(&other.layers) {
            mine.extend(theirs);
        }
    }

    pub fn slice(&self, range: Range<usize>) -> KVCache {
        KVCache {
            layers: self.layers.iter().map(|l| l.slice(range.clone())).collect(),
        }
    }

    pub fn shift(&mut self, rope: &RopeConfig, range: Range<usize>, delta: i64) {
        for layer in &mut self.layers {
            layer.shift(rope, range.clone(), delta);
        }
    }

    pub fn relabel_documents(&mut self, doc: u32) {
        for layer in &mut self.layers {
            layer.relabel_documents(doc);
        }
    }
}
