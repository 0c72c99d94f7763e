//! Scaled dot-product attention for a single head.

use crate::error::{Error, Result};
use crate::model::cache::Segment;

/// Which key columns each query row may see.
///
/// Query row `r` corresponds to key column `past_len + r`. A row sees every
/// column up to and including its own, except padding columns other than its own.
#[derive(Debug, Clone, Copy)]
pub struct AttentionMask<'a> {
    pub past_len: usize,
    pub padding: Option<&'a [bool]>,
}

impl<'a> AttentionMask<'a> {
    pub fn causal(past_len: usize) -> Self {
        Self {
            past_len,
            padding: None,
        }
    }

    pub fn with_padding(past_len: usize, padding: &'a [bool]) -> Self {
        Self {
            past_len,
            padding: Some(padding),
        }
    }

    #[inline]
    pub fn allows(&self, row: usize, col: usize) -> bool {
        let own = self.past_len + row;
        if col > own {
            return false;
        }
        match self.padding {
            Some(pad) => col == own || !pad[col],
            None => true,
        }
    }
}

/// Output of one head: `rows x head_dim` outputs and `rows x cols` weights.
#[derive(Debug, Clone)]
pub struct HeadAttention {
    pub output: Vec<f32>,
    pub weights: Vec<f32>,
    /// Number of (query, key) pairs actually scored.
    pub scored_pairs: u64,
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks_a = a.chunks_exact(8);
    let chunks_b = b.chunks_exact(8);
    let tail: f32 = chunks_a
        .remainder()
        .iter()
        .zip(chunks_b.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for i in 0..8 {
            acc[i] += ca[i] * cb[i];
        }
    }
    acc.iter().sum::<f32>() + tail
}

/// `softmax(Q K^T / sqrt(head_dim)) V` with the row max subtracted before exponentiation.
pub fn attention(
    queries: &[f32],
    keys: &[f32],
    values: &[f32],
    head_dim: usize,
    mask: AttentionMask<'_>,
) -> Result<HeadAttention> {
    if head_dim == 0 || !queries.len().is_multiple_of(head_dim) || !keys.len().is_multiple_of(head_dim) {
        return Err(Error::Shape(format!(
            "query/key buffers are not multiples of head_dim {head_dim}"
        )));
    }
    if keys.len() != values.len() {
        return Err(Error::Shape(format!(
            "{} key values vs {} value values",
            keys.len(),
            values.len()
        )));
    }
    let rows = queries.len() / head_dim;
    let cols = keys.len() / head_dim;
    if let Some(pad) = mask.padding {
        if pad.len() != cols {
            return Err(Error::Shape(format!(
                "padding mask covers {} columns, keys have {cols}",
                pad.len()
            )));
        }
    }
    let scale = 1.0 / (head_dim as f32).sqrt();
    let mut weights = vec![0.0f32; rows * cols];
    let mut output = vec![0.0f32; rows * head_dim];
    let mut scored_pairs = 0u64;

    for r in 0..rows {
        let q = &queries[r * head_dim..(r + 1) * head_dim];
        let row = &mut weights[r * cols..(r + 1) * cols];
        let visible = (mask.past_len + r + 1).min(cols);
        let mut max = f32::NEG_INFINITY;
        for c in 0..visible {
            if mask.allows(r, c) {
                let s = dot(q, &keys[c * head_dim..(c + 1) * head_dim]) * scale;
                row[c] = s;
                max = max.max(s);
                scored_pairs += 1;
            }
        }
        if max == f32::NEG_INFINITY {
            return Err(Error::Shape(format!("attention row {r} has no visible keys")));
        }
        let mut total = 0.0f32;
        for c in 0..visible {
            if mask.allows(r, c) {
                let e = (row[c] - max).exp();
                row[c] = e;
                total += e;
            }
        }
        let out = &mut output[r * head_dim..(r + 1) * head_dim];
        for c in 0..visible {
            if row[c] == 0.0 {
                continue;
            }
            row[c] /= total;
            let w = row[c];
            for (o, v) in out.iter_mut().zip(&values[c * head_dim..(c + 1) * head_dim]) {
                *o += w * v;
            }
        }
    }
    Ok(HeadAttention {
        output,
        weights,
        scored_pairs,
    })
}

/// Softmax weights of one layer, per head, with the segment of every key column.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub num_heads: usize,
    pub rows: usize,
    pub cols: usize,
    /// `weights[h]` is a row-major `rows x cols` matrix.
    pub weights: Vec<Vec<f32>>,
    pub segments: Vec<Segment>,
}

impl AttentionMap {
    pub fn row(&self, head: usize, row: usize) -> &[f32] {
        &self.weights[head][row * self.cols..(row + 1) * self.cols]
    }

    /// Attention mass on columns whose segment satisfies `select`, averaged over
    /// heads and query rows.
    pub fn mean_mass(&self, select: impl Fn(Segment) -> bool) -> f64 {
        if self.rows == 0 || self.num_heads == 0 {
            return 0.0;
        }
        let cols: Vec<usize> = (0..self.cols).filter(|&c| select(self.segments[c])).collect();
        let mut total = 0.0f64;
        for h in 0..self.num_heads {
            for r in 0..self.rows {
                let row = self.row(h, r);
                total += cols.iter().map(|&c| row[c] as f64).sum::<f64>();
            }
        }
        total / (self.num_heads * self.rows) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Straightforward double loop, no masking, no max subtraction.
    fn dense_reference(q: &[f32], k: &[f32], v: &[f32], d: usize) -> (Vec<f32>, Vec<f32>) {
        let rows = q.len() / d;
        let cols = k.len() / d;
        let mut weights = vec![0.0f64; rows * cols];
        let mut out = vec![0.0f64; rows * d];
        for r in 0..rows {
            let mut z = 0.0f64;
            for c in 0..cols {
                let mut s = 0.0f64;
                for i in 0..d {
                    s += q[r * d + i] as f64 * k[c * d + i] as f64;
                }
                let e = (s / (d as f64).sqrt()).exp();
                weights[r * cols + c] = e;
                z += e;
            }
            for c in 0..cols {
                weights[r * cols + c] /= z;
                for i in 0..d {
                    out[r * d + i] += weights[r * cols + c] * v[c * d + i] as f64;
                }
            }
        }
        (
            out.into_iter().map(|x| x as f32).collect(),
            weights.into_iter().map(|x| x as f32).collect(),
        )
    }

    #[test]
    fn single_key_gets_all_weight() {
        let a = attention(&[0.3, 0.1], &[1.0, 2.0], &[5.0, -1.0], 2, AttentionMask::causal(0)).unwrap();
        assert_eq!(a.weights, vec![1.0]);
        assert_eq!(a.output, vec![5.0, -1.0]);
    }

    #[test]
    fn identical_keys_split_evenly() {
        let a = attention(
            &[0.3, 0.1],
            &[1.0, 2.0, 1.0, 2.0],
            &[1.0, 0.0, 0.0, 1.0],
            2,
            AttentionMask::causal(1),
        )
        .unwrap();
        assert!((a.weights[0] - 0.5).abs() < 1e-7 && (a.weights[1] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn random_three_by_three_matches_dense_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 4;
        for _ in 0..20 {
            let mut gen = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
            let (q, k, v) = (gen(3 * d), gen(3 * d), gen(3 * d));
            // past_len = 3 makes every row see all three keys
            let a = attention(&q, &k, &v, d, AttentionMask::causal(3)).unwrap();
            let (out, w) = dense_reference(&q, &k, &v, d);
            for (x, y) in a.output.iter().zip(&out) {
                assert!((x - y).abs() < 1e-5);
            }
            for (x, y) in a.weights.iter().zip(&w) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn causal_and_padding_entries_are_zero() {
        let d = 2;
        let keys = vec![0.5; 4 * d];
        let pad = [false, true, false, false];
        let a = attention(&vec![0.1; 3 * d], &keys, &keys, d, AttentionMask::with_padding(1, &pad)).unwrap();
        let w = |r: usize, c: usize| a.weights[r * 4 + c];
        assert!(w(0, 1) > 0.0); // a padding token still sees itself
        assert_eq!(w(1, 1), 0.0);
        assert_eq!(w(0, 2), 0.0);
        assert_eq!(w(0, 3), 0.0);
        assert_eq!(w(1, 3), 0.0);
        for r in 0..3 {
            let s: f32 = a.weights[r * 4..(r + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert_eq!(a.scored_pairs, 2 + 2 + 3);
    }

    #[test]
    fn shape_errors() {
        assert!(attention(&[0.0; 2], &[0.0; 4], &[0.0; 2], 2, AttentionMask::causal(1)).is_err());
        assert!(attention(&[0.0; 3], &[0.0; 4], &[0.0; 4], 2, AttentionMask::causal(1)).is_err());
    }
}
