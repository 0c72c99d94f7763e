//! Rotary position embeddings.
//!
//! Vectors are split into `head_dim / 2` two-dimensional slices using the
//! interleaved convention: dimension `2t` pairs with `2t + 1`. Slice `t` at
//! position `p` is rotated by `p * base^(-2t / head_dim)` radians.
//!
//! Because every 2-D rotation is orthogonal, a key rotated at position `i` can
//! be moved to position `j` without knowing its unrotated form:
//! `R_j R_i^T = R_(j - i)`. That identity is what lets stored caches be
//! re-positioned instead of recomputed.

use serde::Serialize;

use crate::error::{Error, Result};

/// Pairing convention tag written into cache file headers.
pub const PAIRING_INTERLEAVED: u8 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RopeConfig {
    head_dim: usize,
    base: f32,
    max_position: usize,
}

impl RopeConfig {
    pub fn new(head_dim: usize, base: f32, max_position: usize) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "head_dim must be a positive even integer, got {head_dim}"
            )));
        }
        if !(base > 1.0) || !base.is_finite() {
            return Err(Error::Config(format!("rope base must exceed 1, got {base}")));
        }
        if max_position == 0 {
            return Err(Error::Config("max_position must be at least 1".into()));
        }
        Ok(Self {
            head_dim,
            base,
            max_position,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f32 {
        self.base
    }

    /// Length of the positional range the model was configured for.
    pub fn max_position(&self) -> usize {
        self.max_position
    }

    pub fn num_pairs(&self) -> usize {
        self.head_dim / 2
    }

    /// Angular frequency of slice `pair`, in radians per position.
    pub fn frequency(&self, pair: usize) -> f64 {
        (self.base as f64).powf(-2.0 * pair as f64 / self.head_dim as f64)
    }

    pub fn check_position(&self, position: usize) -> Result<()> {
        if position >= self.max_position {
            return Err(Error::PositionOutOfRange {
                position,
                max_position: self.max_position,
            });
        }
        Ok(())
    }

    /// Rotation angle applied to slice `pair` of a vector at `position`.
    pub fn rotation_angle(&self, position: usize, pair: usize) -> Result<f64> {
        self.check_position(position)?;
        if pair >= self.num_pairs() {
            return Err(Error::Shape(format!(
                "pair index {pair} out of range for head_dim {}",
                self.head_dim
            )));
        }
        Ok(position as f64 * self.frequency(pair))
    }
}

/// Precomputed per-slice cosines and sines for one signed positional offset.
///
/// Offsets are not range-checked: positions past `max_position` extrapolate.
#[derive(Debug, Clone)]
pub struct Rotation {
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Rotation {
    pub fn new(config: &RopeConfig, offset: i64) -> Self {
        let (cos, sin) = (0..config.num_pairs())
            .map(|t| {
                let angle = offset as f64 * config.frequency(t);
                (angle.cos(), angle.sin())
            })
            .unzip();
        Self { cos, sin }
    }

    /// Rotates one `head_dim`-long vector in place.
    pub fn apply(&self, values: &mut [f32]) {
        debug_assert_eq!(values.len(), self.cos.len() * 2);
        for (t, pair) in values.chunks_exact_mut(2).enumerate() {
            let (x, y) = (pair[0] as f64, pair[1] as f64);
            let (c, s) = (self.cos[t], self.sin[t]);
            pair[0] = (x * c - y * s) as f32;
            pair[1] = (x * s + y * c) as f32;
        }
    }

    /// Rotates every `head_dim`-long chunk of `values` in place.
    pub fn apply_all(&self, values: &mut [f32]) {
        for chunk in values.chunks_exact_mut(self.cos.len() * 2) {
            self.apply(chunk);
        }
    }

    pub fn is_identity(&self) -> bool {
        self.sin.iter().all(|&s| s == 0.0) && self.cos.iter().all(|&c| c == 1.0)
    }
}

/// A key or query vector together with the position it is currently rotated at.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionedVector {
    pub values: Vec<f32>,
    /// `None` for an unrotated vector (equivalent to position 0).
    pub position: Option<usize>,
}

impl PositionedVector {
    pub fn unrotated(values: Vec<f32>) -> Self {
        Self {
            values,
            position: None,
        }
    }

    pub fn norm(&self) -> f32 {
        self.values.iter().map(|v| v * v).sum::<f32>().sqrt()
    }
}

fn check_shape(config: &RopeConfig, values: &[f32]) -> Result<()> {
    if !values.len().is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "rotary vectors need an even length, got {}",
            values.len()
        )));
    }
    if values.len() != config.head_dim {
        return Err(Error::Shape(format!(
            "expected a vector of length {}, got {}",
            config.head_dim,
            values.len()
        )));
    }
    Ok(())
}

/// Rotates an unrotated vector to `position`.
pub fn apply_rope(config: &RopeConfig, values: &[f32], position: usize) -> Result<PositionedVector> {
    check_shape(config, values)?;
    config.check_position(position)?;
    let mut rotated = values.to_vec();
    Rotation::new(config, position as i64).apply(&mut rotated);
    Ok(PositionedVector {
        values: rotated,
        position: Some(position),
    })
}

/// Recovers the unrotated form of `vector`.
pub fn unrotate(config: &RopeConfig, vector: &PositionedVector) -> Result<Vec<f32>> {
    check_shape(config, &vector.values)?;
    let mut values = vector.values.clone();
    if let Some(position) = vector.position {
        config.check_position(position)?;
        Rotation::new(config, -(position as i64)).apply(&mut values);
    }
    Ok(values)
}

/// Moves `vector` from its current position to `target`, applying `R_target R_current^T`.
pub fn reposition(
    config: &RopeConfig,
    vector: &PositionedVector,
    target: usize,
) -> Result<PositionedVector> {
    check_shape(config, &vector.values)?;
    config.check_position(target)?;
    let current = vector.position.unwrap_or(0);
    config.check_position(current)?;
    let mut values = vector.values.clone();
    if target != current {
        Rotation::new(config, target as i64 - current as i64).apply(&mut values);
    }
    Ok(PositionedVector {
        values,
        position: Some(target),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(head_dim: usize) -> RopeConfig {
        RopeConfig::new(head_dim, 10000.0, 4096).unwrap()
    }

    fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
        a.iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= tol * y.abs().max(1.0))
    }

    #[test]
    fn angle_examples() {
        assert_eq!(cfg(2).rotation_angle(0, 0).unwrap(), 0.0);
        assert!((cfg(2).rotation_angle(1, 0).unwrap() - 1.0).abs() < 1e-12);
        assert!((cfg(4).rotation_angle(1, 1).unwrap() - 0.01).abs() < 1e-12);
        for pair in 0..16 {
            assert_eq!(cfg(32).rotation_angle(0, pair).unwrap(), 0.0);
        }
    }

    #[test]
    fn angle_out_of_range() {
        assert!(matches!(
            cfg(2).rotation_angle(4096, 0),
            Err(Error::PositionOutOfRange { .. })
        ));
        assert!(cfg(4).rotation_angle(3, 2).is_err());
    }

    #[test]
    fn invalid_configs() {
        assert!(RopeConfig::new(3, 10000.0, 16).is_err());
        assert!(RopeConfig::new(0, 10000.0, 16).is_err());
        assert!(RopeConfig::new(4, 1.0, 16).is_err());
        assert!(RopeConfig::new(4, 10000.0, 0).is_err());
    }

    #[test]
    fn apply_examples() {
        let c = cfg(2);
        let v = apply_rope(&c, &[0.3, -0.7], 0).unwrap();
        assert_eq!(v.values, vec![0.3, -0.7]);

        let v = apply_rope(&c, &[1.0, 0.0], 1).unwrap();
        assert!((v.values[0] - 0.540_302_3).abs() < 1e-6);
        assert!((v.values[1] - 0.841_470_96).abs() < 1e-6);
        assert_eq!(v.position, Some(1));
    }

    #[test]
    fn apply_rejects_bad_shapes() {
        assert!(matches!(apply_rope(&cfg(4), &[1.0, 2.0, 3.0], 1), Err(Error::Shape(_))));
        assert!(matches!(apply_rope(&cfg(4), &[1.0, 2.0], 1), Err(Error::Shape(_))));
    }

    #[test]
    fn reposition_of_unrotated_matches_fresh_rotation() {
        let c = cfg(4);
        let k0 = vec![0.1, 0.2, -0.3, 0.4];
        let moved = reposition(&c, &PositionedVector::unrotated(k0.clone()), 9).unwrap();
        assert!(close(&moved.values, &apply_rope(&c, &k0, 9).unwrap().values, 1e-6));
    }

    fn vec_strategy(len: usize) -> impl Strategy<Value = Vec<f32>> {
        proptest::collection::vec(-1.0f32..1.0, len)
    }

    proptest! {
        #[test]
        fn reposition_to_same_position_is_identity(k0 in vec_strategy(16), i in 0usize..4096) {
            let c = cfg(16);
            let v = apply_rope(&c, &k0, i).unwrap();
            let same = reposition(&c, &v, i).unwrap();
            prop_assert!(close(&same.values, &v.values, 1e-6));
        }

        #[test]
        fn reposition_matches_fresh_rotation(k0 in vec_strategy(16), i in 0usize..4096, j in 0usize..4096) {
            let c = cfg(16);
            let moved = reposition(&c, &apply_rope(&c, &k0, i).unwrap(), j).unwrap();
            let fresh = apply_rope(&c, &k0, j).unwrap();
            prop_assert_eq!(moved.position, Some(j));
            prop_assert!(close(&moved.values, &fresh.values, 1e-5));
        }

        #[test]
        fn per_slice_norms_preserved(k0 in vec_strategy(8), p in 0usize..4096) {
            let v = apply_rope(&cfg(8), &k0, p).unwrap();
            for (a, b) in k0.chunks(2).zip(v.values.chunks(2)) {
                let na = (a[0] * a[0] + a[1] * a[1]).sqrt();
                let nb = (b[0] * b[0] + b[1] * b[1]).sqrt();
                prop_assert!((na - nb).abs() < 1e-5);
            }
        }

        #[test]
        fn unrotate_inverts_apply(k0 in vec_strategy(8), p in 0usize..4096) {
            let c = cfg(8);
            let back = unrotate(&c, &apply_rope(&c, &k0, p).unwrap()).unwrap();
            prop_assert!(close(&back, &k0, 1e-5));
        }
    }
}
