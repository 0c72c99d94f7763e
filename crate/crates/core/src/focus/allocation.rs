//! Reuse-group sizing and position assignment for retrieved caches.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How surviving caches are laid out after pruning.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllocationStrategy {
    /// Keep prefill positions, gaps included.
    #[default]
    None,
    /// Compact next to the query, keeping the current relative order.
    Align,
    /// Compact next to the query, highest accumulated score nearest.
    Sort,
}

impl fmt::Display for AllocationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Align => "align",
            Self::Sort => "sort",
        })
    }
}

impl FromStr for AllocationStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "align" => Ok(Self::Align),
            "sort" => Ok(Self::Sort),
            other => Err(Error::InvalidArgument(format!("unknown strategy `{other}`"))),
        }
    }
}

/// Number of `cache_len` slots that fit between the prefix and the reserved tail.
pub fn usable_slots(
    max_position: usize,
    prefix_len: usize,
    reserve: usize,
    cache_len: usize,
) -> Result<usize> {
    if cache_len == 0 {
        return Err(Error::Config("cache length must be positive".into()));
    }
    let usable = max_position.saturating_sub(prefix_len + reserve);
    if cache_len > usable {
        return Err(Error::Config(format!(
            "cache length {cache_len} exceeds the usable positional range {usable} \
             (max_position {max_position}, prefix {prefix_len}, reserve {reserve})"
        )));
    }
    Ok(usable / cache_len)
}

/// Smallest group count such that no group holds more than `capacity` caches.
pub fn n_reuse_for_capacity(k: usize, capacity: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::InvalidArgument("at least one cache is required".into()));
    }
    if capacity == 0 {
        return Err(Error::Config("no cache slot fits in the positional range".into()));
    }
    Ok(k.div_ceil(capacity))
}

pub fn compute_n_reuse(
    k: usize,
    max_position: usize,
    cache_len: usize,
    prefix_len: usize,
    reserve: usize,
) -> Result<usize> {
    n_reuse_for_capacity(k, usable_slots(max_position, prefix_len, reserve, cache_len)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Placement {
    pub cache: usize,
    pub group: usize,
    pub slot: usize,
    pub start: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AllocationPlan {
    pub n_reuse: usize,
    pub cache_len: usize,
    pub prefix_len: usize,
    /// In the order the ids were dealt.
    pub placements: Vec<Placement>,
}

impl AllocationPlan {
    pub fn len(&self) -> usize {
        self.placements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.placements.is_empty()
    }

    /// Every cache shares the same position range.
    pub fn is_parallel(&self) -> bool {
        self.n_reuse == self.placements.len()
    }

    pub fn slots(&self) -> usize {
        self.placements.iter().map(|p| p.slot + 1).max().unwrap_or(0)
    }

    /// One past the last position any cache occupies (`prefix_len` if empty).
    pub fn end(&self) -> usize {
        self.placements
            .iter()
            .map(|p| p.start + self.cache_len)
            .max()
            .unwrap_or(self.prefix_len)
    }

    pub fn get(&self, cache: usize) -> Option<&Placement> {
        self.placements.iter().find(|p| p.cache == cache)
    }

    pub fn check(&self, max_position: usize) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for p in &self.placements {
            if !seen.insert(p.cache) {
                return Err(Error::Config(format!("cache {} placed twice", p.cache)));
            }
            if p.start + self.cache_len > max_position {
                return Err(Error::PositionOutOfRange {
                    position: p.start + self.cache_len - 1,
                    max_position,
                });
            }
        }
        Ok(())
    }
}

/// Deals `ids` round-robin: the `r`-th id goes to group `r % n_reuse`, slot `r / n_reuse`.
pub fn plan_positions(
    ids: &[usize],
    n_reuse: usize,
    cache_len: usize,
    prefix_len: usize,
) -> Result<AllocationPlan> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("nothing to place".into()));
    }
    if n_reuse == 0 {
        return Err(Error::Config("n_reuse must be positive".into()));
    }
    let placements = ids
        .iter()
        .enumerate()
        .map(|(r, &cache)| {
            let slot = r / n_reuse;
            Placement {
                cache,
                group: r % n_reuse,
                slot,
                start: prefix_len + slot * cache_len,
            }
        })
        .collect();
    Ok(AllocationPlan {
        n_reuse,
        cache_len,
        prefix_len,
        placements,
    })
}
