//! Final placement of surviving caches before decoding.

use serde::Serialize;

use super::allocation::{AllocationPlan, AllocationStrategy, Placement};
use super::prefill::{layer_context, PositionBudget};
use crate::cache_store::{CacheStoreEntry, PrefixCacheEntry};
use crate::error::{Error, Result};
use crate::model::{KVCache, Model};

/// A surviving cache as it stood at the end of pre-fill.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Survivor {
    /// Cache id, which is also its retrieval rank.
    pub cache: usize,
    pub start: usize,
    pub group: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinalLayout {
    pub strategy: AllocationStrategy,
    pub plan: AllocationPlan,
    pub query_start: usize,
}

impl FinalLayout {
    /// Caches ordered from the query outwards: the first one is closest to it.
    /// Caches sharing a slot are ordered by group.
    pub fn nearest_first(&self) -> Vec<Placement> {
        let mut ps = self.plan.placements.clone();
        ps.sort_by(|a, b| b.start.cmp(&a.start).then(a.group.cmp(&b.group)));
        ps
    }
}

/// Orders survivors so that element 0 is the one to put closest to the query.
pub fn proximity_order(survivors: &[Survivor], strategy: AllocationStrategy) -> Vec<Survivor> {
    let mut order = survivors.to_vec();
    match strategy {
        AllocationStrategy::None | AllocationStrategy::Align => {
            order.sort_by(|a, b| b.start.cmp(&a.start).then(a.group.cmp(&b.group)));
        }
        AllocationStrategy::Sort => {
            order.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.cache.cmp(&b.cache)));
        }
    }
    order
}

/// Computes where survivors go. `none` keeps their pre-fill starts and the
/// query where it was; `align` and `sort` pack them into a gap-free block
/// right after the prefix, in [`proximity_order`], with the query right after.
pub fn final_layout(
    survivors: &[Survivor],
    strategy: AllocationStrategy,
    budget: PositionBudget,
    prefill_query_start: usize,
) -> Result<FinalLayout> {
    if strategy == AllocationStrategy::None || survivors.is_empty() {
        let query_start = if survivors.is_empty() && strategy != AllocationStrategy::None {
            budget.prefix_len
        } else {
            prefill_query_start
        };
        let n_reuse = survivors.iter().map(|s| s.group + 1).max().unwrap_or(1);
        return Ok(FinalLayout {
            strategy,
            plan: AllocationPlan {
                n_reuse,
                cache_len: budget.cache_len,
                prefix_len: budget.prefix_len,
                placements: survivors
                    .iter()
                    .map(|s| Placement {
                        cache: s.cache,
                        group: s.group,
                        slot: (s.start - budget.prefix_len) / budget.cache_len,
                        start: s.start,
                    })
                    .collect(),
            },
            query_start,
        });
    }
    let order = proximity_order(survivors, strategy);
    let groups = budget.n_reuse(order.len())?;
    let slots = order.len().div_ceil(groups);
    let placements: Vec<Placement> = order
        .iter()
        .enumerate()
        .map(|(r, s)| {
            let slot = slots - 1 - r / groups;
            Placement {
                cache: s.cache,
                group: r % groups,
                slot,
                start: budget.prefix_len + slot * budget.cache_len,
            }
        })
        .collect();
    Ok(FinalLayout {
        strategy,
        plan: AllocationPlan {
            n_reuse: groups,
            cache_len: budget.cache_len,
            prefix_len: budget.prefix_len,
            placements,
        },
        query_start: budget.prefix_len + slots * budget.cache_len,
    })
}

/// Builds the decode cache: prefix, documents at their final starts, then the
/// query's cached keys and values shifted to `layout.query_start`. Nothing is
/// recomputed.
pub fn final_reposition(
    model: &Model,
    prefix: &PrefixCacheEntry,
    docs: &[CacheStoreEntry],
    query_kv: &KVCache,
    prefill_query_start: usize,
    layout: &FinalLayout,
) -> Result<KVCache> {
    if query_kv.num_layers() != model.config().num_layers {
        return Err(Error::Shape("query cache layer count does not match the model".into()));
    }
    let delta = layout.query_start as i64 - prefill_query_start as i64;
    let rope = &model.config().rope;
    let layers = (0..model.config().num_layers)
        .map(|l| {
            let mut ctx = layer_context(model, prefix, docs, &layout.plan, l);
            let mut q = query_kv.layer(l).clone();
            let n = q.len();
            q.shift(rope, 0..n, delta);
            ctx.extend(&q);
            ctx
        })
        .collect();
    KVCache::from_layers(layers)
}
