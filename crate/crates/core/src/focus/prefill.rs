//! Layer-by-layer query pre-fill over re-positioned document caches.

use std::time::Instant;

use super::allocation::{n_reuse_for_capacity, plan_positions, usable_slots, AllocationPlan};
use super::pruning::{PruningSchedule, PruningState};
use crate::cache_store::{CacheStoreEntry, PrefixCacheEntry};
use crate::error::{Error, Result};
use crate::model::{argmax, AttentionMap, KVCache, LayerCache, Model, OpCounts, Segment};
use crate::tokenizer::TokenId;

/// Positional budget shared by every layout of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PositionBudget {
    pub prefix_len: usize,
    pub cache_len: usize,
    /// Cache slots per group.
    pub capacity: usize,
}

impl PositionBudget {
    /// `reserve` covers the query and the tokens to be generated.
    pub fn new(max_position: usize, prefix_len: usize, cache_len: usize, reserve: usize) -> Result<Self> {
        Ok(Self {
            prefix_len,
            cache_len,
            capacity: usable_slots(max_position, prefix_len, reserve, cache_len)?,
        })
    }

    pub fn n_reuse(&self, k: usize) -> Result<usize> {
        n_reuse_for_capacity(k, self.capacity)
    }

    pub fn plan(&self, ids: &[usize]) -> Result<AllocationPlan> {
        plan_positions(ids, self.n_reuse(ids.len())?, self.cache_len, self.prefix_len)
    }
}

#[derive(Debug, Clone)]
pub struct PrefillOutcome {
    /// The query's own keys and values for every layer, at `query_start..`.
    pub query_kv: KVCache,
    pub query_start: usize,
    pub initial_plan: AllocationPlan,
    /// Layout seen by the last layer, restricted to the survivors.
    pub final_plan: AllocationPlan,
    /// Plan used at each layer (0-based index).
    pub layer_plans: Vec<AllocationPlan>,
    pub state: PruningState,
    pub first_token: TokenId,
    pub logits: Vec<f32>,
    pub ops: OpCounts,
    pub seconds: f64,
}

pub(crate) fn check_documents(
    model: &Model,
    prefix: &PrefixCacheEntry,
    docs: &[CacheStoreEntry],
) -> Result<usize> {
    let cache_len = docs
        .first()
        .map(CacheStoreEntry::token_count)
        .ok_or_else(|| Error::InvalidArgument("no document caches given".into()))?;
    for d in docs {
        d.validate_against(model, prefix)?;
        if d.token_count() != cache_len {
            return Err(Error::Config(format!(
                "entry `{}` has {} tokens, expected {cache_len}",
                d.doc_id,
                d.token_count()
            )));
        }
        if d.start_position != prefix.len() {
            return Err(Error::Config(format!(
                "entry `{}` starts at {}, prefix ends at {}",
                d.doc_id,
                d.start_position,
                prefix.len()
            )));
        }
    }
    Ok(cache_len)
}

/// Layer `layer` of the prefix followed by every planned document, each shifted
/// from its stored position to its planned start and labelled with its cache id.
pub fn layer_context(
    model: &Model,
    prefix: &PrefixCacheEntry,
    docs: &[CacheStoreEntry],
    plan: &AllocationPlan,
    layer: usize,
) -> LayerCache {
    let rope = &model.config().rope;
    let mut ctx = prefix.kv.layer(layer).clone();
    for p in &plan.placements {
        let entry = &docs[p.cache];
        let mut doc = entry.kv.layer(layer).clone();
        doc.relabel_documents(p.cache as u32);
        let n = doc.len();
        doc.shift(rope, 0..n, p.start as i64 - entry.start_position as i64);
        ctx.extend(&doc);
    }
    ctx
}

/// Runs the query through the model one layer at a time. Each layer attends to
/// the prefix plus the surviving documents placed by the current plan; document
/// scores accumulate from the attention maps and, when `schedule` prunes, the
/// lowest-scoring documents are removed and the rest re-planned by score.
///
/// `docs[i]` must be the cache of the `i`-th retrieved document.
pub fn prefill_with_pruning(
    model: &Model,
    prefix: &PrefixCacheEntry,
    docs: &[CacheStoreEntry],
    query: &[TokenId],
    schedule: Option<PruningSchedule>,
    budget: PositionBudget,
) -> Result<PrefillOutcome> {
    prefill_observed(model, prefix, docs, query, schedule, budget, |_, _| {})
}

/// [`prefill_with_pruning`], calling `on_layer(layer, map)` with each layer's
/// attention before scores are taken from it.
pub fn prefill_observed(
    model: &Model,
    prefix: &PrefixCacheEntry,
    docs: &[CacheStoreEntry],
    query: &[TokenId],
    schedule: Option<PruningSchedule>,
    budget: PositionBudget,
    mut on_layer: impl FnMut(usize, &AttentionMap),
) -> Result<PrefillOutcome> {
    let started = Instant::now();
    if query.is_empty() {
        return Err(Error::InvalidArgument("the query is empty".into()));
    }
    let cache_len = check_documents(model, prefix, docs)?;
    if cache_len != budget.cache_len || prefix.len() != budget.prefix_len {
        return Err(Error::Config("position budget does not match the caches".into()));
    }
    let cfg = model.config();
    let k = docs.len();
    let mut state = match schedule {
        Some(s) => PruningState::new(k, s, cfg.num_layers)?,
        None => PruningState::pass_through(k, PruningSchedule::default()),
    };

    let initial_plan = budget.plan(state.surviving())?;
    let query_start = initial_plan.end();
    let positions: Vec<usize> = (query_start..query_start + query.len()).collect();
    let segments = vec![Segment::Query; query.len()];
    if let Some(&last) = positions.last() {
        cfg.rope.check_position(last)?;
    }

    let mut hidden = model.embed(query)?;
    let mut plan = initial_plan.clone();
    let mut layer_plans = Vec::with_capacity(cfg.num_layers);
    let mut query_layers = Vec::with_capacity(cfg.num_layers);
    let mut ops = OpCounts::default();
    for layer in 0..cfg.num_layers {
        let mut ctx = layer_context(model, prefix, docs, &plan, layer);
        let past = ctx.len();
        let out = model.forward_layer(layer, &hidden, &positions, &segments, &mut ctx)?;
        query_layers.push(ctx.slice(past..ctx.len()));
        hidden = out.hidden;
        ops += out.ops;
        on_layer(layer, &out.attention);
        state.accumulate(&out.attention);
        layer_plans.push(plan.clone());

        let event = state.is_active() && state.events().contains(&(layer + 1));
        state.end_layer(layer + 1);
        if event && layer + 1 < cfg.num_layers {
            plan = budget.plan(state.surviving())?;
        }
    }

    let survivors = state.surviving();
    let final_plan = AllocationPlan {
        placements: plan
            .placements
            .iter()
            .filter(|p| survivors.contains(&p.cache))
            .copied()
            .collect(),
        ..plan
    };
    let hd = cfg.hidden_dim();
    let logits = model.logits(&hidden[hidden.len() - hd..]);
    ops.dense_macs += model.head_ops();
    Ok(PrefillOutcome {
        query_kv: KVCache::from_layers(query_layers)?,
        query_start,
        initial_plan,
        final_plan,
        layer_plans,
        first_token: argmax(&logits),
        logits,
        state,
        ops,
        seconds: started.elapsed().as_secs_f64(),
    })
}
