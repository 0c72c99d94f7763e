//! Retrieval, cache loading, pre-fill, final placement and decoding.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::allocation::{AllocationPlan, AllocationStrategy};
use super::layout::{final_layout, final_reposition, FinalLayout, Survivor};
use super::prefill::{check_documents, prefill_with_pruning, PositionBudget};
use super::pruning::PruningSchedule;
use crate::cache_store::{
    build_document_cache_counted, passage_segments, CacheStore, CacheStoreEntry, PrefixCacheEntry,
};
use crate::error::{Error, Result};
use crate::model::{KVCache, Model, OpCounts, Segment};
use crate::retrieval::InvertedIndex;
use crate::tokenizer::{self, TokenId, BOS, EOS};

/// Tokens of the shared prefix for `text`.
pub fn prefix_tokens(text: &str) -> Vec<TokenId> {
    let mut tokens = vec![BOS];
    tokens.extend(tokenizer::encode(text));
    tokens
}

/// Tokens fed after the documents for a question.
pub fn query_tokens(query: &str) -> Vec<TokenId> {
    tokenizer::encode(&format!("\nQuestion: {query}\nAnswer:"))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One monolithic forward over prefix, documents and query.
    Naive,
    /// Document caches computed at query time, then the cached path.
    NoCache,
    /// Stored caches, every document kept.
    Cache,
    /// Stored caches with layer-wise pruning.
    #[default]
    Prune,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Naive, Mode::NoCache, Mode::Cache, Mode::Prune];
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Naive => "naive",
            Mode::NoCache => "no_cache",
            Mode::Cache => "cache",
            Mode::Prune => "prune",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Mode::Naive),
            "no-cache" | "no_cache" => Ok(Mode::NoCache),
            "cache" => Ok(Mode::Cache),
            "prune" => Ok(Mode::Prune),
            other => Err(Error::InvalidArgument(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunConfig {
    pub mode: Mode,
    pub strategy: AllocationStrategy,
    pub schedule: PruningSchedule,
    /// Total tokens to produce, the pre-fill token included.
    pub gen_tokens: usize,
    pub stop: Option<TokenId>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Prune,
            strategy: AllocationStrategy::None,
            schedule: PruningSchedule::default(),
            gen_tokens: 32,
            stop: Some(EOS),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePlacement {
    pub doc_id: String,
    pub group: usize,
    pub slot: usize,
    pub start: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub prefill_s: f64,
    pub decode_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceOps {
    /// Attention multiply-accumulates while pre-filling (including online
    /// document encoding in `no_cache` mode).
    pub prefill_mults: u64,
    pub decode_mults: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub query: String,
    pub mode: Mode,
    pub retrieved_ids: Vec<String>,
    pub n_reuse: usize,
    pub plan: Vec<TracePlacement>,
    /// Cumulative score of every surviving document after each layer.
    pub per_layer_scores: Vec<BTreeMap<String, f64>>,
    /// 1-based layer at which a document was pruned.
    pub pruned_at_layer: BTreeMap<String, usize>,
    pub final_ids: Vec<String>,
    pub final_layout: Vec<TracePlacement>,
    pub query_start: usize,
    pub strategy: AllocationStrategy,
    pub timings: Timings,
    pub op_counts: TraceOps,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub trace: Trace,
    pub prefill_ops: OpCounts,
    pub decode_ops: OpCounts,
    /// The cache decoding started from.
    pub final_cache: KVCache,
}

fn placements(plan: &AllocationPlan, docs: &[CacheStoreEntry]) -> Vec<TracePlacement> {
    plan.placements
        .iter()
        .map(|p| TracePlacement {
            doc_id: docs[p.cache].doc_id.clone(),
            group: p.group,
            slot: p.slot,
            start: p.start,
        })
        .collect()
}

struct Prefilled {
    cache: KVCache,
    first_token: TokenId,
    ops: OpCounts,
    n_reuse: usize,
    plan: Vec<TracePlacement>,
    final_layout: Vec<TracePlacement>,
    query_start: usize,
    per_layer_scores: Vec<BTreeMap<String, f64>>,
    pruned_at_layer: BTreeMap<String, usize>,
    final_ids: Vec<String>,
}

fn prefill_without_documents(model: &Model, prefix: &PrefixCacheEntry, query: &[TokenId]) -> Result<Prefilled> {
    let mut cache = prefix.kv.clone();
    let pre = model.prefill(&mut cache, query)?;
    Ok(Prefilled {
        cache,
        first_token: pre.first_token,
        ops: pre.ops,
        n_reuse: 0,
        plan: Vec::new(),
        final_layout: Vec::new(),
        query_start: prefix.len(),
        per_layer_scores: Vec::new(),
        pruned_at_layer: BTreeMap::new(),
        final_ids: Vec::new(),
    })
}

fn prefill_naive(
    model: &Model,
    prefix: &PrefixCacheEntry,
    docs: &[CacheStoreEntry],
    query: &[TokenId],
) -> Result<Prefilled> {
    let mut tokens = prefix.tokens.clone();
    let mut segments = vec![Segment::Prefix; prefix.len()];
    let mut plan = Vec::with_capacity(docs.len());
    for (rank, d) in docs.iter().enumerate() {
        plan.push(TracePlacement {
            doc_id: d.doc_id.clone(),
            group: 0,
            slot: rank,
            start: tokens.len(),
        });
        tokens.extend(&d.tokens);
        segments.extend(
            passage_segments(d.token_count(), d.valid_len)
                .into_iter()
                .map(|s| s.with_document(rank as u32)),
        );
    }
    let query_start = tokens.len();
    tokens.extend(query);
    segments.extend(std::iter::repeat_n(Segment::Query, query.len()));
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let mut cache = model.empty_cache();
    let pre = model.prefill_at(&mut cache, &tokens, &positions, &segments)?;
    Ok(Prefilled {
        cache,
        first_token: pre.first_token,
        ops: pre.ops,
        n_reuse: 1,
        final_layout: plan.clone(),
        plan,
        query_start,
        per_layer_scores: Vec::new(),
        pruned_at_layer: BTreeMap::new(),
        final_ids: docs.iter().map(|d| d.doc_id.clone()).collect(),
    })
}

fn prefill_cached(
    model: &Model,
    prefix: &PrefixCacheEntry,
    docs: &[CacheStoreEntry],
    query: &[TokenId],
    cfg: &RunConfig,
) -> Result<Prefilled> {
    let cache_len = check_documents(model, prefix, docs)?;
    let budget = PositionBudget::new(
        model.config().rope.max_position(),
        prefix.len(),
        cache_len,
        query.len() + cfg.gen_tokens,
    )?;
    let schedule = (cfg.mode == Mode::Prune).then_some(cfg.schedule);
    let out = prefill_with_pruning(model, prefix, docs, query, schedule, budget)?;

    let survivors: Vec<Survivor> = out
        .final_plan
        .placements
        .iter()
        .map(|p| Survivor {
            cache: p.cache,
            start: p.start,
            group: p.group,
            score: out.state.score(p.cache),
        })
        .collect();
    let layout: FinalLayout = final_layout(&survivors, cfg.strategy, budget, out.query_start)?;
    let cache = final_reposition(model, prefix, docs, &out.query_kv, out.query_start, &layout)?;

    let id = |c: usize| docs[c].doc_id.clone();
    Ok(Prefilled {
        cache,
        first_token: out.first_token,
        ops: out.ops,
        n_reuse: out.initial_plan.n_reuse,
        plan: placements(&out.initial_plan, docs),
        final_layout: placements(&layout.plan, docs),
        query_start: layout.query_start,
        per_layer_scores: out
            .state
            .history()
            .iter()
            .map(|layer| layer.iter().map(|&(c, s)| (id(c), s)).collect())
            .collect(),
        pruned_at_layer: out
            .state
            .pruned_at()
            .iter()
            .enumerate()
            .filter_map(|(c, l)| l.map(|l| (id(c), l)))
            .collect(),
        final_ids: out.state.ranked().into_iter().map(id).collect(),
    })
}

/// Runs one query over already-retrieved documents. `docs[i]` is the `i`-th
/// ranked document; in `no_cache` mode only its tokens are used and its
/// cache is recomputed. An empty `docs` answers from prefix and query alone.
pub fn run_with_documents(
    model: &Model,
    prefix: &PrefixCacheEntry,
    docs: &[CacheStoreEntry],
    query_text: &str,
    cfg: &RunConfig,
) -> Result<RunOutput> {
    let query = query_tokens(query_text);
    let started = Instant::now();
    let mut extra = OpCounts::default();
    let online;
    let docs = if cfg.mode == Mode::NoCache {
        let mut built = Vec::with_capacity(docs.len());
        for d in docs {
            let (entry, ops) = build_document_cache_counted(
                model,
                prefix,
                &d.doc_id,
                &d.tokens[..d.valid_len],
                d.token_count(),
            )?;
            extra += ops;
            built.push(entry);
        }
        online = built;
        &online[..]
    } else {
        docs
    };

    let mut pre = if docs.is_empty() {
        prefill_without_documents(model, prefix, &query)?
    } else if cfg.mode == Mode::Naive {
        prefill_naive(model, prefix, docs, &query)?
    } else {
        prefill_cached(model, prefix, docs, &query, cfg)?
    };
    pre.ops += extra;
    let prefill_s = started.elapsed().as_secs_f64();

    let started = Instant::now();
    let mut tokens = Vec::new();
    let mut decode_ops = OpCounts::default();
    let final_cache = pre.cache.clone();
    if cfg.gen_tokens > 0 {
        tokens.push(pre.first_token);
        if cfg.gen_tokens > 1 && Some(pre.first_token) != cfg.stop {
            let d = model.decode(&mut pre.cache, pre.first_token, cfg.gen_tokens - 1, cfg.stop)?;
            decode_ops = d.ops;
            tokens.extend(d.tokens);
        }
    }
    let decode_s = started.elapsed().as_secs_f64();

    let trace = Trace {
        query: query_text.to_string(),
        mode: cfg.mode,
        retrieved_ids: docs.iter().map(|d| d.doc_id.clone()).collect(),
        n_reuse: pre.n_reuse,
        plan: pre.plan,
        per_layer_scores: pre.per_layer_scores,
        pruned_at_layer: pre.pruned_at_layer,
        final_ids: pre.final_ids,
        final_layout: pre.final_layout,
        query_start: pre.query_start,
        strategy: cfg.strategy,
        timings: Timings {
            prefill_s,
            decode_s,
            total_s: prefill_s + decode_s,
        },
        op_counts: TraceOps {
            prefill_mults: pre.ops.attention_macs,
            decode_mults: decode_ops.attention_macs,
        },
    };
    Ok(RunOutput {
        text: tokenizer::decode(&tokens),
        tokens,
        trace,
        prefill_ops: pre.ops,
        decode_ops,
        final_cache,
    })
}

/// Retrieval plus cache store in front of [`run_with_documents`].
pub struct Pipeline<'a> {
    model: &'a Model,
    store: &'a CacheStore,
    index: &'a InvertedIndex,
    prefix: PrefixCacheEntry,
}

impl<'a> Pipeline<'a> {
    pub fn new(model: &'a Model, store: &'a CacheStore, index: &'a InvertedIndex) -> Result<Self> {
        let prefix = store.load_prefix()?;
        Ok(Self {
            model,
            store,
            index,
            prefix,
        })
    }

    pub fn prefix(&self) -> &PrefixCacheEntry {
        &self.prefix
    }

    /// Top-`k` ids for `query`.
    pub fn retrieve(&self, query: &str, k: usize) -> Vec<String> {
        self.index.search(query, k).into_iter().map(|h| h.doc_id).collect()
    }

    pub fn load(&self, ids: &[String]) -> Result<Vec<CacheStoreEntry>> {
        ids.iter().map(|id| self.store.load_entry(id)).collect()
    }

    /// Retrieves, loads and runs. Cache loading time counts as pre-fill in the
    /// modes that read caches from the store.
    pub fn run(&self, query: &str, k: usize, cfg: &RunConfig) -> Result<RunOutput> {
        let started = Instant::now();
        let ids = self.retrieve(query, k);
        let docs = self.load(&ids)?;
        let load_s = started.elapsed().as_secs_f64();
        let mut out = run_with_documents(self.model, &self.prefix, &docs, query, cfg)?;
        if matches!(cfg.mode, Mode::Cache | Mode::Prune) {
            let t = &mut out.trace.timings;
            t.prefill_s += load_s;
            t.total_s = t.prefill_s + t.decode_s;
        }
        Ok(out)
    }
}
