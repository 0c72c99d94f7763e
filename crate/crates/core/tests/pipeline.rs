mod common;

use std::collections::BTreeSet;

use cachefocus::cache_store::{build_document_cache, CacheStore};
use cachefocus::corpus::Passage;
use cachefocus::focus::{
    layer_context, plan_positions, prefill_observed, query_tokens, run_with_documents,
    AllocationStrategy, Mode, Pipeline, PositionBudget, PruningSchedule, RunConfig,
};
use cachefocus::model::{AttentionMap, Segment};
use cachefocus::retrieval::InvertedIndex;
use cachefocus::rope::{apply_rope, unrotate};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(mode: Mode, strategy: AllocationStrategy, gen_tokens: usize) -> RunConfig {
    RunConfig {
        mode,
        strategy,
        schedule: PruningSchedule::new(1, 2).unwrap(),
        gen_tokens,
        stop: None,
    }
}

#[test]
fn single_document_matches_naive_forward() {
    for seed in 0..3 {
        let model = small_model(seed);
        let (prefix, docs) = build_caches(&model, &passages(1, seed, 12), 48);
        let naive = run_with_documents(&model, &prefix, &docs, "where is paris", &config(Mode::Naive, AllocationStrategy::None, 12)).unwrap();
        for mode in [Mode::Cache, Mode::NoCache, Mode::Prune] {
            let cached = run_with_documents(&model, &prefix, &docs, "where is paris", &config(mode, AllocationStrategy::None, 12)).unwrap();
            assert_eq!(naive.tokens, cached.tokens, "seed {seed} mode {mode}");
            assert_eq!(naive.trace.query_start, cached.trace.query_start);
        }
    }
}

#[test]
fn no_documents_answers_from_prefix_and_query() {
    let model = small_model(3);
    let (prefix, _) = build_caches(&model, &passages(1, 0, 5), 16);
    let out = run_with_documents(&model, &prefix, &[], "hello", &config(Mode::Prune, AllocationStrategy::Sort, 6)).unwrap();
    let mut all = prefix.tokens.clone();
    all.extend(query_tokens("hello"));
    assert_eq!(out.tokens, model.generate(&all, 6, None).unwrap());
    assert_eq!(out.trace.n_reuse, 0);
    assert!(out.trace.final_ids.is_empty());
}

#[test]
fn pruning_reaches_k_finish_with_nested_sets() {
    let model = small_model(7);
    let (prefix, docs) = build_caches(&model, &passages(9, 1, 20), 32);
    let cfg = RunConfig {
        schedule: PruningSchedule::new(2, 3).unwrap(),
        ..config(Mode::Prune, AllocationStrategy::Sort, 4)
    };
    let out = run_with_documents(&model, &prefix, &docs, "capital city", &cfg).unwrap();
    let t = &out.trace;
    assert_eq!(t.final_ids.len(), 3);
    assert_eq!(t.per_layer_scores.len(), 4);
    let sets: Vec<BTreeSet<&String>> = t.per_layer_scores.iter().map(|m| m.keys().collect()).collect();
    for w in sets.windows(2) {
        assert!(w[1].is_subset(&w[0]));
    }
    assert_eq!(t.pruned_at_layer.len(), 6);
    assert!(t.pruned_at_layer.values().all(|&l| l == 2 || l == 4));

    // The JSON trace carries every documented field.
    let json: serde_json::Value = serde_json::to_value(t).unwrap();
    for key in [
        "query", "retrieved_ids", "n_reuse", "plan", "per_layer_scores", "pruned_at_layer",
        "final_ids", "strategy", "timings", "op_counts",
    ] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    let timings = &json["timings"];
    let sum = timings["prefill_s"].as_f64().unwrap() + timings["decode_s"].as_f64().unwrap();
    assert_eq!(sum, timings["total_s"].as_f64().unwrap());
}

/// Sum of attention on document `id` recomputed straight from the map.
fn mass(map: &AttentionMap, id: u32) -> f64 {
    let mut total = 0.0f64;
    for h in 0..map.num_heads {
        for r in 0..map.rows {
            for c in 0..map.cols {
                if map.segments[c] == Segment::Document(id) {
                    total += map.weights[h][r * map.cols + c] as f64;
                }
            }
        }
    }
    total / (map.num_heads * map.rows) as f64
}

#[test]
fn scores_equal_sum_of_recorded_maps() {
    let model = small_model(11);
    let (prefix, docs) = build_caches(&model, &passages(6, 2, 10), 24);
    let query = query_tokens("ocean island");
    let budget = PositionBudget::new(512, prefix.len(), 24, query.len() + 4).unwrap();
    let mut maps = Vec::new();
    let out = prefill_observed(
        &model,
        &prefix,
        &docs,
        &query,
        Some(PruningSchedule::new(2, 2).unwrap()),
        budget,
        |_, m| maps.push(m.clone()),
    )
    .unwrap();
    let mut expected = vec![0.0f64; docs.len()];
    for (layer, map) in maps.iter().enumerate() {
        for &(id, score) in &out.state.history()[layer] {
            expected[id] += mass(map, id as u32);
            assert!((expected[id] - score).abs() < 1e-5, "layer {layer} doc {id}");
        }
        for row in 0..map.rows {
            for h in 0..map.num_heads {
                let s: f32 = map.row(h, row).iter().sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn repositioned_cache_logits_match_fresh_rotation() {
    let model = small_model(5);
    let rope = model.config().rope;
    let (prefix, docs) = build_caches(&model, &passages(4, 3, 10), 16);
    let plan = plan_positions(&[0, 1, 2, 3], 2, 16, prefix.len()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = model.config().head_dim;
    for layer in 0..model.config().num_layers {
        let ctx = layer_context(&model, &prefix, &docs, &plan, layer);
        let q: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut offset = prefix.len();
        for p in &plan.placements {
            let entry = &docs[p.cache];
            for t in 0..entry.token_count() {
                for h in 0..model.config().num_heads {
                    let stored = entry.kv.layer(layer).key(t, h);
                    let fresh = apply_rope(&rope, &unrotate(&rope, &stored).unwrap(), p.start + t).unwrap();
                    let moved = ctx.key(offset + t, h);
                    assert_eq!(moved.position, Some(p.start + t));
                    let a: f32 = q.iter().zip(&moved.values).map(|(x, y)| x * y).sum();
                    let b: f32 = q.iter().zip(&fresh.values).map(|(x, y)| x * y).sum();
                    let scale = (q.iter().map(|x| x * x).sum::<f32>() * fresh.norm().powi(2)).sqrt().max(1.0);
                    assert!((a - b).abs() <= 1e-5 * scale, "layer {layer}: {a} vs {b}");
                }
            }
            offset += entry.token_count();
        }
    }
}

#[test]
fn caches_do_not_depend_on_queries() {
    let model = small_model(2);
    let ps = passages(3, 4, 8);
    let (prefix, before) = build_caches(&model, &ps, 16);
    run_with_documents(&model, &prefix, &before, "music", &config(Mode::Prune, AllocationStrategy::Sort, 3)).unwrap();
    let after = build_document_cache(&model, &prefix, &ps[1].id, &ps[1].tokens(), 16).unwrap();
    assert_eq!(after, before[1]);
}

#[test]
fn none_without_pruning_keeps_prefill_layout() {
    let model = small_model(9);
    let (prefix, docs) = build_caches(&model, &passages(5, 5, 10), 16);
    let out = run_with_documents(&model, &prefix, &docs, "tower", &config(Mode::Cache, AllocationStrategy::None, 2)).unwrap();
    let mut plan = out.trace.plan.clone();
    let mut layout = out.trace.final_layout.clone();
    plan.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    layout.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    assert_eq!(plan, layout);
}

#[test]
fn decode_starts_after_final_layout() {
    let model = small_model(4);
    let (prefix, docs) = build_caches(&model, &passages(8, 6, 10), 16);
    for strategy in [AllocationStrategy::None, AllocationStrategy::Align, AllocationStrategy::Sort] {
        let out = run_with_documents(&model, &prefix, &docs, "moon star", &config(Mode::Prune, strategy, 3)).unwrap();
        let cache = &out.final_cache;
        let q = query_tokens("moon star").len();
        let query_positions: Vec<usize> = cache
            .positions()
            .iter()
            .zip(cache.segments())
            .filter(|(_, s)| **s == Segment::Query)
            .map(|(&p, _)| p)
            .collect();
        let start = out.trace.query_start;
        assert_eq!(query_positions, (start..start + q).collect::<Vec<_>>());
        assert_eq!(cache.max_position(), Some(start + q - 1));
        if strategy != AllocationStrategy::None {
            let block_end = out.trace.final_layout.iter().map(|p| p.start + 16).max().unwrap();
            assert_eq!(block_end, start);
        }
    }
}

#[test]
fn pipeline_over_store_and_index() {
    let model = small_model(13);
    let mut ps = passages(12, 8, 12);
    ps.push(Passage::new("target", "Eiffel", "the eiffel tower stands in paris france"));
    let (prefix, entries) = build_caches(&model, &ps, 24);
    let dir = tempfile::tempdir().unwrap();
    let mut store = CacheStore::create(dir.path(), &model, &prefix, 24, false).unwrap();
    store.save_entries(&entries).unwrap();
    let index = InvertedIndex::build(&ps).unwrap();

    let pipeline = Pipeline::new(&model, &store, &index).unwrap();
    let cfg = config(Mode::Prune, AllocationStrategy::Sort, 5);
    let out = pipeline.run("eiffel tower", 6, &cfg).unwrap();
    assert_eq!(out.trace.retrieved_ids[0], "target");
    assert_eq!(out.tokens.len(), 5);
    let again = pipeline.run("eiffel tower", 6, &cfg).unwrap();
    assert_eq!(out.tokens, again.tokens);
    assert_eq!(out.trace.op_counts, again.trace.op_counts);
}
