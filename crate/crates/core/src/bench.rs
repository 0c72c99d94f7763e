//! Latency and operation-count benchmark over growing document counts.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cache_store::{CacheStoreEntry, PrefixCacheEntry};
use crate::error::{Error, Result};
use crate::focus::{query_tokens, run_with_documents, AllocationStrategy, Mode, PruningSchedule, RunConfig};
use crate::model::Model;

pub const DEFAULT_GEN_TOKENS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: Mode,
    /// Prefix, document and query tokens.
    pub context_length: usize,
    pub doc_count: usize,
    pub prefill_s: f64,
    pub decode_s: f64,
    pub total_s: f64,
    pub prefill_mults: u64,
    pub decode_mults: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRatio {
    pub mode: Mode,
    pub from_docs: usize,
    pub to_docs: usize,
    pub context_ratio: f64,
    pub prefill_mults_ratio: f64,
    pub decode_mults_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub version: String,
    pub os: String,
    pub arch: String,
    pub threads: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub max_position: usize,
    pub cache_len: usize,
    pub prefix_len: usize,
    pub query_len: usize,
    pub gen_tokens: usize,
    pub n: usize,
    pub k_finish: usize,
    pub strategy: AllocationStrategy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub environment: Environment,
    pub rows: Vec<BenchRow>,
    pub ratios: Vec<ScalingRatio>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub doc_counts: Vec<usize>,
    pub modes: Vec<Mode>,
    pub gen_tokens: usize,
    pub strategy: AllocationStrategy,
    pub schedule: PruningSchedule,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            doc_counts: vec![1, 3, 7],
            modes: Mode::ALL.to_vec(),
            gen_tokens: DEFAULT_GEN_TOKENS,
            strategy: AllocationStrategy::None,
            schedule: PruningSchedule::default(),
        }
    }
}

pub const CSV_HEADER: &str =
    "mode,context_length,doc_count,prefill_s,decode_s,total_s,prefill_mults,decode_mults";

fn ratio(a: f64, b: f64) -> f64 {
    if a == 0.0 {
        f64::NAN
    } else {
        b / a
    }
}

/// Runs every mode over `pool[..count]` for each doc count, modes one after
/// another. Decoding always produces exactly `gen_tokens` tokens.
pub fn run_bench(
    model: &Model,
    prefix: &PrefixCacheEntry,
    pool: &[CacheStoreEntry],
    query: &str,
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    let needed = cfg.doc_counts.iter().copied().max().unwrap_or(0);
    if needed > pool.len() {
        return Err(Error::InvalidArgument(format!(
            "benchmark needs {needed} documents, only {} available",
            pool.len()
        )));
    }
    let cache_len = pool.first().map_or(0, CacheStoreEntry::token_count);
    let query_len = query_tokens(query).len();
    let mut rows = Vec::new();
    for &mode in &cfg.modes {
        let run = RunConfig {
            mode,
            strategy: cfg.strategy,
            schedule: cfg.schedule,
            gen_tokens: cfg.gen_tokens,
            stop: None,
        };
        for &count in &cfg.doc_counts {
            let out = run_with_documents(model, prefix, &pool[..count], query, &run)?;
            let t = out.trace.timings;
            rows.push(BenchRow {
                mode,
                context_length: prefix.len() + count * cache_len + query_len,
                doc_count: count,
                prefill_s: t.prefill_s,
                decode_s: t.decode_s,
                total_s: t.total_s,
                prefill_mults: out.trace.op_counts.prefill_mults,
                decode_mults: out.trace.op_counts.decode_mults,
            });
        }
    }

    let mut ratios = Vec::new();
    for &mode in &cfg.modes {
        let mine: Vec<&BenchRow> = rows.iter().filter(|r| r.mode == mode).collect();
        for w in mine.windows(2) {
            ratios.push(ScalingRatio {
                mode,
                from_docs: w[0].doc_count,
                to_docs: w[1].doc_count,
                context_ratio: ratio(w[0].context_length as f64, w[1].context_length as f64),
                prefill_mults_ratio: ratio(w[0].prefill_mults as f64, w[1].prefill_mults as f64),
                decode_mults_ratio: ratio(w[0].decode_mults as f64, w[1].decode_mults as f64),
            });
        }
    }

    let c = model.config();
    Ok(BenchReport {
        environment: Environment {
            version: env!("CARGO_PKG_VERSION").to_string(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            threads: rayon::current_num_threads(),
            num_layers: c.num_layers,
            num_heads: c.num_heads,
            head_dim: c.head_dim,
            max_position: c.rope.max_position(),
            cache_len,
            prefix_len: prefix.len(),
            query_len,
            gen_tokens: cfg.gen_tokens,
            n: cfg.schedule.n,
            k_finish: cfg.schedule.k_finish,
            strategy: cfg.strategy,
        },
        rows,
        ratios,
    })
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.mode,
                r.context_length,
                r.doc_count,
                r.prefill_s,
                r.decode_s,
                r.total_s,
                r.prefill_mults,
                r.decode_mults
            );
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn row(&self, mode: Mode, doc_count: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.mode == mode && r.doc_count == doc_count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> BenchReport {
        let row = |mode, n: usize, p: f64| BenchRow {
            mode,
            context_length: 10 * n,
            doc_count: n,
            prefill_s: p,
            decode_s: 0.1,
            total_s: p + 0.1,
            prefill_mults: 7 * n as u64,
            decode_mults: 3,
        };
        BenchReport {
            environment: Environment {
                version: "0".into(),
                os: "x".into(),
                arch: "y".into(),
                threads: 1,
                num_layers: 1,
                num_heads: 1,
                head_dim: 2,
                max_position: 8,
                cache_len: 2,
                prefix_len: 1,
                query_len: 1,
                gen_tokens: 1,
                n: 1,
                k_finish: 1,
                strategy: AllocationStrategy::None,
            },
            rows: vec![row(Mode::Naive, 1, 0.123456789), row(Mode::NoCache, 2, 1e-7)],
            ratios: Vec::new(),
        }
    }

    #[test]
    fn csv_and_json_agree() {
        let r = report();
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        let csv = r.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        for (line, row) in lines.zip(json["rows"].as_array().unwrap()) {
            let f: Vec<&str> = line.split(',').collect();
            assert_eq!(f[0], row["mode"].as_str().unwrap());
            for (i, key) in CSV_HEADER.split(',').enumerate().skip(1) {
                assert_eq!(f[i].parse::<f64>().unwrap(), row[key].as_f64().unwrap(), "{key}");
            }
        }
    }
}
