use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_cachefocus");

const CORPUS: &str = r#"{"id": "eiffel", "title": "Eiffel Tower", "text": "The Eiffel Tower is a wrought-iron tower in Paris, France."}
{"id": "nile", "title": "Nile", "text": "The Nile is a major river flowing north through Africa into the sea."}
{"id": "moon", "title": "Moon", "text": "The Moon is the only natural satellite orbiting the Earth."}
{"id": "piano", "title": "Piano", "text": "A piano is a keyboard instrument that produces sound with hammers."}
{"id": "rome", "title": "Rome", "text": "Rome is the capital city of Italy and was the center of an empire."}
{"id": "volcano", "title": "Volcano", "text": "A volcano is a rupture in the crust where lava and ash escape."}
{"id": "amazon", "title": "Amazon", "text": "The Amazon rainforest covers much of the basin of the Amazon river."}
{"id": "tokyo", "title": "Tokyo", "text": "Tokyo is the capital of Japan and one of the largest cities."}
"#;

fn cachefocus(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cachefocus(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

struct Setup {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Setup {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        fs::write(root.join("corpus.jsonl"), CORPUS).unwrap();
        let s = Self { _dir: dir, root };
        ok(&["index", "--corpus", &s.p("corpus.jsonl"), "--index", &s.p("index.bin")]);
        ok(&["build-cache", "--corpus", &s.p("corpus.jsonl"), "--store", &s.p("store")]);
        s
    }

    fn p(&self, name: &str) -> String {
        self.root.join(name).display().to_string()
    }

    fn run(&self, extra: &[&str]) -> String {
        let (index, store) = (self.p("index.bin"), self.p("store"));
        let mut args = vec!["run", "--index", &index, "--store", &store];
        args.extend_from_slice(extra);
        ok(&args)
    }
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(files(&path));
        } else {
            out.push((path.clone(), fs::read(&path).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn index_is_reproducible() {
    let s = Setup::new();
    let first = fs::read(s.p("index.bin")).unwrap();
    let msg = ok(&["index", "--corpus", &s.p("corpus.jsonl"), "--index", &s.p("index.bin")]);
    assert!(msg.contains("indexed 8 documents"));
    assert_eq!(fs::read(s.p("index.bin")).unwrap(), first);
}

#[test]
fn build_cache_counts_and_rebuilds_identically() {
    let s = Setup::new();
    let before = files(Path::new(&s.p("store")));
    // 8 documents, 1 prefix, manifest and store pointer.
    assert_eq!(before.len(), 11);
    let msg = ok(&["build-cache", "--corpus", &s.p("corpus.jsonl"), "--store", &s.p("store")]);
    assert!(msg.contains("entries: 8 documents + 1 prefix"));
    assert_eq!(files(Path::new(&s.p("store"))), before);
}

#[test]
fn stale_store_needs_force() {
    let s = Setup::new();
    let out = cachefocus(&["build-cache", "--corpus", &s.p("corpus.jsonl"), "--store", &s.p("store"), "--seed", "9"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("another model"));
    ok(&["build-cache", "--corpus", &s.p("corpus.jsonl"), "--store", &s.p("store"), "--seed", "9", "--force"]);
    let run = cachefocus(&["run", "--query", "x", "--index", &s.p("index.bin"), "--store", &s.p("store")]);
    assert_eq!(run.status.code(), Some(1));
}

#[test]
fn naive_and_cached_agree_for_one_document() {
    let s = Setup::new();
    let common = ["--query", "capital of Japan", "--k", "1", "--gen-tokens", "12"];
    let naive = s.run(&[&common[..], &["--mode", "naive"]].concat());
    let cached = s.run(&[&common[..], &["--mode", "cache", "--strategy", "none"]].concat());
    assert_eq!(naive, cached);
}

#[test]
fn zero_documents_and_trace_schema() {
    let s = Setup::new();
    let trace_path = s.p("trace.json");
    s.run(&["--query", "anything", "--k", "0", "--gen-tokens", "3", "--trace", &trace_path]);
    let trace: serde_json::Value = serde_json::from_str(&fs::read_to_string(&trace_path).unwrap()).unwrap();
    assert_eq!(trace["retrieved_ids"].as_array().unwrap().len(), 0);

    let json = s.run(&["--query", "river capital city", "--k", "7", "--n", "2", "--k-finish", "2", "--strategy", "sort", "--out", "json"]);
    let t: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(t["final_ids"].as_array().unwrap().len(), 2);
    assert_eq!(t["strategy"], "sort");
    for key in ["prefill_s", "decode_s", "total_s"] {
        assert!(t["timings"][key].is_number());
    }
    for key in ["prefill_mults", "decode_mults"] {
        assert!(t["op_counts"][key].as_u64().unwrap() > 0);
    }
    assert!(t["per_layer_scores"].as_array().unwrap().len() == 8);
}

#[test]
fn bench_reports_csv_and_json() {
    let s = Setup::new();
    let base = [
        "bench", "--query", "capital city river", "--index", &s.p("index.bin"), "--store", &s.p("store"),
        "--doc-counts", "1,2", "--gen-tokens", "4", "--modes", "naive,cache,prune",
    ];
    let csv = ok(&base);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "mode,context_length,doc_count,prefill_s,decode_s,total_s,prefill_mults,decode_mults");
    assert_eq!(lines.len(), 1 + 6);
    let out = s.p("bench.json");
    ok(&[&base[..], &["--out", "json", "--output", &out]].concat());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(report["ratios"].as_array().unwrap().len(), 3);
    // Operation counts are deterministic across invocations.
    for (line, row) in lines[1..].iter().zip(rows) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[6].parse::<u64>().unwrap(), row["prefill_mults"].as_u64().unwrap());
        assert_eq!(f[7].parse::<u64>().unwrap(), row["decode_mults"].as_u64().unwrap());
    }
}

#[test]
fn score_command() {
    assert_eq!(ok(&["score", "--output", "The answer is Paris.", "--gold", "paris"]).trim(), "true");
    assert_eq!(ok(&["score", "--output", "par is", "--gold", "Paris"]).trim(), "false");
}

#[test]
fn user_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = cachefocus(&["index", "--corpus", "/nonexistent/c.jsonl", "--index", "/tmp/x"]);
    assert_eq!(missing.status.code(), Some(1));

    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{\"id\": \"a\", \"text\": \"x\"}\n{oops\n").unwrap();
    let out = cachefocus(&["index", "--corpus", bad.to_str().unwrap(), "--index", dir.path().join("i").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.jsonl:2:"));

    let dup = dir.path().join("dup.jsonl");
    fs::write(&dup, "{\"id\": \"a\", \"text\": \"x\"}\n{\"id\": \"a\", \"text\": \"y\"}\n").unwrap();
    let out = cachefocus(&["index", "--corpus", dup.to_str().unwrap(), "--index", dir.path().join("i").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));

    assert_eq!(cachefocus(&["run", "--bogus"]).status.code(), Some(1));
    assert_eq!(cachefocus(&["--help"]).status.code(), Some(0));
}
