use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cachefocus::bench::{run_bench, BenchConfig};
use cachefocus::cache_store::{build_document_caches, build_prefix_cache, CacheStore, DEFAULT_PASSAGE_LEN};
use cachefocus::corpus::{check_unique_ids, read_corpus};
use cachefocus::focus::{prefix_tokens, AllocationStrategy, Mode, Pipeline, PruningSchedule, RunConfig};
use cachefocus::metrics::score_answer;
use cachefocus::model::{Model, ModelConfig, WeightSource};
use cachefocus::retrieval::InvertedIndex;
use cachefocus::tokenizer::EOS;

const DEFAULT_PREFIX: &str = "Answer the question using the passages below.\n";
const BUILD_CHUNK: usize = 64;

#[derive(Parser)]
#[command(name = "cachefocus", version, about = "Retrieval-augmented generation over reusable document KV caches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a BM25 index from a JSON-lines corpus.
    Index {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        index: PathBuf,
    },
    /// Encode the shared prefix and every passage into the cache store.
    BuildCache {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = DEFAULT_PREFIX)]
        prefix: String,
        #[arg(long, default_value_t = DEFAULT_PASSAGE_LEN)]
        passage_len: usize,
        /// Replace a store built for another model or prefix.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Answer one query.
    Run {
        #[arg(long)]
        query: String,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 32)]
        gen_tokens: usize,
        #[command(flatten)]
        focus: FocusArgs,
        #[arg(long, value_enum, default_value_t = ModeArg::Prune)]
        mode: ModeArg,
        /// Print the answer as text or the whole trace as JSON.
        #[arg(long, value_enum, default_value_t = RunOut::Text)]
        out: RunOut,
        /// Also write the trace JSON to this file.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Time and count work for every mode over growing document counts.
    Bench {
        #[arg(long)]
        query: String,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,3,7")]
        doc_counts: Vec<usize>,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "naive,no-cache,cache,prune")]
        modes: Vec<ModeArg>,
        #[arg(long, default_value_t = 100)]
        gen_tokens: usize,
        #[command(flatten)]
        focus: FocusArgs,
        #[arg(long, value_enum, default_value_t = BenchOut::Csv)]
        out: BenchOut,
        /// Write the report here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Check whether any gold answer occurs in a model output.
    Score {
        #[arg(long)]
        output: String,
        #[arg(long = "gold", required = true)]
        gold: Vec<String>,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// Seed for the random toy weights.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Load weights from a file instead of seeding them.
    #[arg(long)]
    weights: Option<PathBuf>,
}

impl ModelArgs {
    fn load(&self) -> Result<Model> {
        let source = match &self.weights {
            Some(p) => WeightSource::File(p.clone()),
            None => WeightSource::Seed(self.seed),
        };
        Ok(Model::from_source(ModelConfig::toy(), &source)?)
    }
}

#[derive(Args)]
struct FocusArgs {
    #[arg(long, value_enum, default_value_t = StrategyArg::None)]
    strategy: StrategyArg,
    /// Prune every n-th layer.
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long, default_value_t = 5)]
    k_finish: usize,
}

impl FocusArgs {
    fn schedule(&self) -> Result<PruningSchedule> {
        Ok(PruningSchedule::new(self.n, self.k_finish)?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    None,
    Align,
    Sort,
}

impl From<StrategyArg> for AllocationStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::None => AllocationStrategy::None,
            StrategyArg::Align => AllocationStrategy::Align,
            StrategyArg::Sort => AllocationStrategy::Sort,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Naive,
    NoCache,
    Cache,
    Prune,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Naive => Mode::Naive,
            ModeArg::NoCache => Mode::NoCache,
            ModeArg::Cache => Mode::Cache,
            ModeArg::Prune => Mode::Prune,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum RunOut {
    Text,
    Json,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum BenchOut {
    Csv,
    Json,
}

fn cmd_index(corpus: &Path, index: &Path) -> Result<()> {
    let passages = read_corpus(corpus)?;
    let built = InvertedIndex::build(&passages)?;
    built.save(index)?;
    println!("indexed {} documents into {}", built.doc_count(), index.display());
    Ok(())
}

fn cmd_build_cache(
    corpus: &Path,
    store_dir: &Path,
    prefix: &str,
    passage_len: usize,
    force: bool,
    model: &Model,
) -> Result<()> {
    let passages = read_corpus(corpus)?;
    check_unique_ids(passages.iter().map(|p| p.id.as_str()))?;
    let prefix = build_prefix_cache(model, &prefix_tokens(prefix))?;
    let mut store = CacheStore::create(store_dir, model, &prefix, passage_len, force)?;
    let docs: Vec<_> = passages
        .iter()
        .filter(|p| !p.tokens().is_empty())
        .map(|p| (p.id.clone(), p.tokens()))
        .collect();
    if docs.len() < passages.len() {
        log::warn!("skipped {} empty passages", passages.len() - docs.len());
    }
    for chunk in docs.chunks(BUILD_CHUNK) {
        let entries = build_document_caches(model, &prefix, chunk, passage_len)?;
        store.save_entries(&entries)?;
        log::info!("cached {} / {}", store.len(), docs.len());
    }
    println!(
        "entries: {} documents + 1 prefix, {} bytes in {}",
        store.len(),
        store.size_bytes()?,
        store.dir().display()
    );
    Ok(())
}

fn open(model: &Model, index: &Path, store: &Path) -> Result<(InvertedIndex, CacheStore)> {
    let index = InvertedIndex::load(index).with_context(|| format!("loading index {}", index.display()))?;
    let store = CacheStore::open(store, model)?;
    Ok((index, store))
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Index { corpus, index } => cmd_index(&corpus, &index),
        Command::BuildCache {
            corpus,
            store,
            prefix,
            passage_len,
            force,
            model,
        } => cmd_build_cache(&corpus, &store, &prefix, passage_len, force, &model.load()?),
        Command::Run {
            query,
            index,
            store,
            k,
            gen_tokens,
            focus,
            mode,
            out,
            trace,
            model,
        } => {
            let model = model.load()?;
            let (index, store) = open(&model, &index, &store)?;
            let pipeline = Pipeline::new(&model, &store, &index)?;
            let cfg = RunConfig {
                mode: mode.into(),
                strategy: focus.strategy.into(),
                schedule: focus.schedule()?,
                gen_tokens,
                stop: Some(EOS),
            };
            let result = pipeline.run(&query, k, &cfg)?;
            let json = serde_json::to_string_pretty(&result.trace)?;
            if let Some(path) = &trace {
                fs::write(path, format!("{json}\n")).with_context(|| format!("writing {}", path.display()))?;
            }
            match out {
                RunOut::Text => println!("{}", result.text),
                RunOut::Json => println!("{json}"),
            }
            Ok(())
        }
        Command::Bench {
            query,
            index,
            store,
            doc_counts,
            modes,
            gen_tokens,
            focus,
            out,
            output,
            model,
        } => {
            if doc_counts.is_empty() || doc_counts.contains(&0) {
                bail!(cachefocus::Error::InvalidArgument("doc counts must be positive".into()));
            }
            let model = model.load()?;
            let (index, store) = open(&model, &index, &store)?;
            let pipeline = Pipeline::new(&model, &store, &index)?;
            let needed = doc_counts.iter().copied().max().unwrap_or(0);
            let mut ids = pipeline.retrieve(&query, needed);
            if ids.len() < needed {
                // Too few lexical matches: top up with other stored documents.
                for id in store.doc_ids() {
                    if ids.len() == needed {
                        break;
                    }
                    if !ids.iter().any(|x| x == id) {
                        ids.push(id.to_string());
                    }
                }
            }
            let pool = pipeline.load(&ids)?;
            let cfg = BenchConfig {
                doc_counts,
                modes: modes.into_iter().map(Mode::from).collect(),
                gen_tokens,
                strategy: focus.strategy.into(),
                schedule: focus.schedule()?,
            };
            let report = run_bench(&model, pipeline.prefix(), &pool, &query, &cfg)?;
            let text = match out {
                BenchOut::Csv => report.to_csv(),
                BenchOut::Json => report.to_json()? + "\n",
            };
            write_or_print(output.as_deref(), &text)
        }
        Command::Score { output, gold } => {
            println!("{}", score_answer(&output, &gold));
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<cachefocus::Error>() {
        Some(e) if !e.is_user_error() => 2,
        Some(_) => 1,
        None if err.downcast_ref::<std::io::Error>().is_some() => 1,
        None => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
