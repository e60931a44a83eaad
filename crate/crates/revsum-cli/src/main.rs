//! Command-line front end for the review-summarization pipeline.
//!
//! - `prepare`: raw JSONL review dump (or a generated synthetic corpus) →
//!   dataset cache plus a stats summary.
//! - `train`: prepared cache → checkpoints, JSONL step log, run manifest.
//! - `generate`: checkpoint + cache → `id<TAB>value` summary and rating files.
//! - `evaluate`: decoded vs reference files → ROUGE and classification report.
//! - `ablate`: ablation-flag matrix → one trained and scored row per variant.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 runtime abort
//! (e.g. training divergence).

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use revsum_core::config::{AblationConfig, Config};
use revsum_core::corpus::{load_reviews, DatasetCache, DumpFormat, RawReview, TrainingExample};
use revsum_core::decoder::Strategy;
use revsum_core::error::Error as CoreError;
use revsum_core::metrics::{classification_report, evaluate_run, render_report, rouge_corpus};
use revsum_core::model::{build_param_store, generate_example};
use revsum_core::parallel::{map_indexed, ExecMode};
use revsum_core::params::{check_layout, load_checkpoint, store_from_params, ParamStore};
use revsum_core::synthetic::synthetic_reviews;
use revsum_core::trainer::{entity_rows, train};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "revsum", version, about = "Personalized review summarization pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a dataset cache (vocabulary, splits, histories) from a review dump.
    Prepare(PrepareArgs),
    /// Train a model on a prepared cache.
    Train(TrainArgs),
    /// Decode summaries and rating predictions from a checkpoint.
    Generate(GenerateArgs),
    /// Score decoded summaries and ratings against references.
    Evaluate(EvaluateArgs),
    /// Train and score a matrix of ablation variants.
    Ablate(AblateArgs),
}

/// Config source shared by the commands that build or train models.
#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; omit to start from --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in starting point when no --config is given: desk or paper.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Override one config value, e.g. --set train.lr=1e-4 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    /// Resolve the configuration; `extra` overrides apply after --set ones.
    fn load(&self, extra: &[String]) -> Result<Config> {
        let mut overrides = self.set.clone();
        overrides.extend_from_slice(extra);
        let cfg = match &self.config {
            Some(path) => Config::load(&path.display().to_string(), &overrides)?,
            None => Config::preset_with_overrides(&self.preset, &overrides)?,
        };
        Ok(cfg)
    }
}

#[derive(Args)]
struct PrepareArgs {
    /// Line-delimited JSON review dump with the public Amazon field names.
    #[arg(long, required_unless_present = "synthetic", conflicts_with = "synthetic")]
    input: Option<PathBuf>,
    /// Generate an N-record synthetic corpus instead of reading a dump.
    #[arg(long, value_name = "N")]
    synthetic: Option<usize>,
    /// Output directory for cache.json, stats.txt, and manifest.json.
    #[arg(long)]
    out: PathBuf,
    /// Vocabulary cap; shorthand for --set data.vocab_size=N.
    #[arg(long)]
    vocab_size: Option<usize>,
    /// Split seed; shorthand for --set data.split_seed=N.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// Prepared dataset cache from `revsum prepare`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory; the run lands in a config-hash subdirectory.
    #[arg(long)]
    out: PathBuf,
    /// Resume from a checkpoint file.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Run single-threaded even when data parallelism is available.
    #[arg(long)]
    sequential: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct GenerateArgs {
    /// Checkpoint file written by `revsum train`.
    #[arg(long)]
    ckpt: PathBuf,
    /// Prepared dataset cache matching the checkpoint's data settings.
    #[arg(long)]
    data: PathBuf,
    /// Which split to decode: train, val, or test.
    #[arg(long, default_value = "train")]
    split: String,
    /// Decoding strategy: greedy or beam.
    #[arg(long, default_value = "greedy")]
    strategy: String,
    /// Beam width when --strategy beam.
    #[arg(long, default_value_t = 4)]
    beam_width: usize,
    /// Output directory for the four id<TAB>value files.
    #[arg(long)]
    out: PathBuf,
    /// Run single-threaded even when data parallelism is available.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory holding the four files under their default names.
    #[arg(long)]
    dir: Option<PathBuf>,
    /// Decoded summaries (id<TAB>text); defaults to <dir>/decoded.tsv.
    #[arg(long)]
    decoded: Option<PathBuf>,
    /// Reference summaries; defaults to <dir>/references.tsv.
    #[arg(long)]
    references: Option<PathBuf>,
    /// Predicted ratings; defaults to <dir>/predictions.tsv.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Gold ratings; defaults to <dir>/golds.tsv.
    #[arg(long)]
    golds: Option<PathBuf>,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Prepared dataset cache.
    #[arg(long)]
    data: PathBuf,
    /// Output directory; each variant trains into its own subdirectory.
    #[arg(long)]
    out: PathBuf,
    /// Ablation flag to toggle, one per variant (repeatable),
    /// e.g. --variant no_contrastive --variant no_history_ratings.
    #[arg(long = "variant", value_name = "FLAG")]
    variants: Vec<String>,
    /// Which split to score after training: train, val, or test.
    #[arg(long, default_value = "train")]
    split: String,
    /// Run single-threaded even when data parallelism is available.
    #[arg(long)]
    sequential: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(args) => cmd_prepare(args),
        Command::Train(args) => cmd_train(args),
        Command::Generate(args) => cmd_generate(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Ablate(args) => cmd_ablate(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code(&err));
    }
}

/// 2 for anything the user can fix (paths, flags, config, file contents),
/// 3 for runtime aborts such as divergence.
fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(core) = cause.downcast_ref::<CoreError>() {
            return if core.is_input_error() { 2 } else { 3 };
        }
    }
    2
}

// ---------------------------------------------------------------------------
// prepare
// ---------------------------------------------------------------------------

fn cmd_prepare(args: PrepareArgs) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(v) = args.vocab_size {
        extra.push(format!("data.vocab_size={v}"));
    }
    if let Some(s) = args.seed {
        extra.push(format!("data.split_seed={s}"));
    }
    let cfg = args.config.load(&extra)?;

    let (records, skipped, source) = match (&args.input, args.synthetic) {
        (Some(path), None) => {
            let report = load_reviews(path, DumpFormat::Jsonl)?;
            (report.records, report.skipped, path.display().to_string())
        }
        (None, Some(n)) => (synthetic_reviews(n), 0, format!("synthetic:{n}")),
        _ => unreachable!("clap enforces exactly one of --input/--synthetic"),
    };

    let cache = revsum_core::corpus::prepare_dataset(&records, &cfg)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let cache_path = args.out.join("cache.json");
    cache.save(&cache_path)?;
    let stats_path = args.out.join("stats.txt");
    std::fs::write(&stats_path, prepare_stats(&records, skipped, &cache))
        .with_context(|| format!("writing {}", stats_path.display()))?;

    write_manifest(
        &args.out,
        serde_json::json!({
            "command": "prepare",
            "input": source,
            "config_hash": cfg.hash(),
            "data_hash": cfg.data_hash(),
            "files": {
                "cache.json": sha256_file(&cache_path)?,
                "stats.txt": sha256_file(&stats_path)?,
            },
        }),
    )?;
    println!(
        "prepared {} records ({} skipped) into {}: train {}, val {}, test {}",
        records.len(),
        skipped,
        args.out.display(),
        cache.train.len(),
        cache.val.len(),
        cache.test.len()
    );
    Ok(())
}

/// Counts, split sizes, mean token lengths, and the rating histogram.
fn prepare_stats(records: &[RawReview], skipped: usize, cache: &DatasetCache) -> String {
    let targets: Vec<&TrainingExample> =
        cache.train.iter().chain(&cache.val).chain(&cache.test).collect();
    let n = targets.len().max(1) as f64;
    let avg_review =
        targets.iter().map(|e| e.target.review_tokens.len()).sum::<usize>() as f64 / n;
    let avg_summary =
        targets.iter().map(|e| e.target.summary_tokens.len()).sum::<usize>() as f64 / n;
    let mut hist = [0usize; 5];
    for r in records {
        hist[(r.rating - 1) as usize] += 1;
    }
    let mut out = String::new();
    let _ = writeln!(out, "records = {}", records.len());
    let _ = writeln!(out, "skipped = {skipped}");
    let _ = writeln!(out, "train = {}", cache.train.len());
    let _ = writeln!(out, "val = {}", cache.val.len());
    let _ = writeln!(out, "test = {}", cache.test.len());
    let _ = writeln!(out, "vocab = {}", cache.vocab.len());
    let _ = writeln!(out, "customers = {}", cache.customers.len());
    let _ = writeln!(out, "products = {}", cache.products.len());
    let _ = writeln!(out, "avg_review_tokens = {avg_review:.2}");
    let _ = writeln!(out, "avg_summary_tokens = {avg_summary:.2}");
    for (i, count) in hist.iter().enumerate() {
        let _ = writeln!(out, "rating_{} = {count}", i + 1);
    }
    out
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = args.config.load(&[])?;
    let cache = DatasetCache::load(&args.data, Some(&cfg.data_hash()))?;
    let outcome = train(
        &cache,
        &cfg,
        &args.out,
        args.resume.as_deref(),
        ExecMode::from_flag(args.sequential),
    )?;
    println!("run_dir = {}", outcome.run_dir.display());
    println!("steps = {}", outcome.steps_run);
    println!("final_loss = {:.6}", outcome.final_loss);
    if let Some((step, score)) = outcome.best {
        println!("best_step = {step}");
        println!("best_rouge_l_f = {score:.6}");
    }
    println!("stopped_early = {}", outcome.stopped_early);
    println!("final_checkpoint = {}", outcome.final_checkpoint.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

/// (id, decoded text, reference text, predicted rating, gold rating) rows.
type DecodedRows = Vec<(String, String, String, u8, u8)>;

fn decode_split(
    store: &ParamStore,
    cfg: &Config,
    cache: &DatasetCache,
    examples: &[TrainingExample],
    strategy: Strategy,
    mode: ExecMode,
) -> Result<DecodedRows> {
    let vocab = cache.vocabulary()?;
    let rows = entity_rows(cache, examples);
    let decoded = map_indexed(mode, examples, |i, ex| -> revsum_core::error::Result<_> {
        let gen = generate_example(store, cfg, ex, rows[i], strategy)?;
        Ok((vocab.render(&gen.decode.tokens), gen.predicted_rating))
    });
    let mut out = Vec::with_capacity(examples.len());
    for (ex, item) in examples.iter().zip(decoded) {
        let (text, pred) = item?;
        out.push((
            ex.target.review_id.clone(),
            text,
            vocab.render(&ex.target.summary_tokens),
            pred,
            ex.target.rating,
        ));
    }
    Ok(out)
}

fn split_of<'c>(cache: &'c DatasetCache, name: &str) -> Result<&'c [TrainingExample]> {
    let examples: &[TrainingExample] = match name {
        "train" => &cache.train,
        "val" => &cache.val,
        "test" => &cache.test,
        other => bail!("unknown split '{other}' (expected train, val, or test)"),
    };
    if examples.is_empty() {
        bail!("split '{name}' is empty in this cache");
    }
    Ok(examples)
}

fn parse_strategy(name: &str, beam_width: usize) -> Result<Strategy> {
    match name {
        "greedy" => Ok(Strategy::Greedy),
        "beam" if beam_width == 0 => bail!("--beam-width must be at least 1"),
        "beam" => Ok(Strategy::Beam { width: beam_width }),
        other => bail!("unknown strategy '{other}' (expected greedy or beam)"),
    }
}

fn write_tsv(path: &Path, rows: impl Iterator<Item = (String, String)>) -> Result<()> {
    let mut body = String::new();
    for (id, value) in rows {
        let _ = writeln!(body, "{id}\t{value}");
    }
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let cfg = Config::from_toml_str(&ckpt.config_toml, &[])
        .context("parsing the config embedded in the checkpoint")?;
    let cache = DatasetCache::load(&args.data, Some(&cfg.data_hash()))?;
    let expected =
        build_param_store(&cfg, cache.vocab.len(), cache.customers.len(), cache.products.len());
    check_layout(&expected, &ckpt.params)?;
    let store = store_from_params(&ckpt.params);

    let examples = split_of(&cache, &args.split)?;
    let strategy = parse_strategy(&args.strategy, args.beam_width)?;
    let rows = decode_split(
        &store,
        &cfg,
        &cache,
        examples,
        strategy,
        ExecMode::from_flag(args.sequential),
    )?;

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let files = [
        ("decoded.tsv", 1usize),
        ("references.tsv", 2),
        ("predictions.tsv", 3),
        ("golds.tsv", 4),
    ];
    for (name, field) in files {
        let path = args.out.join(name);
        write_tsv(
            &path,
            rows.iter().map(|r| {
                let value = match field {
                    1 => r.1.clone(),
                    2 => r.2.clone(),
                    3 => r.3.to_string(),
                    _ => r.4.to_string(),
                };
                (r.0.clone(), value)
            }),
        )?;
    }
    let mut hashes = serde_json::Map::new();
    for (name, _) in files {
        hashes.insert(name.into(), sha256_file(&args.out.join(name))?.into());
    }
    write_manifest(
        &args.out,
        serde_json::json!({
            "command": "generate",
            "checkpoint": args.ckpt.display().to_string(),
            "checkpoint_step": ckpt.step,
            "data": args.data.display().to_string(),
            "split": args.split,
            "strategy": args.strategy,
            "config_hash": cfg.hash(),
            "files": hashes,
        }),
    )?;
    println!("decoded {} examples from split '{}' into {}", rows.len(), args.split, args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let resolve = |explicit: &Option<PathBuf>, name: &str| -> Result<PathBuf> {
        match (explicit, &args.dir) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(d)) => Ok(d.join(name)),
            (None, None) => bail!("pass --{} or --dir", name.trim_end_matches(".tsv")),
        }
    };
    let report = evaluate_run(
        &resolve(&args.decoded, "decoded.tsv")?,
        &resolve(&args.references, "references.tsv")?,
        &resolve(&args.predictions, "predictions.tsv")?,
        &resolve(&args.golds, "golds.tsv")?,
    )?;
    let rendered = render_report(&report);
    print!("{rendered}");
    if let Some(out) = &args.out {
        std::fs::write(out, &rendered).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

const ABLATION_FLAGS: [&str; 10] = [
    "no_customer_graph",
    "no_product_graph",
    "merge_graphs",
    "no_contrastive",
    "no_sentiment_task",
    "no_gate",
    "no_history_ratings",
    "no_graph",
    "no_time_edges",
    "no_rating_edges",
];

fn set_ablation_flag(abl: &mut AblationConfig, name: &str) -> Result<()> {
    match name {
        "no_customer_graph" => abl.no_customer_graph = true,
        "no_product_graph" => abl.no_product_graph = true,
        "merge_graphs" => abl.merge_graphs = true,
        "no_contrastive" => abl.no_contrastive = true,
        "no_sentiment_task" => abl.no_sentiment_task = true,
        "no_gate" => abl.no_gate = true,
        "no_history_ratings" => abl.no_history_ratings = true,
        "no_graph" => abl.no_graph = true,
        "no_time_edges" => abl.no_time_edges = true,
        "no_rating_edges" => abl.no_rating_edges = true,
        other => bail!(
            "unknown ablation flag '{other}' (expected one of: {})",
            ABLATION_FLAGS.join(", ")
        ),
    }
    Ok(())
}

struct AblationRow {
    name: String,
    steps: u64,
    rouge1_f: f64,
    rouge2_f: f64,
    rougel_f: f64,
    macro_f1: f64,
    balanced_acc: f64,
    accuracy: f64,
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let base = args.config.load(&[])?;
    let cache = DatasetCache::load(&args.data, Some(&base.data_hash()))?;
    let mode = ExecMode::from_flag(args.sequential);

    let mut variants = vec![("full".to_string(), base.clone())];
    for name in &args.variants {
        if variants.iter().any(|(n, _)| n == name) {
            bail!("variant '{name}' listed twice");
        }
        let mut cfg = base.clone();
        set_ablation_flag(&mut cfg.ablation, name)?;
        cfg.validate()?;
        variants.push((name.clone(), cfg));
    }

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let mut grid = Vec::new();
    for (name, cfg) in &variants {
        let out_dir = args.out.join(name);
        let outcome = train(&cache, cfg, &out_dir, None, mode)
            .with_context(|| format!("training variant '{name}'"))?;
        let ckpt = load_checkpoint(&outcome.final_checkpoint)?;
        let store = store_from_params(&ckpt.params);
        let examples = split_of(&cache, &args.split)?;
        let rows = decode_split(&store, cfg, &cache, examples, Strategy::Greedy, mode)?;
        let pairs: Vec<(String, String)> =
            rows.iter().map(|r| (r.1.clone(), r.2.clone())).collect();
        let preds: Vec<u8> = rows.iter().map(|r| r.3).collect();
        let golds: Vec<u8> = rows.iter().map(|r| r.4).collect();
        let (r1, r2, rl) = rouge_corpus(&pairs);
        let cls = classification_report(&preds, &golds)?;
        grid.push(AblationRow {
            name: name.clone(),
            steps: outcome.steps_run,
            rouge1_f: r1.f1,
            rouge2_f: r2.f1,
            rougel_f: rl.f1,
            macro_f1: cls.macro_f1,
            balanced_acc: cls.balanced_accuracy,
            accuracy: cls.accuracy,
        });
    }

    let rendered = render_grid(&grid);
    print!("{rendered}");
    let grid_path = args.out.join("ablation.tsv");
    let mut tsv = String::from(
        "variant\tsteps\trouge1_f\trouge2_f\trougel_f\tmacro_f1\tbalanced_acc\taccuracy\n",
    );
    for row in &grid {
        let _ = writeln!(
            tsv,
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            row.name,
            row.steps,
            row.rouge1_f,
            row.rouge2_f,
            row.rougel_f,
            row.macro_f1,
            row.balanced_acc,
            row.accuracy
        );
    }
    std::fs::write(&grid_path, tsv)
        .with_context(|| format!("writing {}", grid_path.display()))?;
    Ok(())
}

fn render_grid(grid: &[AblationRow]) -> String {
    let width = grid.iter().map(|r| r.name.len()).max().unwrap_or(7).max("variant".len());
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:width$}  {:>5}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}",
        "variant", "steps", "rouge1_f", "rouge2_f", "rougel_f", "macro_f1", "bal_acc", "accuracy"
    );
    for row in grid {
        let _ = writeln!(
            out,
            "{:width$}  {:>5}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}  {:>8.4}",
            row.name,
            row.steps,
            row.rouge1_f,
            row.rouge2_f,
            row.rougel_f,
            row.macro_f1,
            row.balanced_acc,
            row.accuracy
        );
    }
    out
}

// ---------------------------------------------------------------------------
// shared plumbing
// ---------------------------------------------------------------------------

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn write_manifest(dir: &Path, value: serde_json::Value) -> Result<()> {
    let path = dir.join("manifest.json");
    let body = serde_json::to_string_pretty(&value).expect("manifest serializes");
    std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))
}
