//! End-to-end tests driving the compiled `revsum` binary through every
//! subcommand: prepare determinism, training smoke runs and exit codes,
//! greedy/beam parity, evaluation scoring, and the ablation grid.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Miniature dimensions small enough for multi-step training in tests.
const TINY: &[&str] = &[
    "model.d_model=8",
    "model.n_heads=2",
    "model.encoder_layers=1",
    "model.decoder_layers=1",
    "model.ffn_dim=16",
    "model.max_review_len=16",
    "model.max_summary_len=6",
    "model.graph_layers=1",
    "data.vocab_size=64",
    "data.history_k=2",
    "train.batch_size=4",
    "train.max_steps=12",
    "train.log_every=4",
    "train.lr=1e-3",
];

fn revsum(args: &[&str], sets: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_revsum"));
    cmd.args(args);
    for s in sets {
        cmd.args(["--set", s]);
    }
    cmd.output().expect("binary runs")
}

fn run_ok(args: &[&str], sets: &[&str]) -> String {
    let out = revsum(args, sets);
    assert!(
        out.status.success(),
        "command {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf8 stdout")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("process exited normally")
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf8 path")
}

/// Prepare a synthetic cache under `dir` and return the cache path.
fn prepare_cache(dir: &Path, n: usize) -> PathBuf {
    let prep = dir.join("prep");
    run_ok(
        &["prepare", "--synthetic", &n.to_string(), "--out", path_str(&prep)],
        TINY,
    );
    prep.join("cache.json")
}

/// Train a smoke model and return (run_dir, final_checkpoint) from stdout.
fn train_smoke(dir: &Path, cache: &Path, extra_sets: &[&str]) -> (PathBuf, PathBuf) {
    let out_dir = dir.join("runs");
    let mut sets = TINY.to_vec();
    sets.extend_from_slice(extra_sets);
    let stdout = run_ok(
        &["train", "--data", path_str(cache), "--out", path_str(&out_dir)],
        &sets,
    );
    let field = |key: &str| -> PathBuf {
        stdout
            .lines()
            .find_map(|l| l.strip_prefix(&format!("{key} = ")))
            .unwrap_or_else(|| panic!("stdout lacks '{key}':\n{stdout}"))
            .into()
    };
    (field("run_dir"), field("final_checkpoint"))
}

#[test]
fn prepare_writes_stats_and_reruns_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        run_ok(&["prepare", "--synthetic", "12", "--out", path_str(out)], TINY);
    }
    let stats = std::fs::read_to_string(a.join("stats.txt")).unwrap();
    assert!(stats.contains("records = 12"), "stats:\n{stats}");
    assert!(stats.contains("train = 12"));
    assert!(stats.contains("avg_summary_tokens = 2.00"));

    let cache_a = std::fs::read(a.join("cache.json")).unwrap();
    let cache_b = std::fs::read(b.join("cache.json")).unwrap();
    assert_eq!(cache_a, cache_b, "identical prepare reruns must be byte-identical");

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    let manifest_b: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(b.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["files"]["cache.json"], manifest_b["files"]["cache.json"]);
    assert!(manifest["config_hash"].as_str().unwrap().len() > 8);
}

#[test]
fn prepare_reads_a_dump_and_counts_skipped_lines() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("dump.jsonl");
    let mut body = String::new();
    for i in 0..5 {
        body.push_str(&format!(
            "{{\"reviewText\":\"solid toy number {i} works fine\",\"summary\":\"fine toy\",\
             \"overall\":{},\"reviewerID\":\"c{}\",\"asin\":\"p{}\",\"unixReviewTime\":{}}}\n",
            i % 5 + 1,
            i % 3,
            i % 2,
            100 + i
        ));
    }
    body.push_str("{\"broken\n");
    std::fs::write(&dump, body).unwrap();

    let out = dir.path().join("prep");
    run_ok(
        &["prepare", "--input", path_str(&dump), "--out", path_str(&out)],
        TINY,
    );
    let stats = std::fs::read_to_string(out.join("stats.txt")).unwrap();
    assert!(stats.contains("records = 5"), "stats:\n{stats}");
    assert!(stats.contains("skipped = 1"), "stats:\n{stats}");
}

#[test]
fn prepare_rejects_bad_usage_and_missing_files_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out_flag = dir.path().join("x");
    let no_source = revsum(&["prepare", "--out", path_str(&out_flag)], &[]);
    assert_eq!(exit_code(&no_source), 2, "missing --input/--synthetic is a usage error");

    let missing = revsum(
        &["prepare", "--input", "/nonexistent/dump.jsonl", "--out", path_str(&out_flag)],
        &[],
    );
    assert_eq!(exit_code(&missing), 2);
    let stderr = String::from_utf8_lossy(&missing.stderr).into_owned();
    assert!(stderr.contains("/nonexistent/dump.jsonl"), "stderr:\n{stderr}");
}

#[test]
fn train_smoke_run_logs_the_overridden_config() {
    let dir = tempfile::tempdir().unwrap();
    let cache = prepare_cache(dir.path(), 8);
    let (run_dir, ckpt) = train_smoke(dir.path(), &cache, &["contrastive.alpha=0.0"]);

    assert!(ckpt.exists(), "final checkpoint missing at {}", ckpt.display());
    assert!(run_dir.join("manifest.json").exists());
    assert!(run_dir.join("train_log.jsonl").exists());
    let logged = std::fs::read_to_string(run_dir.join("config.toml")).unwrap();
    assert!(logged.contains("alpha = 0.0"), "logged config:\n{logged}");
}

#[test]
fn train_rejects_conflicting_ablations_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cache = prepare_cache(dir.path(), 8);
    let out_dir = dir.path().join("runs");
    let mut sets = TINY.to_vec();
    sets.extend(["ablation.no_customer_graph=true", "ablation.no_product_graph=true"]);
    let out = revsum(
        &["train", "--data", path_str(&cache), "--out", path_str(&out_dir)],
        &sets,
    );
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn train_divergence_aborts_with_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cache = prepare_cache(dir.path(), 8);
    let out_dir = dir.path().join("runs");
    let mut sets = TINY.to_vec();
    sets.extend(["train.optimizer=sgd", "train.lr=1e6"]);
    let out = revsum(
        &["train", "--data", path_str(&cache), "--out", path_str(&out_dir)],
        &sets,
    );
    assert_eq!(exit_code(&out), 3);
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(stderr.contains("diverged"), "stderr:\n{stderr}");
}

#[test]
fn generate_beam_width_one_matches_greedy() {
    let dir = tempfile::tempdir().unwrap();
    let cache = prepare_cache(dir.path(), 8);
    let (_, ckpt) = train_smoke(dir.path(), &cache, &[]);

    let greedy = dir.path().join("greedy");
    let beam = dir.path().join("beam");
    run_ok(
        &["generate", "--ckpt", path_str(&ckpt), "--data", path_str(&cache), "--out", path_str(&greedy)],
        &[],
    );
    run_ok(
        &[
            "generate", "--ckpt", path_str(&ckpt), "--data", path_str(&cache),
            "--out", path_str(&beam), "--strategy", "beam", "--beam-width", "1",
        ],
        &[],
    );
    for name in ["decoded.tsv", "references.tsv", "predictions.tsv", "golds.tsv"] {
        let g = std::fs::read(greedy.join(name)).unwrap();
        let b = std::fs::read(beam.join(name)).unwrap();
        assert_eq!(g, b, "{name} differs between greedy and width-1 beam");
    }

    let missing = revsum(
        &["generate", "--ckpt", "/nonexistent.ckpt", "--data", path_str(&cache), "--out", path_str(&greedy)],
        &[],
    );
    assert_eq!(exit_code(&missing), 2);
}

#[test]
fn evaluate_scores_perfect_agreement_as_one() {
    let dir = tempfile::tempdir().unwrap();
    let texts = dir.path().join("texts.tsv");
    let labels = dir.path().join("labels.tsv");
    std::fs::write(&texts, "a\tgreat sturdy lamp\nb\tdecent kettle\n").unwrap();
    std::fs::write(&labels, "a\t5\nb\t3\n").unwrap();

    let stdout = run_ok(
        &[
            "evaluate",
            "--decoded", path_str(&texts),
            "--references", path_str(&texts),
            "--predictions", path_str(&labels),
            "--golds", path_str(&labels),
        ],
        &[],
    );
    for needle in ["rouge1_f = 1.000000", "rougel_f = 1.000000", "accuracy = 1.000000"] {
        assert!(stdout.contains(needle), "report lacks '{needle}':\n{stdout}");
    }

    let extra = dir.path().join("extra.tsv");
    std::fs::write(&extra, "a\tgreat sturdy lamp\nc\tspare row\n").unwrap();
    let misaligned = revsum(
        &[
            "evaluate",
            "--decoded", path_str(&texts),
            "--references", path_str(&extra),
            "--predictions", path_str(&labels),
            "--golds", path_str(&labels),
        ],
        &[],
    );
    assert_eq!(exit_code(&misaligned), 2);
}

#[test]
fn evaluate_on_generated_output_prints_a_full_report() {
    let dir = tempfile::tempdir().unwrap();
    let cache = prepare_cache(dir.path(), 8);
    let (_, ckpt) = train_smoke(dir.path(), &cache, &[]);
    let gen = dir.path().join("gen");
    run_ok(
        &["generate", "--ckpt", path_str(&ckpt), "--data", path_str(&cache), "--out", path_str(&gen)],
        &[],
    );
    let report_path = dir.path().join("report.txt");
    let stdout = run_ok(
        &["evaluate", "--dir", path_str(&gen), "--out", path_str(&report_path)],
        &[],
    );
    assert!(stdout.contains("n_examples = 8"), "report:\n{stdout}");
    assert!(stdout.contains("balanced_acc = "));
    assert_eq!(std::fs::read_to_string(&report_path).unwrap(), stdout);
}

#[test]
fn ablate_emits_one_scored_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cache = prepare_cache(dir.path(), 8);
    let out_dir = dir.path().join("abl");
    let mut sets = TINY.to_vec();
    sets.push("train.max_steps=6");
    let stdout = run_ok(
        &[
            "ablate", "--data", path_str(&cache), "--out", path_str(&out_dir),
            "--variant", "no_contrastive", "--variant", "no_history_ratings",
        ],
        &sets,
    );
    for name in ["full", "no_contrastive", "no_history_ratings"] {
        assert!(
            stdout.lines().any(|l| l.starts_with(name)),
            "grid lacks row '{name}':\n{stdout}"
        );
    }
    let tsv = std::fs::read_to_string(out_dir.join("ablation.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 4, "header plus three rows:\n{tsv}");

    let unknown = revsum(
        &[
            "ablate", "--data", path_str(&cache), "--out", path_str(&out_dir),
            "--variant", "no_such_flag",
        ],
        &sets,
    );
    assert_eq!(exit_code(&unknown), 2);
}
