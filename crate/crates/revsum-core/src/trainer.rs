//! Multi-task training: optimizer steps, the batch loop, structured logging,
//! periodic validation with best-checkpoint retention, and exact resume.
//!
//! - Optimizers: adaptive moment estimation (default) and plain gradient
//!   descent behind one dispatch, so checkpoints look the same either way.
//! - Determinism: batch order, dropout draws, and contrastive masks are pure
//!   functions of `(seed, step)`, so a resumed run replays the exact
//!   trajectory of an uninterrupted one.
//! - Artifacts per run: a `{config_hash}/` directory holding `{step}.ckpt`
//!   files, `train_log.jsonl`, `config.toml`, and `manifest.json`.

use crate::config::{Config, Optimizer};
use crate::corpus::{make_batches, DatasetCache, TrainingExample};
use crate::decoder::Strategy;
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{
    batch_gradients, build_param_store, derive_seed, generate_example, strip_eos, BatchExample,
    EntityRows,
};
use crate::parallel::{map_indexed, ExecMode};
use crate::params::{
    check_layout, clip_global_norm, load_checkpoint, save_checkpoint, store_from_params,
    Checkpoint, OptState, ParamStore,
};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Training-log file name inside a run directory.
pub const LOG_FILE: &str = "train_log.jsonl";
/// Manifest file name inside a run directory.
pub const MANIFEST_FILE: &str = "manifest.json";

/// Seed-derivation stream for per-epoch batch shuffling. Streams 0..=2 are
/// used inside the model for dropout and contrastive masks.
const STREAM_SHUFFLE: u64 = 3;

/// Plain gradient descent: `w -= lr * g`.
pub fn sgd_step(store: &mut ParamStore, grads: &[Array2<f64>], lr: f64) {
    assert_eq!(grads.len(), store.len(), "gradient set misaligned with store");
    for (i, g) in grads.iter().enumerate() {
        store.update(i, |w| w.scaled_add(-lr, g));
    }
}

/// Adaptive moment estimation with bias correction.
pub fn adam_step(store: &mut ParamStore, opt: &mut OptState, grads: &[Array2<f64>], lr: f64) {
    assert_eq!(grads.len(), store.len(), "gradient set misaligned with store");
    opt.t += 1;
    let t = i32::try_from(opt.t).expect("step count fits in i32");
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        opt.m[i].zip_mut_with(g, |m, &g| *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g);
        opt.v[i].zip_mut_with(g, |v, &g| *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g);
        let (m, v) = (&opt.m[i], &opt.v[i]);
        store.update(i, |w| {
            ndarray::Zip::from(w).and(m).and(v).for_each(|w, &m, &v| {
                *w -= lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
            });
        });
    }
}

/// One update with the configured optimizer. `opt.t` advances either way so
/// checkpoint resume works the same for both.
pub fn optimizer_step(
    store: &mut ParamStore,
    opt: &mut OptState,
    grads: &[Array2<f64>],
    lr: f64,
    which: Optimizer,
) {
    match which {
        Optimizer::Adam => adam_step(store, opt, grads, lr),
        Optimizer::Sgd => {
            opt.t += 1;
            sgd_step(store, grads, lr);
        }
    }
}

/// One line of the training log.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainEvent {
    /// Losses and pre-clip gradient norm after one optimization step.
    Step { step: u64, l_g: f64, l_s: f64, l_c: f64, total: f64, lr: f64, grad_norm: f64 },
    /// Scores of one periodic validation pass.
    Validation { step: u64, rouge_l_f: f64, balanced_accuracy: f64, improved: bool },
}

/// Best-score tracker with a patience budget counted in validation passes.
/// Patience 0 disables early stopping.
#[derive(Debug)]
pub struct EarlyStopper {
    patience: u64,
    strikes: u64,
    best: Option<(u64, f64)>,
}

impl EarlyStopper {
    pub fn new(patience: u64) -> Self {
        EarlyStopper { patience, strikes: 0, best: None }
    }

    /// Record a validation score; true when it strictly improves on the best.
    pub fn observe(&mut self, step: u64, score: f64) -> bool {
        match self.best {
            Some((_, b)) if score <= b => {
                self.strikes += 1;
                false
            }
            _ => {
                self.best = Some((step, score));
                self.strikes = 0;
                true
            }
        }
    }

    /// True once `patience` consecutive validations failed to improve.
    pub fn exhausted(&self) -> bool {
        self.patience > 0 && self.strikes >= self.patience
    }

    pub fn best(&self) -> Option<(u64, f64)> {
        self.best
    }

    /// Carry over the best score of an earlier run (manifest continuation).
    pub fn seed_best(&mut self, best: Option<(u64, f64)>) {
        self.best = best;
    }
}

/// Validation scores over one example set.
#[derive(Clone, Copy, Debug)]
pub struct ValScore {
    pub rouge_l_f: f64,
    pub balanced_accuracy: f64,
}

/// Greedy-decode every example and score the mean token-level longest-
/// common-subsequence F measure plus balanced accuracy of predicted ratings.
pub fn validate(
    store: &ParamStore,
    cfg: &Config,
    examples: &[TrainingExample],
    rows: &[EntityRows],
    mode: ExecMode,
) -> Result<ValScore> {
    assert_eq!(examples.len(), rows.len(), "one entity-row pair per example");
    if examples.is_empty() {
        return Err(Error::Config("validation requires at least one example".into()));
    }
    let decoded = map_indexed(mode, examples, |i, ex| {
        let gen = generate_example(store, cfg, ex, rows[i], Strategy::Greedy)?;
        Ok((strip_eos(&gen.decode.tokens).to_vec(), gen.predicted_rating))
    });
    let mut rouge_sum = 0.0;
    let mut preds = Vec::with_capacity(examples.len());
    let mut golds = Vec::with_capacity(examples.len());
    for (ex, out) in examples.iter().zip(decoded) {
        let (tokens, pred): (Vec<usize>, u8) = out?;
        rouge_sum += metrics::rouge_l(&tokens, &ex.target.summary_tokens).f1;
        preds.push(pred);
        golds.push(ex.target.rating);
    }
    let report = metrics::classification_report(&preds, &golds)?;
    Ok(ValScore {
        rouge_l_f: rouge_sum / examples.len() as f64,
        balanced_accuracy: report.balanced_accuracy,
    })
}

/// Resolve embedding-table rows for a slice of examples in one pass; unseen
/// entities land in the out-of-vocabulary row 0.
pub fn entity_rows(cache: &DatasetCache, examples: &[TrainingExample]) -> Vec<EntityRows> {
    let customers: HashMap<&str, usize> =
        cache.customers.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let products: HashMap<&str, usize> =
        cache.products.iter().enumerate().map(|(i, p)| (p.as_str(), i)).collect();
    examples
        .iter()
        .map(|ex| EntityRows {
            customer: customers.get(ex.target.customer_id.as_str()).copied().unwrap_or(0),
            product: products.get(ex.target.product_id.as_str()).copied().unwrap_or(0),
        })
        .collect()
}

/// Run-directory summary, written next to the checkpoints.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    /// Steps that have a `{step}.ckpt` file, in the order they were written.
    pub checkpoint_steps: Vec<u64>,
    pub best_step: Option<u64>,
    pub best_rouge_l_f: Option<f64>,
    pub final_step: u64,
    pub log_file: String,
}

pub fn read_manifest(run_dir: &Path) -> Result<RunManifest> {
    let path = run_dir.join(MANIFEST_FILE);
    let display = path.display().to_string();
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&display, e))?;
    serde_json::from_str(&text).map_err(|e| Error::malformed(display, e.to_string()))
}

fn write_manifest(run_dir: &Path, manifest: &RunManifest) -> Result<()> {
    let path = run_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// What one training invocation produced.
#[derive(Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    /// Global step counter after the last executed step.
    pub steps_run: u64,
    /// Total loss of every step executed by this invocation.
    pub step_totals: Vec<f64>,
    pub final_loss: f64,
    /// Best validation so far as `(step, rouge_l_f)`.
    pub best: Option<(u64, f64)>,
    pub stopped_early: bool,
    pub final_checkpoint: PathBuf,
}

fn checkpoint_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join(format!("{step}.ckpt"))
}

fn save_step_checkpoint(
    run_dir: &Path,
    written: &mut Vec<u64>,
    step: u64,
    cfg: &Config,
    store: &ParamStore,
    opt: &OptState,
) -> Result<()> {
    if written.contains(&step) {
        return Ok(());
    }
    let params: Vec<(String, Array2<f64>)> = store
        .names()
        .iter()
        .enumerate()
        .map(|(i, name)| (name.clone(), store.value(i).clone()))
        .collect();
    let ckpt =
        Checkpoint { step, config_toml: cfg.to_toml_string(), params, opt: Some(opt.clone()) };
    save_checkpoint(&checkpoint_path(run_dir, step), &ckpt)?;
    written.push(step);
    Ok(())
}

/// A resumed run may extend the step budget or change logging cadence, but
/// anything that shapes the trajectory — architecture, data shaping, loss
/// composition, ablations, seed, batch size — must match the original run.
fn check_resume_config(original_toml: &str, cfg: &Config) -> Result<()> {
    let orig = Config::from_toml_str(original_toml, &[])
        .map_err(|e| Error::Checkpoint(format!("checkpoint carries an unreadable config: {e}")))?;
    let mut diffs = Vec::new();
    if orig.model != cfg.model {
        diffs.push("model");
    }
    if orig.data != cfg.data {
        diffs.push("data");
    }
    if orig.contrastive != cfg.contrastive {
        diffs.push("contrastive");
    }
    if orig.ablation != cfg.ablation {
        diffs.push("ablation");
    }
    if orig.train.seed != cfg.train.seed {
        diffs.push("train.seed");
    }
    if orig.train.batch_size != cfg.train.batch_size {
        diffs.push("train.batch_size");
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(Error::Checkpoint(format!(
            "resume config differs from the checkpoint in {}; \
             the original trajectory cannot be replayed",
            diffs.join(", ")
        )))
    }
}

fn write_event(log: &mut impl Write, log_path: &str, event: &TrainEvent) -> Result<()> {
    let line = serde_json::to_string(event).expect("event serializes");
    writeln!(log, "{line}").map_err(|e| Error::io(log_path, e))
}

/// Optimize on the cache's training split until `max_steps`, early stop, or
/// divergence. Deterministic for a fixed config and cache; resuming from a
/// checkpoint continues the identical trajectory.
pub fn train(
    cache: &DatasetCache,
    cfg: &Config,
    out_dir: &Path,
    resume: Option<&Path>,
    mode: ExecMode,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let t = &cfg.train;
    if cache.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if t.validate_every > 0 && cache.val.is_empty() {
        return Err(Error::Config(
            "validation is enabled (train.validate_every > 0) \
             but the dataset has no validation split"
                .into(),
        ));
    }

    let mut store =
        build_param_store(cfg, cache.vocab.len(), cache.customers.len(), cache.products.len());
    let mut opt = OptState::zeros_like(&store);
    let mut start_step: u64 = 0;
    if let Some(path) = resume {
        let ckpt = load_checkpoint(path)?;
        check_layout(&store, &ckpt.params)?;
        check_resume_config(&ckpt.config_toml, cfg)?;
        store = store_from_params(&ckpt.params);
        opt = ckpt.opt.unwrap_or_else(|| OptState::zeros_like(&store));
        start_step = ckpt.step;
    }
    if start_step >= t.max_steps {
        return Err(Error::Config(format!(
            "checkpoint is already at step {start_step}; nothing to do before max_steps {}",
            t.max_steps
        )));
    }

    let run_dir = out_dir.join(cfg.hash());
    std::fs::create_dir_all(&run_dir)
        .map_err(|e| Error::io(run_dir.display().to_string(), e))?;
    let cfg_path = run_dir.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml_string())
        .map_err(|e| Error::io(cfg_path.display().to_string(), e))?;
    let log_path = run_dir.join(LOG_FILE);
    let log_display = log_path.display().to_string();
    let log_file = std::fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .write(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_display, e))?;
    let mut log = std::io::BufWriter::new(log_file);

    let mut stopper = EarlyStopper::new(t.patience);
    let mut ckpt_steps: Vec<u64> = Vec::new();
    // Same-directory resume (a restarted run): carry the earlier best score
    // and checkpoint list forward instead of resetting them.
    if resume.is_some() {
        if let Ok(prev) = read_manifest(&run_dir) {
            stopper.seed_best(prev.best_step.zip(prev.best_rouge_l_f));
            ckpt_steps = prev.checkpoint_steps;
        }
    }

    let train_rows = entity_rows(cache, &cache.train);
    let val_rows = entity_rows(cache, &cache.val);
    let bpe = cache.train.len().div_ceil(t.batch_size) as u64;
    let mut batches = Vec::new();
    let mut batches_epoch = u64::MAX;

    let mut step_totals = Vec::new();
    let mut stopped_early = false;
    let mut last_step = start_step;

    for idx in start_step..t.max_steps {
        let epoch = idx / bpe;
        if epoch != batches_epoch {
            batches = make_batches(
                &cache.train,
                t.batch_size,
                derive_seed(t.seed, epoch, 0, STREAM_SHUFFLE),
            );
            debug_assert_eq!(batches.len() as u64, bpe);
            batches_epoch = epoch;
        }
        let step = idx + 1;
        let chunk = &batches[(idx % bpe) as usize];
        let bexs: Vec<BatchExample> = chunk
            .example_indices
            .iter()
            .map(|&i| BatchExample { ex: &cache.train[i], rows: train_rows[i] })
            .collect();

        let mut bg = batch_gradients(&store, cfg, &bexs, step, mode)?;
        let total = bg.losses.total;
        if total > t.divergence_threshold || !total.is_finite() {
            return Err(Error::Diverged { step, loss: total });
        }
        let grad_norm = clip_global_norm(&mut bg.grads, t.clip_norm);
        optimizer_step(&mut store, &mut opt, &bg.grads, t.lr, t.optimizer);
        step_totals.push(total);
        last_step = step;

        if (t.log_every > 0 && step % t.log_every == 0) || step == t.max_steps {
            let l = &bg.losses;
            write_event(
                &mut log,
                &log_display,
                &TrainEvent::Step {
                    step,
                    l_g: l.l_g,
                    l_s: l.l_s,
                    l_c: l.l_c,
                    total,
                    lr: t.lr,
                    grad_norm,
                },
            )?;
        }
        if t.validate_every > 0 && step % t.validate_every == 0 {
            let score = validate(&store, cfg, &cache.val, &val_rows, mode)?;
            let improved = stopper.observe(step, score.rouge_l_f);
            write_event(
                &mut log,
                &log_display,
                &TrainEvent::Validation {
                    step,
                    rouge_l_f: score.rouge_l_f,
                    balanced_accuracy: score.balanced_accuracy,
                    improved,
                },
            )?;
            if improved {
                save_step_checkpoint(&run_dir, &mut ckpt_steps, step, cfg, &store, &opt)?;
            } else if stopper.exhausted() {
                stopped_early = true;
            }
        }
        if t.checkpoint_every > 0 && step % t.checkpoint_every == 0 {
            save_step_checkpoint(&run_dir, &mut ckpt_steps, step, cfg, &store, &opt)?;
        }
        if stopped_early {
            break;
        }
    }

    save_step_checkpoint(&run_dir, &mut ckpt_steps, last_step, cfg, &store, &opt)?;
    log.flush().map_err(|e| Error::io(&log_display, e))?;

    write_manifest(
        &run_dir,
        &RunManifest {
            config_hash: cfg.hash(),
            checkpoint_steps: ckpt_steps,
            best_step: stopper.best().map(|(s, _)| s),
            best_rouge_l_f: stopper.best().map(|(_, v)| v),
            final_step: last_step,
            log_file: LOG_FILE.to_string(),
        },
    )?;

    Ok(TrainOutcome {
        steps_run: last_step,
        final_loss: *step_totals.last().expect("at least one step ran"),
        step_totals,
        best: stopper.best(),
        stopped_early,
        final_checkpoint: checkpoint_path(&run_dir, last_step),
        run_dir,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::prepare_dataset;
    use crate::synthetic::synthetic_reviews;
    use ndarray::array;

    /// Tiny but fully featured configuration that trains in milliseconds.
    fn tiny_cfg() -> Config {
        let mut c = Config::desk();
        c.model.d_model = 8;
        c.model.n_heads = 2;
        c.model.encoder_layers = 1;
        c.model.decoder_layers = 1;
        c.model.ffn_dim = 16;
        c.model.max_review_len = 16;
        c.model.max_summary_len = 6;
        c.model.graph_layers = 1;
        c.data.vocab_size = 64;
        c.data.history_k = 2;
        c.train.seed = 5;
        c.train.batch_size = 4;
        c.train.max_steps = 6;
        c.train.lr = 1e-3;
        c.train.log_every = 1;
        c.train.validate_every = 0;
        c.train.checkpoint_every = 0;
        c
    }

    fn tiny_cache(n: usize, cfg: &Config) -> DatasetCache {
        prepare_dataset(&synthetic_reviews(n), cfg).unwrap()
    }

    #[test]
    fn adam_matches_a_hand_rolled_reference() {
        let mut store = ParamStore::new();
        store.register("w", array![[1.0, -2.0]]);
        let mut opt = OptState::zeros_like(&store);
        let lr = 0.01;
        let grad_seq =
            [array![[0.3, -0.1]], array![[-0.25, 0.6]], array![[0.05, 0.0]]];
        let mut w = [1.0, -2.0];
        let mut m = [0.0f64; 2];
        let mut v = [0.0f64; 2];
        for (t, g) in grad_seq.iter().enumerate() {
            adam_step(&mut store, &mut opt, std::slice::from_ref(g), lr);
            for j in 0..2 {
                let gj = g[[0, j]];
                m[j] = 0.9 * m[j] + 0.1 * gj;
                v[j] = 0.999 * v[j] + 0.001 * gj * gj;
                let mh = m[j] / (1.0 - 0.9f64.powi(t as i32 + 1));
                let vh = v[j] / (1.0 - 0.999f64.powi(t as i32 + 1));
                w[j] -= lr * mh / (vh.sqrt() + 1e-8);
                let got = store.get("w")[[0, j]];
                assert!(
                    (got - w[j]).abs() < 1e-14,
                    "step {t} coord {j}: {got} vs reference {}",
                    w[j]
                );
            }
        }
        assert_eq!(opt.t, 3);
    }

    #[test]
    fn sgd_subtracts_scaled_gradients_exactly() {
        let mut store = ParamStore::new();
        store.register("w", array![[2.0, -1.0]]);
        sgd_step(&mut store, &[array![[0.5, 4.0]]], 0.1);
        let w = store.get("w");
        assert!((w[[0, 0]] - 1.95).abs() < 1e-15);
        assert!((w[[0, 1]] - (-1.4)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters_bit_identical_under_both_optimizers() {
        for which in [Optimizer::Adam, Optimizer::Sgd] {
            let mut store = ParamStore::new();
            store.register("w", array![[0.1234567890123, -7.5]]);
            let before: Vec<u64> = store.get("w").iter().map(|x| x.to_bits()).collect();
            let mut opt = OptState::zeros_like(&store);
            let zeros = store.zero_grads();
            for _ in 0..3 {
                optimizer_step(&mut store, &mut opt, &zeros, 0.5, which);
            }
            let after: Vec<u64> = store.get("w").iter().map(|x| x.to_bits()).collect();
            assert_eq!(before, after, "{which:?} moved a parameter with zero gradient");
            assert_eq!(opt.t, 3);
        }
    }

    #[test]
    fn early_stopper_counts_consecutive_non_improvements() {
        let mut s = EarlyStopper::new(2);
        assert!(s.observe(1, 0.5));
        assert!(!s.exhausted());
        assert!(!s.observe(2, 0.5), "equal score is not an improvement");
        assert!(!s.exhausted());
        assert!(!s.observe(3, 0.4));
        assert!(s.exhausted());
        assert_eq!(s.best(), Some((1, 0.5)));

        let mut reset = EarlyStopper::new(2);
        reset.observe(1, 0.1);
        reset.observe(2, 0.05);
        assert!(reset.observe(3, 0.2), "higher score resets the strike count");
        assert!(!reset.exhausted());

        let mut disabled = EarlyStopper::new(0);
        disabled.observe(1, 1.0);
        disabled.observe(2, 0.0);
        assert!(!disabled.exhausted(), "patience 0 disables early stopping");
    }

    #[test]
    fn ten_small_sgd_steps_never_increase_the_full_batch_loss() {
        let mut cfg = tiny_cfg();
        cfg.train.optimizer = Optimizer::Sgd;
        cfg.train.lr = 1e-4;
        cfg.train.max_steps = 10;
        cfg.train.batch_size = 4;
        // A zero-weight heterogeneity term keeps the objective identical
        // across steps (its dropout masks are redrawn every step).
        cfg.contrastive.alpha = 0.0;
        let cache = tiny_cache(4, &cfg);
        assert_eq!(cache.train.len(), 4, "fixture must fit one full batch");
        let dir = tempfile::tempdir().unwrap();
        let out = train(&cache, &cfg, dir.path(), None, ExecMode::Sequential).unwrap();
        assert_eq!(out.step_totals.len(), 10);
        for pair in out.step_totals.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-9,
                "loss rose from {} to {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn same_seed_runs_are_bitwise_identical_across_exec_modes() {
        let cfg = tiny_cfg();
        let cache = tiny_cache(8, &cfg);
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = train(&cache, &cfg, dir_a.path(), None, ExecMode::Sequential).unwrap();
        let b = train(&cache, &cfg, dir_b.path(), None, ExecMode::auto()).unwrap();
        assert_eq!(a.step_totals.len(), b.step_totals.len());
        for (x, y) in a.step_totals.iter().zip(&b.step_totals) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn resume_replays_the_uninterrupted_trajectory_exactly() {
        let cache = tiny_cache(8, &tiny_cfg());

        let mut cfg_short = tiny_cfg();
        cfg_short.train.max_steps = 4;
        let dir_short = tempfile::tempdir().unwrap();
        let short =
            train(&cache, &cfg_short, dir_short.path(), None, ExecMode::Sequential).unwrap();
        assert_eq!(short.steps_run, 4);

        let mut cfg_long = tiny_cfg();
        cfg_long.train.max_steps = 9;
        let dir_long = tempfile::tempdir().unwrap();
        let long = train(&cache, &cfg_long, dir_long.path(), None, ExecMode::Sequential).unwrap();

        let dir_resumed = tempfile::tempdir().unwrap();
        let resumed = train(
            &cache,
            &cfg_long,
            dir_resumed.path(),
            Some(&short.final_checkpoint),
            ExecMode::Sequential,
        )
        .unwrap();
        assert_eq!(resumed.steps_run, 9);
        assert_eq!(resumed.step_totals.len(), 5);
        for (x, y) in long.step_totals[4..].iter().zip(&resumed.step_totals) {
            assert_eq!(x.to_bits(), y.to_bits(), "resumed trajectory diverged");
        }

        let from_long = crate::params::load_checkpoint(&long.final_checkpoint).unwrap();
        let from_resumed = crate::params::load_checkpoint(&resumed.final_checkpoint).unwrap();
        for ((n0, v0), (n1, v1)) in from_long.params.iter().zip(&from_resumed.params) {
            assert_eq!(n0, n1);
            for (a, b) in v0.iter().zip(v1.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "parameter {n0} differs after resume");
            }
        }
    }

    #[test]
    fn resume_rejects_architecture_and_seed_changes() {
        let mut cfg = tiny_cfg();
        cfg.train.max_steps = 2;
        let cache = tiny_cache(4, &cfg);
        let dir = tempfile::tempdir().unwrap();
        let out = train(&cache, &cfg, dir.path(), None, ExecMode::Sequential).unwrap();

        let mut wider = tiny_cfg();
        wider.model.d_model = 12;
        let err = train(
            &cache,
            &wider,
            dir.path(),
            Some(&out.final_checkpoint),
            ExecMode::Sequential,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "got {err}");

        let mut reseeded = tiny_cfg();
        reseeded.train.seed = 6;
        reseeded.train.max_steps = 4;
        let err = train(
            &cache,
            &reseeded,
            dir.path(),
            Some(&out.final_checkpoint),
            ExecMode::Sequential,
        )
        .unwrap_err();
        match err {
            Error::Checkpoint(msg) => assert!(msg.contains("train.seed"), "{msg}"),
            other => panic!("expected checkpoint error, got {other}"),
        }
    }

    #[test]
    fn disabled_loss_terms_leave_classifier_parameters_at_their_initialization() {
        let mut cfg = tiny_cfg();
        cfg.contrastive.alpha = 0.0;
        cfg.ablation.no_sentiment_task = true;
        cfg.train.max_steps = 3;
        let cache = tiny_cache(8, &cfg);
        let init = build_param_store(
            &cfg,
            cache.vocab.len(),
            cache.customers.len(),
            cache.products.len(),
        );
        let dir = tempfile::tempdir().unwrap();
        let out = train(&cache, &cfg, dir.path(), None, ExecMode::Sequential).unwrap();
        let ckpt = crate::params::load_checkpoint(&out.final_checkpoint).unwrap();
        let mut cls_params = 0;
        let mut moved_elsewhere = false;
        for (name, value) in &ckpt.params {
            let as_init = init
                .get(name)
                .iter()
                .zip(value.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if name.starts_with("sent.cls.") {
                cls_params += 1;
                assert!(as_init, "classifier parameter {name} moved with its loss disabled");
            } else if !as_init {
                moved_elsewhere = true;
            }
        }
        assert!(cls_params >= 4, "expected the classifier MLP parameters in the checkpoint");
        assert!(moved_elsewhere, "training should have moved non-classifier parameters");
    }

    #[test]
    fn divergence_is_reported_with_step_and_loss() {
        let mut cfg = tiny_cfg();
        cfg.train.optimizer = Optimizer::Sgd;
        cfg.train.lr = 1e6;
        cfg.train.max_steps = 20;
        let cache = tiny_cache(4, &cfg);
        let dir = tempfile::tempdir().unwrap();
        match train(&cache, &cfg, dir.path(), None, ExecMode::Sequential) {
            Err(Error::Diverged { step, loss }) => {
                assert!(step >= 2, "initial loss should be below the threshold");
                assert!(loss > 1e4 || !loss.is_finite());
            }
            Ok(_) => panic!("a 1e6 learning rate should diverge"),
            Err(other) => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn validation_logs_events_and_retains_the_best_checkpoint() {
        let mut cfg = tiny_cfg();
        cfg.data.val_count = 2;
        cfg.train.max_steps = 4;
        cfg.train.validate_every = 2;
        cfg.train.patience = 100;
        let cache = tiny_cache(16, &cfg);
        assert_eq!(cache.val.len(), 2);
        let dir = tempfile::tempdir().unwrap();
        let out = train(&cache, &cfg, dir.path(), None, ExecMode::Sequential).unwrap();

        let manifest = read_manifest(&out.run_dir).unwrap();
        assert_eq!(manifest.config_hash, cfg.hash());
        assert_eq!(manifest.final_step, 4);
        let best = manifest.best_step.expect("first validation always sets a best");
        assert_eq!(best, 2);
        assert!(out.run_dir.join(format!("{best}.ckpt")).exists());
        assert!(out.final_checkpoint.exists());
        assert!(manifest.checkpoint_steps.contains(&4));

        let text = std::fs::read_to_string(out.run_dir.join(LOG_FILE)).unwrap();
        let events: Vec<TrainEvent> =
            text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        let step_events: Vec<&TrainEvent> =
            events.iter().filter(|e| matches!(e, TrainEvent::Step { .. })).collect();
        let val_events: Vec<&TrainEvent> =
            events.iter().filter(|e| matches!(e, TrainEvent::Validation { .. })).collect();
        assert_eq!(step_events.len(), 4);
        assert_eq!(val_events.len(), 2);
        match val_events[0] {
            TrainEvent::Validation { step, improved, rouge_l_f, balanced_accuracy } => {
                assert_eq!(*step, 2);
                assert!(*improved);
                assert!(rouge_l_f.is_finite() && balanced_accuracy.is_finite());
            }
            _ => unreachable!(),
        }
        for ev in step_events {
            if let TrainEvent::Step { l_g, l_s, l_c, total, grad_norm, .. } = ev {
                for x in [l_g, l_s, l_c, total, grad_norm] {
                    assert!(x.is_finite());
                }
            }
        }
    }

    #[test]
    fn validation_without_a_validation_split_is_rejected() {
        let mut cfg = tiny_cfg();
        cfg.train.validate_every = 2;
        let cache = tiny_cache(4, &cfg);
        assert!(cache.val.is_empty());
        let dir = tempfile::tempdir().unwrap();
        let err = train(&cache, &cfg, dir.path(), None, ExecMode::Sequential).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err}");
    }

    #[test]
    fn periodic_checkpoints_follow_the_step_naming_scheme() {
        let mut cfg = tiny_cfg();
        cfg.train.max_steps = 5;
        cfg.train.checkpoint_every = 2;
        let cache = tiny_cache(4, &cfg);
        let dir = tempfile::tempdir().unwrap();
        let out = train(&cache, &cfg, dir.path(), None, ExecMode::Sequential).unwrap();
        let manifest = read_manifest(&out.run_dir).unwrap();
        assert_eq!(manifest.checkpoint_steps, vec![2, 4, 5]);
        for step in [2u64, 4, 5] {
            assert!(out.run_dir.join(format!("{step}.ckpt")).exists());
        }
        assert!(out.run_dir.join("config.toml").exists());
    }
}
