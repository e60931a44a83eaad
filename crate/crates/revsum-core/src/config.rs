//! Run configuration: TOML files, presets, and `--set` overrides.
//!
//! Two presets ship with the crate: `desk` (small dimensions, runs anywhere
//! in seconds) and `paper` (full-size dimensions). Every field can be
//! overridden from a file or from `section.key=value` strings.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden width shared by encoder, graphs, fusion and decoder.
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    /// Maximum review length in tokens, excluding the leading CLS.
    pub max_review_len: usize,
    /// Maximum summary length in tokens, excluding BOS/EOS.
    pub max_summary_len: usize,
    /// Propagation depth of the relational graph module.
    pub graph_layers: usize,
    /// Keep time edges directed (past -> future) instead of bidirectional.
    pub directed_time_edges: bool,
    /// Per-coordinate decoder gate instead of the default scalar gate.
    pub vector_gate: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            n_heads: 4,
            ffn_dim: 256,
            dropout: 0.0,
            max_review_len: 128,
            max_summary_len: 24,
            graph_layers: 2,
            directed_time_edges: false,
            vector_gate: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Total vocabulary cap, including the five reserved tokens.
    pub vocab_size: usize,
    /// Drop tokens seen fewer than this many times.
    pub min_freq: usize,
    /// History length per side (k most recent reviews).
    pub history_k: usize,
    /// Examples held out for validation / test when preparing a corpus.
    pub val_count: usize,
    pub test_count: usize,
    /// Seed for the random corpus split.
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            vocab_size: 8000,
            min_freq: 1,
            history_k: 3,
            val_count: 0,
            test_count: 0,
            split_seed: 13,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    /// Weight of the heterogeneity term in the total loss.
    pub alpha: f64,
    /// Similarity temperature.
    pub tau: f64,
    /// Dropout rate used to build augmented views.
    pub dropout_rate: f64,
    /// Count the positive pair inside the normalizing denominator.
    pub include_positive_in_denominator: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            alpha: 0.1,
            tau: 0.05,
            dropout_rate: 0.6,
            include_positive_in_denominator: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    /// Plain gradient descent; kept for step-by-step convergence tests.
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub lr: f64,
    pub optimizer: Optimizer,
    /// Global gradient-norm ceiling; gradients above it are rescaled.
    pub clip_norm: f64,
    /// Run validation every this many steps (0 disables).
    pub validate_every: u64,
    /// Stop after this many validations without improvement.
    pub patience: u64,
    /// Abort when the total loss exceeds this.
    pub divergence_threshold: f64,
    /// Additionally write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 17,
            batch_size: 8,
            max_steps: 2000,
            lr: 5e-4,
            optimizer: Optimizer::Adam,
            clip_norm: 1.0,
            validate_every: 0,
            patience: 5,
            divergence_threshold: 1e4,
            checkpoint_every: 0,
            log_every: 10,
        }
    }
}

/// Switches that remove or rewire parts of the architecture. All default to
/// off (full model).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Drop the customer-side history graph.
    pub no_customer_graph: bool,
    /// Drop the product-side history graph.
    pub no_product_graph: bool,
    /// Merge both histories into one graph over the union of nodes.
    pub merge_graphs: bool,
    /// Drop the contrastive loss term.
    pub no_contrastive: bool,
    /// Drop the sentiment classification loss term.
    pub no_sentiment_task: bool,
    /// Drop the sentiment gate in the decoder.
    pub no_gate: bool,
    /// Drop rating embeddings from history review vectors.
    pub no_history_ratings: bool,
    /// Skip graph propagation entirely; pool raw review vectors.
    pub no_graph: bool,
    /// Build graphs without time edges.
    pub no_time_edges: bool,
    /// Build graphs without shared-rating edges.
    pub no_rating_edges: bool,
}

impl AblationConfig {
    /// Side arity after ablation: both graphs, one graph, or one merged graph.
    pub fn active_sides(&self) -> usize {
        if self.merge_graphs {
            1
        } else {
            2 - usize::from(self.no_customer_graph) - usize::from(self.no_product_graph)
        }
    }

    /// The contrastive term requires both an intact customer side and an
    /// intact product side.
    pub fn contrastive_possible(&self) -> bool {
        !self.no_contrastive
            && !self.merge_graphs
            && !self.no_customer_graph
            && !self.no_product_graph
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub contrastive: ContrastiveConfig,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
}

impl Config {
    /// Small model that trains on a laptop CPU in seconds-to-minutes.
    pub fn desk() -> Self {
        Config::default()
    }

    /// Full-size dimensions matching the reference setting.
    pub fn paper() -> Self {
        Config {
            model: ModelConfig {
                d_model: 768,
                encoder_layers: 6,
                decoder_layers: 6,
                n_heads: 12,
                ffn_dim: 3072,
                dropout: 0.1,
                max_review_len: 256,
                max_summary_len: 32,
                graph_layers: 2,
                directed_time_edges: false,
                vector_gate: false,
            },
            data: DataConfig {
                vocab_size: 30000,
                min_freq: 2,
                history_k: 3,
                val_count: 8000,
                test_count: 8000,
                split_seed: 13,
            },
            contrastive: ContrastiveConfig::default(),
            train: TrainConfig {
                seed: 17,
                batch_size: 16,
                max_steps: 100_000,
                lr: 3e-5,
                optimizer: Optimizer::Adam,
                clip_norm: 1.0,
                validate_every: 2000,
                patience: 5,
                divergence_threshold: 1e4,
                checkpoint_every: 0,
                log_every: 100,
            },
            ablation: AblationConfig::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Config::desk()),
            "paper" => Ok(Config::paper()),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected 'desk' or 'paper')"
            ))),
        }
    }

    /// Load from a TOML file, then apply `section.key=value` overrides.
    pub fn load(path: &str, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let value: toml::Value =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad TOML: {e}")))?;
        Self::from_value(value, overrides)
    }

    /// Start from a preset and apply overrides.
    pub fn preset_with_overrides(name: &str, overrides: &[String]) -> Result<Self> {
        let base = Self::preset(name)?;
        let value = toml::Value::try_from(&base)
            .map_err(|e| Error::Config(format!("serializing preset: {e}")))?;
        Self::from_value(value, overrides)
    }

    fn from_value(mut value: toml::Value, overrides: &[String]) -> Result<Self> {
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        let cfg: Config = value
            .try_into()
            .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.d_model == 0 || m.n_heads == 0 || m.d_model % m.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                m.d_model, m.n_heads
            )));
        }
        if m.encoder_layers == 0 || m.decoder_layers == 0 {
            return Err(Error::Config("encoder/decoder need at least one layer".into()));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", m.dropout)));
        }
        if m.max_review_len == 0 || m.max_summary_len == 0 {
            return Err(Error::Config("sequence length limits must be positive".into()));
        }
        if self.data.vocab_size < 5 {
            return Err(Error::Config(format!(
                "vocab_size {} cannot fit the 5 reserved tokens",
                self.data.vocab_size
            )));
        }
        if self.data.history_k == 0 {
            return Err(Error::Config("history_k must be at least 1".into()));
        }
        let c = &self.contrastive;
        if c.alpha < 0.0 {
            return Err(Error::Config(format!("alpha {} must be non-negative", c.alpha)));
        }
        if c.tau <= 0.0 {
            return Err(Error::Config(format!("tau {} must be positive", c.tau)));
        }
        if !(0.0..1.0).contains(&c.dropout_rate) {
            return Err(Error::Config(format!(
                "contrastive dropout_rate {} outside [0,1)",
                c.dropout_rate
            )));
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if t.lr <= 0.0 {
            return Err(Error::Config(format!("lr {} must be positive", t.lr)));
        }
        if t.clip_norm <= 0.0 {
            return Err(Error::Config(format!("clip_norm {} must be positive", t.clip_norm)));
        }
        let a = &self.ablation;
        let exclusive =
            usize::from(a.no_customer_graph) + usize::from(a.no_product_graph) + usize::from(a.merge_graphs);
        if a.merge_graphs && exclusive > 1 {
            return Err(Error::Config(
                "merge_graphs cannot be combined with dropping a graph side".into(),
            ));
        }
        if a.no_customer_graph && a.no_product_graph {
            return Err(Error::Config(
                "dropping both graph sides leaves no history signal; use no_graph instead".into(),
            ));
        }
        Ok(())
    }

    /// Hex digest identifying the full configuration.
    pub fn hash(&self) -> String {
        hash_hex(&self.to_toml_string())
    }

    /// Hex digest of everything that shapes prepared data (vocabulary,
    /// truncation, history assembly). Training hyperparameters excluded.
    pub fn data_hash(&self) -> String {
        let key = format!(
            "{}|{}|{}|{}|{}|{}|{}|{}",
            toml::to_string(&self.data).expect("data section serializes"),
            self.model.max_review_len,
            self.model.max_summary_len,
            self.data.history_k,
            self.data.vocab_size,
            self.data.min_freq,
            self.data.val_count,
            self.data.test_count,
        );
        hash_hex(&key)
    }
}

fn hash_hex(s: &str) -> String {
    let mut h = Sha256::new();
    h.update(s.as_bytes());
    let digest = h.finalize();
    let mut out = String::with_capacity(16);
    for b in digest.iter().take(8) {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Apply one `section.key=value` override onto a TOML tree.
fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not of form key=value")))?;
    let path = path.trim();
    let raw = raw.trim();
    if path.is_empty() {
        return Err(Error::Config(format!("override '{spec}' has an empty key")));
    }
    let parsed = parse_override_value(raw);
    let mut cursor = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        if seg.is_empty() {
            return Err(Error::Config(format!("override '{spec}' has an empty path segment")));
        }
        let table = cursor
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path '{path}' crosses a non-table")))?;
        if i + 1 == segments.len() {
            table.insert((*seg).to_string(), parsed);
            return Ok(());
        }
        cursor = table
            .entry((*seg).to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    unreachable!("loop returns on last segment");
}

/// Interpret the right-hand side as TOML (numbers, bools, quoted strings);
/// bare words fall back to strings.
fn parse_override_value(raw: &str) -> toml::Value {
    let attempt: std::result::Result<toml::Value, _> = toml::from_str(&format!("v = {raw}"));
    if let Ok(toml::Value::Table(mut t)) = attempt {
        if let Some(v) = t.remove("v") {
            return v;
        }
    }
    toml::Value::String(raw.to_string())
}
