//! Corpus ingestion: raw review dumps, vocabulary, history indices, padded
//! training examples, batching, and the prepared-dataset cache.
//!
//! The dump format is line-delimited JSON with the public Amazon field names
//! (`reviewText`, `summary`, `overall`, `reviewerID`, `asin`,
//! `unixReviewTime`). Malformed lines are counted and skipped; out-of-range
//! ratings are skipped with a warning.

use crate::config::Config;
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const CLS_ID: usize = 4;

pub const RESERVED_TOKENS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<cls>"];

/// Rating-slot value reserved for padded history entries; real ratings
/// occupy slots 1..=5.
pub const PAD_RATING_SLOT: u8 = 0;

pub const CACHE_VERSION: u32 = 1;

/// A review as read from the dump, before tokenization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawReview {
    pub review_id: String,
    pub customer_id: String,
    pub product_id: String,
    pub review_text: String,
    pub summary_text: String,
    pub rating: u8,
    pub timestamp: i64,
}

/// A tokenized review. `rating == 0` marks a padding record that fills a
/// short history; real records always carry a rating in 1..=5.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub review_id: String,
    pub customer_id: String,
    pub product_id: String,
    pub review_tokens: Vec<usize>,
    pub summary_tokens: Vec<usize>,
    pub rating: u8,
    pub timestamp: i64,
}

impl ReviewRecord {
    pub fn padding() -> Self {
        ReviewRecord {
            review_id: String::new(),
            customer_id: String::new(),
            product_id: String::new(),
            review_tokens: Vec::new(),
            summary_tokens: Vec::new(),
            rating: PAD_RATING_SLOT,
            timestamp: 0,
        }
    }

    pub fn is_padding(&self) -> bool {
        self.rating == PAD_RATING_SLOT
    }
}

/// A target review with its two padded k-slot histories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub target: ReviewRecord,
    pub customer_history: Vec<ReviewRecord>,
    pub product_history: Vec<ReviewRecord>,
    pub customer_pad_mask: Vec<bool>,
    pub product_pad_mask: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DumpFormat {
    Jsonl,
}

pub struct LoadReport {
    pub records: Vec<RawReview>,
    pub skipped: usize,
}

/// Read a review dump. Returns records in file order plus the count of
/// skipped lines (malformed, incomplete, or out-of-range rating).
pub fn load_reviews(path: &Path, format: DumpFormat) -> Result<LoadReport> {
    match format {
        DumpFormat::Jsonl => load_jsonl(path),
    }
}

fn load_jsonl(path: &Path) -> Result<LoadReport> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::io(&display, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut skipped = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(&display, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_dump_line(&line, lineno + 1) {
            Ok(raw) => records.push(raw),
            Err(reason) => {
                skipped += 1;
                log::warn!("{display}:{}: skipped record ({reason})", lineno + 1);
            }
        }
    }
    Ok(LoadReport { records, skipped })
}

fn parse_dump_line(line: &str, lineno: usize) -> std::result::Result<RawReview, String> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    let get_str = |key: &str| -> std::result::Result<String, String> {
        value
            .get(key)
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| format!("missing or non-string field '{key}'"))
    };
    let review_text = get_str("reviewText")?;
    let summary_text = get_str("summary")?;
    let customer_id = get_str("reviewerID")?;
    let product_id = get_str("asin")?;
    if review_text.trim().is_empty() {
        return Err("empty reviewText".into());
    }
    let overall = value
        .get("overall")
        .and_then(|v| v.as_f64())
        .ok_or_else(|| "missing or non-numeric field 'overall'".to_string())?;
    if overall.fract() != 0.0 || !(1.0..=5.0).contains(&overall) {
        return Err(format!("rating {overall} outside integer range 1..=5"));
    }
    let timestamp = value
        .get("unixReviewTime")
        .and_then(|v| v.as_i64())
        .ok_or_else(|| "missing or non-integer field 'unixReviewTime'".to_string())?;
    if timestamp < 0 {
        return Err(format!("negative timestamp {timestamp}"));
    }
    Ok(RawReview {
        review_id: format!("{customer_id}:{product_id}:{lineno}"),
        customer_id,
        product_id,
        review_text,
        summary_text,
        rating: overall as u8,
        timestamp,
    })
}

/// Lowercase and split on any non-alphanumeric character.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Token table with five fixed reserved entries at ids 0..=4.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build from raw records: count tokens over review and summary text,
    /// keep those above `min_freq`, order by descending frequency then
    /// lexicographic, cap the total table (reserved included) at `max_size`.
    pub fn build(records: &[RawReview], max_size: usize, min_freq: usize) -> Result<Self> {
        if max_size < RESERVED_TOKENS.len() {
            return Err(Error::Config(format!(
                "vocabulary size {max_size} cannot hold the {} reserved tokens",
                RESERVED_TOKENS.len()
            )));
        }
        let mut freq: HashMap<String, usize> = HashMap::new();
        for r in records {
            for tok in normalize_tokens(&r.review_text) {
                *freq.entry(tok).or_insert(0) += 1;
            }
            for tok in normalize_tokens(&r.summary_text) {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
        let mut entries: Vec<(String, usize)> =
            freq.into_iter().filter(|(_, c)| *c >= min_freq).collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        entries.truncate(max_size - RESERVED_TOKENS.len());
        let mut id_to_token: Vec<String> =
            RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(entries.into_iter().map(|(t, _)| t));
        Self::from_tokens(id_to_token)
    }

    /// Rebuild from an id-ordered token list (cache load path).
    pub fn from_tokens(id_to_token: Vec<String>) -> Result<Self> {
        if id_to_token.len() < RESERVED_TOKENS.len() {
            return Err(Error::Cache("vocabulary shorter than reserved prefix".into()));
        }
        for (i, want) in RESERVED_TOKENS.iter().enumerate() {
            if id_to_token[i] != *want {
                return Err(Error::Cache(format!(
                    "vocabulary id {i} is '{}', expected reserved '{want}'",
                    id_to_token[i]
                )));
            }
        }
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, t) in id_to_token.iter().enumerate() {
            if token_to_id.insert(t.clone(), i).is_some() {
                return Err(Error::Cache(format!("duplicate vocabulary token '{t}'")));
            }
        }
        Ok(Vocabulary { id_to_token, token_to_id })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved prefix is always present
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        self.encode(&normalize_tokens(text))
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.id_to_token[i].clone()).collect()
    }

    /// Decoded surface text with reserved tokens dropped.
    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= RESERVED_TOKENS.len())
            .map(|&i| self.id_to_token[i].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Tokenize raw records, truncating reviews and summaries to the configured
/// caps. Records whose review text normalizes to nothing are dropped and
/// counted.
pub fn tokenize_records(
    raws: &[RawReview],
    vocab: &Vocabulary,
    max_review_len: usize,
    max_summary_len: usize,
) -> (Vec<ReviewRecord>, usize) {
    let mut out = Vec::with_capacity(raws.len());
    let mut dropped = 0usize;
    for raw in raws {
        let mut review_tokens = vocab.encode_text(&raw.review_text);
        if review_tokens.is_empty() {
            dropped += 1;
            continue;
        }
        review_tokens.truncate(max_review_len);
        let mut summary_tokens = vocab.encode_text(&raw.summary_text);
        summary_tokens.truncate(max_summary_len);
        out.push(ReviewRecord {
            review_id: raw.review_id.clone(),
            customer_id: raw.customer_id.clone(),
            product_id: raw.product_id.clone(),
            review_tokens,
            summary_tokens,
            rating: raw.rating,
            timestamp: raw.timestamp,
        });
    }
    (out, dropped)
}

/// Per-customer and per-product review lists, each sorted by
/// (timestamp, review_id). Values are indices into the record slice the
/// index was built from.
#[derive(Clone, Debug, Default)]
pub struct HistoryIndex {
    by_customer: HashMap<String, Vec<usize>>,
    by_product: HashMap<String, Vec<usize>>,
}

pub fn build_history_index(records: &[ReviewRecord]) -> HistoryIndex {
    let mut idx = HistoryIndex::default();
    for (i, r) in records.iter().enumerate() {
        idx.by_customer.entry(r.customer_id.clone()).or_default().push(i);
        idx.by_product.entry(r.product_id.clone()).or_default().push(i);
    }
    let sort_key = |records: &[ReviewRecord], list: &mut Vec<usize>| {
        list.sort_by(|&a, &b| {
            records[a]
                .timestamp
                .cmp(&records[b].timestamp)
                .then_with(|| records[a].review_id.cmp(&records[b].review_id))
        });
    };
    for list in idx.by_customer.values_mut() {
        sort_key(records, list);
    }
    for list in idx.by_product.values_mut() {
        sort_key(records, list);
    }
    idx
}

impl HistoryIndex {
    pub fn customer(&self, id: &str) -> &[usize] {
        self.by_customer.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn product(&self, id: &str) -> &[usize] {
        self.by_product.get(id).map(Vec::as_slice).unwrap_or(&[])
    }
}

pub struct FetchedHistory {
    pub customer: Vec<ReviewRecord>,
    pub product: Vec<ReviewRecord>,
    pub customer_mask: Vec<bool>,
    pub product_mask: Vec<bool>,
}

/// The k most recent reviews strictly preceding the target, per side, in
/// ascending time order, left-padded to exactly k slots.
pub fn fetch_history(
    index: &HistoryIndex,
    records: &[ReviewRecord],
    target: &ReviewRecord,
    k: usize,
) -> FetchedHistory {
    assert!(k >= 1, "history length k must be at least 1");
    let pick = |sorted: &[usize]| -> (Vec<ReviewRecord>, Vec<bool>) {
        let eligible: Vec<usize> = sorted
            .iter()
            .copied()
            .filter(|&i| {
                records[i].timestamp < target.timestamp && records[i].review_id != target.review_id
            })
            .collect();
        let take = eligible.len().min(k);
        let chosen = &eligible[eligible.len() - take..];
        let mut recs = Vec::with_capacity(k);
        let mut mask = Vec::with_capacity(k);
        for _ in 0..(k - take) {
            recs.push(ReviewRecord::padding());
            mask.push(false);
        }
        for &i in chosen {
            recs.push(records[i].clone());
            mask.push(true);
        }
        (recs, mask)
    };
    let (customer, customer_mask) = pick(index.customer(&target.customer_id));
    let (product, product_mask) = pick(index.product(&target.product_id));
    FetchedHistory { customer, product, customer_mask, product_mask }
}

/// Build one training example per record that has a non-empty summary.
pub fn assemble_examples(
    records: &[ReviewRecord],
    index: &HistoryIndex,
    k: usize,
) -> Vec<TrainingExample> {
    records
        .iter()
        .filter(|r| !r.summary_tokens.is_empty())
        .map(|target| {
            let h = fetch_history(index, records, target, k);
            TrainingExample {
                target: target.clone(),
                customer_history: h.customer,
                product_history: h.product,
                customer_pad_mask: h.customer_mask,
                product_pad_mask: h.product_mask,
            }
        })
        .collect()
}

/// One shuffled batch: indices into the example slice plus right-padded token
/// matrices and their masks.
#[derive(Clone, Debug)]
pub struct PaddedBatch {
    pub example_indices: Vec<usize>,
    pub review_tokens: Vec<Vec<usize>>,
    pub review_mask: Vec<Vec<bool>>,
    /// Decoder input: BOS followed by the summary.
    pub summary_input: Vec<Vec<usize>>,
    /// Decoder target: the summary followed by EOS.
    pub summary_target: Vec<Vec<usize>>,
    pub summary_mask: Vec<Vec<bool>>,
}

fn pad_to<T: Copy>(rows: Vec<Vec<T>>, fill: T) -> (Vec<Vec<T>>, Vec<Vec<bool>>) {
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::with_capacity(rows.len());
    let mut mask = Vec::with_capacity(rows.len());
    for mut row in rows {
        let live = row.len();
        row.resize(width, fill);
        let mut m = vec![true; live];
        m.resize(width, false);
        out.push(row);
        mask.push(m);
    }
    (out, mask)
}

/// Shuffle examples with the seed and chunk them into padded batches.
/// Deterministic: the order is a pure function of (seed, examples).
pub fn make_batches(
    examples: &[TrainingExample],
    batch_size: usize,
    shuffle_seed: u64,
) -> Vec<PaddedBatch> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    order.shuffle(&mut rng);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let reviews: Vec<Vec<usize>> =
                chunk.iter().map(|&i| examples[i].target.review_tokens.clone()).collect();
            let (review_tokens, review_mask) = pad_to(reviews, PAD_ID);
            let inputs: Vec<Vec<usize>> = chunk
                .iter()
                .map(|&i| {
                    let mut v = vec![BOS_ID];
                    v.extend_from_slice(&examples[i].target.summary_tokens);
                    v
                })
                .collect();
            let targets: Vec<Vec<usize>> = chunk
                .iter()
                .map(|&i| {
                    let mut v = examples[i].target.summary_tokens.clone();
                    v.push(EOS_ID);
                    v
                })
                .collect();
            let (summary_input, _) = pad_to(inputs, PAD_ID);
            let (summary_target, summary_mask) = pad_to(targets, PAD_ID);
            PaddedBatch {
                example_indices: chunk.to_vec(),
                review_tokens,
                review_mask,
                summary_input,
                summary_target,
                summary_mask,
            }
        })
        .collect()
}

/// Serialized prepared dataset: vocabulary, entity tables, split examples.
/// Invalidated when the data-shaping config hash changes.
#[derive(Serialize, Deserialize)]
pub struct DatasetCache {
    pub version: u32,
    pub config_hash: String,
    pub vocab: Vec<String>,
    /// Entity id tables; row 0 is the out-of-vocabulary bucket.
    pub customers: Vec<String>,
    pub products: Vec<String>,
    pub train: Vec<TrainingExample>,
    pub val: Vec<TrainingExample>,
    pub test: Vec<TrainingExample>,
}

pub const OOV_ENTITY: &str = "<oov>";

impl DatasetCache {
    pub fn save(&self, path: &Path) -> Result<()> {
        let display = path.display().to_string();
        let file = std::fs::File::create(path).map_err(|e| Error::io(&display, e))?;
        let writer = std::io::BufWriter::new(file);
        serde_json::to_writer(writer, self)
            .map_err(|e| Error::Cache(format!("writing {display}: {e}")))
    }

    pub fn load(path: &Path, expected_hash: Option<&str>) -> Result<Self> {
        let display = path.display().to_string();
        let file = std::fs::File::open(path).map_err(|e| Error::io(&display, e))?;
        let reader = std::io::BufReader::new(file);
        let cache: DatasetCache = serde_json::from_reader(reader)
            .map_err(|e| Error::Cache(format!("reading {display}: {e}")))?;
        if cache.version != CACHE_VERSION {
            return Err(Error::Cache(format!(
                "cache version {} does not match current {CACHE_VERSION}; re-run prepare",
                cache.version
            )));
        }
        if let Some(expect) = expected_hash {
            if cache.config_hash != expect {
                return Err(Error::Cache(format!(
                    "cache was prepared under config hash {} but current is {expect}; re-run prepare",
                    cache.config_hash
                )));
            }
        }
        Ok(cache)
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::from_tokens(self.vocab.clone())
    }

    pub fn customer_row(&self, id: &str) -> usize {
        self.customers.iter().position(|c| c == id).unwrap_or(0)
    }

    pub fn product_row(&self, id: &str) -> usize {
        self.products.iter().position(|p| p == id).unwrap_or(0)
    }
}

/// Full preparation pipeline: vocabulary, tokenization, split, histories.
pub fn prepare_dataset(raws: &[RawReview], cfg: &Config) -> Result<DatasetCache> {
    let vocab = Vocabulary::build(raws, cfg.data.vocab_size, cfg.data.min_freq)?;
    let (records, dropped) =
        tokenize_records(raws, &vocab, cfg.model.max_review_len, cfg.model.max_summary_len);
    if dropped > 0 {
        log::warn!("{dropped} records dropped: review text normalized to nothing");
    }
    let index = build_history_index(&records);
    let examples = assemble_examples(&records, &index, cfg.data.history_k);
    let held_out = cfg.data.val_count + cfg.data.test_count;
    if held_out >= examples.len() && held_out > 0 {
        return Err(Error::Config(format!(
            "val_count + test_count = {held_out} exhausts the {} available examples",
            examples.len()
        )));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data.split_seed);
    order.shuffle(&mut rng);
    let (val_n, test_n) = (cfg.data.val_count, cfg.data.test_count);
    let val_idx = &order[..val_n];
    let test_idx = &order[val_n..val_n + test_n];
    let train_idx = &order[val_n + test_n..];
    let collect = |idxs: &[usize]| -> Vec<TrainingExample> {
        let mut sorted = idxs.to_vec();
        sorted.sort_unstable();
        sorted.into_iter().map(|i| examples[i].clone()).collect()
    };
    let train = collect(train_idx);
    let val = collect(val_idx);
    let test = collect(test_idx);

    // Entity tables come from the training split; unseen entities at
    // validation/test time fall into the OOV bucket at row 0.
    let mut customers: Vec<String> = vec![OOV_ENTITY.to_string()];
    let mut products: Vec<String> = vec![OOV_ENTITY.to_string()];
    let mut seen_c: std::collections::HashSet<&str> = Default::default();
    let mut seen_p: std::collections::HashSet<&str> = Default::default();
    for ex in &train {
        if seen_c.insert(&ex.target.customer_id) {
            customers.push(ex.target.customer_id.clone());
        }
        if seen_p.insert(&ex.target.product_id) {
            products.push(ex.target.product_id.clone());
        }
    }

    Ok(DatasetCache {
        version: CACHE_VERSION,
        config_hash: cfg.data_hash(),
        vocab: vocab.tokens().to_vec(),
        customers,
        products,
        train,
        val,
        test,
    })
}

/// Mean review / summary word counts, for corpus sanity reporting.
pub fn corpus_stats(raws: &[RawReview]) -> (f64, f64) {
    if raws.is_empty() {
        return (0.0, 0.0);
    }
    let n = raws.len() as f64;
    let review: usize = raws.iter().map(|r| normalize_tokens(&r.review_text).len()).sum();
    let summary: usize = raws.iter().map(|r| normalize_tokens(&r.summary_text).len()).sum();
    (review as f64 / n, summary as f64 / n)
}
