//! ROUGE-1/2/L, the 5-way classification report, and evaluation-run
//! assembly.
//!
//! ROUGE counts clipped n-gram overlap (multiset intersection) and the
//! longest common subsequence; corpus scores are per-example means. The
//! classification report exposes the full confusion matrix, per-class
//! precision/recall/F1, macro-F1 over all five classes (absent classes score
//! zero), and balanced accuracy — mean recall over the classes that actually
//! appear in the gold labels.

use crate::corpus::normalize_tokens;
use crate::error::{Error, Result};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;
use std::path::Path;

/// Recall / precision / F1 triple, each in [0, 1].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RougeTriple {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

impl RougeTriple {
    fn from_overlap(overlap: f64, ref_total: f64, cand_total: f64) -> Self {
        if ref_total == 0.0 || cand_total == 0.0 {
            return RougeTriple::default();
        }
        let recall = overlap / ref_total;
        let precision = overlap / cand_total;
        let f1 =
            if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        RougeTriple { recall, precision, f1 }
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap scores. Sequences shorter than n (or empty) on
/// either side give all zeros.
pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> RougeTriple {
    assert!(n >= 1, "n-gram order must be positive");
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let overlap: usize = cand
        .iter()
        .map(|(gram, &c)| refs.get(gram).map_or(0, |&r| c.min(r)))
        .sum();
    let cand_total = candidate.len().saturating_sub(n - 1);
    let ref_total = reference.len().saturating_sub(n - 1);
    RougeTriple::from_overlap(overlap as f64, ref_total as f64, cand_total as f64)
}

fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    // one-row DP over b
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Longest-common-subsequence scores: R = ℓ/|ref|, P = ℓ/|cand|.
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> RougeTriple {
    let l = lcs_len(candidate, reference) as f64;
    RougeTriple::from_overlap(l, reference.len() as f64, candidate.len() as f64)
}

/// Per-class precision/recall/F1.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Confusion matrix and summary scores over ratings 1..=5.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationReport {
    /// confusion[gold-1][pred-1] = count
    pub confusion: [[usize; 5]; 5],
    pub per_class: [ClassScores; 5],
    /// Unweighted mean F1 over all five classes.
    pub macro_f1: f64,
    /// Mean recall over the classes present in the gold labels.
    pub balanced_accuracy: f64,
    pub accuracy: f64,
    pub n: usize,
}

/// Build the report. Labels outside 1..=5 or length mismatches are fatal.
pub fn classification_report(preds: &[u8], golds: &[u8]) -> Result<ClassificationReport> {
    if preds.len() != golds.len() {
        return Err(Error::EvalMismatch(format!(
            "{} predictions vs {} gold labels",
            preds.len(),
            golds.len()
        )));
    }
    let mut confusion = [[0usize; 5]; 5];
    let mut correct = 0usize;
    for (&p, &g) in preds.iter().zip(golds) {
        for (label, what) in [(p, "prediction"), (g, "gold label")] {
            if !(1..=5).contains(&label) {
                return Err(Error::InvalidRating {
                    value: label as f64,
                    location: what.to_string(),
                });
            }
        }
        confusion[(g - 1) as usize][(p - 1) as usize] += 1;
        if p == g {
            correct += 1;
        }
    }
    let mut per_class = [ClassScores::default(); 5];
    let mut recall_sum = 0.0;
    let mut present = 0usize;
    let mut f1_sum = 0.0;
    for c in 0..5 {
        let tp = confusion[c][c];
        let gold_total: usize = confusion[c].iter().sum();
        let pred_total: usize = (0..5).map(|g| confusion[g][c]).sum();
        let precision = if pred_total == 0 { 0.0 } else { tp as f64 / pred_total as f64 };
        let recall = if gold_total == 0 { 0.0 } else { tp as f64 / gold_total as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class[c] = ClassScores { precision, recall, f1 };
        f1_sum += f1;
        if gold_total > 0 {
            recall_sum += recall;
            present += 1;
        }
    }
    let n = golds.len();
    Ok(ClassificationReport {
        confusion,
        per_class,
        macro_f1: f1_sum / 5.0,
        balanced_accuracy: if present == 0 { 0.0 } else { recall_sum / present as f64 },
        accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        n,
    })
}

/// Everything an evaluation run produces: mean per-example ROUGE plus the
/// classification report.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub n_examples: usize,
    pub rouge1: RougeTriple,
    pub rouge2: RougeTriple,
    pub rougel: RougeTriple,
    pub classification: ClassificationReport,
}

/// Mean per-example ROUGE over aligned (candidate, reference) text pairs.
pub fn rouge_corpus(pairs: &[(String, String)]) -> (RougeTriple, RougeTriple, RougeTriple) {
    let mut sums = [RougeTriple::default(); 3];
    for (cand_text, ref_text) in pairs {
        let cand = normalize_tokens(cand_text);
        let refs = normalize_tokens(ref_text);
        for (slot, triple) in [
            rouge_n(&cand, &refs, 1),
            rouge_n(&cand, &refs, 2),
            rouge_l(&cand, &refs),
        ]
        .into_iter()
        .enumerate()
        {
            sums[slot].recall += triple.recall;
            sums[slot].precision += triple.precision;
            sums[slot].f1 += triple.f1;
        }
    }
    let n = pairs.len().max(1) as f64;
    let mean = |t: RougeTriple| RougeTriple {
        recall: t.recall / n,
        precision: t.precision / n,
        f1: t.f1 / n,
    };
    (mean(sums[0]), mean(sums[1]), mean(sums[2]))
}

/// Parse an `id<TAB>value` file; duplicate or malformed lines are fatal.
pub fn read_tsv(path: &Path) -> Result<HashMap<String, String>> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(&display, e))?;
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let Some((id, value)) = line.split_once('\t') else {
            return Err(Error::malformed(
                format!("{display}:{}", lineno + 1),
                "expected id<TAB>value",
            ));
        };
        if map.insert(id.to_string(), value.to_string()).is_some() {
            return Err(Error::malformed(
                format!("{display}:{}", lineno + 1),
                format!("duplicate id '{id}'"),
            ));
        }
    }
    Ok(map)
}

/// Pair two id-keyed maps, failing loudly with the offending ids.
fn align(
    left: &HashMap<String, String>,
    right: &HashMap<String, String>,
    left_name: &str,
    right_name: &str,
) -> Result<Vec<(String, String)>> {
    let mut missing_right: Vec<&String> =
        left.keys().filter(|id| !right.contains_key(*id)).collect();
    let mut missing_left: Vec<&String> =
        right.keys().filter(|id| !left.contains_key(*id)).collect();
    if !missing_right.is_empty() || !missing_left.is_empty() {
        missing_right.sort();
        missing_left.sort();
        return Err(Error::EvalMismatch(format!(
            "{left_name} ids without {right_name}: {missing_right:?}; \
             {right_name} ids without {left_name}: {missing_left:?}"
        )));
    }
    let mut ids: Vec<&String> = left.keys().collect();
    ids.sort();
    Ok(ids.into_iter().map(|id| (left[id].clone(), right[id].clone())).collect())
}

fn parse_rating(s: &str, location: &str) -> Result<u8> {
    s.trim()
        .parse::<u8>()
        .map_err(|_| Error::InvalidRating { value: f64::NAN, location: location.to_string() })
}

/// Score one run from four `id<TAB>value` files: decoded summaries,
/// reference summaries, predicted ratings, gold ratings.
pub fn evaluate_run(
    decoded: &Path,
    references: &Path,
    predictions: &Path,
    golds: &Path,
) -> Result<EvalReport> {
    let cand_map = read_tsv(decoded)?;
    let ref_map = read_tsv(references)?;
    let pred_map = read_tsv(predictions)?;
    let gold_map = read_tsv(golds)?;
    let text_pairs = align(&cand_map, &ref_map, "candidate", "reference")?;
    let label_pairs = align(&pred_map, &gold_map, "prediction", "gold")?;
    let mut preds = Vec::with_capacity(label_pairs.len());
    let mut gold_labels = Vec::with_capacity(label_pairs.len());
    for (p, g) in &label_pairs {
        preds.push(parse_rating(p, "predictions file")?);
        gold_labels.push(parse_rating(g, "golds file")?);
    }
    let (rouge1, rouge2, rougel) = rouge_corpus(&text_pairs);
    let classification = classification_report(&preds, &gold_labels)?;
    Ok(EvalReport { n_examples: text_pairs.len(), rouge1, rouge2, rougel, classification })
}

/// Fixed-key text rendering, one `key = value` per line.
pub fn render_report(r: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "n_examples = {}", r.n_examples);
    for (name, t) in [("rouge1", r.rouge1), ("rouge2", r.rouge2), ("rougel", r.rougel)] {
        let _ = writeln!(out, "{name}_r = {:.6}", t.recall);
        let _ = writeln!(out, "{name}_p = {:.6}", t.precision);
        let _ = writeln!(out, "{name}_f = {:.6}", t.f1);
    }
    let _ = writeln!(out, "macro_f1 = {:.6}", r.classification.macro_f1);
    let _ = writeln!(out, "balanced_acc = {:.6}", r.classification.balanced_accuracy);
    let _ = writeln!(out, "accuracy = {:.6}", r.classification.accuracy);
    out
}
