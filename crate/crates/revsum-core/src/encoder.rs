//! Transformer review encoder and composite review vectors.
//!
//! `encode_tokens` runs a pre-norm transformer over a CLS-prefixed token
//! sequence; position embeddings are learned absolute rows. The CLS hidden
//! state (row 0) aggregates the review; `review_vector` adds entity and
//! rating embeddings to it depending on the review's role:
//!
//! * input review:      r = h_0
//! * customer history:  r = h_0 + u + E_s(rating)
//! * product history:   r = h_0 + p + E_s(rating)
//!
//! Padded positions never enter attention: sequences are encoded at their
//! live length and zero rows are appended afterwards, so masked positions
//! carry exactly zero weight.

use crate::config::ModelConfig;
use crate::corpus::CLS_ID;
use crate::error::{Error, Result};
use crate::params::{normal_init, BoundParams, ParamStore};
use crate::tape::{Tape, TensorRef};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// What a review vector is used for; decides which embeddings are added.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Input,
    CustomerHistory,
    ProductHistory,
}

/// Deterministic dropout mask source for one example's forward pass.
/// Masks are drawn in wiring order from a seeded stream, so a fixed
/// (seed, rate) pair always produces the same masks.
pub struct DropoutCtx {
    rng: ChaCha8Rng,
    rate: f64,
}

impl DropoutCtx {
    pub fn new(seed: u64, rate: f64) -> Self {
        use rand::SeedableRng;
        DropoutCtx { rng: ChaCha8Rng::seed_from_u64(seed), rate }
    }

    /// Inverted-dropout mask: entries are 0 with probability `rate`, else
    /// 1/(1-rate), so expectations are preserved.
    pub fn mask(&mut self, rows: usize, cols: usize) -> Array2<f64> {
        let keep = 1.0 - self.rate;
        Array2::from_shape_fn((rows, cols), |_| {
            if self.rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
    }
}

/// Multiply by a fresh dropout mask when training with a positive rate.
pub fn maybe_dropout(
    tape: &mut Tape,
    t: TensorRef,
    ctx: &mut Option<&mut DropoutCtx>,
) -> TensorRef {
    match ctx {
        Some(c) if c.rate > 0.0 => {
            let (r, cl) = tape.value(t).dim();
            let mask = c.mask(r, cl);
            let m = tape.constant(mask);
            tape.mul(t, m)
        }
        _ => t,
    }
}

/// Register all encoder parameters under the `enc.` prefix.
pub fn register_encoder_params(
    store: &mut ParamStore,
    m: &ModelConfig,
    vocab_size: usize,
    rng: &mut ChaCha8Rng,
) {
    let d = m.d_model;
    store.register("enc.tok", normal_init(rng, vocab_size, d, 0.02));
    store.register("enc.pos", normal_init(rng, m.max_review_len + 1, d, 0.02));
    for l in 0..m.encoder_layers {
        register_block_params(store, &format!("enc.l{l}"), d, m.ffn_dim, rng);
    }
    store.register("enc.lnf.g", Array2::ones((1, d)));
    store.register("enc.lnf.b", Array2::zeros((1, d)));
}

/// Attention + FFN sublayer parameters shared by encoder and decoder blocks.
pub(crate) fn register_attention_params(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    rng: &mut ChaCha8Rng,
) {
    for proj in ["wq", "wk", "wv", "wo"] {
        store.register(&format!("{prefix}.{proj}"), normal_init(rng, d, d, 0.02));
    }
    for bias in ["bq", "bk", "bv", "bo"] {
        store.register(&format!("{prefix}.{bias}"), Array2::zeros((1, d)));
    }
}

pub(crate) fn register_ffn_params(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    ffn_dim: usize,
    rng: &mut ChaCha8Rng,
) {
    store.register(&format!("{prefix}.w1"), normal_init(rng, d, ffn_dim, 0.02));
    store.register(&format!("{prefix}.b1"), Array2::zeros((1, ffn_dim)));
    store.register(&format!("{prefix}.w2"), normal_init(rng, ffn_dim, d, 0.02));
    store.register(&format!("{prefix}.b2"), Array2::zeros((1, d)));
}

pub(crate) fn register_ln_params(store: &mut ParamStore, prefix: &str, d: usize) {
    store.register(&format!("{prefix}.g"), Array2::ones((1, d)));
    store.register(&format!("{prefix}.b"), Array2::zeros((1, d)));
}

fn register_block_params(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    ffn_dim: usize,
    rng: &mut ChaCha8Rng,
) {
    register_ln_params(store, &format!("{prefix}.ln1"), d);
    register_attention_params(store, &format!("{prefix}.attn"), d, rng);
    register_ln_params(store, &format!("{prefix}.ln2"), d);
    register_ffn_params(store, &format!("{prefix}.ffn"), d, ffn_dim, rng);
}

pub(crate) fn layer_norm(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    x: TensorRef,
) -> TensorRef {
    let g = p.get(&format!("{prefix}.g"));
    let b = p.get(&format!("{prefix}.b"));
    tape.layer_norm_rows(x, g, b)
}

/// Scaled dot-product attention over `n_heads` column splits:
/// Softmax(Q K^T / sqrt(d_head) + mask) V, heads re-merged through W^O.
pub fn multi_head_attention(
    tape: &mut Tape,
    p: &BoundParams,
    prefix: &str,
    n_heads: usize,
    q_input: TensorRef,
    kv_input: TensorRef,
    additive_mask: Option<&Array2<f64>>,
) -> TensorRef {
    let d = tape.value(q_input).ncols();
    assert_eq!(d % n_heads, 0, "head count must divide width");
    let dh = d / n_heads;
    let wq = p.get(&format!("{prefix}.wq"));
    let wk = p.get(&format!("{prefix}.wk"));
    let wv = p.get(&format!("{prefix}.wv"));
    let wo = p.get(&format!("{prefix}.wo"));
    let bq = p.get(&format!("{prefix}.bq"));
    let bk = p.get(&format!("{prefix}.bk"));
    let bv = p.get(&format!("{prefix}.bv"));
    let bo = p.get(&format!("{prefix}.bo"));
    let q0 = tape.matmul(q_input, wq);
    let q = tape.add_row(q0, bq);
    let k0 = tape.matmul(kv_input, wk);
    let k = tape.add_row(k0, bk);
    let v0 = tape.matmul(kv_input, wv);
    let v = tape.add_row(v0, bv);
    let mask_node = additive_mask.map(|m| tape.constant(m.clone()));
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, lo, hi);
        let kh = tape.slice_cols(k, lo, hi);
        let vh = tape.slice_cols(v, lo, hi);
        let kt = tape.transpose(kh);
        let scores0 = tape.matmul(qh, kt);
        let mut scores = tape.scale(scores0, scale);
        if let Some(m) = mask_node {
            scores = tape.add(scores, m);
        }
        let attn = tape.softmax_rows(scores);
        heads.push(tape.matmul(attn, vh));
    }
    let merged = tape.concat_cols(&heads);
    let out = tape.matmul(merged, wo);
    tape.add_row(out, bo)
}

/// Position-wise feed-forward: max(0, x W1 + b1) W2 + b2.
pub fn feed_forward(tape: &mut Tape, p: &BoundParams, prefix: &str, x: TensorRef) -> TensorRef {
    let w1 = p.get(&format!("{prefix}.w1"));
    let b1 = p.get(&format!("{prefix}.b1"));
    let w2 = p.get(&format!("{prefix}.w2"));
    let b2 = p.get(&format!("{prefix}.b2"));
    let h0 = tape.matmul(x, w1);
    let h1 = tape.add_row(h0, b1);
    let h = tape.relu(h1);
    let o = tape.matmul(h, w2);
    tape.add_row(o, b2)
}

/// Encode the live (non-pad) tokens of a review. `ids` excludes CLS, which is
/// prepended here; the result has `ids.len() + 1` rows, CLS state at row 0.
pub fn encode_live(
    tape: &mut Tape,
    p: &BoundParams,
    m: &ModelConfig,
    ids: &[usize],
    dropout: &mut Option<&mut DropoutCtx>,
) -> Result<TensorRef> {
    encode_live_with_options(tape, p, m, ids, dropout, true)
}

/// Like [`encode_live`] but with the position mechanism switchable, used by
/// tests probing position sensitivity.
pub fn encode_live_with_options(
    tape: &mut Tape,
    p: &BoundParams,
    m: &ModelConfig,
    ids: &[usize],
    dropout: &mut Option<&mut DropoutCtx>,
    use_positions: bool,
) -> Result<TensorRef> {
    if ids.len() > m.max_review_len {
        return Err(Error::SequenceTooLong {
            len: ids.len(),
            max: m.max_review_len,
            at: m.max_review_len,
        });
    }
    let mut with_cls = Vec::with_capacity(ids.len() + 1);
    with_cls.push(CLS_ID);
    with_cls.extend_from_slice(ids);
    let seq_len = with_cls.len();

    let tok = p.get("enc.tok");
    let mut x = tape.gather_rows(tok, with_cls);
    if use_positions {
        let pos = p.get("enc.pos");
        let pos_rows = tape.slice_rows(pos, 0, seq_len);
        x = tape.add(x, pos_rows);
    }
    for l in 0..m.encoder_layers {
        let prefix = format!("enc.l{l}");
        let normed = layer_norm(tape, p, &format!("{prefix}.ln1"), x);
        let attended =
            multi_head_attention(tape, p, &format!("{prefix}.attn"), m.n_heads, normed, normed, None);
        let attended = maybe_dropout(tape, attended, dropout);
        x = tape.add(x, attended);
        let normed2 = layer_norm(tape, p, &format!("{prefix}.ln2"), x);
        let ff = feed_forward(tape, p, &format!("{prefix}.ffn"), normed2);
        let ff = maybe_dropout(tape, ff, dropout);
        x = tape.add(x, ff);
    }
    Ok(layer_norm(tape, p, "enc.lnf", x))
}

/// Encode a CLS-prefixed, possibly right-padded token sequence. The mask must
/// be true on a prefix (CLS + live tokens) and false on the padded tail;
/// padded rows of the result are exactly zero.
pub fn encode_tokens(
    tape: &mut Tape,
    p: &BoundParams,
    m: &ModelConfig,
    ids_with_cls: &[usize],
    mask: &[bool],
) -> Result<TensorRef> {
    if ids_with_cls.is_empty() {
        return Err(Error::Invalid("encode_tokens needs at least the CLS token".into()));
    }
    if ids_with_cls.len() != mask.len() {
        return Err(Error::Invalid(format!(
            "token/mask length mismatch: {} vs {}",
            ids_with_cls.len(),
            mask.len()
        )));
    }
    if ids_with_cls[0] != CLS_ID {
        return Err(Error::Invalid("sequence must start with CLS".into()));
    }
    let live = mask.iter().take_while(|&&b| b).count();
    if live == 0 {
        return Err(Error::Invalid("mask excludes the CLS position".into()));
    }
    if mask[live..].iter().any(|&b| b) {
        return Err(Error::Invalid("mask must be a live prefix followed by padding".into()));
    }
    let h_live = encode_live(tape, p, m, &ids_with_cls[1..live], &mut None)?;
    let pad_rows = ids_with_cls.len() - live;
    if pad_rows == 0 {
        Ok(h_live)
    } else {
        let d = tape.value(h_live).ncols();
        let zeros = tape.zeros(pad_rows, d);
        Ok(tape.concat_rows(&[h_live, zeros]))
    }
}

/// Row `slot` of the 6-row rating embedding table (row 0 = padding slot).
pub fn rating_embedding(tape: &mut Tape, p: &BoundParams, slot: u8) -> Result<TensorRef> {
    if slot > 5 {
        return Err(Error::Invalid(format!("rating slot {slot} outside 0..=5")));
    }
    Ok(tape.gather_rows(p.get("emb.rating"), vec![slot as usize]))
}

/// Compose the final review vector from encoded states `h` (CLS at row 0).
pub fn review_vector(
    tape: &mut Tape,
    p: &BoundParams,
    h: TensorRef,
    role: Role,
    rating_slot: u8,
    entity_row: usize,
    use_rating: bool,
) -> Result<TensorRef> {
    let h0 = tape.slice_rows(h, 0, 1);
    match role {
        Role::Input => Ok(h0),
        Role::CustomerHistory | Role::ProductHistory => {
            if rating_slot == 0 {
                return Err(Error::Invalid(
                    "history review vectors require a real rating (padding never encodes)".into(),
                ));
            }
            let table = match role {
                Role::CustomerHistory => "emb.customer",
                Role::ProductHistory => "emb.product",
                Role::Input => unreachable!(),
            };
            let entity = tape.gather_rows(p.get(table), vec![entity_row]);
            let mut r = tape.add(h0, entity);
            if use_rating {
                let rating = rating_embedding(tape, p, rating_slot)?;
                r = tape.add(r, rating);
            }
            Ok(r)
        }
    }
}
