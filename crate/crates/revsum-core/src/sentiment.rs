//! Attentive fusion of graph summaries with the input-review vector, the
//! 5-way rating classifier, and the classification loss.
//!
//! Fusion stacks the available vectors (both graph summaries plus the review
//! vector in the full model; ablations shrink the set), scores them with one
//! affine map over the concatenation, and mixes them by the softmax weights:
//!
//!   â = softmax(W_a [v_1 ⊕ … ⊕ v_n] + b_a),   z = Σ â_i v_i
//!
//! The classifier is a one-hidden-layer MLP (d → d, ReLU, → 5) and the loss
//! is plain cross-entropy, mean of −log ŝ[gold] over the batch.

use crate::error::{Error, Result};
use crate::params::{normal_init, BoundParams, ParamStore};
use crate::tape::{Tape, TensorRef};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

pub const RATING_CLASSES: usize = 5;

/// Register fusion and classifier weights for `arity` fused inputs.
pub fn register_sentiment_params(
    store: &mut ParamStore,
    d: usize,
    arity: usize,
    rng: &mut ChaCha8Rng,
) {
    assert!(arity >= 1, "fusion needs at least one input");
    store.register("sent.fuse.w", normal_init(rng, arity * d, arity, 0.02));
    store.register("sent.fuse.b", Array2::zeros((1, arity)));
    store.register("sent.cls.w1", normal_init(rng, d, d, 0.02));
    store.register("sent.cls.b1", Array2::zeros((1, d)));
    store.register("sent.cls.w2", normal_init(rng, d, RATING_CLASSES, 0.02));
    store.register("sent.cls.b2", Array2::zeros((1, RATING_CLASSES)));
}

/// Attentive pooling over n vectors of dimension d. Returns the weights
/// (1×n, a softmax) and the mixed vector z (1×d).
pub fn fuse(tape: &mut Tape, p: &BoundParams, inputs: &[TensorRef]) -> (TensorRef, TensorRef) {
    let n = inputs.len();
    assert!(n >= 1, "fusion needs at least one input");
    let w = p.get("sent.fuse.w");
    let b = p.get("sent.fuse.b");
    assert_eq!(
        tape.value(w).dim(),
        (n * tape.value(inputs[0]).ncols(), n),
        "fusion weights sized for a different arity"
    );
    let cat = tape.concat_cols(inputs);
    let proj = tape.matmul(cat, w);
    let logits = tape.add_row(proj, b);
    let weights = tape.softmax_rows(logits);
    let mut z = None;
    for (i, &input) in inputs.iter().enumerate() {
        let wi = tape.slice_cols(weights, i, i + 1);
        let scaled = tape.mul_scalar(wi, input);
        z = Some(match z {
            None => scaled,
            Some(acc) => tape.add(acc, scaled),
        });
    }
    (weights, z.expect("at least one input"))
}

/// Pre-softmax rating scores for a fused vector z (1×d) → 1×5.
pub fn classify_logits(tape: &mut Tape, p: &BoundParams, z: TensorRef) -> TensorRef {
    let w1 = p.get("sent.cls.w1");
    let b1 = p.get("sent.cls.b1");
    let w2 = p.get("sent.cls.w2");
    let b2 = p.get("sent.cls.b2");
    let h_lin = tape.matmul(z, w1);
    let h_aff = tape.add_row(h_lin, b1);
    let h = tape.relu(h_aff);
    let out_lin = tape.matmul(h, w2);
    tape.add_row(out_lin, b2)
}

/// Predicted rating distribution ŝ (1×5, sums to 1).
pub fn classify(tape: &mut Tape, p: &BoundParams, z: TensorRef) -> TensorRef {
    let logits = classify_logits(tape, p, z);
    tape.softmax_rows(logits)
}

fn check_gold(gold: u8, location: &str) -> Result<()> {
    if !(1..=RATING_CLASSES as u8).contains(&gold) {
        return Err(Error::InvalidRating { value: gold as f64, location: location.to_string() });
    }
    Ok(())
}

/// −log ŝ[gold] for one example's pre-softmax logits (1×5) → 1×1 scalar.
pub fn nll_of_gold(tape: &mut Tape, logits: TensorRef, gold: u8) -> Result<TensorRef> {
    check_gold(gold, "classification loss")?;
    let ls = tape.log_softmax_rows(logits);
    let picked = tape.slice_cols(ls, (gold - 1) as usize, gold as usize);
    Ok(tape.scale(picked, -1.0))
}

/// Mean −log ŝ[gold] over a batch of probability rows (B×5).
pub fn sentiment_loss_value(probs: &Array2<f64>, golds: &[u8]) -> Result<f64> {
    assert_eq!(probs.nrows(), golds.len(), "one gold rating per probability row");
    assert_eq!(probs.ncols(), RATING_CLASSES, "expected 5-way distributions");
    let mut total = 0.0;
    for (row, &gold) in probs.rows().into_iter().zip(golds) {
        check_gold(gold, "classification loss")?;
        total -= row[(gold - 1) as usize].ln();
    }
    Ok(total / golds.len() as f64)
}

/// Argmax rating 1..=5 from one probability (or logit) row; ties take the
/// lowest rating.
pub fn predicted_rating(row: &[f64]) -> u8 {
    let mut best = 0usize;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    (best + 1) as u8
}
