//! Dropout augmentation of pooled graph vectors and the cross-graph
//! contrastive loss.
//!
//! Each pooled customer vector h_u and product vector h_p gets an
//! independently masked copy (inverted dropout). For every batch row i the
//! loss contrasts the positive pair (h_u_i, ĥ_u_i) against the augmented
//! product vectors of the whole batch, and symmetrically for the product
//! side, with sim(a, b) = bᵀa / τ. Terms are averaged over the batch and the
//! two directions are summed.
//!
//! By default the positive similarity joins the denominator (a standard
//! log-softmax over 1 + B candidates, so the loss is nonnegative); setting
//! `include_positive_in_denominator = false` restricts the denominator to
//! the cross-pair terms alone, which can push the loss negative. A batch of
//! one has no mini-batch to contrast against: negatives are suppressed and
//! the loss is exactly zero.

use crate::config::ContrastiveConfig;
use crate::error::{Error, Result};
use crate::tape::{Tape, TensorRef};
use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Inverted-dropout mask: 1×d row whose entries are 0 with probability
/// `rate` and 1/(1−rate) otherwise. `rate = 0` gives all ones.
pub fn dropout_mask(d: usize, rate: f64, seed: u64) -> Array2<f64> {
    assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - rate);
    Array2::from_shape_fn((1, d), |_| if rng.random::<f64>() < rate { 0.0 } else { keep })
}

/// Augmented copy of a 1×d vector under a freshly sampled mask.
pub fn augment(h: &Array2<f64>, rate: f64, seed: u64) -> Array2<f64> {
    h * &dropout_mask(h.ncols(), rate, seed)
}

fn lse(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// One direction of the loss for one example: −log of the positive's share.
/// An empty negative set is the degenerate single-candidate case → 0.
pub fn info_nce_term(pos_sim: f64, neg_sims: &[f64], include_pos: bool) -> f64 {
    if neg_sims.is_empty() {
        return 0.0;
    }
    if include_pos {
        let mut all = Vec::with_capacity(neg_sims.len() + 1);
        all.push(pos_sim);
        all.extend_from_slice(neg_sims);
        lse(&all) - pos_sim
    } else {
        lse(neg_sims) - pos_sim
    }
}

fn check_finite(name: &str, m: &Array2<f64>) -> Result<()> {
    for (i, row) in m.rows().into_iter().enumerate() {
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { what: format!("contrastive input {name}"), index: Some(i) });
        }
    }
    Ok(())
}

fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.dot(&b)
}

/// Loss from explicit augmented copies (plain arithmetic; the reference for
/// the tape version and the evaluation-time value).
pub fn contrastive_loss_parts(
    hu: &Array2<f64>,
    hu_hat: &Array2<f64>,
    hp: &Array2<f64>,
    hp_hat: &Array2<f64>,
    tau: f64,
    include_pos: bool,
) -> Result<f64> {
    let b = hu.nrows();
    assert!(
        hu.dim() == hu_hat.dim() && hu.dim() == hp.dim() && hu.dim() == hp_hat.dim(),
        "contrastive inputs must share one B×d shape"
    );
    check_finite("h_u", hu)?;
    check_finite("h_u_hat", hu_hat)?;
    check_finite("h_p", hp)?;
    check_finite("h_p_hat", hp_hat)?;
    if b < 2 {
        return Ok(0.0);
    }
    let mut total_u = 0.0;
    let mut total_p = 0.0;
    for i in 0..b {
        let pos_u = dot(hu.row(i), hu_hat.row(i)) / tau;
        let negs_u: Vec<f64> = (0..b).map(|j| dot(hu.row(i), hp_hat.row(j)) / tau).collect();
        total_u += info_nce_term(pos_u, &negs_u, include_pos);
        let pos_p = dot(hp.row(i), hp_hat.row(i)) / tau;
        let negs_p: Vec<f64> = (0..b).map(|j| dot(hp.row(i), hu_hat.row(j)) / tau).collect();
        total_p += info_nce_term(pos_p, &negs_p, include_pos);
    }
    Ok(total_u / b as f64 + total_p / b as f64)
}

fn stack_masks(masks: &[Array2<f64>], d: usize) -> Array2<f64> {
    let mut m = Array2::zeros((masks.len(), d));
    for (i, row) in masks.iter().enumerate() {
        assert_eq!(row.dim(), (1, d), "mask {i} must be 1×{d}");
        m.row_mut(i).assign(&row.row(0));
    }
    m
}

/// Loss value for a batch given per-example masks (rows of `masks_*` pair
/// with rows of the matching matrix).
pub fn contrastive_loss_value(
    hu: &Array2<f64>,
    hp: &Array2<f64>,
    masks_u: &[Array2<f64>],
    masks_p: &[Array2<f64>],
    cfg: &ContrastiveConfig,
) -> Result<f64> {
    let d = hu.ncols();
    let hu_hat = hu * &stack_masks(masks_u, d);
    let hp_hat = hp * &stack_masks(masks_p, d);
    contrastive_loss_parts(hu, &hu_hat, hp, &hp_hat, cfg.tau, cfg.include_positive_in_denominator)
}

/// Tape version over B×d leaves `hu` and `hp`; masks enter as constants so
/// gradients flow only through the representations. Returns a 1×1 scalar.
pub fn contrastive_loss_tape(
    tape: &mut Tape,
    hu: TensorRef,
    hp: TensorRef,
    masks_u: &[Array2<f64>],
    masks_p: &[Array2<f64>],
    cfg: &ContrastiveConfig,
) -> Result<TensorRef> {
    let (b, d) = tape.value(hu).dim();
    assert_eq!(tape.value(hp).dim(), (b, d), "contrastive inputs must share one B×d shape");
    check_finite("h_u", tape.value(hu))?;
    check_finite("h_p", tape.value(hp))?;
    if b < 2 {
        return Ok(tape.constant(Array2::zeros((1, 1))));
    }
    let mu = tape.constant(stack_masks(masks_u, d));
    let mp = tape.constant(stack_masks(masks_p, d));
    let hu_hat = tape.mul(hu, mu);
    let hp_hat = tape.mul(hp, mp);
    let eye = tape.constant(Array2::eye(b));
    let ones_col = tape.constant(Array2::ones((b, 1)));
    let inv_tau = 1.0 / cfg.tau;

    let direction = |tape: &mut Tape, anchors: TensorRef, pos_hat: TensorRef, neg_hat: TensorRef| {
        // pos_col[i] = sim(anchor_i, pos_hat_i); cross[i][j] = sim(anchor_i, neg_hat_j)
        let neg_hat_t = tape.transpose(neg_hat);
        let cross_raw = tape.matmul(anchors, neg_hat_t);
        let cross = tape.scale(cross_raw, inv_tau);
        let pos_hat_t = tape.transpose(pos_hat);
        let pos_full = tape.matmul(anchors, pos_hat_t);
        let pos_diag = tape.mul(pos_full, eye);
        let pos_col_raw = tape.matmul(pos_diag, ones_col);
        let pos_col = tape.scale(pos_col_raw, inv_tau);
        if cfg.include_positive_in_denominator {
            // log-softmax over [pos | cross]: column 0 is −term per example
            let cat = tape.concat_cols(&[pos_col, cross]);
            let ls = tape.log_softmax_rows(cat);
            let col0 = tape.slice_cols(ls, 0, 1);
            let s = tape.sum_all(col0);
            tape.scale(s, -1.0 / b as f64)
        } else {
            // lse over cross only: x − log_softmax(x) holds the row lse in
            // every entry, so any single column extracts it
            let ls = tape.log_softmax_rows(cross);
            let lse_all = tape.sub(cross, ls);
            let lse_col = tape.slice_cols(lse_all, 0, 1);
            let term_col = tape.sub(lse_col, pos_col);
            let s = tape.sum_all(term_col);
            tape.scale(s, 1.0 / b as f64)
        }
    };
    let loss_u = direction(tape, hu, hu_hat, hp_hat);
    let loss_p = direction(tape, hp, hp_hat, hu_hat);
    Ok(tape.add(loss_u, loss_p))
}
