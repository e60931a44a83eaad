//! Full-model assembly: one parameter store, per-example forward passes,
//! batched multi-task gradients, and summary decoding.
//!
//! A training batch runs in four phases: (A) per-example forward passes on
//! independent tapes, parallel across examples; (B) one small batch-level
//! tape for the contrastive term over the pooled graph summaries; (C)
//! per-example backward passes seeded with 1/B on the generation and
//! sentiment losses and with α·∂L_c/∂h on the pooled summaries; (D) an
//! in-order reduction of the per-example gradients. Phases B/C bridge the
//! tapes exactly, so the summed gradient is the gradient of
//! `L_g + L_s + α·L_c`.

use crate::config::{AblationConfig, Config, ModelConfig};
use crate::contrastive::{contrastive_loss_tape, dropout_mask};
use crate::corpus::{ReviewRecord, TrainingExample, BOS_ID, EOS_ID};
use crate::decoder::{self, DecodeResult, GraphSlot, NodeSet, Strategy};
use crate::encoder::{self, DropoutCtx, Role};
use crate::error::{Error, Result};
use crate::graph::{self, Activation, GraphOptions, GraphSide, NodeMeta};
use crate::parallel::{map_indexed, ExecMode};
use crate::params::{accumulate_grads, normal_init, BoundParams, ParamStore};
use crate::sentiment;
use crate::tape::{Tape, TensorRef};
use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Number of vectors entering attentive fusion: the input review plus one
/// pooled summary per active graph side.
pub fn fusion_arity(a: &AblationConfig) -> usize {
    a.active_sides() + 1
}

/// Register every trainable tensor in canonical order. Entity counts include
/// the out-of-vocabulary row 0; initialization is a pure function of
/// `cfg.train.seed`, so two stores built from the same inputs are identical.
pub fn build_param_store(
    cfg: &Config,
    vocab_size: usize,
    n_customers: usize,
    n_products: usize,
) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let d = cfg.model.d_model;
    let mut store = ParamStore::new();
    encoder::register_encoder_params(&mut store, &cfg.model, vocab_size, &mut rng);
    store.register("emb.customer", normal_init(&mut rng, n_customers.max(1), d, 0.02));
    store.register("emb.product", normal_init(&mut rng, n_products.max(1), d, 0.02));
    // rows 1-5 are the rating embeddings; row 0 pads
    store.register("emb.rating", normal_init(&mut rng, 6, d, 0.02));
    graph::register_rgcn_params(&mut store, cfg.model.graph_layers, d, &mut rng);
    sentiment::register_sentiment_params(&mut store, d, fusion_arity(&cfg.ablation), &mut rng);
    decoder::register_decoder_params(&mut store, &cfg.model, vocab_size, &mut rng);
    store
}

/// Embedding-table rows for one example's customer and product.
#[derive(Clone, Copy, Debug)]
pub struct EntityRows {
    pub customer: usize,
    pub product: usize,
}

/// One batch slot: the example plus its resolved entity rows.
pub struct BatchExample<'a> {
    pub ex: &'a TrainingExample,
    pub rows: EntityRows,
}

/// Tape handles produced by one example's training forward pass.
pub struct ExampleOutput {
    /// Teacher-forcing generation loss, summed over target positions.
    pub l_g: TensorRef,
    /// Sentiment negative log-likelihood; absent under the no-sentiment ablation.
    pub l_s: Option<TensorRef>,
    /// Pooled customer-graph summary; absent when that side is dropped or merged.
    pub h_u: Option<TensorRef>,
    /// Pooled product-graph summary; absent when that side is dropped or merged.
    pub h_p: Option<TensorRef>,
    /// Predicted rating distribution (values, for accuracy bookkeeping).
    pub probs: Vec<f64>,
}

/// Encode one history side into a k×d node matrix plus graph metadata.
/// Padding slots become zero rows and dead nodes.
fn encode_history_side(
    tape: &mut Tape,
    p: &BoundParams,
    m: &ModelConfig,
    history: &[ReviewRecord],
    mask: &[bool],
    role: Role,
    entity_row: usize,
    use_rating: bool,
    dropout: &mut Option<&mut DropoutCtx>,
) -> Result<(TensorRef, Vec<NodeMeta>)> {
    assert_eq!(history.len(), mask.len(), "history/mask length mismatch");
    let mut rows = Vec::with_capacity(history.len());
    let mut metas = Vec::with_capacity(history.len());
    for (rec, &live) in history.iter().zip(mask) {
        if live {
            let h = encoder::encode_live(tape, p, m, &rec.review_tokens, dropout)?;
            let v = encoder::review_vector(tape, p, h, role, rec.rating, entity_row, use_rating)?;
            rows.push(v);
        } else {
            rows.push(tape.zeros(1, m.d_model));
        }
        metas.push(NodeMeta {
            live,
            timestamp: rec.timestamp,
            rating_slot: if live { rec.rating } else { 0 },
        });
    }
    Ok((tape.concat_rows(&rows), metas))
}

/// Graph propagation (or a pass-through under the no-graph ablation) plus
/// average pooling.
fn propagate_and_pool(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &Config,
    side: GraphSide,
    h0: TensorRef,
    metas: &[NodeMeta],
    mask: &[bool],
) -> (TensorRef, TensorRef) {
    let opts = GraphOptions {
        time_edges: !cfg.ablation.no_time_edges,
        rating_edges: !cfg.ablation.no_rating_edges,
    };
    let g = graph::build_graph(metas, side, &opts);
    let states = if cfg.ablation.no_graph {
        h0
    } else {
        graph::rgcn_forward(
            tape,
            p,
            &g,
            h0,
            cfg.model.graph_layers,
            Activation::Relu,
            cfg.model.directed_time_edges,
        )
    };
    let pooled = graph::graph_pool(tape, states, mask);
    (states, pooled)
}

/// Everything up to (but excluding) the decoder: encoder states, graph node
/// sets for decoder attention, the fused vector z, and the rating
/// distribution.
struct CoreOut {
    enc_states: TensorRef,
    node_sets: Vec<(GraphSlot, TensorRef, Vec<bool>)>,
    z: TensorRef,
    cls_logits: TensorRef,
    probs: Vec<f64>,
    h_u: Option<TensorRef>,
    h_p: Option<TensorRef>,
}

fn forward_core(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &Config,
    ex: &TrainingExample,
    rows: EntityRows,
    dropout: &mut Option<&mut DropoutCtx>,
) -> Result<CoreOut> {
    let m = &cfg.model;
    let abl = &cfg.ablation;
    let use_rating = !abl.no_history_ratings;

    let enc_states = encoder::encode_live(tape, p, m, &ex.target.review_tokens, dropout)?;
    let r = encoder::review_vector(tape, p, enc_states, Role::Input, 0, 0, false)?;

    let mut node_sets = Vec::new();
    let mut fusion = Vec::new();
    let mut h_u = None;
    let mut h_p = None;

    if abl.merge_graphs {
        let (cu, mut metas) = encode_history_side(
            tape, p, m, &ex.customer_history, &ex.customer_pad_mask,
            Role::CustomerHistory, rows.customer, use_rating, dropout,
        )?;
        let (pr, pr_metas) = encode_history_side(
            tape, p, m, &ex.product_history, &ex.product_pad_mask,
            Role::ProductHistory, rows.product, use_rating, dropout,
        )?;
        metas.extend(pr_metas);
        let mut mask = ex.customer_pad_mask.clone();
        mask.extend_from_slice(&ex.product_pad_mask);
        let h0 = tape.concat_rows(&[cu, pr]);
        let (states, pooled) =
            propagate_and_pool(tape, p, cfg, GraphSide::Mixed, h0, &metas, &mask);
        // the merged node set attends through the customer-slot projections
        node_sets.push((GraphSlot::Customer, states, mask));
        fusion.push(pooled);
    } else {
        if !abl.no_customer_graph {
            let (h0, metas) = encode_history_side(
                tape, p, m, &ex.customer_history, &ex.customer_pad_mask,
                Role::CustomerHistory, rows.customer, use_rating, dropout,
            )?;
            let (states, pooled) = propagate_and_pool(
                tape, p, cfg, GraphSide::Customer, h0, &metas, &ex.customer_pad_mask,
            );
            node_sets.push((GraphSlot::Customer, states, ex.customer_pad_mask.clone()));
            fusion.push(pooled);
            h_u = Some(pooled);
        }
        if !abl.no_product_graph {
            let (h0, metas) = encode_history_side(
                tape, p, m, &ex.product_history, &ex.product_pad_mask,
                Role::ProductHistory, rows.product, use_rating, dropout,
            )?;
            let (states, pooled) = propagate_and_pool(
                tape, p, cfg, GraphSide::Product, h0, &metas, &ex.product_pad_mask,
            );
            node_sets.push((GraphSlot::Product, states, ex.product_pad_mask.clone()));
            fusion.push(pooled);
            h_p = Some(pooled);
        }
    }
    fusion.push(r);

    let (_weights, z) = sentiment::fuse(tape, p, &fusion);
    let cls_logits = sentiment::classify_logits(tape, p, z);
    let probs_ref = tape.softmax_rows(cls_logits);
    let probs = tape.value(probs_ref).row(0).to_vec();

    Ok(CoreOut { enc_states, node_sets, z, cls_logits, probs, h_u, h_p })
}

/// Training forward pass for one example: losses plus the pooled summaries
/// the batch-level contrastive term needs.
pub fn example_forward(
    tape: &mut Tape,
    p: &BoundParams,
    cfg: &Config,
    ex: &TrainingExample,
    rows: EntityRows,
    dropout: &mut Option<&mut DropoutCtx>,
) -> Result<ExampleOutput> {
    let core = forward_core(tape, p, cfg, ex, rows, dropout)?;
    let l_s = if cfg.ablation.no_sentiment_task {
        None
    } else {
        Some(sentiment::nll_of_gold(tape, core.cls_logits, ex.target.rating)?)
    };

    let mut input_ids = Vec::with_capacity(ex.target.summary_tokens.len() + 1);
    input_ids.push(BOS_ID);
    input_ids.extend_from_slice(&ex.target.summary_tokens);
    let mut targets = ex.target.summary_tokens.clone();
    targets.push(EOS_ID);

    let sets: Vec<NodeSet> = core
        .node_sets
        .iter()
        .map(|(slot, nodes, mask)| NodeSet { slot: *slot, nodes: *nodes, mask })
        .collect();
    let z = if cfg.ablation.no_gate { None } else { Some(core.z) };
    let logits = decoder::decoder_forward(tape, p, &cfg.model, &input_ids, core.enc_states, &sets, z)?;
    let l_g = decoder::generation_loss(tape, logits, &targets)?;

    Ok(ExampleOutput { l_g, l_s, h_u: core.h_u, h_p: core.h_p, probs: core.probs })
}

/// Scalar components of one batch, averaged where applicable.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    /// Mean per-example generation loss.
    pub l_g: f64,
    /// Mean sentiment loss (0 under the no-sentiment ablation).
    pub l_s: f64,
    /// Contrastive loss (0 when the wiring makes it impossible).
    pub l_c: f64,
    /// `l_g + l_s + α·l_c` after ablation masking.
    pub total: f64,
    /// Examples whose predicted rating matched the gold rating.
    pub correct: usize,
    pub n: usize,
}

/// A batch's gradient set in canonical parameter order, plus its losses.
pub struct BatchGrads {
    pub losses: LossBreakdown,
    pub grads: Vec<Array2<f64>>,
}

/// `L = L_g + L_s + α·L_c` with ablation flags zeroing dropped terms.
/// Non-finite components are fatal and name the offender.
pub fn total_loss(l_g: f64, l_s: f64, l_c: f64, alpha: f64, abl: &AblationConfig) -> Result<f64> {
    for (what, v) in [("generation loss", l_g), ("sentiment loss", l_s), ("contrastive loss", l_c)]
    {
        if !v.is_finite() {
            return Err(Error::NonFinite { what: what.to_string(), index: None });
        }
    }
    let l_s = if abl.no_sentiment_task { 0.0 } else { l_s };
    let (alpha, l_c) = if abl.no_contrastive { (0.0, 0.0) } else { (alpha, l_c) };
    Ok(alpha.mul_add(l_c, l_g + l_s))
}

/// SplitMix64-style stream derivation, so each (step, example, purpose)
/// triple gets an independent deterministic seed.
pub fn derive_seed(base: u64, step: u64, example: u64, stream: u64) -> u64 {
    let mut x = base;
    for salt in [step, example, stream] {
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(salt);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

struct PerExample<'s> {
    tape: Tape,
    bound: BoundParams<'s>,
    out: ExampleOutput,
}

fn run_forwards<'s>(
    store: &'s ParamStore,
    cfg: &Config,
    batch: &[BatchExample<'_>],
    step: u64,
    mode: ExecMode,
) -> Result<Vec<PerExample<'s>>> {
    assert!(!batch.is_empty(), "empty batch");
    let results = map_indexed(mode, batch, |i, bex| {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let mut ctx_store;
        let mut dropout: Option<&mut DropoutCtx> = if cfg.model.dropout > 0.0 {
            ctx_store =
                DropoutCtx::new(derive_seed(cfg.train.seed, step, i as u64, 0), cfg.model.dropout);
            Some(&mut ctx_store)
        } else {
            None
        };
        let out = example_forward(&mut tape, &bound, cfg, bex.ex, bex.rows, &mut dropout)?;
        Ok(PerExample { tape, bound, out })
    });
    results.into_iter().collect()
}

/// Contrastive value over the batch's pooled summaries and, when requested,
/// its gradients w.r.t. the stacked h_u / h_p rows.
fn contrastive_phase(
    cfg: &Config,
    step: u64,
    per: &[PerExample<'_>],
    want_grads: bool,
) -> Result<(f64, Option<(Array2<f64>, Array2<f64>)>)> {
    if !cfg.ablation.contrastive_possible() {
        return Ok((0.0, None));
    }
    let b = per.len();
    let d = cfg.model.d_model;
    let mut hu = Array2::zeros((b, d));
    let mut hp = Array2::zeros((b, d));
    for (i, pe) in per.iter().enumerate() {
        let u = pe.out.h_u.expect("customer summary present when contrastive is possible");
        let p = pe.out.h_p.expect("product summary present when contrastive is possible");
        hu.row_mut(i).assign(&pe.tape.value(u).row(0));
        hp.row_mut(i).assign(&pe.tape.value(p).row(0));
    }
    let rate = cfg.contrastive.dropout_rate;
    let seed = cfg.train.seed;
    let masks_u: Vec<Array2<f64>> =
        (0..b).map(|i| dropout_mask(d, rate, derive_seed(seed, step, i as u64, 1))).collect();
    let masks_p: Vec<Array2<f64>> =
        (0..b).map(|i| dropout_mask(d, rate, derive_seed(seed, step, i as u64, 2))).collect();

    let mut tape = Tape::new();
    let hu_ref = tape.leaf(hu);
    let hp_ref = tape.leaf(hp);
    let lc_ref = contrastive_loss_tape(&mut tape, hu_ref, hp_ref, &masks_u, &masks_p, &cfg.contrastive)?;
    let value = tape.value(lc_ref)[[0, 0]];
    let seeds = if want_grads && cfg.contrastive.alpha > 0.0 && b >= 2 {
        let grads = tape.backward_scalar(lc_ref);
        Some((grads.get_or_zeros(hu_ref, (b, d)), grads.get_or_zeros(hp_ref, (b, d))))
    } else {
        None
    };
    Ok((value, seeds))
}

fn breakdown(
    cfg: &Config,
    batch: &[BatchExample<'_>],
    per: &[PerExample<'_>],
    l_c: f64,
) -> Result<LossBreakdown> {
    let n = per.len();
    let b = n as f64;
    let l_g = per.iter().map(|pe| pe.tape.value(pe.out.l_g)[[0, 0]]).sum::<f64>() / b;
    let l_s = per
        .iter()
        .filter_map(|pe| pe.out.l_s.map(|r| pe.tape.value(r)[[0, 0]]))
        .sum::<f64>()
        / b;
    let correct = per
        .iter()
        .zip(batch)
        .filter(|(pe, bex)| sentiment::predicted_rating(&pe.out.probs) == bex.ex.target.rating)
        .count();
    let total = total_loss(l_g, l_s, l_c, cfg.contrastive.alpha, &cfg.ablation)?;
    Ok(LossBreakdown { l_g, l_s, l_c, total, correct, n })
}

/// Loss components of one batch without gradients (validation, finite
/// differences). Numerically identical to what `batch_gradients` reports.
pub fn batch_loss(
    store: &ParamStore,
    cfg: &Config,
    batch: &[BatchExample<'_>],
    step: u64,
    mode: ExecMode,
) -> Result<LossBreakdown> {
    let per = run_forwards(store, cfg, batch, step, mode)?;
    let (l_c, _) = contrastive_phase(cfg, step, &per, false)?;
    breakdown(cfg, batch, &per, l_c)
}

/// Losses plus the full gradient of `L_g + L_s + α·L_c` for one batch.
pub fn batch_gradients(
    store: &ParamStore,
    cfg: &Config,
    batch: &[BatchExample<'_>],
    step: u64,
    mode: ExecMode,
) -> Result<BatchGrads> {
    let per = run_forwards(store, cfg, batch, step, mode)?;
    let (l_c, seed_grads) = contrastive_phase(cfg, step, &per, true)?;
    let losses = breakdown(cfg, batch, &per, l_c)?;

    let inv_b = 1.0 / per.len() as f64;
    let alpha = cfg.contrastive.alpha;
    let per_grads: Vec<Vec<Array2<f64>>> = map_indexed(mode, &per, |i, pe| {
        let mut seeds = vec![(pe.out.l_g, Array2::from_elem((1, 1), inv_b))];
        if let Some(ls) = pe.out.l_s {
            seeds.push((ls, Array2::from_elem((1, 1), inv_b)));
        }
        if let Some((dhu, dhp)) = &seed_grads {
            let su = dhu.row(i).mapv(|x| alpha * x).insert_axis(Axis(0));
            let sp = dhp.row(i).mapv(|x| alpha * x).insert_axis(Axis(0));
            seeds.push((pe.out.h_u.expect("seeded side present"), su));
            seeds.push((pe.out.h_p.expect("seeded side present"), sp));
        }
        let grads = pe.tape.backward(seeds);
        pe.bound.collect_grads(&grads)
    });

    let mut grads = store.zero_grads();
    for gv in &per_grads {
        accumulate_grads(&mut grads, gv);
    }
    Ok(BatchGrads { losses, grads })
}

/// Frozen (value-level) encoding of one example for decoding: encoder
/// states, graph node sets, and the gate vector.
pub struct EncodedContext {
    pub enc_states: Array2<f64>,
    pub node_sets: Vec<(GraphSlot, Array2<f64>, Vec<bool>)>,
    pub z: Option<Array2<f64>>,
    pub probs: Vec<f64>,
}

pub fn encode_context(
    store: &ParamStore,
    cfg: &Config,
    ex: &TrainingExample,
    rows: EntityRows,
) -> Result<EncodedContext> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let core = forward_core(&mut tape, &bound, cfg, ex, rows, &mut None)?;
    Ok(EncodedContext {
        enc_states: tape.value(core.enc_states).clone(),
        node_sets: core
            .node_sets
            .iter()
            .map(|(slot, t, mask)| (*slot, tape.value(*t).clone(), mask.clone()))
            .collect(),
        z: if cfg.ablation.no_gate { None } else { Some(tape.value(core.z).clone()) },
        probs: core.probs,
    })
}

/// A decoded summary plus the example's predicted rating.
pub struct GeneratedSummary {
    pub decode: DecodeResult,
    pub predicted_rating: u8,
    pub probs: Vec<f64>,
}

/// Decode one example with the given strategy. Deterministic: identical
/// parameters and inputs produce identical output.
pub fn generate_example(
    store: &ParamStore,
    cfg: &Config,
    ex: &TrainingExample,
    rows: EntityRows,
    strategy: Strategy,
) -> Result<GeneratedSummary> {
    let ctx = encode_context(store, cfg, ex, rows)?;
    let m = &cfg.model;
    let score = |prefix: &[usize]| -> Vec<f64> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let enc = tape.constant(ctx.enc_states.clone());
        let consts: Vec<(GraphSlot, TensorRef)> = ctx
            .node_sets
            .iter()
            .map(|(slot, a, _)| (*slot, tape.constant(a.clone())))
            .collect();
        let sets: Vec<NodeSet> = consts
            .iter()
            .zip(&ctx.node_sets)
            .map(|(&(slot, nodes), (_, _, mask))| NodeSet { slot, nodes, mask })
            .collect();
        let z = ctx.z.as_ref().map(|a| tape.constant(a.clone()));
        let logits = decoder::decoder_forward(&mut tape, &bound, m, prefix, enc, &sets, z)
            .expect("decode prefix stays within the configured length cap");
        let vals = tape.value(logits);
        vals.row(vals.nrows() - 1).to_vec()
    };
    let decode = decoder::decode_with(score, strategy, m.max_summary_len, BOS_ID, EOS_ID);
    let predicted_rating = sentiment::predicted_rating(&ctx.probs);
    Ok(GeneratedSummary { decode, predicted_rating, probs: ctx.probs })
}

/// Decoded tokens without the trailing end marker, for exact-match checks
/// and text rendering.
pub fn strip_eos(tokens: &[usize]) -> &[usize] {
    match tokens.split_last() {
        Some((&last, rest)) if last == EOS_ID => rest,
        _ => tokens,
    }
}
