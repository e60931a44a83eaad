//! History review graphs and relational graph convolutions.
//!
//! Each history of k review slots becomes a graph over the live (non-padded)
//! slots with two relations: a time chain linking consecutive reviews in
//! timestamp order, and rating cliques linking reviews that share a rating.
//! Propagation follows
//!
//!   h_i' = act( sum_q sum_{j in N_i^q} (1/|N_i^q|) h_j W_q  +  h_i W_0 )
//!
//! with the neighbor average taken per relation at the receiving node.
//! Masked (padding) rows stay exactly zero through every layer, and pooling
//! averages live rows only.

use crate::params::{normal_init, BoundParams, ParamStore};
use crate::tape::{Tape, TensorRef};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GraphSide {
    Customer,
    Product,
    /// Union of both histories in one graph (merge ablation).
    Mixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    Time,
    Rating,
}

/// Activation applied after each propagation layer. `Identity` exists for
/// linearity tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// Metadata of one history slot, enough to build graph structure.
#[derive(Clone, Copy, Debug)]
pub struct NodeMeta {
    pub live: bool,
    pub timestamp: i64,
    pub rating_slot: u8,
}

/// Which edge families to build (ablation switches prune here).
#[derive(Clone, Copy, Debug)]
pub struct GraphOptions {
    pub time_edges: bool,
    pub rating_edges: bool,
}

impl Default for GraphOptions {
    fn default() -> Self {
        GraphOptions { time_edges: true, rating_edges: true }
    }
}

/// Graph structure over k history slots. `edges_time` pairs are ordered
/// (earlier, later); `edges_rating` pairs are unordered with i < j. No edge
/// ever touches a masked node.
#[derive(Clone, Debug, PartialEq)]
pub struct ReviewGraph {
    pub side: GraphSide,
    pub node_mask: Vec<bool>,
    pub edges_time: Vec<(usize, usize)>,
    pub edges_rating: Vec<(usize, usize)>,
}

impl ReviewGraph {
    pub fn node_count(&self) -> usize {
        self.node_mask.len()
    }

    pub fn live_count(&self) -> usize {
        self.node_mask.iter().filter(|&&b| b).count()
    }

    /// Edge list as text, one `i RELATION j` line per edge.
    pub fn dump_edges(&self) -> String {
        let mut out = String::new();
        for &(a, b) in &self.edges_time {
            out.push_str(&format!("{a} TIME {b}\n"));
        }
        for &(a, b) in &self.edges_rating {
            out.push_str(&format!("{a} RATING {b}\n"));
        }
        out
    }
}

/// Build the graph over a history's slots. The time chain follows ascending
/// (timestamp, slot index); rating edges form a clique per rating value.
/// All-padding histories yield a valid zero-edge graph.
pub fn build_graph(nodes: &[NodeMeta], side: GraphSide, opts: &GraphOptions) -> ReviewGraph {
    let node_mask: Vec<bool> = nodes.iter().map(|n| n.live).collect();
    let mut live: Vec<usize> = (0..nodes.len()).filter(|&i| nodes[i].live).collect();
    live.sort_by_key(|&i| (nodes[i].timestamp, i));

    let mut edges_time = Vec::new();
    if opts.time_edges {
        for w in live.windows(2) {
            edges_time.push((w[0], w[1]));
        }
    }
    let mut edges_rating = Vec::new();
    if opts.rating_edges {
        for (a_pos, &a) in live.iter().enumerate() {
            for &b in &live[a_pos + 1..] {
                if nodes[a].rating_slot == nodes[b].rating_slot {
                    edges_rating.push((a.min(b), a.max(b)));
                }
            }
        }
        edges_rating.sort_unstable();
    }
    ReviewGraph { side, node_mask, edges_time, edges_rating }
}

/// Neighbor lists per node for one relation. Time edges flow both ways unless
/// `directed_time` keeps them past -> future only.
pub fn neighbors(g: &ReviewGraph, rel: Relation, directed_time: bool) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); g.node_count()];
    match rel {
        Relation::Time => {
            for &(a, b) in &g.edges_time {
                out[b].push(a);
                if !directed_time {
                    out[a].push(b);
                }
            }
        }
        Relation::Rating => {
            for &(a, b) in &g.edges_rating {
                out[a].push(b);
                out[b].push(a);
            }
        }
    }
    out
}

/// Row-normalized adjacency for one relation: A[i][j] = 1/|N_i| for each
/// neighbor j of i, zero elsewhere. Multiplying A @ H averages neighbor
/// features at each receiving node.
pub fn relation_adjacency(g: &ReviewGraph, rel: Relation, directed_time: bool) -> Array2<f64> {
    let k = g.node_count();
    let mut a = Array2::zeros((k, k));
    for (i, ns) in neighbors(g, rel, directed_time).into_iter().enumerate() {
        if ns.is_empty() {
            continue;
        }
        let w = 1.0 / ns.len() as f64;
        for j in ns {
            a[[i, j]] += w;
        }
    }
    a
}

fn mask_matrix(mask: &[bool], d: usize) -> Array2<f64> {
    let mut m = Array2::zeros((mask.len(), d));
    for (i, &live) in mask.iter().enumerate() {
        if live {
            m.row_mut(i).fill(1.0);
        }
    }
    m
}

fn apply_activation(tape: &mut Tape, x: TensorRef, act: Activation) -> TensorRef {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::Identity => x,
    }
}

/// One propagation layer over tape values. `w_time`, `w_rating`, `w_self`
/// are d x d handles; masked rows of the result are forced to zero.
#[allow(clippy::too_many_arguments)]
pub fn rgcn_layer(
    tape: &mut Tape,
    g: &ReviewGraph,
    h: TensorRef,
    w_time: TensorRef,
    w_rating: TensorRef,
    w_self: TensorRef,
    act: Activation,
    directed_time: bool,
) -> TensorRef {
    let d = tape.value(h).ncols();
    assert_eq!(tape.value(h).nrows(), g.node_count(), "feature/graph size mismatch");
    let self_term = tape.matmul(h, w_self);
    let mut total = self_term;
    for (rel, w) in [(Relation::Time, w_time), (Relation::Rating, w_rating)] {
        let adj = relation_adjacency(g, rel, directed_time);
        if adj.iter().all(|&x| x == 0.0) {
            continue; // relation contributes no messages (pruned or edgeless)
        }
        let a = tape.constant(adj);
        let transformed = tape.matmul(h, w);
        let messages = tape.matmul(a, transformed);
        total = tape.add(total, messages);
    }
    let activated = apply_activation(tape, total, act);
    let mask = tape.constant(mask_matrix(&g.node_mask, d));
    tape.mul(activated, mask)
}

/// Register the shared propagation weights: per layer, one matrix per
/// relation plus the self transform.
pub fn register_rgcn_params(
    store: &mut ParamStore,
    layers: usize,
    d: usize,
    rng: &mut ChaCha8Rng,
) {
    for l in 0..layers {
        store.register(&format!("rgcn.l{l}.time"), normal_init(rng, d, d, 0.02));
        store.register(&format!("rgcn.l{l}.rating"), normal_init(rng, d, d, 0.02));
        store.register(&format!("rgcn.l{l}.self"), normal_init(rng, d, d, 0.02));
    }
}

/// L stacked layers with the activation applied after each one.
#[allow(clippy::too_many_arguments)]
pub fn rgcn_forward(
    tape: &mut Tape,
    p: &BoundParams,
    g: &ReviewGraph,
    h0: TensorRef,
    layers: usize,
    act: Activation,
    directed_time: bool,
) -> TensorRef {
    let mut h = h0;
    for l in 0..layers {
        let w_time = p.get(&format!("rgcn.l{l}.time"));
        let w_rating = p.get(&format!("rgcn.l{l}.rating"));
        let w_self = p.get(&format!("rgcn.l{l}.self"));
        h = rgcn_layer(tape, g, h, w_time, w_rating, w_self, act, directed_time);
    }
    h
}

/// Mean of live node states; the zero vector when nothing is live.
pub fn graph_pool(tape: &mut Tape, h: TensorRef, mask: &[bool]) -> TensorRef {
    let k = tape.value(h).nrows();
    assert_eq!(k, mask.len(), "pool mask length mismatch");
    let live = mask.iter().filter(|&&b| b).count();
    let mut weights = Array2::zeros((1, k));
    if live > 0 {
        let w = 1.0 / live as f64;
        for (i, &b) in mask.iter().enumerate() {
            if b {
                weights[[0, i]] = w;
            }
        }
    }
    let wrow = tape.constant(weights);
    tape.matmul(wrow, h)
}
