//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every tensor in the network is an `Array2<f64>`; row vectors are `1 x d`
//! matrices and scalars are `1 x 1`. A [`Tape`] records each operation as a
//! node with a backward closure; [`Tape::backward`] replays the recording in
//! reverse, accumulating gradients into per-node buffers. Gradients only flow
//! into nodes whose `requires_grad` flag is set (parameters and anything
//! derived from them), so constants such as attention masks or pooled-weight
//! rows cost nothing on the backward pass.
//!
//! Shape errors in tape ops are programmer errors and panic, matching the
//! behaviour of `ndarray::dot`.

use ndarray::{Array2, Axis};
use std::sync::Arc;

/// Handle to a node on a [`Tape`]. Only valid for the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorRef(usize);

impl TensorRef {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackFn = Box<dyn Fn(&Array2<f64>, &Tape, &mut [Option<Array2<f64>>]) + Send + Sync>;

enum Value {
    Owned(Array2<f64>),
    Shared(Arc<Array2<f64>>),
}

impl Value {
    fn as_array(&self) -> &Array2<f64> {
        match self {
            Value::Owned(a) => a,
            Value::Shared(a) => a,
        }
    }
}

struct Node {
    value: Value,
    requires_grad: bool,
    back: Option<BackFn>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`TensorRef`].
///
/// Interior-node gradients are consumed during the sweep; only inputs (leaves)
/// retain their gradients. A leaf that no gradient reached yields `None`.
pub struct Gradients {
    slots: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, t: TensorRef) -> Option<&Array2<f64>> {
        self.slots.get(t.0).and_then(|s| s.as_ref())
    }

    /// Gradient for `t`, or a zero matrix of the given shape if none flowed.
    pub fn get_or_zeros(&self, t: TensorRef, shape: (usize, usize)) -> Array2<f64> {
        match self.get(t) {
            Some(g) => g.clone(),
            None => Array2::zeros(shape),
        }
    }

    pub fn take(&mut self, t: TensorRef) -> Option<Array2<f64>> {
        self.slots.get_mut(t.0).and_then(|s| s.take())
    }
}

fn acc(tape: &Tape, grads: &mut [Option<Array2<f64>>], id: usize, delta: Array2<f64>) {
    if !tape.nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

/// Recording of a differentiable computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, t: TensorRef) -> &Array2<f64> {
        self.nodes[t.0].value.as_array()
    }

    pub fn requires_grad(&self, t: TensorRef) -> bool {
        self.nodes[t.0].requires_grad
    }

    fn push(&mut self, value: Array2<f64>, requires_grad: bool, back: Option<BackFn>) -> TensorRef {
        self.nodes.push(Node { value: Value::Owned(value), requires_grad, back });
        TensorRef(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[TensorRef]) -> bool {
        ids.iter().any(|t| self.nodes[t.0].requires_grad)
    }

    /// Input node that participates in differentiation.
    pub fn leaf(&mut self, value: Array2<f64>) -> TensorRef {
        self.push(value, true, None)
    }

    /// Input node backed by shared storage (parameters), no copy taken.
    pub fn leaf_shared(&mut self, value: Arc<Array2<f64>>) -> TensorRef {
        self.nodes.push(Node { value: Value::Shared(value), requires_grad: true, back: None });
        TensorRef(self.nodes.len() - 1)
    }

    /// Input node excluded from differentiation (masks, pool weights, data).
    pub fn constant(&mut self, value: Array2<f64>) -> TensorRef {
        self.push(value, false, None)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> TensorRef {
        self.constant(Array2::zeros((rows, cols)))
    }

    /// Matrix product `a @ b`.
    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            va.ncols(),
            vb.nrows(),
            "matmul inner dims: {:?} x {:?}",
            va.dim(),
            vb.dim()
        );
        let out = va.dot(vb);
        let rg = self.any_grad(&[a, b]);
        let back: Option<BackFn> = rg.then(|| {
            Box::new(move |g: &Array2<f64>, tape: &Tape, grads: &mut [Option<Array2<f64>>]| {
                let (va, vb) = (tape.value(a), tape.value(b));
                if tape.nodes[a.0].requires_grad {
                    acc(tape, grads, a.0, g.dot(&vb.t()));
                }
                if tape.nodes[b.0].requires_grad {
                    acc(tape, grads, b.0, va.t().dot(g));
                }
            }) as BackFn
        });
        self.push(out, rg, back)
    }

    pub fn transpose(&mut self, a: TensorRef) -> TensorRef {
        let out = self.value(a).t().to_owned();
        let rg = self.nodes[a.0].requires_grad;
        let back: Option<BackFn> = rg.then(|| {
            Box::new(move |g: &Array2<f64>, tape: &Tape, grads: &mut [Option<Array2<f64>>]| {
                acc(tape, grads, a.0, g.t().to_owned());
            }) as BackFn
        });
        self.push(out, rg, back)
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape mismatch");
        let out = self.value(a) + self.value(b);
        let rg = self.any_grad(&[a, b]);
        let back: Option<BackFn> = rg.then(|| {
            Box::new(move |g: &Array2<f64>, tape: &Tape, grads: &mut [Option<Array2<f64>>]| {
                acc(tape, grads, a.0, g.clone());
                acc(tape, grads, b.0, g.clone());
            }) as BackFn
        });
        self.push(out, rg, back)
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub shape mismatch");
        let out = self.value(a) - self.value(b);
        let rg = self.any_grad(&[a, b]);
        let back: Option<BackFn> = rg.then(|| {
            Box::new(move |g: &Array2<f64>, tape: &Tape, grads: &mut [Option<Array2<f64>>]| {
                acc(tape, grads, a.0, g.clone());
                acc(tape, grads, b.0, -g.clone());
            }) as BackFn
        });
        self.push(out, rg, back)
    }

    /// Elementwise (Hadamard) product; shapes must match.
    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul shape mismatch");
        let out = self.value(a) * self.value(b);
        let rg = self.any_grad(&[a, b]);
        let back: Option<BackFn> = rg.then(|| {
            Box::new(move |g: &Array2<f64>, tape: &Tape, grads: &mut [Option<Array2<f64>>]| {
                if tape.nodes[a.0].requires_grad {
                    acc(tape, grads, a.0, g * tape.value(b));
                }
                if tape.nodes[b.0].requires_grad {
                    acc(tape, grads, b.0, g * tape.value(a));
                }
            }) as BackFn
        });
        self.push(out, rg, back)
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, a: TensorRef, c: f64) -> TensorRef {
        let out = self.value(a) * c;
        let rg = self.nodes[a.0].requires_grad;
        let back: Option<BackFn> = rg.then(|| {
            Box::new(move |g: &Array2<f64>, tape: &Tape, grads: &mut [Option<Array2<f64>>]| {
                acc(tape, grads, a.0, g * c);
            }) as BackFn
        });
        self.push(out, rg, back)
    }

    /// Broadcast-add a `1 x n` row to every row of an `r x n` matrix.
    pub fn add_row(&mut self, m: TensorRef, row: TensorRef) -> TensorRef {
        let (vm, vr) = (self.value(m), self.value(row));
        assert_eq!(vr.nrows(), 1, "add_row: row operand must be 1 x n");
        assert_eq!(vm.ncols(), vr.ncols(), "add_row width mismatch");
        let out = vm + vr;
        let rg = self.any_grad(&[m, row]);
        let back: Option<BackFn> = rg.then(|| {
            Box::new(move |g: &Array2<f64>, tape: &Tape, grads: &mut [Option<Array2<f64>>]| {
                acc(tape, grads, m.0, g.clone());
                if tape.nodes[row.0].requires_grad {
                    let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(tape, grads, row.0, summed);
                }
            }) as BackFn
        });
        self.push(out, rg, back)
    }

    pub fn relu(&mut self, a: TensorRef) -> TensorRef {
        let out = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.nodes[a.0].requires_grad;
        let back: Option<BackFn> = rg.then(|| {
            Box::new(move |g: &Array2<f64>, tape: &Tape, grads: &mut [Option<Array2<f64>>]| {
                let mask = tape.value(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                acc(tape, grads, a.0, g * &mask);
            }) as BackFn
        });
        self.push(out, rg, back)
    }

    pub fn sigmoid(&mut self, a: TensorRef) -> TensorRef {
        let out = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let rg = self.nodes[a.0].requires_grad;
        // Backward reads the op's own output, so the closure is attached after
        // the node id is known.
        let out_ref = self.push(out, rg, None);
        if rg {
            let back: BackFn =
                Box::new(move |g: &Array2<f64>, tape: &Tape, grads: &mut [Option<Array2<f64>>]| {
                    let y = tape.value(out_ref);
                    let dy = y.mapv(|v| v * (1.0 - v));
                    acc(tape, grads, a.0, g * &dy);
                });
            self.nodes[out_ref.0].back = Some(back);
        }
        out_ref
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&mut self, a: TensorRef) -> TensorRef {
        let out = softmax_rows_value(self.value(a));
        let rg = self.nodes[a.0].requires_grad;
        let out_ref = self.push(out, rg, None);
        if rg {
            let back: BackFn =
                Box::new(move |g: &Array2<f64>, tape: &Tape, grads: &mut [Option<Array2<f64>>]| {
                    let y = tape.value(out_ref);
                    let mut dx = g * y;
                    for (mut drow, yrow) in dx.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))) {
                        let s: f64 = drow.sum();
                        drow.zip_mut_with(&yrow, |d, &yv| *d -= s * yv);
                    }
                    acc(tape, grads, a.0, dx);
                });
            self.nodes[out_ref.0].back = Some(back);
        }
        out_ref
    }

    /// Row-wise log-softmax (numerically stable log of softmax).
    pub fn log_softmax_rows(&mut self, a: TensorRef) -> TensorRef {
        let va = self.value(a);
        let mut out = va.clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        let rg = self.nodes[a.0].requires_grad;
        let out_ref = self.push(out, rg, None);
        if rg {
            let back: BackFn =
                Box::new(move |g: &Array2<f64>, tape: &Tape, grads: &mut [Option<Array2<f64>>]| {
                    let y = tape.value(out_ref); // log-probs
                    let mut dx = g.clone();
                    for (mut drow, yrow) in dx.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))) {
                        let s: f64 = drow.sum();
                        drow.zip_mut_with(&yrow, |d, &yv| *d -= s * yv.exp());
                    }
                    acc(tape, grads, a.0, dx);
                });
            self.nodes[out_ref.0].back = Some(back);
        }
        out_ref
    }

    /// Row-wise layer normalization with learned gain/shift (`1 x n` each).
    pub fn layer_norm_rows(&mut self, x: TensorRef, gamma: TensorRef, beta: TensorRef) -> TensorRef {
        const EPS: f64 = 1e-5;
        let vx = self.value(x);
        let n = vx.ncols() as f64;
        assert_eq!(self.value(gamma).dim(), (1, vx.ncols()), "layer_norm gamma shape");
        assert_eq!(self.value(beta).dim(), (1, vx.ncols()), "layer_norm beta shape");
        let mut out = vx.clone();
        {
            let vg = self.value(gamma);
            let vb = self.value(beta);
            for mut row in out.axis_iter_mut(Axis(0)) {
                let mean = row.sum() / n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let istd = 1.0 / (var + EPS).sqrt();
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - mean) * istd * vg[[0, j]] + vb[[0, j]];
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let back: Option<BackFn> = rg.then(|| {
            Box::new(move |g: &Array2<f64>, tape: &Tape, grads: &mut [Option<Array2<f64>>]| {
                let vx = tape.value(x);
                let vg = tape.value(gamma);
                let n = vx.ncols() as f64;
                let mut dx = Array2::zeros(vx.dim());
                let mut dgamma = Array2::zeros((1, vx.ncols()));
                let mut dbeta = Array2::zeros((1, vx.ncols()));
                for (r, xrow) in vx.axis_iter(Axis(0)).enumerate() {
                    let mean = xrow.sum() / n;
                    let var = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let istd = 1.0 / (var + EPS).sqrt();
                    let xhat: Vec<f64> = xrow.iter().map(|&v| (v - mean) * istd).collect();
                    let grow = g.row(r);
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..xrow.len() {
                        let dxh = grow[j] * vg[[0, j]];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[j];
                        dgamma[[0, j]] += grow[j] * xhat[j];
                        dbeta[[0, j]] += grow[j];
                    }
                    mean_dxhat /= n;
                    mean_dxhat_xhat /= n;
                    for j in 0..xrow.len() {
                        let dxh = grow[j] * vg[[0, j]];
                        dx[[r, j]] = istd * (dxh - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                if tape.nodes[x.0].requires_grad {
                    acc(tape, grads, x.0, dx);
                }
                if tape.nodes[gamma.0].requires_grad {
                    acc(tape, grads, gamma.0, dgamma);
                }
                if tape.nodes[beta.0].requires_grad {
                    acc(tape, grads, beta.0, dbeta);
                }
            }) as BackFn
        });
        self.push(out, rg, back)
    }

    /// Select rows of `a` by index (repeats allowed); backward scatter-adds.
    pub fn gather_rows(&mut self, a: TensorRef, idx: Vec<usize>) -> TensorRef {
        let va = self.value(a);
        for &i in &idx {
            assert!(i < va.nrows(), "gather_rows index {} out of {}", i, va.nrows());
        }
        let mut out = Array2::zeros((idx.len(), va.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&va.row(i));
        }
        let rg = self.nodes[a.0].requires_grad;
        let back: Option<BackFn> = rg.then(|| {
            let idx = idx.clone();
            Box::new(move |g: &Array2<f64>, tape: &Tape, grads: &mut [Option<Array2<f64>>]| {
                let va = tape.value(a);
                let mut da = Array2::zeros(va.dim());
                for (r, &i) in idx.iter().enumerate() {
                    let mut dst = da.row_mut(i);
                    dst += &g.row(r);
                }
                acc(tape, grads, a.0, da);
            }) as BackFn
        });
        self.push(out, rg, back)
    }

    /// Stack parts vertically; all parts must share the column count.
    pub fn concat_rows(&mut self, parts: &[TensorRef]) -> TensorRef {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).ncols();
        let total: usize = parts.iter().map(|&p| self.value(p).nrows()).sum();
        let mut out = Array2::zeros((total, cols));
        let mut offset = 0;
        let mut spans = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.ncols(), cols, "concat_rows width mismatch");
            out.slice_mut(ndarray::s![offset..offset + v.nrows(), ..]).assign(v);
            spans.push((p, offset, v.nrows()));
            offset += v.nrows();
        }
        let rg = self.any_grad(parts);
        let back: Option<BackFn> = rg.then(|| {
            Box::new(move |g: &Array2<f64>, tape: &Tape, grads: &mut [Option<Array2<f64>>]| {
                for &(p, off, len) in &spans {
                    if tape.nodes[p.0].requires_grad {
                        let dg = g.slice(ndarray::s![off..off + len, ..]).to_owned();
                        acc(tape, grads, p.0, dg);
                    }
                }
            }) as BackFn
        });
        self.push(out, rg, back)
    }

    /// Stack parts horizontally; all parts must share the row count.
    pub fn concat_cols(&mut self, parts: &[TensorRef]) -> TensorRef {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).nrows();
        let total: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut out = Array2::zeros((rows, total));
        let mut offset = 0;
        let mut spans = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.nrows(), rows, "concat_cols height mismatch");
            out.slice_mut(ndarray::s![.., offset..offset + v.ncols()]).assign(v);
            spans.push((p, offset, v.ncols()));
            offset += v.ncols();
        }
        let rg = self.any_grad(parts);
        let back: Option<BackFn> = rg.then(|| {
            Box::new(move |g: &Array2<f64>, tape: &Tape, grads: &mut [Option<Array2<f64>>]| {
                for &(p, off, len) in &spans {
                    if tape.nodes[p.0].requires_grad {
                        let dg = g.slice(ndarray::s![.., off..off + len]).to_owned();
                        acc(tape, grads, p.0, dg);
                    }
                }
            }) as BackFn
        });
        self.push(out, rg, back)
    }

    pub fn slice_rows(&mut self, a: TensorRef, lo: usize, hi: usize) -> TensorRef {
        let va = self.value(a);
        assert!(lo < hi && hi <= va.nrows(), "slice_rows {lo}..{hi} of {}", va.nrows());
        let out = va.slice(ndarray::s![lo..hi, ..]).to_owned();
        let rg = self.nodes[a.0].requires_grad;
        let back: Option<BackFn> = rg.then(|| {
            Box::new(move |g: &Array2<f64>, tape: &Tape, grads: &mut [Option<Array2<f64>>]| {
                let va = tape.value(a);
                let mut da = Array2::zeros(va.dim());
                da.slice_mut(ndarray::s![lo..hi, ..]).assign(g);
                acc(tape, grads, a.0, da);
            }) as BackFn
        });
        self.push(out, rg, back)
    }

    pub fn slice_cols(&mut self, a: TensorRef, lo: usize, hi: usize) -> TensorRef {
        let va = self.value(a);
        assert!(lo < hi && hi <= va.ncols(), "slice_cols {lo}..{hi} of {}", va.ncols());
        let out = va.slice(ndarray::s![.., lo..hi]).to_owned();
        let rg = self.nodes[a.0].requires_grad;
        let back: Option<BackFn> = rg.then(|| {
            Box::new(move |g: &Array2<f64>, tape: &Tape, grads: &mut [Option<Array2<f64>>]| {
                let va = tape.value(a);
                let mut da = Array2::zeros(va.dim());
                da.slice_mut(ndarray::s![.., lo..hi]).assign(g);
                acc(tape, grads, a.0, da);
            }) as BackFn
        });
        self.push(out, rg, back)
    }

    /// Sum of all entries as a `1 x 1` tensor.
    pub fn sum_all(&mut self, a: TensorRef) -> TensorRef {
        let s = self.value(a).sum();
        let out = Array2::from_elem((1, 1), s);
        let rg = self.nodes[a.0].requires_grad;
        let back: Option<BackFn> = rg.then(|| {
            Box::new(move |g: &Array2<f64>, tape: &Tape, grads: &mut [Option<Array2<f64>>]| {
                let va = tape.value(a);
                acc(tape, grads, a.0, Array2::from_elem(va.dim(), g[[0, 0]]));
            }) as BackFn
        });
        self.push(out, rg, back)
    }

    /// Multiply matrix `a` by a dynamic `1 x 1` scalar node `s`.
    pub fn mul_scalar(&mut self, s: TensorRef, a: TensorRef) -> TensorRef {
        assert_eq!(self.value(s).dim(), (1, 1), "mul_scalar: s must be 1 x 1");
        let out = self.value(a) * self.value(s)[[0, 0]];
        let rg = self.any_grad(&[s, a]);
        let back: Option<BackFn> = rg.then(|| {
            Box::new(move |g: &Array2<f64>, tape: &Tape, grads: &mut [Option<Array2<f64>>]| {
                let (vs, va) = (tape.value(s), tape.value(a));
                if tape.nodes[s.0].requires_grad {
                    let d = (g * va).sum();
                    acc(tape, grads, s.0, Array2::from_elem((1, 1), d));
                }
                if tape.nodes[a.0].requires_grad {
                    acc(tape, grads, a.0, g * vs[[0, 0]]);
                }
            }) as BackFn
        });
        self.push(out, rg, back)
    }

    /// Reverse sweep. Seeds are (node, upstream gradient) pairs; a node may be
    /// seeded and also receive downstream flow recorded later on the tape.
    pub fn backward(&self, seeds: Vec<(TensorRef, Array2<f64>)>) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        for (t, seed) in seeds {
            assert_eq!(self.value(t).dim(), seed.dim(), "backward seed shape mismatch");
            acc(self, &mut grads, t.0, seed);
        }
        for i in (0..self.nodes.len()).rev() {
            if grads[i].is_none() {
                continue;
            }
            if let Some(back) = &self.nodes[i].back {
                let g = grads[i].take().expect("checked above");
                back(&g, self, &mut grads);
            }
        }
        Gradients { slots: grads }
    }

    /// Convenience: backward from a single `1 x 1` loss with seed 1.
    pub fn backward_scalar(&self, loss: TensorRef) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward_scalar needs 1 x 1 loss");
        self.backward(vec![(loss, Array2::from_elem((1, 1), 1.0))])
    }
}

/// Plain (non-tape) row-wise softmax, shared with inference-time code.
pub fn softmax_rows_value(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - m).exp());
        let s = row.sum();
        row.mapv_inplace(|x| x / s);
    }
    out
}

/// Plain row-wise log-softmax.
pub fn log_softmax_rows_value(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|x| x - lse);
    }
    out
}

/// Central-difference numeric gradient of `f` at `at`, one entry at a time.
/// Used by tests to validate analytic gradients.
pub fn numeric_gradient(
    mut f: impl FnMut(&Array2<f64>) -> f64,
    at: &Array2<f64>,
    eps: f64,
) -> Array2<f64> {
    let mut grad = Array2::zeros(at.dim());
    let mut x = at.clone();
    for r in 0..at.nrows() {
        for c in 0..at.ncols() {
            let orig = x[[r, c]];
            x[[r, c]] = orig + eps;
            let fp = f(&x);
            x[[r, c]] = orig - eps;
            let fm = f(&x);
            x[[r, c]] = orig;
            grad[[r, c]] = (fp - fm) / (2.0 * eps);
        }
    }
    grad
}

/// Relative error with an absolute floor, symmetric in its arguments.
pub fn rel_error(a: f64, b: f64, abs_floor: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(abs_floor);
    (a - b).abs() / denom
}
