//! Named parameter storage, initialization, gradient utilities, and binary
//! checkpoints.
//!
//! Parameters live behind `Arc` so that per-example tapes can bind them
//! without copying ~d² matrices; the optimizer mutates through
//! `Arc::make_mut`, which is in-place once the tapes of the previous step are
//! dropped. Checkpoints store raw little-endian `f64` bits, so a
//! save/load/resume round trip is bit-exact.

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, TensorRef};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

/// Ordered, name-addressed parameter set. Registration order is the canonical
/// order for gradient vectors and optimizer state.
#[derive(Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Array2<f64>>>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Array2<f64>) -> usize {
        assert!(
            !self.by_name.contains_key(name),
            "parameter '{name}' registered twice"
        );
        let idx = self.values.len();
        self.names.push(name.to_string());
        self.values.push(Arc::new(value));
        self.by_name.insert(name.to_string(), idx);
        idx
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, idx: usize) -> &Array2<f64> {
        &self.values[idx]
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        let idx = self.by_name[name];
        &self.values[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    /// Mutate one parameter in place (no copy unless a tape still holds it).
    pub fn update(&mut self, idx: usize, f: impl FnOnce(&mut Array2<f64>)) {
        f(Arc::make_mut(&mut self.values[idx]));
    }

    pub fn set(&mut self, idx: usize, value: Array2<f64>) {
        self.values[idx] = Arc::new(value);
    }

    /// Bind every parameter onto a tape as a shared leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams<'_> {
        let refs = self.values.iter().map(|v| tape.leaf_shared(Arc::clone(v))).collect();
        BoundParams { store: self, refs }
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Zero matrices shaped like each parameter, in canonical order.
    pub fn zero_grads(&self) -> Vec<Array2<f64>> {
        self.values.iter().map(|v| Array2::zeros(v.dim())).collect()
    }
}

/// Tape handles for every parameter of a store, in canonical order.
pub struct BoundParams<'a> {
    store: &'a ParamStore,
    refs: Vec<TensorRef>,
}

impl BoundParams<'_> {
    /// Handle for a parameter by name. Unknown names are wiring bugs.
    pub fn get(&self, name: &str) -> TensorRef {
        match self.store.index_of(name) {
            Some(idx) => self.refs[idx],
            None => panic!("unknown parameter '{name}'"),
        }
    }

    pub fn refs(&self) -> &[TensorRef] {
        &self.refs
    }

    /// Gradients in canonical order; parameters nothing flowed into get zeros.
    pub fn collect_grads(&self, grads: &Gradients) -> Vec<Array2<f64>> {
        self.refs
            .iter()
            .enumerate()
            .map(|(i, &r)| grads.get_or_zeros(r, self.store.values[i].dim()))
            .collect()
    }
}

pub fn normal_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(0.0, std).expect("valid normal");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

pub fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// Euclidean norm over a full gradient set.
pub fn global_norm(grads: &[Array2<f64>]) -> f64 {
    grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescale gradients so their global norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * scale);
        }
    }
    norm
}

/// Elementwise `acc += delta`, in canonical order.
pub fn accumulate_grads(acc: &mut [Array2<f64>], delta: &[Array2<f64>]) {
    assert_eq!(acc.len(), delta.len(), "gradient sets differ in length");
    for (a, d) in acc.iter_mut().zip(delta) {
        *a += d;
    }
}

/// Optimizer moment estimates, aligned with a store's canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub t: u64,
}

impl OptState {
    pub fn zeros_like(store: &ParamStore) -> Self {
        OptState { m: store.zero_grads(), v: store.zero_grads(), t: 0 }
    }
}

/// Everything needed to resume training exactly.
pub struct Checkpoint {
    pub step: u64,
    pub config_toml: String,
    pub params: Vec<(String, Array2<f64>)>,
    pub opt: Option<OptState>,
}

const CKPT_MAGIC: &[u8; 4] = b"RVSK";
const CKPT_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let display = path.display().to_string();
    let file = std::fs::File::create(path).map_err(|e| Error::io(&display, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(&display, e);
    w.write_all(CKPT_MAGIC).map_err(io_err)?;
    w.write_all(&CKPT_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&ckpt.step.to_le_bytes()).map_err(io_err)?;
    write_bytes(&mut w, ckpt.config_toml.as_bytes()).map_err(io_err)?;
    w.write_all(&(ckpt.params.len() as u64).to_le_bytes()).map_err(io_err)?;
    for (name, value) in &ckpt.params {
        write_bytes(&mut w, name.as_bytes()).map_err(io_err)?;
        write_matrix(&mut w, value).map_err(io_err)?;
    }
    match &ckpt.opt {
        None => w.write_all(&[0u8]).map_err(io_err)?,
        Some(opt) => {
            assert_eq!(opt.m.len(), ckpt.params.len(), "optimizer state misaligned");
            assert_eq!(opt.v.len(), ckpt.params.len(), "optimizer state misaligned");
            w.write_all(&[1u8]).map_err(io_err)?;
            w.write_all(&opt.t.to_le_bytes()).map_err(io_err)?;
            for m in &opt.m {
                write_matrix(&mut w, m).map_err(io_err)?;
            }
            for v in &opt.v {
                write_matrix(&mut w, v).map_err(io_err)?;
            }
        }
    }
    w.flush().map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut r = std::io::BufReader::new(file);
    let bad = |msg: &str| Error::Checkpoint(format!("{display}: {msg}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != CKPT_MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = read_u32(&mut r).map_err(|_| bad("truncated version"))?;
    if version != CKPT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let step = read_u64(&mut r).map_err(|_| bad("truncated step"))?;
    let config_bytes = read_bytes(&mut r).map_err(|_| bad("truncated config"))?;
    let config_toml =
        String::from_utf8(config_bytes).map_err(|_| bad("config is not valid UTF-8"))?;
    let n = read_u64(&mut r).map_err(|_| bad("truncated parameter count"))? as usize;
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        let name_bytes = read_bytes(&mut r).map_err(|_| bad("truncated parameter name"))?;
        let name =
            String::from_utf8(name_bytes).map_err(|_| bad("parameter name is not UTF-8"))?;
        let value = read_matrix(&mut r).map_err(|_| bad("truncated parameter data"))?;
        params.push((name, value));
    }
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag).map_err(|_| bad("truncated optimizer flag"))?;
    let opt = if flag[0] == 1 {
        let t = read_u64(&mut r).map_err(|_| bad("truncated optimizer step"))?;
        let mut m = Vec::with_capacity(n);
        for _ in 0..n {
            m.push(read_matrix(&mut r).map_err(|_| bad("truncated optimizer m"))?);
        }
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(read_matrix(&mut r).map_err(|_| bad("truncated optimizer v"))?);
        }
        Some(OptState { m, v, t })
    } else {
        None
    };
    Ok(Checkpoint { step, config_toml, params, opt })
}

/// Restore a store from checkpoint parameters (canonical order preserved).
pub fn store_from_params(params: &[(String, Array2<f64>)]) -> ParamStore {
    let mut store = ParamStore::new();
    for (name, value) in params {
        store.register(name, value.clone());
    }
    store
}

/// Verify a checkpoint's parameters line up with an expected store layout.
pub fn check_layout(store: &ParamStore, params: &[(String, Array2<f64>)]) -> Result<()> {
    if store.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model expects {}",
            params.len(),
            store.len()
        )));
    }
    for (i, (name, value)) in params.iter().enumerate() {
        if store.names()[i] != *name {
            return Err(Error::Checkpoint(format!(
                "parameter {i} is '{name}', model expects '{}'",
                store.names()[i]
            )));
        }
        if store.value(i).dim() != value.dim() {
            return Err(Error::Checkpoint(format!(
                "parameter '{name}' has shape {:?}, model expects {:?}",
                value.dim(),
                store.value(i).dim()
            )));
        }
    }
    Ok(())
}

fn write_bytes<W: Write>(w: &mut W, bytes: &[u8]) -> std::io::Result<()> {
    w.write_all(&(bytes.len() as u64).to_le_bytes())?;
    w.write_all(bytes)
}

fn read_bytes<R: Read>(r: &mut R) -> std::io::Result<Vec<u8>> {
    let len = read_u64(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn write_matrix<W: Write>(w: &mut W, m: &Array2<f64>) -> std::io::Result<()> {
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for x in m.iter() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_matrix<R: Read>(r: &mut R) -> std::io::Result<Array2<f64>> {
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    let mut buf = vec![0u8; 8];
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf[..8].try_into().expect("8 bytes")));
    }
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
