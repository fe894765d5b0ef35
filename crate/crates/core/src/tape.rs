//! Reverse-mode automatic differentiation over a recorded list of tensor ops.
//!
//! Every tensor on the tape is a row-major `rows x cols` block of `f64`; vectors
//! are `1 x n` rows. Parameters live in a [`ParamStore`] that the tape borrows,
//! so parameter leaves cost nothing to record. Row lookups into sparse tables
//! (`ParamKind::Sparse`) produce row-keyed gradients, which keeps untouched
//! Engram buckets at exactly zero gradient.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Ordinary trainable tensor with dense gradients.
    Dense,
    /// Large lookup table; gradients are kept per touched row.
    Sparse,
    /// Never receives gradient or optimizer updates.
    Frozen,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub kind: ParamKind,
    pub data: Vec<f64>,
}

impl Param {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, kind: ParamKind, data: Vec<f64>) -> ParamId {
        let name = name.into();
        assert_eq!(data.len(), rows * cols, "param `{name}` data length");
        assert!(!self.by_name.contains_key(&name), "duplicate param `{name}`");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, rows, cols, kind, data });
        id
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, rows, cols, ParamKind::Dense, vec![0.0; rows * cols])
    }

    pub fn ones(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, rows, cols, ParamKind::Dense, vec![1.0; rows * cols])
    }

    /// Fan-in scaled uniform init in `[-1/sqrt(cols), 1/sqrt(cols)]`.
    pub fn uniform<R: Rng>(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut R) -> ParamId {
        let bound = 1.0 / (cols.max(1) as f64).sqrt();
        self.uniform_bound(name, rows, cols, bound, ParamKind::Dense, rng)
    }

    pub fn uniform_bound<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
        kind: ParamKind,
        rng: &mut R,
    ) -> ParamId {
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, rows, cols, kind, data)
    }

    pub fn normal<R: Rng>(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64, rng: &mut R) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        self.add(name, rows, cols, ParamKind::Dense, data)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Number of scalars across all tensors (frozen ones included).
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn scalar_count_where(&self, pred: impl Fn(&Param) -> bool) -> usize {
        self.params.iter().filter(|p| pred(p)).map(|p| p.data.len()).sum()
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grads {
    dense: HashMap<ParamId, Vec<f64>>,
    sparse: BTreeMap<(ParamId, usize), Vec<f64>>,
}

impl Grads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn dense(&self, id: ParamId) -> Option<&[f64]> {
        self.dense.get(&id).map(Vec::as_slice)
    }

    pub fn sparse_row(&self, id: ParamId, row: usize) -> Option<&[f64]> {
        self.sparse.get(&(id, row)).map(Vec::as_slice)
    }

    pub fn sparse_rows(&self, id: ParamId) -> impl Iterator<Item = (usize, &[f64])> {
        self.sparse.range((id, 0)..=(id, usize::MAX)).map(|(&(_, r), g)| (r, g.as_slice()))
    }

    pub fn dense_iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        let mut ids: Vec<_> = self.dense.keys().copied().collect();
        ids.sort();
        ids.into_iter().map(move |id| (id, self.dense[&id].as_slice()))
    }

    pub fn sparse_iter(&self) -> impl Iterator<Item = ((ParamId, usize), &[f64])> {
        self.sparse.iter().map(|(&k, g)| (k, g.as_slice()))
    }

    /// Gradient of a single scalar `flat` inside parameter `id`; zero when untouched.
    pub fn scalar(&self, store: &ParamStore, id: ParamId, flat: usize) -> f64 {
        let p = store.get(id);
        match p.kind {
            ParamKind::Frozen => 0.0,
            ParamKind::Dense => self.dense.get(&id).map_or(0.0, |g| g[flat]),
            ParamKind::Sparse => {
                let (r, c) = (flat / p.cols, flat % p.cols);
                self.sparse.get(&(id, r)).map_or(0.0, |g| g[c])
            }
        }
    }

    pub fn add_dense(&mut self, id: ParamId, g: &[f64]) {
        let acc = self.dense.entry(id).or_insert_with(|| vec![0.0; g.len()]);
        for (a, b) in acc.iter_mut().zip(g) {
            *a += b;
        }
    }

    fn add_dense_range(&mut self, id: ParamId, len: usize, offset: usize, g: &[f64]) {
        let acc = self.dense.entry(id).or_insert_with(|| vec![0.0; len]);
        for (a, b) in acc[offset..offset + g.len()].iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn add_sparse(&mut self, id: ParamId, row: usize, g: &[f64]) {
        let acc = self.sparse.entry((id, row)).or_insert_with(|| vec![0.0; g.len()]);
        for (a, b) in acc.iter_mut().zip(g) {
            *a += b;
        }
    }

    /// Accumulates `other` into `self` in a fixed key order.
    pub fn merge(&mut self, other: &Grads) {
        for (id, g) in other.dense_iter() {
            self.add_dense(id, g);
        }
        for ((id, row), g) in other.sparse_iter() {
            self.add_sparse(id, row, g);
        }
    }

    pub fn scale(&mut self, f: f64) {
        for g in self.dense.values_mut().chain(self.sparse.values_mut()) {
            for x in g.iter_mut() {
                *x *= f;
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.dense.is_empty() && self.sparse.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.dense
            .values()
            .chain(self.sparse.values())
            .flat_map(|g| g.iter())
            .fold(0.0f64, |m, x| m.max(x.abs()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Const,
    Param(ParamId),
    Gather { param: ParamId, row: usize },
    /// `x W^T + b`, x: T x n, W: m x n.
    Linear { x: Var, w: Var, b: Option<Var> },
    /// `a b`, a: m x k, b: k x n.
    MatMul { a: Var, b: Var },
    /// `a b^T`, a: m x k, b: n x k.
    MatMulT { a: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `mul * a + add`.
    Affine { a: Var, mul: f64 },
    /// Multiplies every element of `a` by the 1x1 tensor `s`.
    ScaleBy { a: Var, s: Var },
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    CausalSoftmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    SliceCols { a: Var, start: usize },
    SliceRows { a: Var, start: usize },
    Sum(Var),
    Pick { a: Var, idx: usize },
    AddN(Vec<Var>),
}

#[derive(Clone, Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

pub const LN_EPS: f64 = 1e-5;

/// A recording of one forward computation.
pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self { store, nodes: Vec::with_capacity(1024), param_nodes: HashMap::new() }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || value.len() == rows * cols);
        self.nodes.push(Node { rows, cols, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.0];
        match n.op {
            Op::Param(id) => &self.store.get(id).data,
            _ => &n.value,
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.value(v).len(), 1);
        self.value(v)[0]
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(value.len(), rows * cols);
        self.push(rows, cols, value, Op::Const)
    }

    pub fn row_const(&mut self, value: &[f64]) -> Var {
        self.constant(1, value.len(), value.to_vec())
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(rows, cols, vec![0.0; rows * cols])
    }

    /// Copies the current value into a constant leaf: a stop-gradient.
    pub fn detach(&mut self, v: Var) -> Var {
        let (r, c) = self.shape(v);
        let val = self.value(v).to_vec();
        self.constant(r, c, val)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let v = self.push(p.rows, p.cols, Vec::new(), Op::Param(id));
        self.param_nodes.insert(id, v);
        v
    }

    /// Row lookup into a table parameter.
    pub fn gather(&mut self, id: ParamId, row: usize) -> Var {
        let p = self.store.get(id);
        assert!(row < p.rows, "row {row} out of range for `{}` ({} rows)", p.name, p.rows);
        let value = p.row(row).to_vec();
        let cols = p.cols;
        self.push(1, cols, value, Op::Gather { param: id, row })
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (t, n) = self.shape(x);
        let (m, n2) = self.shape(w);
        assert_eq!(n, n2, "linear: input width {n} vs weight width {n2}");
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = vec![0.0; t * m];
        for r in 0..t {
            let xr = &xv[r * n..(r + 1) * n];
            let orow = &mut out[r * m..(r + 1) * m];
            for (i, o) in orow.iter_mut().enumerate() {
                *o = dot(xr, &wv[i * n..(i + 1) * n]);
            }
        }
        if let Some(b) = b {
            assert_eq!(self.value(b).len(), m);
            let bv = self.value(b);
            for r in 0..t {
                for i in 0..m {
                    out[r * m + i] += bv[i];
                }
            }
        }
        self.push(t, m, out, Op::Linear { x, w, b })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dims");
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, bb) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                    *o += aip * bb;
                }
            }
        }
        self.push(m, n, out, Op::MatMul { a, b })
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_t inner dims");
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = dot(&av[i * k..(i + 1) * k], &bv[j * k..(j + 1) * k]);
            }
        }
        self.push(m, n, out, Op::MatMulT { a, b })
    }

    fn zip_op(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let sa = self.shape(a);
        assert_eq!(sa, self.shape(b), "elementwise shape mismatch");
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        self.push(sa.0, sa.1, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_op(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| mul * x + add).collect();
        self.push(r, c, out, Op::Affine { a, mul })
    }

    pub fn scale(&mut self, a: Var, f: f64) -> Var {
        self.affine(a, f, 0.0)
    }

    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "scale_by expects a 1x1 factor");
        let f = self.value(s)[0];
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x * f).collect();
        self.push(r, c, out, Op::ScaleBy { a, s })
    }

    fn map_op(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(r, c, out, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_op(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map_op(a, f64::tanh, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map_op(a, gelu, Op::Gelu(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(r, c, out, Op::Softmax(a))
    }

    /// Row-wise softmax where row `i` only sees columns `0..=i`.
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(r, c, "causal softmax expects a square score matrix");
        let mut out = self.value(a).to_vec();
        for (i, row) in out.chunks_mut(c).enumerate() {
            softmax_in_place(&mut row[..=i]);
            row[i + 1..].fill(0.0);
        }
        self.push(r, c, out, Op::CausalSoftmax(a))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            let lse = log_sum_exp(row);
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push(r, c, out, Op::LogSoftmax(a))
    }

    /// Row-wise layer normalization with elementwise gain and bias (`1 x cols`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.value(gain).len(), c);
        assert_eq!(self.value(bias).len(), c);
        let xv = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let mut out = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = gv[j] * h + bv[j];
            }
        }
        self.push(r, c, out, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let (pr, pc) = self.shape(p);
                assert_eq!(pr, rows, "concat_cols row mismatch");
                out.extend_from_slice(&self.value(p)[r * pc..(r + 1) * pc]);
            }
        }
        self.push(rows, cols, out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0]).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = self.shape(p);
            assert_eq!(pc, cols, "stack_rows col mismatch");
            rows += pr;
            out.extend_from_slice(self.value(p));
        }
        self.push(rows, cols, out, Op::StackRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + len <= c);
        let av = self.value(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&av[i * c + start..i * c + start + len]);
        }
        self.push(r, len, out, Op::SliceCols { a, start })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + len <= r);
        let out = self.value(a)[start * c..(start + len) * c].to_vec();
        self.push(len, c, out, Op::SliceRows { a, start })
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        self.slice_rows(a, i, 1)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(1, 1, vec![s], Op::Sum(a))
    }

    pub fn pick(&mut self, a: Var, idx: usize) -> Var {
        let v = self.value(a)[idx];
        self.push(1, 1, vec![v], Op::Pick { a, idx })
    }

    /// Dot product of two `1 x n` rows as a `1 x 1` tensor.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b)
    }

    pub fn add_n(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (r, c) = self.shape(parts[0]);
        let mut out = vec![0.0; r * c];
        for &p in parts {
            assert_eq!(self.shape(p), (r, c), "add_n shape mismatch");
            for (o, v) in out.iter_mut().zip(self.value(p)) {
                *o += v;
            }
        }
        self.push(r, c, out, Op::AddN(parts.to_vec()))
    }

    /// Runs reverse accumulation from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::BackwardBeforeForward);
        }
        assert_eq!(self.value(loss).len(), 1, "backward expects a scalar loss");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Grads::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let (rows, cols) = (node.rows, node.cols);
            match &node.op {
                Op::Const => {}
                Op::Param(id) => {
                    if self.store.get(*id).kind != ParamKind::Frozen {
                        out.add_dense(*id, &g);
                    }
                }
                Op::Gather { param, row } => {
                    let p = self.store.get(*param);
                    match p.kind {
                        ParamKind::Frozen => {}
                        ParamKind::Sparse => out.add_sparse(*param, *row, &g),
                        ParamKind::Dense => out.add_dense_range(*param, p.data.len(), row * p.cols, &g),
                    }
                }
                Op::Linear { x, w, b } => {
                    let (t, n) = self.shape(*x);
                    let m = cols;
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    if self.needs_grad(*x) {
                        let mut gx = vec![0.0; t * n];
                        for r in 0..t {
                            for i in 0..m {
                                let gi = g[r * m + i];
                                if gi == 0.0 {
                                    continue;
                                }
                                axpy(&mut gx[r * n..(r + 1) * n], gi, &wv[i * n..(i + 1) * n]);
                            }
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                    if self.needs_grad(*w) {
                        let mut gw = vec![0.0; m * n];
                        for r in 0..t {
                            for i in 0..m {
                                let gi = g[r * m + i];
                                if gi == 0.0 {
                                    continue;
                                }
                                axpy(&mut gw[i * n..(i + 1) * n], gi, &xv[r * n..(r + 1) * n]);
                            }
                        }
                        accumulate(&mut grads, *w, gw);
                    }
                    if let Some(b) = b {
                        if self.needs_grad(*b) {
                            let mut gb = vec![0.0; m];
                            for r in 0..t {
                                for i in 0..m {
                                    gb[i] += g[r * m + i];
                                }
                            }
                            accumulate(&mut grads, *b, gb);
                        }
                    }
                }
                Op::MatMul { a, b } => {
                    let (m, k) = self.shape(*a);
                    let n = cols;
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    if self.needs_grad(*a) {
                        // ga = g b^T
                        let mut ga = vec![0.0; m * k];
                        for i in 0..m {
                            for p in 0..k {
                                ga[i * k + p] = dot(&g[i * n..(i + 1) * n], &bv[p * n..(p + 1) * n]);
                            }
                        }
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs_grad(*b) {
                        // gb = a^T g
                        let mut gb = vec![0.0; k * n];
                        for i in 0..m {
                            for p in 0..k {
                                let aip = av[i * k + p];
                                if aip != 0.0 {
                                    axpy(&mut gb[p * n..(p + 1) * n], aip, &g[i * n..(i + 1) * n]);
                                }
                            }
                        }
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MatMulT { a, b } => {
                    let (m, k) = self.shape(*a);
                    let n = cols;
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    if self.needs_grad(*a) {
                        // ga = g b
                        let mut ga = vec![0.0; m * k];
                        for i in 0..m {
                            for j in 0..n {
                                let gij = g[i * n + j];
                                if gij != 0.0 {
                                    axpy(&mut ga[i * k..(i + 1) * k], gij, &bv[j * k..(j + 1) * k]);
                                }
                            }
                        }
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs_grad(*b) {
                        // gb = g^T a
                        let mut gb = vec![0.0; n * k];
                        for i in 0..m {
                            for j in 0..n {
                                let gij = g[i * n + j];
                                if gij != 0.0 {
                                    axpy(&mut gb[j * k..(j + 1) * k], gij, &av[i * k..(i + 1) * k]);
                                }
                            }
                        }
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    let neg = g.iter().map(|x| -x).collect();
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, neg);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let ga = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                    let gb = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Affine { a, mul } => {
                    let ga = g.iter().map(|x| x * mul).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::ScaleBy { a, s } => {
                    let f = self.value(*s)[0];
                    let gs = dot(&g, self.value(*a));
                    let ga = g.iter().map(|x| x * f).collect();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *s, vec![gs]);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = g.iter().zip(y).map(|(gg, yy)| gg * yy * (1.0 - yy)).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga = g.iter().zip(y).map(|(gg, yy)| gg * (1.0 - yy * yy)).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let xv = self.value(*a);
                    let ga = g.iter().zip(xv).map(|(gg, &x)| gg * gelu_grad(x)).collect();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softmax(a) | Op::CausalSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let s = dot(yr, gr);
                        for j in 0..cols {
                            ga[r * cols + j] = yr[j] * (gr[j] - s);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let s: f64 = gr.iter().sum();
                        for j in 0..cols {
                            ga[r * cols + j] = gr[j] - y[r * cols + j].exp() * s;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let gv = self.value(*gain);
                    let mut gx = vec![0.0; rows * cols];
                    let mut gg = vec![0.0; cols];
                    let mut gb = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..cols {
                            let d = gr[j] * gv[j];
                            mean_d += d;
                            mean_dh += d * hr[j];
                            gg[j] += gr[j] * hr[j];
                            gb[j] += gr[j];
                        }
                        mean_d /= cols as f64;
                        mean_dh /= cols as f64;
                        for j in 0..cols {
                            let d = gr[j] * gv[j];
                            gx[r * cols + j] = inv_std[r] * (d - mean_d - hr[j] * mean_dh);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gain, gg);
                    accumulate(&mut grads, *bias, gb);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (pr, pc) = self.shape(p);
                        let mut gp = Vec::with_capacity(pr * pc);
                        for r in 0..pr {
                            gp.extend_from_slice(&g[r * cols + offset..r * cols + offset + pc]);
                        }
                        accumulate(&mut grads, p, gp);
                        offset += pc;
                    }
                }
                Op::StackRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        accumulate(&mut grads, p, g[offset..offset + n].to_vec());
                        offset += n;
                    }
                }
                Op::SliceCols { a, start } => {
                    let (ar, ac) = self.shape(*a);
                    let mut ga = vec![0.0; ar * ac];
                    for r in 0..ar {
                        ga[r * ac + start..r * ac + start + cols].copy_from_slice(&g[r * cols..(r + 1) * cols]);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceRows { a, start } => {
                    let (ar, ac) = self.shape(*a);
                    let mut ga = vec![0.0; ar * ac];
                    ga[start * ac..(start + rows) * ac].copy_from_slice(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    accumulate(&mut grads, *a, vec![g[0]; n]);
                }
                Op::Pick { a, idx } => {
                    let n = self.value(*a).len();
                    let mut ga = vec![0.0; n];
                    ga[*idx] = g[0];
                    accumulate(&mut grads, *a, ga);
                }
                Op::AddN(parts) => {
                    for &p in parts {
                        accumulate(&mut grads, p, g.clone());
                    }
                }
            }
        }
        Ok(out)
    }

    fn needs_grad(&self, v: Var) -> bool {
        match self.nodes[v.0].op {
            Op::Const => false,
            Op::Param(id) => self.store.get(id).kind != ParamKind::Frozen,
            _ => true,
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yy, xx) in y.iter_mut().zip(x) {
        *yy += a * xx;
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in xs.iter_mut() {
        *x /= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences of `f` w.r.t. every scalar of every non-frozen param.
    fn check(store: &mut ParamStore, f: impl Fn(&mut Tape) -> Var) {
        let tape_grads = {
            let mut tape = Tape::new(store);
            let loss = f(&mut tape);
            tape.backward(loss).unwrap()
        };
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            if store.get(id).kind == ParamKind::Frozen {
                continue;
            }
            for i in 0..store.get(id).data.len() {
                let orig = store.get(id).data[i];
                let h = 1e-6;
                store.get_mut(id).data[i] = orig + h;
                let up = {
                    let mut t = Tape::new(store);
                    let l = f(&mut t);
                    t.scalar(l)
                };
                store.get_mut(id).data[i] = orig - h;
                let down = {
                    let mut t = Tape::new(store);
                    let l = f(&mut t);
                    t.scalar(l)
                };
                store.get_mut(id).data[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = tape_grads.scalar(store, id, i);
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                assert!(err < 1e-6, "{} [{i}]: fd {fd} vs analytic {an}", store.get(id).name);
            }
        }
    }

    #[test]
    fn square_sum_gradient_is_two_x() {
        let mut store = ParamStore::new();
        let x = store.add("x", 1, 3, ParamKind::Dense, vec![1.0, -2.0, 0.5]);
        let mut tape = Tape::new(&store);
        let v = tape.param(x);
        let sq = tape.mul(v, v);
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.dense(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_on_empty_tape_is_an_error() {
        let store = ParamStore::new();
        let tape = Tape::new(&store);
        assert!(matches!(tape.backward(Var(0)), Err(Error::BackwardBeforeForward)));
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let x = store.normal("x", 3, 4, 1.0, &mut rng);
        let w = store.normal("w", 5, 4, 1.0, &mut rng);
        let b = store.normal("b", 1, 5, 1.0, &mut rng);
        let g = store.normal("g", 1, 5, 1.0, &mut rng);
        let bb = store.normal("bb", 1, 5, 1.0, &mut rng);
        let tbl = store.uniform_bound("tbl", 6, 5, 1.0, ParamKind::Sparse, &mut rng);
        let tok = store.normal("tok", 4, 5, 1.0, &mut rng);
        store.uniform_bound("frozen", 2, 5, 1.0, ParamKind::Frozen, &mut rng);
        check(&mut store, |t| {
            let xv = t.param(x);
            let wv = t.param(w);
            let bv = t.param(b);
            let h = t.linear(xv, wv, Some(bv)); // 3x5
            let h = t.gelu(h);
            let gv = t.param(g);
            let bbv = t.param(bb);
            let h = t.layer_norm(h, gv, bbv);
            let sc = t.matmul_t(h, h); // 3x3
            let att = t.causal_softmax(sc);
            let mixed = t.matmul(att, h); // 3x5
            let r0 = t.row(mixed, 2);
            let e1 = t.gather(tbl, 3);
            let e2 = t.gather(tok, 1);
            let e3 = t.gather(store_frozen(t), 1);
            let s = t.dot(r0, e1);
            let sg = t.sigmoid(s);
            let scaled = t.scale_by(e2, sg);
            let th = t.tanh(scaled);
            let both = t.concat_cols(&[th, e3]);
            let sl = t.slice_cols(both, 2, 6);
            let sm = t.softmax(sl);
            let ls = t.log_softmax(sl);
            let pk = t.pick(ls, 4);
            let prod = t.mul(sm, sl);
            let st = t.stack_rows(&[prod, sl]);
            let tot = t.sum(st);
            let d = t.sub(tot, pk);
            let a = t.affine(d, 0.5, 1.0);
            let e = t.add_n(&[a, pk, s]);
            let m = t.add(e, sg);
            m
        });
    }

    fn store_frozen(t: &Tape) -> ParamId {
        t.store().id("frozen").unwrap()
    }

    #[test]
    fn frozen_and_untouched_rows_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let tbl = store.uniform_bound("tbl", 10, 3, 1.0, ParamKind::Sparse, &mut rng);
        let fz = store.uniform_bound("fz", 2, 3, 1.0, ParamKind::Frozen, &mut rng);
        let mut tape = Tape::new(&store);
        let a = tape.gather(tbl, 4);
        let f = tape.gather(fz, 0);
        let p = tape.mul(a, f);
        let l = tape.sum(p);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.sparse_rows(tbl).count(), 1);
        assert!(g.sparse_row(tbl, 4).is_some());
        assert!(g.dense(fz).is_none());
        for r in (0..10).filter(|&r| r != 4) {
            for c in 0..3 {
                assert_eq!(g.scalar(&store, tbl, r * 3 + c), 0.0);
            }
        }
    }

    #[test]
    fn layer_norm_of_zero_is_bias() {
        let mut store = ParamStore::new();
        let g = store.ones("g", 1, 4);
        let b = store.add("b", 1, 4, ParamKind::Dense, vec![0.1, 0.2, 0.3, 0.4]);
        let mut tape = Tape::new(&store);
        let z = tape.zeros(1, 4);
        let gv = tape.param(g);
        let bv = tape.param(b);
        let y = tape.layer_norm(z, gv, bv);
        assert_eq!(tape.value(y), &[0.1, 0.2, 0.3, 0.4]);
    }
}
