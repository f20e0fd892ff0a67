//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] borrows a [`ParamStore`] for the duration of one forward/backward
//! pass. Every operation appends a node; [`Graph::backward`] walks the nodes in
//! reverse and accumulates gradients into every node and parameter reachable
//! from the loss. Shape errors are programming errors and panic.

use crate::matrix::{matmul, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics if `name` is already registered.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total count of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }
}

/// Parameter gradients produced by one backward pass, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { grads: vec![None; store.len()] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Matrix> {
        self.grads.get_mut(id.0).and_then(Option::as_mut)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter().map(|(_, g)| g.squared_norm()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    /// Adds `other` into `self` (used to sum gradients of several losses).
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.add_assign(t),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Sliding-window geometry for [`Graph::im2col`]. Input rows are `seqs`
/// contiguous blocks of `t_in` frames each.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub seqs: usize,
    pub t_in: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1dGeom {
    pub fn t_out(&self) -> usize {
        assert!(self.t_in + 2 * self.pad >= self.kernel, "kernel wider than padded input");
        (self.t_in + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

enum Value {
    Owned(Matrix),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    MulRow { a: Var, row: Var },
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Sqrt(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    CrossEntropySum { logits: Var, targets: Vec<Option<usize>>, probs: Matrix },
    Gather { table: Var, ids: Vec<usize> },
    ConcatCols(Vec<Var>),
    SliceCols { a: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceRows { a: Var, start: usize },
    Im2Col { x: Var, geom: Conv1dGeom },
    RepeatRows { x: Var, factor: usize },
    TimeDiff { x: Var, seqs: usize },
    CausalAttention { q: Var, k: Var, v: Var, seqs: usize, t: usize, heads: usize, probs: Vec<f64> },
    StopGrad,
    StraightThrough(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// One forward pass. See the module docs.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    stop_values: Vec<Matrix>,
    frozen_stops: Option<Vec<Matrix>>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            stop_values: Vec::new(),
            frozen_stops: None,
        }
    }

    /// A graph whose `k`-th [`stop_grad`](Self::stop_grad) returns `frozen[k]`
    /// instead of its input value. Re-evaluating a perturbed forward this way
    /// yields a function whose true derivative is the surrogate gradient that
    /// stop-gradient boundaries define, which is what finite differences need.
    pub fn with_frozen_stops(store: &'s ParamStore, frozen: Vec<Matrix>) -> Self {
        let mut g = Self::new(store);
        g.frozen_stops = Some(frozen);
        g
    }

    /// Values produced by every `stop_grad` so far, in call order.
    pub fn stop_values(&self) -> &[Matrix] {
        &self.stop_values
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(id) => self.store.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf that is not a parameter (e.g. to probe gradients w.r.t. an input).
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node { value: Value::Param(id), op: Op::Leaf, needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)`; `ta`/`tb` select transposition.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let out = matmul(self.value(a), ta, self.value(b), tb);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul { a, b, ta, tb }, ng)
    }

    /// `x · w + b` with `w: in × out` and `b: 1 × out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// `a + row` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.shape(), (1, av.cols()), "add_row width mismatch");
        let mut out = av.clone();
        let r = rv.data();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow { a, row }, ng)
    }

    /// `a ⊙ row` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.shape(), (1, av.cols()), "mul_row width mismatch");
        let mut out = av.clone();
        let r = rv.data();
        for i in 0..out.rows() {
            for (o, g) in out.row_mut(i).iter_mut().zip(r) {
                *o *= g;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::MulRow { a, row }, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::sqrt);
        let ng = self.ng(a);
        self.push(out, Op::Sqrt(a), ng)
    }

    /// Row-wise standardization `(x − mean) / sqrt(var + eps)` (population variance, no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, v) in out.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let ng = self.ng(x);
        self.push(out, Op::LayerNorm { x, inv_std }, ng)
    }

    /// Layer normalization followed by a per-column gain and bias.
    pub fn layer_norm_affine(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let n = self.layer_norm(x, eps);
        let s = self.mul_row(n, gain);
        self.add_row(s, bias)
    }

    /// Sum over rows with a target of `−log softmax(logits)[target]`; rows whose
    /// target is `None` contribute nothing. Returns a `1 × 1` node.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = self.value(logits);
        let (rows, cols) = lv.shape();
        assert_eq!(targets.len(), rows, "one target per logit row required");
        let mut probs = Matrix::zeros(rows, cols);
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            assert!(t < cols, "target {t} out of range {cols}");
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[t];
            for (p, v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let ng = self.ng(logits);
        self.push(Matrix::scalar(total), Op::CrossEntropySum { logits, targets: targets.to_vec(), probs }, ng)
    }

    /// Selects rows of `table` by index.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Matrix::zeros(ids.len(), tv.cols());
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < tv.rows(), "gather index {id} out of range {}", tv.rows());
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        let ng = self.ng(table);
        self.push(out, Op::Gather { table, ids: ids.to_vec() }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            let w = pv.cols();
            for r in 0..rows {
                out.row_mut(r)[off..off + w].copy_from_slice(pv.row(r));
            }
            off += w;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "slice_cols out of range");
        let mut out = Matrix::zeros(av.rows(), len);
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(out, Op::SliceCols { a, start }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_rows(start, len);
        let ng = self.ng(a);
        self.push(out, Op::SliceRows { a, start }, ng)
    }

    /// Unfolds each sequence into sliding windows: output row `(s, t)` is the
    /// concatenation of input frames `t·stride − pad + j` for `j < kernel`
    /// (zeros outside the sequence). A convolution is then a plain matmul.
    pub fn im2col(&mut self, x: Var, geom: Conv1dGeom) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        assert_eq!(xv.rows(), geom.seqs * geom.t_in, "im2col row count mismatch");
        let t_out = geom.t_out();
        let mut out = Matrix::zeros(geom.seqs * t_out, geom.kernel * c);
        for s in 0..geom.seqs {
            for t in 0..t_out {
                let dst = out.row_mut(s * t_out + t);
                for j in 0..geom.kernel {
                    let src = (t * geom.stride + j) as isize - geom.pad as isize;
                    if src >= 0 && (src as usize) < geom.t_in {
                        dst[j * c..(j + 1) * c].copy_from_slice(xv.row(s * geom.t_in + src as usize));
                    }
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Im2Col { x, geom }, ng)
    }

    /// Repeats every row `factor` times in place (nearest-neighbour temporal upsampling).
    pub fn repeat_rows(&mut self, x: Var, factor: usize) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(xv.rows() * factor, xv.cols());
        for r in 0..xv.rows() {
            for f in 0..factor {
                out.row_mut(r * factor + f).copy_from_slice(xv.row(r));
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::RepeatRows { x, factor }, ng)
    }

    /// Forward frame differences within each of `seqs` equal-length sequences.
    pub fn time_diff(&mut self, x: Var, seqs: usize) -> Var {
        let xv = self.value(x);
        assert!(seqs > 0 && xv.rows() % seqs == 0, "time_diff row count not divisible by seqs");
        let t = xv.rows() / seqs;
        assert!(t >= 2, "time_diff needs at least two frames");
        let mut out = Matrix::zeros(seqs * (t - 1), xv.cols());
        for s in 0..seqs {
            for j in 0..t - 1 {
                let (a, b) = (xv.row(s * t + j), xv.row(s * t + j + 1));
                for ((o, x0), x1) in out.row_mut(s * (t - 1) + j).iter_mut().zip(a).zip(b) {
                    *o = x1 - x0;
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::TimeDiff { x, seqs }, ng)
    }

    /// Multi-head scaled dot-product attention with a strict causal mask.
    /// `q`, `k`, `v` are `(seqs·t) × d` with heads laid out as contiguous column blocks.
    /// Position `i` attends to positions `j ≤ i` of its own sequence only; masked
    /// positions are never read.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, seqs: usize, t: usize, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        assert_eq!(qv.shape(), (seqs * t, d));
        assert_eq!(kv.shape(), qv.shape());
        assert_eq!(vv.shape(), qv.shape());
        assert!(heads > 0 && d % heads == 0, "model width {d} not divisible by {heads} heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(seqs * t, d);
        let mut probs = vec![0.0; seqs * heads * t * t];
        let mut scores = vec![0.0; t];
        for s in 0..seqs {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..t {
                    let qi = &qv.row(s * t + i)[c0..c0 + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &kv.row(s * t + j)[c0..c0 + dh];
                        let sc = dot(qi, kj) * scale;
                        scores[j] = sc;
                        max = max.max(sc);
                    }
                    let mut z = 0.0;
                    for sc in &mut scores[..=i] {
                        *sc = (*sc - max).exp();
                        z += *sc;
                    }
                    let base = ((s * heads + h) * t + i) * t;
                    let orow = &mut out.row_mut(s * t + i)[c0..c0 + dh];
                    for j in 0..=i {
                        let p = scores[j] / z;
                        probs[base + j] = p;
                        let vj = &vv.row(s * t + j)[c0..c0 + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(out, Op::CausalAttention { q, k, v, seqs, t, heads, probs }, ng)
    }

    /// Identity in the forward pass, blocks gradients in the backward pass.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let k = self.stop_values.len();
        let value = match &self.frozen_stops {
            Some(frozen) => {
                let f = frozen.get(k).unwrap_or_else(|| panic!("no frozen value for stop_grad #{k}")).clone();
                assert_eq!(f.shape(), self.value(a).shape(), "frozen stop_grad #{k} shape mismatch");
                f
            }
            None => self.value(a).clone(),
        };
        self.stop_values.push(value.clone());
        self.push(value, Op::StopGrad, false)
    }

    /// Straight-through estimator: the value is `to` (bit-exact), the gradient
    /// flows unchanged to `from` and never to `to`. Equivalent to
    /// `from + stop_grad(to − from)`; in frozen mode the recorded offset
    /// `to − from` is replayed on top of the current `from`.
    pub fn straight_through(&mut self, from: Var, to: Var) -> Var {
        let k = self.stop_values.len();
        let (fv, tv) = (self.value(from), self.value(to));
        assert_eq!(fv.shape(), tv.shape(), "straight_through shape mismatch");
        let (value, offset) = match &self.frozen_stops {
            Some(frozen) => {
                let off = frozen.get(k).unwrap_or_else(|| panic!("no frozen value for stop #{k}")).clone();
                (fv.zip_map(&off, |a, b| a + b), off)
            }
            None => (tv.clone(), tv.zip_map(fv, |a, b| a - b)),
        };
        self.stop_values.push(offset);
        let ng = self.ng(from);
        self.push(value, Op::StraightThrough(from), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        assert!(!av.is_empty(), "mean of empty matrix");
        let out = Matrix::scalar(av.mean());
        let ng = self.ng(a);
        self.push(out, Op::Mean(a), ng)
    }

    /// Sum of each row as an `n × 1` column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Matrix::from_vec(av.rows(), 1, av.iter_rows().map(|r| r.iter().sum()).collect());
        let ng = self.ng(a);
        self.push(out, Op::RowSum(a), ng)
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean(sq)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Backward {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(&node.op, idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut params = Gradients::zeros_like(self.store);
        for (pid, var) in self.param_vars.iter().enumerate() {
            if let Some(v) = var {
                params.grads[pid] = grads[v.0].take();
            }
        }
        Backward { nodes: grads, params }
    }

    fn backprop_node(&self, op: &Op, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, m: Matrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            debug_assert_eq!(m.shape(), self.value(v).shape(), "gradient shape mismatch at node {}", v.0);
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&m),
                slot @ None => *slot = Some(m),
            }
        };
        match op {
            Op::Leaf | Op::StopGrad => {}
            Op::StraightThrough(from) => acc(*from, g.clone()),
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let da = if *ta { matmul(bv, *tb, g, true) } else { matmul(g, false, bv, !*tb) };
                    acc(*a, da);
                }
                if self.ng(*b) {
                    let db = if *tb { matmul(g, true, av, *ta) } else { matmul(av, !*ta, g, false) };
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    acc(*a, g.zip_map(bv, |x, y| x * y));
                }
                if self.ng(*b) {
                    acc(*b, g.zip_map(av, |x, y| x * y));
                }
            }
            Op::AddRow { a, row } => {
                acc(*a, g.clone());
                if self.ng(*row) {
                    acc(*row, col_sums(g));
                }
            }
            Op::MulRow { a, row } => {
                let (av, rv) = (self.value(*a), self.value(*row));
                if self.ng(*a) {
                    let mut da = g.clone();
                    for r in 0..da.rows() {
                        for (d, s) in da.row_mut(r).iter_mut().zip(rv.data()) {
                            *d *= s;
                        }
                    }
                    acc(*a, da);
                }
                if self.ng(*row) {
                    acc(*row, col_sums(&g.zip_map(av, |x, y| x * y)));
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Relu(a) => acc(*a, g.zip_map(self.value(*a), |gx, x| if x > 0.0 { gx } else { 0.0 })),
            Op::Gelu(a) => acc(*a, g.zip_map(self.value(*a), |gx, x| gx * gelu_grad(x))),
            Op::Sqrt(a) => {
                let out = self.own(idx);
                acc(*a, g.zip_map(out, |gx, y| gx * 0.5 / y));
            }
            Op::LayerNorm { x, inv_std } => {
                let xhat = self.own(idx);
                let cols = xhat.cols();
                let mut dx = Matrix::zeros(xhat.rows(), cols);
                for r in 0..xhat.rows() {
                    let (gr, xr) = (g.row(r), xhat.row(r));
                    let mg = gr.iter().sum::<f64>() / cols as f64;
                    let mgx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for ((d, gv), xv) in dx.row_mut(r).iter_mut().zip(gr).zip(xr) {
                        *d = inv_std[r] * (gv - mg - xv * mgx);
                    }
                }
                acc(*x, dx);
            }
            Op::CrossEntropySum { logits, targets, probs } => {
                let s = g.item();
                let mut dl = probs.clone();
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        let row = dl.row_mut(r);
                        row[*t] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= s;
                        }
                    }
                }
                acc(*logits, dl);
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let mut dt = Matrix::zeros(tv.rows(), tv.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (d, x) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
                acc(*table, dt);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.ng(p) {
                        let mut dp = Matrix::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        acc(p, dp);
                    }
                    off += w;
                }
            }
            Op::SliceCols { a, start } => {
                let av = self.value(*a);
                let mut da = Matrix::zeros(av.rows(), av.cols());
                let w = g.cols();
                for r in 0..g.rows() {
                    da.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                }
                acc(*a, da);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).rows();
                    if self.ng(p) {
                        acc(p, g.slice_rows(off, n));
                    }
                    off += n;
                }
            }
            Op::SliceRows { a, start } => {
                let av = self.value(*a);
                let mut da = Matrix::zeros(av.rows(), av.cols());
                let c = av.cols();
                da.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                acc(*a, da);
            }
            Op::Im2Col { x, geom } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let t_out = geom.t_out();
                let mut dx = Matrix::zeros(xv.rows(), c);
                for s in 0..geom.seqs {
                    for t in 0..t_out {
                        let src = g.row(s * t_out + t);
                        for j in 0..geom.kernel {
                            let pos = (t * geom.stride + j) as isize - geom.pad as isize;
                            if pos >= 0 && (pos as usize) < geom.t_in {
                                let dst = dx.row_mut(s * geom.t_in + pos as usize);
                                for (d, v) in dst.iter_mut().zip(&src[j * c..(j + 1) * c]) {
                                    *d += v;
                                }
                            }
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::RepeatRows { x, factor } => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let dst = dx.row_mut(r);
                    for f in 0..*factor {
                        for (d, v) in dst.iter_mut().zip(g.row(r * factor + f)) {
                            *d += v;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::TimeDiff { x, seqs } => {
                let xv = self.value(*x);
                let t = xv.rows() / seqs;
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for s in 0..*seqs {
                    for j in 0..t - 1 {
                        let gr = g.row(s * (t - 1) + j);
                        for (d, v) in dx.row_mut(s * t + j + 1).iter_mut().zip(gr) {
                            *d += v;
                        }
                        for (d, v) in dx.row_mut(s * t + j).iter_mut().zip(gr) {
                            *d -= v;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::CausalAttention { q, k, v, seqs, t, heads, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (seqs, t, heads) = (*seqs, *t, *heads);
                let d = qv.cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Matrix::zeros(seqs * t, d);
                let mut dk = Matrix::zeros(seqs * t, d);
                let mut dv = Matrix::zeros(seqs * t, d);
                let mut dp = vec![0.0; t];
                for s in 0..seqs {
                    for h in 0..heads {
                        let c0 = h * dh;
                        for i in 0..t {
                            let base = ((s * heads + h) * t + i) * t;
                            let go = &g.row(s * t + i)[c0..c0 + dh];
                            let mut weighted = 0.0;
                            for j in 0..=i {
                                let p = probs[base + j];
                                let vj = &vv.row(s * t + j)[c0..c0 + dh];
                                dp[j] = dot(go, vj);
                                weighted += p * dp[j];
                                for (d, x) in dv.row_mut(s * t + j)[c0..c0 + dh].iter_mut().zip(go) {
                                    *d += p * x;
                                }
                            }
                            let qi = &qv.row(s * t + i)[c0..c0 + dh];
                            for j in 0..=i {
                                let ds = probs[base + j] * (dp[j] - weighted) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &kv.row(s * t + j)[c0..c0 + dh];
                                for (d, x) in dq.row_mut(s * t + i)[c0..c0 + dh].iter_mut().zip(kj) {
                                    *d += ds * x;
                                }
                                for (d, x) in dk.row_mut(s * t + j)[c0..c0 + dh].iter_mut().zip(qi) {
                                    *d += ds * x;
                                }
                            }
                        }
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                acc(*a, Matrix::filled(av.rows(), av.cols(), g.item()));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                acc(*a, Matrix::filled(av.rows(), av.cols(), g.item() / av.len() as f64));
            }
            Op::RowSum(a) => {
                let av = self.value(*a);
                let mut da = Matrix::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    let gr = g.get(r, 0);
                    da.row_mut(r).iter_mut().for_each(|d| *d = gr);
                }
                acc(*a, da);
            }
        }
    }

    fn own(&self, idx: usize) -> &Matrix {
        match &self.nodes[idx].value {
            Value::Owned(m) => m,
            Value::Param(id) => self.store.get(*id),
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Backward {
    nodes: Vec<Option<Matrix>>,
    params: Gradients,
}

impl Backward {
    /// Gradient w.r.t. an arbitrary node (`None` if the loss does not depend on it).
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> &Gradients {
        &self.params
    }

    pub fn into_params(self) -> Gradients {
        self.params
    }
}

fn col_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
