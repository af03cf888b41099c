//! Reverse-mode gradient engine over a fixed vocabulary of graph and dense ops.
//!
//! A [`Tape`] records every operation of a forward pass. Parameters enter the
//! tape by name from a [`ParamSet`]; everything else is a constant, which is
//! how stop-gradient is expressed. [`Tape::backward`] walks the record in
//! reverse and returns gradients for the parameter leaves only.
//!
//! Every buffer the tape holds is reported to an optional [`MemCounter`], so
//! the peak of concurrently live activation and gradient bytes for a step can
//! be measured deterministically.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::Cell;

use crate::error::{Error, Result};
use crate::graph::NormalizedGraph;
use crate::params::ParamSet;
use crate::tensor::{dot, Matrix};

/// Live/peak byte counter shared by every tape of one step.
#[derive(Debug, Default)]
pub struct MemCounter {
    live: Cell<usize>,
    peak: Cell<usize>,
}

impl MemCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&self, bytes: usize) {
        let live = self.live.get() + bytes;
        self.live.set(live);
        if live > self.peak.get() {
            self.peak.set(live);
        }
    }

    pub fn free(&self, bytes: usize) {
        self.live.set(self.live.get().saturating_sub(bytes));
    }

    pub fn live(&self) -> usize {
        self.live.get()
    }

    pub fn peak(&self) -> usize {
        self.peak.get()
    }

    pub fn reset(&self) {
        self.live.set(0);
        self.peak.set(0);
    }
}

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<'g> {
    Constant,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    SpMM { adj: &'g NormalizedGraph, x: Var },
    Relu(Var),
    Elu(Var),
    LeakyRelu(Var, f64),
    Prelu(Var, Var),
    StandardizeCols { x: Var, inv_std: Vec<f64> },
    StandardizeRows { x: Var, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    HeadMean { x: Var, heads: usize },
    HeadScores { x: Var, a: Var },
    EdgeLogits { adj: &'g NormalizedGraph, dst: Var, src: Var },
    EdgeSoftmax { adj: &'g NormalizedGraph, logits: Var },
    EdgeAggregate { adj: &'g NormalizedGraph, alpha: Var, x: Var },
    SelectRows { x: Var, idx: Vec<usize> },
    RowCosine { a: Var, b: Var, eps: f64 },
    L2NormalizeRows { x: Var, eps: f64 },
    GatherDot { a: Var, b: Var, idx: Vec<usize>, k: usize },
    Mean(Var),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Matrix },
}

impl Op<'_> {
    fn saved_bytes(&self) -> usize {
        let f = size_of::<f64>();
        let u = size_of::<usize>();
        match self {
            Op::StandardizeCols { inv_std, .. } | Op::StandardizeRows { inv_std, .. } => inv_std.len() * f,
            Op::SelectRows { idx, .. } | Op::GatherDot { idx, .. } => idx.len() * u,
            Op::CrossEntropy { probs, targets, .. } => probs.nbytes() + targets.len() * u,
            _ => 0,
        }
    }
}

struct Node<'g> {
    value: Matrix,
    op: Op<'g>,
    needs_grad: bool,
    bytes: usize,
}

/// Gradients of the parameter leaves, keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<String, Matrix>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds every gradient into the matching buffer of `params`.
    pub fn accumulate_into(&self, params: &mut ParamSet) -> Result<()> {
        for (name, g) in &self.grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Structure(format!("gradient for unknown parameter {name}")))?;
            p.grad.axpy(1.0, g);
        }
        Ok(())
    }
}

/// Recorded forward pass.
pub struct Tape<'g> {
    nodes: Vec<Node<'g>>,
    param_leaves: BTreeMap<String, Var>,
    counter: Option<&'g MemCounter>,
    counted: usize,
}

impl<'g> Default for Tape<'g> {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for Tape<'_> {
    fn drop(&mut self) {
        if let Some(c) = self.counter {
            c.free(self.counted);
        }
    }
}

fn shape_err<T>(what: &str, a: (usize, usize), b: (usize, usize)) -> Result<T> {
    Err(Error::Shape(format!("{what}: {a:?} vs {b:?}")))
}

impl<'g> Tape<'g> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_leaves: BTreeMap::new(), counter: None, counted: 0 }
    }

    pub fn with_counter(counter: &'g MemCounter) -> Self {
        Self { nodes: Vec::new(), param_leaves: BTreeMap::new(), counter: Some(counter), counted: 0 }
    }

    fn track(&mut self, bytes: usize) {
        if let Some(c) = self.counter {
            c.alloc(bytes);
            self.counted += bytes;
        }
    }

    fn untrack(&mut self, bytes: usize) {
        if let Some(c) = self.counter {
            c.free(bytes);
            self.counted -= bytes;
        }
    }

    fn push(&mut self, value: Matrix, op: Op<'g>, needs_grad: bool) -> Var {
        let bytes = value.nbytes() + op.saved_bytes();
        self.track(bytes);
        self.nodes.push(Node { value, op, needs_grad, bytes });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, value: Matrix, op: Op<'g>) -> Var {
        let ng = self.needs(x);
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, value: Matrix, op: Op<'g>) -> Var {
        let ng = self.needs(a) || self.needs(b);
        self.push(value, op, ng)
    }

    #[inline]
    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes currently held by this tape.
    pub fn live_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.bytes).sum()
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Leaf for a named parameter. Repeated requests return the same leaf so
    /// gradients from every use accumulate. Buffers enter as constants.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_leaves.get(name) {
            return Ok(v);
        }
        let p = params.get(name).ok_or_else(|| Error::Structure(format!("missing parameter {name}")))?;
        let var = if p.kind.trainable() {
            self.push(p.value.clone(), Op::Param, true)
        } else {
            self.push(p.value.clone(), Op::Constant, false)
        };
        self.param_leaves.insert(name.into(), var);
        Ok(var)
    }

    /// Like [`Tape::param`] but the value never receives a gradient.
    pub fn frozen_param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        let v = params.value(name)?.clone();
        Ok(self.constant(v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return shape_err("matmul", sa, sb);
        }
        let v = self.value(a).matmul(self.value(b));
        Ok(self.binary(a, b, v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return shape_err("matmul_nt", sa, sb);
        }
        let v = self.value(a).matmul_nt(self.value(b));
        Ok(self.binary(a, b, v, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return shape_err("add", sa, sb);
        }
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.binary(a, b, v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return shape_err("sub", sa, sb);
        }
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.binary(a, b, v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return shape_err("mul", sa, sb);
        }
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.binary(a, b, v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|a| a * c);
        self.unary(x, v, Op::Scale(x, c))
    }

    /// Adds a `1×D` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        if sr != (1, sx.1) {
            return shape_err("add_row", sx, sr);
        }
        let mut v = self.value(x).clone();
        let r = self.value(row).as_slice().to_vec();
        for i in 0..v.rows() {
            v.row_mut(i).iter_mut().zip(&r).for_each(|(a, b)| *a += b);
        }
        Ok(self.binary(x, row, v, Op::AddRow(x, row)))
    }

    /// Multiplies every row of `x` elementwise by a `1×D` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        if sr != (1, sx.1) {
            return shape_err("mul_row", sx, sr);
        }
        let mut v = self.value(x).clone();
        let r = self.value(row).as_slice().to_vec();
        for i in 0..v.rows() {
            v.row_mut(i).iter_mut().zip(&r).for_each(|(a, b)| *a *= b);
        }
        Ok(self.binary(x, row, v, Op::MulRow(x, row)))
    }

    /// Weighted neighborhood aggregation `out_i = Σ_j w_ij x_j` over `Â`.
    pub fn spmm(&mut self, adj: &'g NormalizedGraph, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.0 != adj.num_nodes() {
            return shape_err("spmm", (adj.num_nodes(), adj.num_nodes()), sx);
        }
        let xv = self.value(x);
        let mut out = Matrix::zeros(sx.0, sx.1);
        for i in 0..sx.0 {
            let (cols, w) = adj.row(i);
            let o = out.row_mut(i);
            for (&j, &wij) in cols.iter().zip(w) {
                o.iter_mut().zip(xv.row(j)).for_each(|(a, b)| *a += wij * b);
            }
        }
        Ok(self.unary(x, out, Op::SpMM { adj, x }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        self.unary(x, v, Op::Relu(x))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| if a > 0.0 { a } else { libm::expm1(a) });
        self.unary(x, v, Op::Elu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self.value(x).map(|a| if a > 0.0 { a } else { slope * a });
        self.unary(x, v, Op::LeakyRelu(x, slope))
    }

    /// PReLU with a single learned `1×1` slope.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        if self.shape(slope) != (1, 1) {
            return shape_err("prelu slope", self.shape(slope), (1, 1));
        }
        let a = self.value(slope).item();
        let v = self.value(x).map(|z| if z > 0.0 { z } else { a * z });
        Ok(self.binary(x, slope, v, Op::Prelu(x, slope)))
    }

    /// Per-column standardization over rows: `(x - μ) / √(σ² + ε)`.
    pub fn standardize_cols(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let means = xv.col_means();
        let vars = xv.col_vars(&means);
        let inv_std: Vec<f64> = vars.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for (c, a) in out.row_mut(i).iter_mut().enumerate() {
                *a = (*a - means[c]) * inv_std[c];
            }
        }
        self.unary(x, out, Op::StandardizeCols { x, inv_std })
    }

    /// Per-row standardization over columns.
    pub fn standardize_rows(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        let d = xv.cols().max(1) as f64;
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / d;
            let s = 1.0 / libm::sqrt(var + eps);
            row.iter_mut().for_each(|a| *a = (*a - mean) * s);
            inv_std.push(s);
        }
        self.unary(x, out, Op::StandardizeRows { x, inv_std })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.shape(p).0);
        if let Some(&p) = parts.iter().find(|&&p| self.shape(p).0 != rows) {
            return shape_err("concat_cols", self.shape(p), (rows, 0));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for &p in parts {
                let r = self.value(p).row(i);
                out.row_mut(i)[off..off + r.len()].copy_from_slice(r);
                off += r.len();
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Averages `heads` equal-width column blocks.
    pub fn head_mean(&mut self, x: Var, heads: usize) -> Result<Var> {
        let (n, hd) = self.shape(x);
        if heads == 0 || hd % heads != 0 {
            return Err(Error::Shape(format!("{hd} columns do not split into {heads} heads")));
        }
        let d = hd / heads;
        let xv = self.value(x);
        let out = Matrix::from_fn(n, d, |i, c| (0..heads).map(|h| xv[(i, h * d + c)]).sum::<f64>() / heads as f64);
        Ok(self.unary(x, out, Op::HeadMean { x, heads }))
    }

    /// Per-head attention scores: `x` is `N×(H·d)`, `a` is `H×d`, result
    /// `N×H` with `s[i,h] = x_i^h · a_h`.
    pub fn head_scores(&mut self, x: Var, a: Var) -> Result<Var> {
        let (n, hd) = self.shape(x);
        let (heads, d) = self.shape(a);
        if heads * d != hd {
            return shape_err("head_scores", (n, hd), (heads, d));
        }
        let (xv, av) = (self.value(x), self.value(a));
        let out = Matrix::from_fn(n, heads, |i, h| dot(&xv.row(i)[h * d..(h + 1) * d], av.row(h)));
        Ok(self.binary(x, a, out, Op::HeadScores { x, a }))
    }

    /// Arc logits `e[(i→j), h] = dst[i,h] + src[j,h]` over the arcs of `Â`.
    pub fn edge_logits(&mut self, adj: &'g NormalizedGraph, dst: Var, src: Var) -> Result<Var> {
        let (sd, ss) = (self.shape(dst), self.shape(src));
        if sd != ss || sd.0 != adj.num_nodes() {
            return shape_err("edge_logits", sd, ss);
        }
        let heads = sd.1;
        let (dv, sv) = (self.value(dst), self.value(src));
        let mut out = Matrix::zeros(adj.num_arcs(), heads);
        let offsets = adj.row_offsets();
        for i in 0..adj.num_nodes() {
            for e in offsets[i]..offsets[i + 1] {
                let j = adj.col_indices()[e];
                for h in 0..heads {
                    out[(e, h)] = dv[(i, h)] + sv[(j, h)];
                }
            }
        }
        Ok(self.binary(dst, src, out, Op::EdgeLogits { adj, dst, src }))
    }

    /// Softmax of arc logits over each node's neighborhood, per head.
    pub fn edge_softmax(&mut self, adj: &'g NormalizedGraph, logits: Var) -> Result<Var> {
        let sl = self.shape(logits);
        if sl.0 != adj.num_arcs() {
            return shape_err("edge_softmax", sl, (adj.num_arcs(), sl.1));
        }
        let mut out = self.value(logits).clone();
        let offsets = adj.row_offsets();
        for i in 0..adj.num_nodes() {
            let r = offsets[i]..offsets[i + 1];
            for h in 0..sl.1 {
                let max = r.clone().map(|e| out[(e, h)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for e in r.clone() {
                    let v = libm::exp(out[(e, h)] - max);
                    out[(e, h)] = v;
                    z += v;
                }
                for e in r.clone() {
                    out[(e, h)] /= z;
                }
            }
        }
        Ok(self.unary(logits, out, Op::EdgeSoftmax { adj, logits }))
    }

    /// `out[i, h-block] = Σ_j α[(i→j), h] · x[j, h-block]`.
    pub fn edge_aggregate(&mut self, adj: &'g NormalizedGraph, alpha: Var, x: Var) -> Result<Var> {
        let (sa, sx) = (self.shape(alpha), self.shape(x));
        let heads = sa.1;
        if sa.0 != adj.num_arcs() || sx.0 != adj.num_nodes() || heads == 0 || sx.1 % heads != 0 {
            return shape_err("edge_aggregate", sa, sx);
        }
        let d = sx.1 / heads;
        let (av, xv) = (self.value(alpha), self.value(x));
        let mut out = Matrix::zeros(sx.0, sx.1);
        let offsets = adj.row_offsets();
        for i in 0..sx.0 {
            for e in offsets[i]..offsets[i + 1] {
                let j = adj.col_indices()[e];
                for h in 0..heads {
                    let w = av[(e, h)];
                    let src = &xv.row(j)[h * d..(h + 1) * d];
                    out.row_mut(i)[h * d..(h + 1) * d].iter_mut().zip(src).for_each(|(o, s)| *o += w * s);
                }
            }
        }
        Ok(self.binary(alpha, x, out, Op::EdgeAggregate { adj, alpha, x }))
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let n = self.shape(x).0;
        if let Some(&index) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Index { index, num_nodes: n });
        }
        let v = self.value(x).select_rows(idx);
        Ok(self.unary(x, v, Op::SelectRows { x, idx: idx.to_vec() }))
    }

    /// Row-wise cosine similarity (`N×1`). Each norm is clamped below at `eps`.
    pub fn row_cosine(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return shape_err("row_cosine", sa, sb);
        }
        let (av, bv) = (self.value(a), self.value(b));
        let out = Matrix::from_fn(sa.0, 1, |i, _| {
            let (x, y) = (av.row(i), bv.row(i));
            let nx = libm::sqrt(dot(x, x)).max(eps);
            let ny = libm::sqrt(dot(y, y)).max(eps);
            dot(x, y) / (nx * ny)
        });
        Ok(self.binary(a, b, out, Op::RowCosine { a, b, eps }))
    }

    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let mut out = self.value(x).clone();
        for i in 0..out.rows() {
            let r = out.row_mut(i);
            let n = libm::sqrt(dot(r, r)).max(eps);
            r.iter_mut().for_each(|v| *v /= n);
        }
        self.unary(x, out, Op::L2NormalizeRows { x, eps })
    }

    /// `out[i, c] = a_i · b_{idx[i·k + c]}` for an `N×k` index table.
    pub fn gather_dot(&mut self, a: Var, b: Var, idx: &[usize], k: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 || idx.len() != sa.0 * k {
            return shape_err("gather_dot", sa, sb);
        }
        if let Some(&index) = idx.iter().find(|&&j| j >= sb.0) {
            return Err(Error::Index { index, num_nodes: sb.0 });
        }
        let (av, bv) = (self.value(a), self.value(b));
        let out = Matrix::from_fn(sa.0, k, |i, c| dot(av.row(i), bv.row(idx[i * k + c])));
        Ok(self.binary(a, b, out, Op::GatherDot { a, b, idx: idx.to_vec(), k }))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = if v.is_empty() { 0.0 } else { v.sum() / v.len() as f64 };
        self.unary(x, Matrix::scalar(m), Op::Mean(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.unary(x, Matrix::scalar(s), Op::Sum(x))
    }

    /// Mean softmax cross-entropy over rows. Entries where `valid` is false
    /// are excluded from the softmax (treated as `-∞`).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], valid: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if targets.len() != r {
            return shape_err("cross_entropy targets", (r, c), (targets.len(), 1));
        }
        if valid.is_some_and(|m| m.len() != r * c) {
            return shape_err("cross_entropy mask", (r, c), (valid.map_or(0, |m| m.len()), 1));
        }
        let lv = self.value(logits);
        let mut probs = Matrix::zeros(r, c);
        let mut total = 0.0;
        for i in 0..r {
            let t = targets[i];
            if t >= c || valid.is_some_and(|m| !m[i * c + t]) {
                return Err(Error::Index { index: t, num_nodes: c });
            }
            let ok = |j: usize| valid.is_none_or(|m| m[i * c + j]);
            let row = lv.row(i);
            let max = (0..c).filter(|&j| ok(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in (0..c).filter(|&j| ok(j)) {
                let e = libm::exp(row[j] - max);
                probs[(i, j)] = e;
                z += e;
            }
            probs.row_mut(i).iter_mut().for_each(|p| *p /= z);
            total += max + libm::log(z) - row[t];
        }
        let loss = if r == 0 { 0.0 } else { total / r as f64 };
        Ok(self.unary(logits, Matrix::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }))
    }

    /// Back-propagates from a `1×1` output and returns parameter gradients.
    ///
    /// Each intermediate gradient buffer is released as soon as it has been
    /// pushed to its inputs.
    pub fn backward(&mut self, output: Var) -> Result<Gradients> {
        if self.shape(output) != (1, 1) {
            return Err(Error::Engine(format!("backward needs a scalar output, got {:?}", self.shape(output))));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed = Matrix::scalar(1.0);
        self.track(seed.nbytes());
        grads[output.0] = Some(seed);
        let mut out = Gradients::default();
        let leaf_names: BTreeMap<usize, String> = self.param_leaves.iter().map(|(k, v)| (v.0, k.clone())).collect();

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let gbytes = g.nbytes();
            if !self.nodes[idx].needs_grad {
                self.untrack(gbytes);
                continue;
            }
            if let Op::Param = self.nodes[idx].op {
                if let Some(name) = leaf_names.get(&idx) {
                    out.grads.insert(name.clone(), g);
                }
                self.untrack(gbytes);
                continue;
            }
            let contributions = self.local_grads(idx, &g)?;
            self.untrack(gbytes);
            drop(g);
            for (v, cg) in contributions {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.axpy(1.0, &cg),
                    slot @ None => {
                        self.track(cg.nbytes());
                        *slot = Some(cg);
                    }
                }
            }
        }
        Ok(out)
    }

    fn local_grads(&self, idx: usize, g: &Matrix) -> Result<Vec<(Var, Matrix)>> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let y = &node.value;
        Ok(match &node.op {
            Op::Constant | Op::Param => Vec::new(),
            Op::MatMul(a, b) => vec![(*a, g.matmul_nt(val(*b))), (*b, val(*a).matmul_tn(g))],
            Op::MatMulNt(a, b) => vec![(*a, g.matmul(val(*b))), (*b, g.matmul_tn(val(*a)))],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |x, y| x * y)),
                (*b, g.zip_map(val(*a), |x, y| x * y)),
            ],
            Op::Scale(x, c) => vec![(*x, g.map(|v| v * c))],
            Op::AddRow(x, r) => {
                let sums = Matrix::from_vec(1, g.cols(), col_sums(g)).expect("width");
                vec![(*x, g.clone()), (*r, sums)]
            }
            Op::MulRow(x, r) => {
                let rv = val(*r).as_slice();
                let mut gx = g.clone();
                for i in 0..gx.rows() {
                    gx.row_mut(i).iter_mut().zip(rv).for_each(|(a, b)| *a *= b);
                }
                let gr = Matrix::from_vec(1, g.cols(), col_sums(&g.zip_map(val(*x), |a, b| a * b))).expect("width");
                vec![(*x, gx), (*r, gr)]
            }
            Op::SpMM { adj, x } => {
                let mut gx = Matrix::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let (cols, w) = adj.row(i);
                    for (&j, &wij) in cols.iter().zip(w) {
                        gx.row_mut(j).iter_mut().zip(g.row(i)).for_each(|(a, b)| *a += wij * b);
                    }
                }
                vec![(*x, gx)]
            }
            Op::Relu(x) => vec![(*x, g.zip_map(val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }))],
            Op::Elu(x) => vec![(*x, g.zip_map(val(*x), |gv, xv| if xv > 0.0 { gv } else { gv * libm::exp(xv) }))],
            Op::LeakyRelu(x, s) => vec![(*x, g.zip_map(val(*x), |gv, xv| if xv > 0.0 { gv } else { gv * s }))],
            Op::Prelu(x, s) => {
                let a = val(*s).item();
                let xv = val(*x);
                let gx = g.zip_map(xv, |gv, z| if z > 0.0 { gv } else { gv * a });
                let gs: f64 = g.as_slice().iter().zip(xv.as_slice()).filter(|(_, &z)| z <= 0.0).map(|(gv, z)| gv * z).sum();
                vec![(*x, gx), (*s, Matrix::scalar(gs))]
            }
            Op::StandardizeCols { x, inv_std } => {
                let n = g.rows() as f64;
                let sum_g = col_sums(g);
                let sum_gy = col_sums(&g.zip_map(y, |a, b| a * b));
                let mut gx = Matrix::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    for c in 0..g.cols() {
                        gx[(i, c)] = inv_std[c] * (g[(i, c)] - sum_g[c] / n - y[(i, c)] * sum_gy[c] / n);
                    }
                }
                vec![(*x, gx)]
            }
            Op::StandardizeRows { x, inv_std } => {
                let d = g.cols() as f64;
                let mut gx = Matrix::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let (gr, yr) = (g.row(i), y.row(i));
                    let sg: f64 = gr.iter().sum();
                    let sgy = dot(gr, yr);
                    for c in 0..g.cols() {
                        gx[(i, c)] = inv_std[i] * (gr[c] - sg / d - yr[c] * sgy / d);
                    }
                }
                vec![(*x, gx)]
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = val(p).cols();
                    res.push((p, Matrix::from_fn(g.rows(), w, |i, c| g[(i, off + c)])));
                    off += w;
                }
                res
            }
            Op::HeadMean { x, heads } => {
                let d = g.cols();
                let h = *heads as f64;
                vec![(*x, Matrix::from_fn(g.rows(), d * heads, |i, c| g[(i, c % d)] / h))]
            }
            Op::HeadScores { x, a } => {
                let (xv, av) = (val(*x), val(*a));
                let (heads, d) = av.shape();
                let gx = Matrix::from_fn(xv.rows(), xv.cols(), |i, c| g[(i, c / d)] * av[(c / d, c % d)]);
                let mut ga = Matrix::zeros(heads, d);
                for i in 0..xv.rows() {
                    for h in 0..heads {
                        let gi = g[(i, h)];
                        ga.row_mut(h).iter_mut().zip(&xv.row(i)[h * d..(h + 1) * d]).for_each(|(o, v)| *o += gi * v);
                    }
                }
                vec![(*x, gx), (*a, ga)]
            }
            Op::EdgeLogits { adj, dst, src } => {
                let heads = g.cols();
                let n = adj.num_nodes();
                let mut gd = Matrix::zeros(n, heads);
                let mut gs = Matrix::zeros(n, heads);
                let offsets = adj.row_offsets();
                for i in 0..n {
                    for e in offsets[i]..offsets[i + 1] {
                        let j = adj.col_indices()[e];
                        for h in 0..heads {
                            gd[(i, h)] += g[(e, h)];
                            gs[(j, h)] += g[(e, h)];
                        }
                    }
                }
                vec![(*dst, gd), (*src, gs)]
            }
            Op::EdgeSoftmax { adj, logits } => {
                let heads = g.cols();
                let mut gl = Matrix::zeros(g.rows(), heads);
                let offsets = adj.row_offsets();
                for i in 0..adj.num_nodes() {
                    let r = offsets[i]..offsets[i + 1];
                    for h in 0..heads {
                        let s: f64 = r.clone().map(|e| y[(e, h)] * g[(e, h)]).sum();
                        for e in r.clone() {
                            gl[(e, h)] = y[(e, h)] * (g[(e, h)] - s);
                        }
                    }
                }
                vec![(*logits, gl)]
            }
            Op::EdgeAggregate { adj, alpha, x } => {
                let (av, xv) = (val(*alpha), val(*x));
                let heads = av.cols();
                let d = xv.cols() / heads;
                let mut ga = Matrix::zeros(av.rows(), heads);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                let offsets = adj.row_offsets();
                for i in 0..adj.num_nodes() {
                    for e in offsets[i]..offsets[i + 1] {
                        let j = adj.col_indices()[e];
                        for h in 0..heads {
                            let gi = &g.row(i)[h * d..(h + 1) * d];
                            ga[(e, h)] = dot(gi, &xv.row(j)[h * d..(h + 1) * d]);
                            let w = av[(e, h)];
                            gx.row_mut(j)[h * d..(h + 1) * d].iter_mut().zip(gi).for_each(|(o, v)| *o += w * v);
                        }
                    }
                }
                vec![(*alpha, ga), (*x, gx)]
            }
            Op::SelectRows { x, idx } => {
                let xv = val(*x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for (r, &i) in idx.iter().enumerate() {
                    gx.row_mut(i).iter_mut().zip(g.row(r)).for_each(|(a, b)| *a += b);
                }
                vec![(*x, gx)]
            }
            Op::RowCosine { a, b, eps } => {
                let (av, bv) = (val(*a), val(*b));
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                for i in 0..av.rows() {
                    let (x, z) = (av.row(i), bv.row(i));
                    let (rx, rz) = (libm::sqrt(dot(x, x)), libm::sqrt(dot(z, z)));
                    let (nx, nz) = (rx.max(*eps), rz.max(*eps));
                    let cos = y[(i, 0)];
                    let gi = g[(i, 0)];
                    for c in 0..x.len() {
                        let mut dx = z[c] / (nx * nz);
                        let mut dz = x[c] / (nx * nz);
                        if rx > *eps {
                            dx -= cos * x[c] / (nx * nx);
                        }
                        if rz > *eps {
                            dz -= cos * z[c] / (nz * nz);
                        }
                        ga[(i, c)] = gi * dx;
                        gb[(i, c)] = gi * dz;
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::L2NormalizeRows { x, eps } => {
                let xv = val(*x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for i in 0..xv.rows() {
                    let r = libm::sqrt(dot(xv.row(i), xv.row(i)));
                    let n = r.max(*eps);
                    let yg = if r > *eps { dot(y.row(i), g.row(i)) } else { 0.0 };
                    for c in 0..xv.cols() {
                        gx[(i, c)] = (g[(i, c)] - y[(i, c)] * yg) / n;
                    }
                }
                vec![(*x, gx)]
            }
            Op::GatherDot { a, b, idx, k } => {
                let (av, bv) = (val(*a), val(*b));
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                for i in 0..av.rows() {
                    for c in 0..*k {
                        let j = idx[i * k + c];
                        let gic = g[(i, c)];
                        if gic == 0.0 {
                            continue;
                        }
                        ga.row_mut(i).iter_mut().zip(bv.row(j)).for_each(|(o, v)| *o += gic * v);
                        gb.row_mut(j).iter_mut().zip(av.row(i)).for_each(|(o, v)| *o += gic * v);
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Mean(x) => {
                let xv = val(*x);
                let n = xv.len().max(1) as f64;
                vec![(*x, Matrix::filled(xv.rows(), xv.cols(), g.item() / n))]
            }
            Op::Sum(x) => {
                let xv = val(*x);
                vec![(*x, Matrix::filled(xv.rows(), xv.cols(), g.item()))]
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let r = probs.rows().max(1) as f64;
                let mut gl = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    gl[(i, t)] -= 1.0;
                }
                gl.scale_in_place(g.item() / r);
                vec![(*logits, gl)]
            }
        })
    }
}

fn col_sums(m: &Matrix) -> Vec<f64> {
    let mut s = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        s.iter_mut().zip(m.row(i)).for_each(|(a, b)| *a += b);
    }
    s
}

pub const GRAD_CHECK_FLOOR: f64 = 1e-7;

/// Compares tape gradients of a scalar objective with central differences
/// of step `h`, for every trainable parameter in `params`.
///
/// Returns `(name, relative error)` pairs, with the error measured as
/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, GRAD_CHECK_FLOOR)`
/// over the whole tensor. The floor keeps gradients that vanish exactly
/// (e.g. a bias followed by batch norm) from being judged on rounding noise.
pub fn gradient_check<'g, F>(params: &ParamSet, h: f64, objective: F) -> Result<Vec<(String, f64)>>
where
    F: Fn(&mut Tape<'g>, &ParamSet) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = objective(&mut tape, params)?;
    let grads = tape.backward(out)?;
    drop(tape);
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let out = objective(&mut tape, p)?;
        Ok(tape.value(out).item())
    };
    let mut work = params.clone();
    let mut report = Vec::new();
    for (name, p) in params.iter().filter(|(_, p)| p.kind.trainable()) {
        let zero = Matrix::zeros(p.value.rows(), p.value.cols());
        let analytic = grads.get(name).unwrap_or(&zero);
        let mut diff = 0.0;
        let (mut na, mut nn) = (0.0, 0.0);
        for k in 0..p.value.len() {
            let orig = p.value.as_slice()[k];
            let entry = |w: &mut ParamSet, v: f64| w.get_mut(name).expect("cloned").value.as_mut_slice()[k] = v;
            entry(&mut work, orig + h);
            let up = eval(&work)?;
            entry(&mut work, orig - h);
            let down = eval(&work)?;
            entry(&mut work, orig);
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.as_slice()[k];
            diff += (a - numeric) * (a - numeric);
            na += a * a;
            nn += numeric * numeric;
        }
        let scale = libm::sqrt(na.max(nn)).max(GRAD_CHECK_FLOOR);
        let rel = libm::sqrt(diff) / scale;
        report.push((name.clone(), rel));
    }
    Ok(report)
}
