//! A small reverse-mode automatic differentiation tape over [`Matrix`].
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! gradients for every node that requires them. Nodes whose inputs are all
//! constants (or frozen parameters) never require gradients, so frozen
//! sub-networks cost a forward pass only.

use std::collections::HashMap;
use std::rc::Rc;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Matrix};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Gelu(Var),
    Softmax(Var),
    NormalizeRows(Var),
    LayerNorm(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MeanRows(Var),
    RepeatRows(Var),
    Gather(Var, Vec<usize>),
    Sum(Var),
    Nll(Var, usize, Option<Rc<Vec<bool>>>),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Forward tape.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
    linear_debug: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(512), params: HashMap::new(), grad_enabled: true, linear_debug: false }
    }

    /// A tape that never records gradient requirements (evaluation mode).
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    /// Replace every nonlinearity that can be switched off (GELU, layer
    /// normalisation) by the identity. Used by the gradient-check harness.
    pub fn set_linear_debug(&mut self, on: bool) {
        self.linear_debug = on;
    }

    pub fn linear_debug(&self) -> bool {
        self.linear_debug
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad: requires_grad && self.grad_enabled });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf for a parameter, shared across repeated uses in the same tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, store.is_trainable(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let mut value = va.clone();
        value.add_assign(vb);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// `a + 1·row` where `row` is `1×cols`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.rows(), 1, "add_row expects a row vector");
        assert_eq!(va.cols(), vr.cols(), "add_row width mismatch");
        let mut value = va.clone();
        let cols = va.cols();
        for chunk in value.data_mut().chunks_mut(cols) {
            for (x, b) in chunk.iter_mut().zip(vr.data()) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// Each row of `a` multiplied elementwise by `row`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.rows(), 1, "mul_row expects a row vector");
        assert_eq!(va.cols(), vr.cols(), "mul_row width mismatch");
        let mut value = va.clone();
        let cols = va.cols();
        for chunk in value.data_mut().chunks_mut(cols) {
            for (x, g) in chunk.iter_mut().zip(vr.data()) {
                *x *= g;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::MulRow(a, row), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Matrix::from_vec(va.rows(), va.cols(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// `a * s` for a 1×1 node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let value = self.value(a).scale(sv);
        let rg = self.rg(a) || self.rg(s);
        self.push(value, Op::ScaleBy(a, s), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        if self.linear_debug {
            return a;
        }
        let value = self.value(a).map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Row-wise softmax. `mask[i]` false forces entry `i` (row-major) to an
    /// exact zero probability. Each row needs at least one kept entry.
    pub fn softmax(&mut self, a: Var, mask: Option<Rc<Vec<bool>>>) -> Var {
        let value = softmax_rows(self.value(a), mask.as_deref().map(Vec::as_slice));
        let rg = self.rg(a);
        self.push(value, Op::Softmax(a), rg)
    }

    /// L2-normalise each row. Zero rows stay zero, so their cosine against
    /// anything is 0.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut value = va.clone();
        for r in 0..va.rows() {
            let row = value.row_mut(r);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                for x in row.iter_mut() {
                    *x /= norm;
                }
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::NormalizeRows(a), rg)
    }

    /// Per-row standardisation `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        if self.linear_debug {
            return a;
        }
        let va = self.value(a);
        let mut value = va.clone();
        for r in 0..va.rows() {
            let row = value.row_mut(r);
            let (mean, inv) = row_stats(row);
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::LayerNorm(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_rows(&mats);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.row_mut(r)[offset..offset + vp.cols()].copy_from_slice(vp.row(r));
            }
            offset += vp.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice_rows(start, len);
        let rg = self.rg(a);
        self.push(value, Op::SliceRows(a, start), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.cols(), "slice_cols out of bounds");
        let value = Matrix::from_fn(va.rows(), len, |r, c| va.get(r, start + c));
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).mean_rows();
        let rg = self.rg(a);
        self.push(value, Op::MeanRows(a), rg)
    }

    /// Repeat a 1×c row `n` times.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.rows(), 1, "repeat_rows expects a row vector");
        let mut data = Vec::with_capacity(n * va.cols());
        for _ in 0..n {
            data.extend_from_slice(va.data());
        }
        let value = Matrix::from_vec(n, va.cols(), data);
        let rg = self.rg(a);
        self.push(value, Op::RepeatRows(a), rg)
    }

    /// Rows of `table` selected by `indices`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Var {
        let vt = self.value(table);
        let mut data = Vec::with_capacity(indices.len() * vt.cols());
        for &i in indices {
            data.extend_from_slice(vt.row(i));
        }
        let value = Matrix::from_vec(indices.len(), vt.cols(), data);
        let rg = self.rg(table);
        self.push(value, Op::Gather(table, indices.to_vec()), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    /// `-log softmax(logits)[target]` for a 1×K row of logits, with optional
    /// mask of admissible entries.
    pub fn nll(&mut self, logits: Var, target: usize, mask: Option<Rc<Vec<bool>>>) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.rows(), 1, "nll expects a single row of logits");
        assert!(target < vl.cols(), "nll target out of range");
        if let Some(m) = &mask {
            assert!(m[target], "nll target is masked out");
        }
        let p = softmax_rows(vl, mask.as_deref().map(Vec::as_slice));
        let value = Matrix::scalar(-p.data()[target].ln());
        let value = if value.item().is_finite() {
            value
        } else {
            Matrix::scalar(nll_direct(vl, target, mask.as_deref().map(Vec::as_slice)))
        };
        let rg = self.rg(logits);
        self.push(value, Op::Nll(logits, target, mask), rg)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar node");
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if self.rg(loss) {
            grads[loss.0] = Some(Matrix::scalar(1.0));
        }
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Matrix>], v: Var, f: impl FnOnce(&mut Matrix)) {
        if !self.rg(v) {
            return;
        }
        let (r, c) = self.value(v).shape();
        let slot = grads[v.0].get_or_insert_with(|| Matrix::zeros(r, c));
        f(slot);
    }

    fn backprop_node(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate_with(grads, *a, |ga| {
                    gemm_nt(g.data(), vb.data(), ga.data_mut(), g.rows(), g.cols(), vb.rows())
                });
                self.accumulate_with(grads, *b, |gb| {
                    gemm_tn(va.data(), g.data(), gb.data_mut(), va.rows(), va.cols(), g.cols())
                });
            }
            Op::MatMulT(a, b) => {
                // C = A Bᵀ: dA = dC B, dB = dCᵀ A
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate_with(grads, *a, |ga| {
                    gemm_nn(g.data(), vb.data(), ga.data_mut(), g.rows(), g.cols(), vb.cols())
                });
                self.accumulate_with(grads, *b, |gb| {
                    gemm_tn(g.data(), va.data(), gb.data_mut(), g.rows(), g.cols(), va.cols())
                });
            }
            Op::Add(a, b) => {
                self.accumulate_with(grads, *a, |ga| ga.add_assign(g));
                self.accumulate_with(grads, *b, |gb| gb.add_assign(g));
            }
            Op::AddRow(a, row) => {
                self.accumulate_with(grads, *a, |ga| ga.add_assign(g));
                self.accumulate_with(grads, *row, |gr| {
                    for r in 0..g.rows() {
                        for (o, v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::MulRow(a, row) => {
                let (va, vr) = (self.value(*a), self.value(*row));
                self.accumulate_with(grads, *a, |ga| {
                    for r in 0..g.rows() {
                        for ((o, gv), w) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(vr.data()) {
                            *o += gv * w;
                        }
                    }
                });
                self.accumulate_with(grads, *row, |gr| {
                    for r in 0..g.rows() {
                        for ((o, gv), x) in gr.data_mut().iter_mut().zip(g.row(r)).zip(va.row(r)) {
                            *o += gv * x;
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate_with(grads, *a, |ga| {
                    for ((o, gv), y) in ga.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                        *o += gv * y;
                    }
                });
                self.accumulate_with(grads, *b, |gb| {
                    for ((o, gv), x) in gb.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *o += gv * x;
                    }
                });
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::ScaleBy(a, s) => {
                let sv = self.value(*s).item();
                self.accumulate(grads, *a, g.scale(sv));
                let va = self.value(*a);
                let ds: f64 = g.data().iter().zip(va.data()).map(|(x, y)| x * y).sum();
                self.accumulate(grads, *s, Matrix::scalar(ds));
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                self.accumulate_with(grads, *a, |ga| {
                    for ((o, gv), &x) in ga.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        *o += gv * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                    }
                });
            }
            Op::Softmax(a) => {
                let y = &node.value;
                self.accumulate_with(grads, *a, |ga| {
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for ((o, &yy), &gg) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o += yy * (gg - dot);
                        }
                    }
                });
            }
            Op::NormalizeRows(a) => {
                let (x, y) = (self.value(*a), &node.value);
                self.accumulate_with(grads, *a, |ga| {
                    for r in 0..x.rows() {
                        let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm == 0.0 {
                            continue;
                        }
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for ((o, &yy), &gg) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o += (gg - yy * dot) / norm;
                        }
                    }
                });
            }
            Op::LayerNorm(a) => {
                let (x, y) = (self.value(*a), &node.value);
                self.accumulate_with(grads, *a, |ga| {
                    let n = x.cols() as f64;
                    for r in 0..x.rows() {
                        let (_, inv) = row_stats(x.row(r));
                        let (yr, gr) = (y.row(r), g.row(r));
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n;
                        for ((o, &yy), &gg) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o += inv * (gg - mean_g - yy * mean_gy);
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    self.accumulate_with(grads, p, |gp| {
                        let src = &g.data()[start * g.cols()..(start + rows) * g.cols()];
                        for (o, v) in gp.data_mut().iter_mut().zip(src) {
                            *o += v;
                        }
                    });
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    self.accumulate_with(grads, p, |gp| {
                        for r in 0..g.rows() {
                            for (o, v) in gp.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + cols]) {
                                *o += v;
                            }
                        }
                    });
                    offset += cols;
                }
            }
            Op::SliceRows(a, start) => {
                self.accumulate_with(grads, *a, |ga| {
                    let cols = ga.cols();
                    let dst = &mut ga.data_mut()[start * cols..(start + g.rows()) * cols];
                    for (o, v) in dst.iter_mut().zip(g.data()) {
                        *o += v;
                    }
                });
            }
            Op::SliceCols(a, start) => {
                self.accumulate_with(grads, *a, |ga| {
                    for r in 0..g.rows() {
                        for (o, v) in ga.row_mut(r)[*start..*start + g.cols()].iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::MeanRows(a) => {
                let rows = self.value(*a).rows();
                let inv = 1.0 / rows as f64;
                self.accumulate_with(grads, *a, |ga| {
                    for r in 0..rows {
                        for (o, v) in ga.row_mut(r).iter_mut().zip(g.data()) {
                            *o += v * inv;
                        }
                    }
                });
            }
            Op::RepeatRows(a) => {
                self.accumulate_with(grads, *a, |ga| {
                    for r in 0..g.rows() {
                        for (o, v) in ga.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Gather(table, indices) => {
                self.accumulate_with(grads, *table, |gt| {
                    for (k, &i) in indices.iter().enumerate() {
                        for (o, v) in gt.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.accumulate_with(grads, *a, |ga| {
                    for o in ga.data_mut() {
                        *o += gv;
                    }
                });
            }
            Op::Nll(logits, target, mask) => {
                let gv = g.item();
                let p = softmax_rows(self.value(*logits), mask.as_deref().map(Vec::as_slice));
                self.accumulate_with(grads, *logits, |gl| {
                    for (i, (o, pi)) in gl.data_mut().iter_mut().zip(p.data()).enumerate() {
                        let onehot = if i == *target { 1.0 } else { 0.0 };
                        *o += gv * (pi - onehot);
                    }
                });
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every trainable parameter used on the tape.
    pub fn param_grads(&self, graph: &Graph) -> Vec<(ParamId, Matrix)> {
        let mut out: Vec<(ParamId, Matrix)> =
            graph.params.iter().filter_map(|(&id, &v)| self.get(v).map(|g| (id, g.clone()))).collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

/// Numerically stable row softmax with an optional keep-mask.
pub fn softmax_rows(x: &Matrix, mask: Option<&[bool]>) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let cols = x.cols();
    for r in 0..x.rows() {
        let keep = |c: usize| mask.is_none_or(|m| m[r * cols + c]);
        let row = x.row(r);
        let max = (0..cols).filter(|&c| keep(c)).map(|c| row[c]).fold(f64::NEG_INFINITY, f64::max);
        let orow = out.row_mut(r);
        let mut total = 0.0;
        for c in 0..cols {
            if keep(c) {
                let e = (row[c] - max).exp();
                orow[c] = e;
                total += e;
            }
        }
        for v in orow.iter_mut() {
            *v /= total;
        }
    }
    out
}

fn nll_direct(logits: &Matrix, target: usize, mask: Option<&[bool]>) -> f64 {
    let row = logits.data();
    let keep = |c: usize| mask.is_none_or(|m| m[c]);
    let max = (0..row.len()).filter(|&c| keep(c)).map(|c| row[c]).fold(f64::NEG_INFINITY, f64::max);
    let lse = (0..row.len()).filter(|&c| keep(c)).map(|c| (row[c] - max).exp()).sum::<f64>().ln() + max;
    lse - row[target]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&mut Graph, Var) -> Var, x0: Matrix) {
        let mut g = Graph::new();
        let x = g.push(x0.clone(), Op::Leaf, true);
        let y = build(&mut g, x);
        let loss = g.sum(y);
        let grads = g.backward(loss);
        let analytic = grads.get(x).cloned().unwrap_or_else(|| Matrix::zeros(x0.rows(), x0.cols()));
        let h = 1e-6;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.constant(xp);
                let y = build(&mut g, x);
                g.value(y).sum()
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!((a - num).abs() <= 1e-6 * (1.0 + a.abs()), "entry {i}: analytic {a} vs numeric {num}");
        }
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut s = seed;
        Matrix::from_fn(rows, cols, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let w = sample(3, 3, 11);
        fd_check(|g, x| g.gelu(x), sample(2, 3, 1));
        fd_check(
            |g, x| {
                let c = g.constant(w.clone());
                let s = g.softmax(x, None);
                g.matmul(s, c)
            },
            sample(2, 3, 2),
        );
        fd_check(
            |g, x| {
                let c = g.constant(w.clone());
                let n = g.normalize_rows(x);
                g.matmul(n, c)
            },
            sample(3, 3, 3),
        );
        fd_check(
            |g, x| {
                let c = g.constant(w.clone());
                let n = g.layer_norm(x);
                g.matmul(n, c)
            },
            sample(2, 3, 4),
        );
        fd_check(
            |g, x| {
                let c = g.constant(w.clone());
                let m = g.matmul_t(x, c);
                g.mul(m, m)
            },
            sample(2, 3, 5),
        );
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let w = sample(4, 2, 9);
        fd_check(
            |g, x| {
                let a = g.slice_rows(x, 1, 2);
                let b = g.slice_cols(x, 0, 2);
                let ab = g.matmul_t(a, a);
                let cat = g.concat_rows(&[ab, b]);
                g.mul(cat, cat)
            },
            sample(3, 2, 6),
        );
        fd_check(
            |g, x| {
                let m = g.mean_rows(x);
                let r = g.repeat_rows(m, 3);
                let c = g.constant(w.clone());
                let p = g.matmul(x, c);
                let q = g.gather(x, &[2, 0, 2]);
                let cat = g.concat_cols(&[r, q]);
                let s = g.sum(p);
                let scaled = g.scale_by(cat, s);
                g.mul(scaled, cat)
            },
            sample(3, 4, 7),
        );
    }

    #[test]
    fn nll_gradient_is_softmax_minus_onehot() {
        let mask = Rc::new(vec![true, false, true, true]);
        fd_check(|g, x| g.nll(x, 2, Some(mask.clone())), sample(1, 4, 8));
        let mut g = Graph::new();
        let x = g.constant(Matrix::row_vector(&[0.0, 0.0, 0.0]));
        let l = g.nll(x, 1, None);
        assert!((g.value(l).item() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_has_exact_zeros() {
        let x = Matrix::row_vector(&[1.0, 2.0, 3.0]);
        let p = softmax_rows(&x, Some(&[true, false, true]));
        assert_eq!(p.get(0, 1), 0.0);
        assert!((p.sum() - 1.0).abs() < 1e-15);
    }
}
