//! Tape-style reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation as a node appended after its parents, so node order is
//! already a topological order and [`Graph::backward`] is a single reverse sweep. Parameter
//! leaves borrow their values from a [`ParamStore`]; the graph only owns intermediate results.

use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{self, matmul_acc, matmul_t_into, matmul_tn_acc, Tensor};
use super::NnError;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Probabilities are clamped to this interval before taking logs in [`Graph::cross_entropy`].
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Param(ParamId),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LogSoftmax(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Row(Var, usize),
    SumRows(Var),
    SumAll(Var),
    Pick(Var, usize),
    CrossEntropy(Var, usize),
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::ConcatCols(_) => "concat",
            Op::SliceCols(..) => "slice_cols",
            Op::Row(..) => "row",
            Op::SumRows(_) => "sum_rows",
            Op::SumAll(_) => "sum",
            Op::Pick(..) => "pick",
            Op::CrossEntropy(..) => "cross_entropy",
            Op::Reshape(_) => "reshape",
        }
    }
}

struct Node {
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
    backward_done: bool,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self { store, nodes: Vec::new(), grads: Vec::new(), params: HashMap::new(), backward_done: false }
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

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    /// Gradient of the last backward root with respect to `v`, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var, NnError> {
        if !value.is_finite() {
            return Err(NnError::NumericalFault { op: op.name() });
        }
        let requires_grad = match &op {
            Op::Leaf | Op::Param(_) => true,
            Op::Constant => false,
            Op::MatMulT(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => self.rg(*a) || self.rg(*b),
            Op::ConcatCols(vs) => vs.iter().any(|v| self.rg(*v)),
            Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::SliceCols(a, _)
            | Op::Row(a, _)
            | Op::SumRows(a)
            | Op::SumAll(a)
            | Op::Pick(a, _)
            | Op::CrossEntropy(a, _)
            | Op::Reshape(a) => self.rg(*a),
        };
        self.nodes.push(Node { value: Some(value), op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input (gradients are recorded for it).
    pub fn leaf(&mut self, t: Tensor) -> Result<Var, NnError> {
        self.push(t, Op::Leaf)
    }

    /// Input excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Result<Var, NnError> {
        self.push(t, Op::Constant)
    }

    /// Copies the current value of `v` into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Result<Var, NnError> {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id), requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// `x · wᵀ` for `x: m×k`, `w: n×k`.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Result<Var, NnError> {
        let (m, k) = self.shape(x);
        let (n, k2) = self.shape(w);
        if k != k2 {
            return Err(NnError::ShapeMismatch { op: "matmul_t", left: (m, k), right: (n, k2) });
        }
        let mut out = vec![0.0; m * n];
        matmul_t_into(self.value(x).data(), m, k, self.value(w).data(), n, &mut out);
        self.push(Tensor::from_vec(m, n, out), Op::MatMulT(x, w))
    }

    /// `x · wᵀ + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var, NnError> {
        let wv = self.param(w);
        let bv = self.param(b);
        let xw = self.matmul_t(x, wv)?;
        self.add_row(xw, bv)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds the `1×n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (m, n) = self.shape(a);
        if self.shape(b) != (1, n) {
            return Err(NnError::ShapeMismatch { op: "add_row", left: (m, n), right: self.shape(b) });
        }
        let mut out = self.value(a).clone();
        let bd = self.value(b).data();
        for i in 0..m {
            for (o, bv) in out.row_mut(i).iter_mut().zip(bd) {
                *o += bv;
            }
        }
        self.push(out, Op::AddRow(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape("mul", a, b)?;
        let mut out = self.value(a).clone();
        for (o, bv) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= bv;
        }
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, NnError> {
        let mut out = self.value(a).clone();
        out.scale(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NnError> {
        let out = self.map(a, tensor::sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NnError> {
        let out = self.map(a, f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NnError> {
        let out = self.map_rows(a, tensor::softmax);
        self.push(out, Op::Softmax(a))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, NnError> {
        let out = self.map_rows(a, tensor::log_softmax);
        self.push(out, Op::LogSoftmax(a))
    }

    /// Horizontal concatenation of nodes with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let rows = match parts.first() {
            Some(v) => self.shape(*v).0,
            None => return Err(NnError::ShapeMismatch { op: "concat", left: (0, 0), right: (0, 0) }),
        };
        let mut cols = 0;
        for v in parts {
            let s = self.shape(*v);
            if s.0 != rows {
                return Err(NnError::ShapeMismatch { op: "concat", left: (rows, cols), right: s });
            }
            cols += s.1;
        }
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for v in parts {
                let src = self.value(*v).row(i);
                out.row_mut(i)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let (m, n) = self.shape(a);
        if start + len > n {
            return Err(NnError::ShapeMismatch { op: "slice_cols", left: (m, n), right: (start, len) });
        }
        let src = self.value(a);
        let mut out = Tensor::zeros(m, len);
        for i in 0..m {
            out.row_mut(i).copy_from_slice(&src.row(i)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var, NnError> {
        let (m, n) = self.shape(a);
        if i >= m {
            return Err(NnError::ShapeMismatch { op: "row", left: (m, n), right: (i, 0) });
        }
        let out = Tensor::row_vector(self.value(a).row(i).to_vec());
        self.push(out, Op::Row(a, i))
    }

    /// Column sums as a `1×n` row.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var, NnError> {
        let (m, n) = self.shape(a);
        let src = self.value(a);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(src.row(i)) {
                *o += v;
            }
        }
        self.push(Tensor::row_vector(out), Op::SumRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NnError> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::row_vector(vec![s]), Op::SumAll(a))
    }

    /// Element at flat (row-major) index as a 1×1 node.
    pub fn pick(&mut self, a: Var, idx: usize) -> Result<Var, NnError> {
        let t = self.value(a);
        if idx >= t.len() {
            return Err(NnError::ShapeMismatch { op: "pick", left: t.shape(), right: (idx, 0) });
        }
        let v = t.data()[idx];
        self.push(Tensor::row_vector(vec![v]), Op::Pick(a, idx))
    }

    /// `−ln(pred[label])` with `pred` clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]`.
    pub fn cross_entropy(&mut self, pred: Var, label: usize) -> Result<Var, NnError> {
        let t = self.value(pred);
        if t.rows() != 1 || label >= t.cols() {
            return Err(NnError::ShapeMismatch { op: "cross_entropy", left: t.shape(), right: (1, label) });
        }
        let p = t.data()[label].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        self.push(Tensor::row_vector(vec![-p.ln()]), Op::CrossEntropy(pred, label))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, NnError> {
        let t = self.value(a);
        if rows * cols != t.len() {
            return Err(NnError::ShapeMismatch { op: "reshape", left: t.shape(), right: (rows, cols) });
        }
        let out = t.clone().reshaped(rows, cols);
        self.push(out, Op::Reshape(a))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NnError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(NnError::ShapeMismatch { op, left: sa, right: sb });
        }
        Ok(())
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v = f(*v);
        }
        out
    }

    fn map_rows(&self, a: Var, f: impl Fn(&[f64]) -> Vec<f64>) -> Tensor {
        let src = self.value(a);
        let mut out = Tensor::zeros(src.rows(), src.cols());
        for i in 0..src.rows() {
            out.row_mut(i).copy_from_slice(&f(src.row(i)));
        }
        out
    }

    /// Clears recorded gradients so [`Graph::backward`] may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Reverse sweep from a scalar root. Returns the gradient of every parameter reached.
    pub fn backward(&mut self, root: Var) -> Result<Gradients, NnError> {
        if self.backward_done {
            return Err(NnError::BackwardTwice);
        }
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(NnError::NonScalarRoot(shape));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(Tensor::filled(1, 1, 1.0));

        let mut out = Gradients::new();
        for idx in (0..=root.0).rev() {
            let Some(g) = self.grads[idx].take() else { continue };
            let op = self.nodes[idx].op.clone();
            self.propagate(idx, &op, &g, &mut out);
            self.grads[idx] = Some(g);
        }
        Ok(out)
    }

    fn acc(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, idx: usize, op: &Op, g: &Tensor, out: &mut Gradients) {
        let this = Var(idx);
        match *op {
            Op::Leaf | Op::Constant => {}
            Op::Param(id) => out.accumulate(id, g),
            Op::MatMulT(x, w) => {
                let (m, k) = self.shape(x);
                let n = self.shape(w).0;
                if self.wants(x) {
                    let mut dx = vec![0.0; m * k];
                    matmul_acc(g.data(), m, n, self.value(w).data(), k, &mut dx);
                    self.acc(x, Tensor::from_vec(m, k, dx));
                }
                if self.wants(w) {
                    let mut dw = vec![0.0; n * k];
                    matmul_tn_acc(g.data(), m, n, self.value(x).data(), k, &mut dw);
                    self.acc(w, Tensor::from_vec(n, k, dw));
                }
            }
            Op::Add(a, b) => {
                self.acc(a, g.clone());
                self.acc(b, g.clone());
            }
            Op::AddRow(a, b) => {
                self.acc(a, g.clone());
                if self.wants(b) {
                    let mut db = vec![0.0; g.cols()];
                    for i in 0..g.rows() {
                        for (d, v) in db.iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    self.acc(b, Tensor::row_vector(db));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    let mut da = g.clone();
                    for (d, v) in da.data_mut().iter_mut().zip(self.value(b).data()) {
                        *d *= v;
                    }
                    self.acc(a, da);
                }
                if self.wants(b) {
                    let mut db = g.clone();
                    for (d, v) in db.data_mut().iter_mut().zip(self.value(a).data()) {
                        *d *= v;
                    }
                    self.acc(b, db);
                }
            }
            Op::Scale(a, s) => {
                let mut da = g.clone();
                da.scale(s);
                self.acc(a, da);
            }
            Op::Sigmoid(a) => {
                let mut da = g.clone();
                for (d, y) in da.data_mut().iter_mut().zip(self.value(this).data()) {
                    *d *= y * (1.0 - y);
                }
                self.acc(a, da);
            }
            Op::Tanh(a) => {
                let mut da = g.clone();
                for (d, y) in da.data_mut().iter_mut().zip(self.value(this).data()) {
                    *d *= 1.0 - y * y;
                }
                self.acc(a, da);
            }
            Op::Softmax(a) => {
                let y = self.value(this);
                let mut da = Tensor::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let inner: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((d, p), q) in da.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *d = p * (q - inner);
                    }
                }
                self.acc(a, da);
            }
            Op::LogSoftmax(a) => {
                let y = self.value(this);
                let mut da = Tensor::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let total: f64 = gr.iter().sum();
                    for ((d, ly), q) in da.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *d = q - ly.exp() * total;
                    }
                }
                self.acc(a, da);
            }
            Op::ConcatCols(ref parts) => {
                let mut off = 0;
                for v in parts {
                    let (m, n) = self.shape(*v);
                    if self.wants(*v) {
                        let mut dv = Tensor::zeros(m, n);
                        for i in 0..m {
                            dv.row_mut(i).copy_from_slice(&g.row(i)[off..off + n]);
                        }
                        self.acc(*v, dv);
                    }
                    off += n;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.shape(a);
                let mut da = Tensor::zeros(m, n);
                for i in 0..m {
                    da.row_mut(i)[start..start + g.cols()].copy_from_slice(g.row(i));
                }
                self.acc(a, da);
            }
            Op::Row(a, r) => {
                let (m, n) = self.shape(a);
                let mut da = Tensor::zeros(m, n);
                da.row_mut(r).copy_from_slice(g.data());
                self.acc(a, da);
            }
            Op::SumRows(a) => {
                let (m, n) = self.shape(a);
                let mut da = Tensor::zeros(m, n);
                for i in 0..m {
                    da.row_mut(i).copy_from_slice(g.data());
                }
                self.acc(a, da);
            }
            Op::SumAll(a) => {
                let (m, n) = self.shape(a);
                self.acc(a, Tensor::filled(m, n, g.data()[0]));
            }
            Op::Pick(a, i) => {
                let (m, n) = self.shape(a);
                let mut da = Tensor::zeros(m, n);
                da.data_mut()[i] = g.data()[0];
                self.acc(a, da);
            }
            Op::CrossEntropy(pred, label) => {
                let (m, n) = self.shape(pred);
                let p = self.value(pred).data()[label];
                let mut da = Tensor::zeros(m, n);
                if (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
                    da.data_mut()[label] = -g.data()[0] / p;
                }
                self.acc(pred, da);
            }
            Op::Reshape(a) => {
                let (m, n) = self.shape(a);
                self.acc(a, g.clone().reshaped(m, n));
            }
        }
    }
}
