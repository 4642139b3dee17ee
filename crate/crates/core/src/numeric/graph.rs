//! Reverse-mode differentiation over a per-forward-pass expression graph.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with
//! the computed value. [`Graph::backward`] walks the record in reverse and
//! accumulates `d root / d param` into each trainable [`Parameter`]'s `grad`.
//! The graph is built fresh for every forward pass and dropped afterwards.
//!
//! Values are 2-D matrices (`rows × cols`); vectors are single-row matrices
//! and scalars are `[1]`-shaped.
//!
//! [`Parameter`]: crate::numeric::Parameter

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numeric::tensor::gemm;
use crate::numeric::{ParamId, ParamStore, Phase, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which parameters receive gradients when the graph is differentiated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    Phase(Phase),
    Nothing,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Exp,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Exp => x.exp(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Exp => y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Act(Activation, Var),
    Clamp(Var, f64, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Gather(Var, Vec<usize>),
    SelectRows(Vec<bool>, Var, Var),
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    trainable: Trainable,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Graph {
    /// A graph in which every parameter is trainable.
    pub fn new() -> Self {
        Self::with_trainable(Trainable::All)
    }

    pub fn with_trainable(trainable: Trainable) -> Self {
        Self {
            nodes: Vec::with_capacity(1024),
            params: HashMap::new(),
            trainable,
        }
    }

    /// A graph that records values only; backward is a no-op.
    pub fn inference() -> Self {
        Self::with_trainable(Trainable::Nothing)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input. Always 2-D unless already scalar-shaped.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let value = as_matrix(value);
        self.push(value, Op::Leaf, false)
    }

    /// A copy of `v`'s value with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push(value, Op::Leaf, false)
    }

    /// The graph node for parameter `id`; repeated calls reuse one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let trainable = match self.trainable {
            Trainable::All => true,
            Trainable::Phase(phase) => p.group.phase() == phase,
            Trainable::Nothing => false,
        };
        let v = self.push(as_matrix(p.value.clone()), Op::Param(id), trainable);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let value = crate::numeric::matmul(ta, tb)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `a[r×c] + row[1×c]`, broadcasting the row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.len() != ta.cols() {
            return Err(shape_err("add_row", ta, tr));
        }
        let c = ta.cols();
        let mut value = ta.clone();
        for chunk in value.data_mut().chunks_mut(c) {
            for (x, b) in chunk.iter_mut().zip(tr.data()) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x * k);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x + k);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn activation(&mut self, kind: Activation, a: Var) -> Var {
        let value = self.value(a).map(|x| kind.apply(x));
        let rg = self.rg(a);
        self.push(value, Op::Act(kind, a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(Activation::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activation(Activation::Tanh, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.activation(Activation::Exp, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(Activation::Relu, a)
    }

    /// Elementwise clamp; gradient is zero where the input lies outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(value, Op::Clamp(a, lo, hi), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]), self.value(p)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(rows, total, data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start > end || end > t.cols() {
            return Err(Error::Index {
                op: "slice_cols",
                index: end,
                size: t.cols(),
            });
        }
        let rows = t.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..end]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(rows, end - start, data)?, Op::SliceCols(a, start), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", self.value(parts[0]), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(rows, cols, data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start > end || end > t.rows() {
            return Err(Error::Index {
                op: "slice_rows",
                index: end,
                size: t.rows(),
            });
        }
        let c = t.cols();
        let data = t.data()[start * c..end * c].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(end - start, c, data)?, Op::SliceRows(a, start), rg))
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let c = t.cols();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= t.rows() {
                return Err(Error::Index {
                    op: "gather",
                    index: id,
                    size: t.rows(),
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(Tensor::matrix(ids.len(), c, data)?, Op::Gather(table, ids.to_vec()), rg))
    }

    /// Row `i` from `a` where `mask[i]`, else from `b`.
    pub fn select_rows(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() || mask.len() != ta.rows() {
            return Err(shape_err("select_rows", ta, tb));
        }
        let c = ta.cols();
        let mut data = Vec::with_capacity(ta.len());
        for (r, &m) in mask.iter().enumerate() {
            data.extend_from_slice(if m { ta.row(r) } else { tb.row(r) });
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        debug_assert_eq!(value.cols(), c);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::SelectRows(mask.to_vec(), a, b), rg))
    }

    /// `Σ_r weights[r] · (−log softmax(logits[r])[targets[r]])`, stabilized by
    /// max-subtraction. Rows with zero weight contribute neither value nor gradient.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, v) = (t.rows(), t.cols());
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::Shape {
                op: "softmax_xent",
                left: t.shape().to_vec(),
                right: vec![targets.len(), weights.len()],
            });
        }
        let mut probs = vec![0.0; rows * v];
        let mut total = 0.0;
        for r in 0..rows {
            let target = targets[r];
            if target >= v {
                return Err(Error::Index {
                    op: "softmax_xent",
                    index: target,
                    size: v,
                });
            }
            let row = t.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            let pr = &mut probs[r * v..(r + 1) * v];
            for (p, &x) in pr.iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            for p in pr.iter_mut() {
                *p /= z;
            }
            if weights[r] != 0.0 {
                total += weights[r] * (z.ln() - (row[target] - max));
            }
        }
        let rg = self.rg(logits);
        let op = Op::SoftmaxXent {
            logits,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(total), op, rg))
    }

    /// Sum of all entries, as a `[1]` scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Accumulates `d root / d param` into every trainable parameter's grad.
    pub fn backward(&self, root: Var, store: &mut ParamStore) -> Result<()> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        root_value.check_finite("loss")?;
        if !self.rg(root) {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Tensor::full(root_value.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let p = store.get_mut(*id);
                    for (acc, x) in p.grad.data_mut().iter_mut().zip(g.data()) {
                        *acc += x;
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    if self.rg(*a) {
                        let ga = self.grad_buf(&mut grads, *a);
                        gemm(m, n, k, g.data(), false, tb.data(), true, 1.0, ga);
                    }
                    if self.rg(*b) {
                        let gb = self.grad_buf(&mut grads, *b);
                        gemm(k, m, n, ta.data(), true, g.data(), false, 1.0, gb);
                    }
                }
                Op::Add(a, b) => {
                    self.acc_scaled(&mut grads, *a, &g, 1.0);
                    self.acc_scaled(&mut grads, *b, &g, 1.0);
                }
                Op::Sub(a, b) => {
                    self.acc_scaled(&mut grads, *a, &g, 1.0);
                    self.acc_scaled(&mut grads, *b, &g, -1.0);
                }
                Op::AddRow(a, row) => {
                    self.acc_scaled(&mut grads, *a, &g, 1.0);
                    if self.rg(*row) {
                        let c = g.cols();
                        let gr = self.grad_buf(&mut grads, *row);
                        for chunk in g.data().chunks(c) {
                            for (acc, x) in gr.iter_mut().zip(chunk) {
                                *acc += x;
                            }
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let vb = self.value(*b).data();
                        let ga = self.grad_buf(&mut grads, *a);
                        for ((acc, x), y) in ga.iter_mut().zip(g.data()).zip(vb) {
                            *acc += x * y;
                        }
                    }
                    if self.rg(*b) {
                        let va = self.value(*a).data();
                        let gb = self.grad_buf(&mut grads, *b);
                        for ((acc, x), y) in gb.iter_mut().zip(g.data()).zip(va) {
                            *acc += x * y;
                        }
                    }
                }
                Op::Scale(a, k) => self.acc_scaled(&mut grads, *a, &g, *k),
                Op::AddScalar(a) => self.acc_scaled(&mut grads, *a, &g, 1.0),
                Op::Act(kind, a) => {
                    if self.rg(*a) {
                        let x = self.value(*a).data();
                        let y = node.value.data();
                        let ga = self.grad_buf(&mut grads, *a);
                        for i in 0..ga.len() {
                            ga[i] += g.data()[i] * kind.derivative(x[i], y[i]);
                        }
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    if self.rg(*a) {
                        let x = self.value(*a).data();
                        let ga = self.grad_buf(&mut grads, *a);
                        for i in 0..ga.len() {
                            if x[i] >= *lo && x[i] <= *hi {
                                ga[i] += g.data()[i];
                            }
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        if self.rg(p) {
                            let gp = self.grad_buf(&mut grads, p);
                            for (r, chunk) in gp.chunks_mut(c).enumerate() {
                                let src = &g.data()[r * total + offset..r * total + offset + c];
                                for (acc, x) in chunk.iter_mut().zip(src) {
                                    *acc += x;
                                }
                            }
                        }
                        offset += c;
                    }
                }
                Op::SliceCols(a, start) => {
                    if self.rg(*a) {
                        let full = self.value(*a).cols();
                        let c = g.cols();
                        let ga = self.grad_buf(&mut grads, *a);
                        for (r, chunk) in g.data().chunks(c).enumerate() {
                            let dst = &mut ga[r * full + start..r * full + start + c];
                            for (acc, x) in dst.iter_mut().zip(chunk) {
                                *acc += x;
                            }
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        if self.rg(p) {
                            let gp = self.grad_buf(&mut grads, p);
                            for (acc, x) in gp.iter_mut().zip(&g.data()[offset..offset + n]) {
                                *acc += x;
                            }
                        }
                        offset += n;
                    }
                }
                Op::SliceRows(a, start) => {
                    if self.rg(*a) {
                        let c = g.cols();
                        let ga = self.grad_buf(&mut grads, *a);
                        let dst = &mut ga[start * c..start * c + g.len()];
                        for (acc, x) in dst.iter_mut().zip(g.data()) {
                            *acc += x;
                        }
                    }
                }
                Op::Gather(table, ids) => {
                    if self.rg(*table) {
                        let c = g.cols();
                        let gt = self.grad_buf(&mut grads, *table);
                        for (r, &id) in ids.iter().enumerate() {
                            let src = &g.data()[r * c..(r + 1) * c];
                            for (acc, x) in gt[id * c..(id + 1) * c].iter_mut().zip(src) {
                                *acc += x;
                            }
                        }
                    }
                }
                Op::SelectRows(mask, a, b) => {
                    let c = g.cols();
                    for (src, pick) in [(*a, true), (*b, false)] {
                        if self.rg(src) {
                            let gs = self.grad_buf(&mut grads, src);
                            for (r, &m) in mask.iter().enumerate() {
                                if m == pick {
                                    for (acc, x) in gs[r * c..(r + 1) * c]
                                        .iter_mut()
                                        .zip(&g.data()[r * c..(r + 1) * c])
                                    {
                                        *acc += x;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::SoftmaxXent {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    if self.rg(*logits) {
                        let upstream = g.item();
                        let v = self.value(*logits).cols();
                        let gl = self.grad_buf(&mut grads, *logits);
                        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                            if w == 0.0 {
                                continue;
                            }
                            let k = upstream * w;
                            let pr = &probs[r * v..(r + 1) * v];
                            let row = &mut gl[r * v..(r + 1) * v];
                            for (acc, p) in row.iter_mut().zip(pr) {
                                *acc += k * p;
                            }
                            row[t] -= k;
                        }
                    }
                }
                Op::Sum(a) => {
                    if self.rg(*a) {
                        let s = g.item();
                        let ga = self.grad_buf(&mut grads, *a);
                        for acc in ga.iter_mut() {
                            *acc += s;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> &'a mut [f64] {
        grads[v.0]
            .get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()))
            .data_mut()
    }

    fn acc_scaled(&self, grads: &mut [Option<Tensor>], v: Var, g: &Tensor, k: f64) {
        if !self.rg(v) {
            return;
        }
        let buf = self.grad_buf(grads, v);
        for (acc, x) in buf.iter_mut().zip(g.data()) {
            *acc += k * x;
        }
    }
}

fn as_matrix(t: Tensor) -> Tensor {
    if t.shape().len() == 1 && t.len() != 1 {
        let n = t.len();
        t.reshape(&[1, n]).expect("same length")
    } else {
        t
    }
}
