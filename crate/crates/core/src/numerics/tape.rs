//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass in creation order,
//! which is already a topological order: an operation can only reference
//! values recorded before it. [`Tape::backward`] walks the records once in
//! reverse and accumulates adjoints.
//!
//! ```
//! use msrf_core::numerics::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]), true);
//! let loss = tape.sum(w).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).data(), &[1.0, 1.0, 1.0, 1.0]);
//! ```

use crate::numerics::{matmul, row_softmax, CsrMatrix, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Logits are clamped to this range before the logistic function.
pub const LOGIT_CLAMP: f64 = 30.0;

enum Op<'a> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    SparseMatMul(&'a CsrMatrix, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sum(Var),
    RowSoftmax(Var),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Vec<(Var, Vec<usize>)>),
    ConcatCols(Vec<Var>),
    Lookup(Var, Vec<usize>),
    PairDot(Var, Vec<(usize, usize)>),
    LogisticPairLoss(Var, usize),
    SoftmaxCrossEntropy(Var, Vec<usize>),
    MeanSquaredError(Var, Vec<f64>),
}

impl Op<'_> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::SparseMatMul(..) => "sparse_matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Sum(..) => "sum",
            Op::RowSoftmax(..) => "row_softmax",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterRows(..) => "scatter_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::Lookup(..) => "lookup",
            Op::PairDot(..) => "pair_dot",
            Op::LogisticPairLoss(..) => "logistic_pair_loss",
            Op::SoftmaxCrossEntropy(..) => "softmax_cross_entropy",
            Op::MeanSquaredError(..) => "mse",
        }
    }
}

struct Node<'a> {
    value: Tensor,
    op: Op<'a>,
    needs_grad: bool,
}

/// Recorded forward pass. Single-owner; rebuild one per step.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros if `var` does not
    /// influence the loss.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Loss contribution of a single dot product; `positive` selects the
/// `-log σ(z)` term, otherwise `-log(1 - σ(z))`.
pub fn logistic_term(z: f64, positive: bool) -> f64 {
    let z = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    if positive {
        softplus(-z)
    } else {
        softplus(z)
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op<'a>, needs_grad: bool) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input. Parameters use `requires_grad = true`; data uses
    /// `false`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        let ng = self.needs(a);
        self.push(out, Op::Transpose(a), ng)
    }

    /// `p · x` with `p` treated as data: no gradient flows into `p`.
    pub fn sparse_matmul(&mut self, p: &'a CsrMatrix, x: Var) -> Result<Var> {
        let out = p.matmul_dense(self.value(x))?;
        let ng = self.needs(x);
        self.push(out, Op::SparseMatMul(p, x), ng)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch(format!(
                "{}: {:?} vs {:?}",
                what,
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Adds the `1 × c` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(Error::ShapeMismatch(format!(
                "add_row: {:?} + {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, &x) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += x;
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::AddRow(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let ng = self.needs(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn row_softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let out = row_softmax(self.value(a), mask)?;
        let ng = self.needs(a);
        self.push(out, Op::RowSoftmax(a), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &r in &idx {
            if r >= av.rows() {
                return Err(Error::ShapeMismatch(format!("gather row {} of {}", r, av.rows())));
            }
            data.extend_from_slice(av.row(r));
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        let ng = self.needs(a);
        self.push(out, Op::GatherRows(a, idx), ng)
    }

    /// Assembles an `n_rows × c` matrix where row `idx[r]` of the output is
    /// row `r` of the corresponding part. Uncovered rows are zero; a row
    /// covered twice is summed.
    pub fn scatter_rows(&mut self, parts: Vec<(Var, Vec<usize>)>, n_rows: usize) -> Result<Var> {
        let c = match parts.first() {
            Some((v, _)) => self.value(*v).cols(),
            None => return Err(Error::ShapeMismatch("scatter_rows with no parts".into())),
        };
        let mut out = Tensor::zeros(&[n_rows, c]);
        let mut ng = false;
        for (v, idx) in &parts {
            let pv = self.value(*v);
            if pv.cols() != c || pv.rows() != idx.len() {
                return Err(Error::ShapeMismatch(format!(
                    "scatter part {:?} with {} indices",
                    pv.shape(),
                    idx.len()
                )));
            }
            for (r, &target) in idx.iter().enumerate() {
                if target >= n_rows {
                    return Err(Error::ShapeMismatch(format!("scatter row {} of {}", target, n_rows)));
                }
                for (o, &x) in out.row_mut(target).iter_mut().zip(pv.row(r)) {
                    *o += x;
                }
            }
            ng |= self.needs(*v);
        }
        self.push(out, Op::ScatterRows(parts), ng)
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Result<Var> {
        let rows = match parts.first() {
            Some(v) => self.value(*v).rows(),
            None => return Err(Error::ShapeMismatch("concat_cols with no parts".into())),
        };
        if parts.iter().any(|v| self.value(*v).rows() != rows) {
            return Err(Error::ShapeMismatch("concat_cols row counts differ".into()));
        }
        let total: usize = parts.iter().map(|v| self.value(*v).cols()).sum();
        let mut out = Tensor::zeros(&[rows, total]);
        for r in 0..rows {
            let mut offset = 0;
            for v in &parts {
                let src = self.value(*v).row(r);
                out.row_mut(r)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        let ng = parts.iter().any(|v| self.needs(*v));
        self.push(out, Op::ConcatCols(parts), ng)
    }

    /// Gathers scalars `table[idx[e]]` into a tensor of `shape`.
    pub fn lookup(&mut self, table: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let mut data = Vec::with_capacity(idx.len());
        for &e in &idx {
            match tv.data().get(e) {
                Some(&x) => data.push(x),
                None => return Err(Error::ShapeMismatch(format!("lookup {} of {}", e, tv.len()))),
            }
        }
        let out = Tensor::new(shape.to_vec(), data)?;
        let ng = self.needs(table);
        self.push(out, Op::Lookup(table, idx), ng)
    }

    /// Column vector of dot products `h_i · h_j` for each pair.
    pub fn pair_dot(&mut self, h: Var, pairs: Vec<(usize, usize)>) -> Result<Var> {
        let hv = self.value(h);
        let n = hv.rows();
        let mut data = Vec::with_capacity(pairs.len());
        for &(i, j) in &pairs {
            if i >= n || j >= n {
                return Err(Error::ShapeMismatch(format!("pair ({}, {}) with {} rows", i, j, n)));
            }
            data.push(hv.row(i).iter().zip(hv.row(j)).map(|(a, b)| a * b).sum());
        }
        let out = Tensor::new(vec![pairs.len(), 1], data)?;
        let ng = self.needs(h);
        self.push(out, Op::PairDot(h, pairs), ng)
    }

    /// Binary cross-entropy over logits `z`: the first `n_pos` entries are
    /// positives, the rest negatives. Each group is averaged separately and
    /// the two means are summed; an empty group contributes nothing.
    pub fn logistic_pair_loss(&mut self, z: Var, n_pos: usize) -> Result<Var> {
        let zv = self.value(z);
        if n_pos > zv.len() {
            return Err(Error::ShapeMismatch(format!("{} positives of {} logits", n_pos, zv.len())));
        }
        let n_neg = zv.len() - n_pos;
        let (pos, neg) = zv.data().split_at(n_pos);
        let mut loss = 0.0;
        if n_pos > 0 {
            loss += pos.iter().map(|&x| logistic_term(x, true)).sum::<f64>() / n_pos as f64;
        }
        if n_neg > 0 {
            loss += neg.iter().map(|&x| logistic_term(x, false)).sum::<f64>() / n_neg as f64;
        }
        let ng = self.needs(z);
        self.push(Tensor::scalar(loss), Op::LogisticPairLoss(z, n_pos), ng)
    }

    /// Mean softmax cross-entropy of `logits` (rows) against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != labels.len() || labels.iter().any(|&y| y >= lv.cols()) {
            return Err(Error::ShapeMismatch(format!(
                "cross entropy of {:?} with {} labels",
                lv.shape(),
                labels.len()
            )));
        }
        let probs = row_softmax(lv, None)?;
        let loss = labels
            .iter()
            .enumerate()
            .map(|(r, &y)| -(probs.at(r, y).max(f64::MIN_POSITIVE)).ln())
            .sum::<f64>()
            / labels.len().max(1) as f64;
        let ng = self.needs(logits);
        self.push(Tensor::scalar(loss), Op::SoftmaxCrossEntropy(logits, labels), ng)
    }

    pub fn mse(&mut self, pred: Var, target: Vec<f64>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != target.len() {
            return Err(Error::ShapeMismatch(format!(
                "mse of {:?} against {} targets",
                pv.shape(),
                target.len()
            )));
        }
        let loss = pv.data().iter().zip(&target).map(|(p, t)| (p - t).powi(2)).sum::<f64>()
            / target.len().max(1) as f64;
        let ng = self.needs(pred);
        self.push(Tensor::scalar(loss), Op::MeanSquaredError(pred, target), ng)
    }

    /// Reverse sweep from a scalar `loss`. The tape is left untouched, so
    /// calling this twice gives identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward from non-scalar {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(node, &g, &mut grads)?;
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node<'a>, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let da = matmul(g, &self.value(*b).transpose())?;
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let db = matmul(&self.value(*a).transpose(), g)?;
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::SparseMatMul(p, x) => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.shape());
                for i in 0..p.n_rows() {
                    let grow = g.row(i);
                    for (j, pij) in p.row(i) {
                        for (d, &gv) in dx.row_mut(j).iter_mut().zip(grow) {
                            *d += pij * gv;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*b) {
                    let mut db = Tensor::zeros(self.value(*b).shape());
                    for r in 0..g.rows() {
                        for (d, &gv) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d)?);
                }
                if self.needs(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), d)?);
                }
            }
            Op::Scale(a, c) => {
                let d = g.data().iter().map(|x| x * c).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d)?);
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::filled(&shape, g.item()));
            }
            Op::RowSoftmax(a) => {
                let y = &node.value;
                let mut d = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::GatherRows(a, idx) => {
                let mut d = Tensor::zeros(self.value(*a).shape());
                for (r, &src) in idx.iter().enumerate() {
                    for (o, &gv) in d.row_mut(src).iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::ScatterRows(parts) => {
                for (v, idx) in parts {
                    if !self.needs(*v) {
                        continue;
                    }
                    let mut d = Tensor::zeros(self.value(*v).shape());
                    for (r, &target) in idx.iter().enumerate() {
                        d.row_mut(r).copy_from_slice(g.row(target));
                    }
                    self.accumulate(grads, *v, d);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for v in parts {
                    let shape = self.value(*v).shape().to_vec();
                    let c = self.value(*v).cols();
                    if self.needs(*v) {
                        let mut d = Tensor::zeros(&shape);
                        for r in 0..g.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + c]);
                        }
                        self.accumulate(grads, *v, d);
                    }
                    offset += c;
                }
            }
            Op::Lookup(table, idx) => {
                let mut d = Tensor::zeros(self.value(*table).shape());
                for (e, &slot) in idx.iter().enumerate() {
                    d.data_mut()[slot] += g.data()[e];
                }
                self.accumulate(grads, *table, d);
            }
            Op::PairDot(h, pairs) => {
                let hv = self.value(*h);
                let mut d = Tensor::zeros(hv.shape());
                for (m, &(i, j)) in pairs.iter().enumerate() {
                    let gm = g.data()[m];
                    if gm == 0.0 {
                        continue;
                    }
                    for c in 0..hv.cols() {
                        let (hi, hj) = (hv.at(i, c), hv.at(j, c));
                        d.data_mut()[i * hv.cols() + c] += gm * hj;
                        d.data_mut()[j * hv.cols() + c] += gm * hi;
                    }
                }
                self.accumulate(grads, *h, d);
            }
            Op::LogisticPairLoss(z, n_pos) => {
                let zv = self.value(*z);
                let n_neg = zv.len() - n_pos;
                let scale = g.item();
                let d = zv
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(e, &x)| {
                        if x.abs() > LOGIT_CLAMP {
                            return 0.0;
                        }
                        if e < *n_pos {
                            -(1.0 - logistic(x)) / *n_pos as f64 * scale
                        } else {
                            logistic(x) / n_neg as f64 * scale
                        }
                    })
                    .collect();
                self.accumulate(grads, *z, Tensor::new(zv.shape().to_vec(), d)?);
            }
            Op::SoftmaxCrossEntropy(logits, labels) => {
                let lv = self.value(*logits);
                let mut d = row_softmax(lv, None)?;
                let scale = g.item() / labels.len().max(1) as f64;
                for (r, &y) in labels.iter().enumerate() {
                    let v = d.at(r, y) - 1.0;
                    d.set(r, y, v);
                }
                for x in d.data_mut() {
                    *x *= scale;
                }
                self.accumulate(grads, *logits, d);
            }
            Op::MeanSquaredError(pred, target) => {
                let pv = self.value(*pred);
                let scale = 2.0 * g.item() / target.len().max(1) as f64;
                let d = pv.data().iter().zip(target).map(|(p, t)| (p - t) * scale).collect();
                self.accumulate(grads, *pred, Tensor::new(pv.shape().to_vec(), d)?);
            }
        }
        Ok(())
    }
}
