//! Reverse-mode automatic differentiation over a per-forward tape.
//!
//! A [`Tape`] records every operation applied to [`Var`]s in creation order,
//! which is already a topological order. [`Tape::backward`] replays it in
//! reverse and accumulates gradients for every recorded node. Values are never
//! mutated after recording; a fresh tape is built for each forward pass.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Layout, Tensor};

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    AddRow(usize, usize),
    Relu(usize),
    ConcatCols(Vec<usize>),
    StackRows(Vec<usize>),
    SelectRows(usize, Vec<usize>),
    GatherMean(usize, Vec<Vec<usize>>),
    MeanPoolRows(usize),
    FrobeniusNormalize(usize, f64),
    SoftmaxCrossEntropy(usize, Vec<usize>, Tensor),
}

struct Node {
    op: Op,
    value: Arc<Tensor>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    matmul_fault: Cell<Option<f64>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value().shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scales the left-operand gradient of every matmul by `factor`.
    /// Only meant for negative controls of gradient checks.
    #[doc(hidden)]
    pub fn corrupt_matmul_backward(&self, factor: f64) {
        self.matmul_fault.set(Some(factor));
    }

    fn push(&self, op: Op, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value: Arc::new(value),
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value)
    }

    /// Records a shared tensor without copying it.
    pub fn leaf_shared(&self, value: Arc<Tensor>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Op::Leaf,
            value,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::Argument("concat of an empty list".into()));
        }
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let rows = values[0].rows();
        for v in &values {
            if v.rows() != rows {
                return Err(Error::Dimension(format!(
                    "concat parts disagree on rows: {:?} vs {:?}",
                    values[0].shape(),
                    v.shape()
                )));
            }
        }
        let width: usize = values.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row_slice(r));
            }
        }
        let out = Tensor::matrix(rows, width, data)?;
        Ok(self.push(Op::ConcatCols(parts.iter().map(|p| p.id).collect()), out))
    }

    /// Vertical stacking of matrices with equal column counts.
    pub fn stack_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::Argument("stack of an empty list".into()));
        }
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let cols = values[0].cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for v in &values {
            if v.cols() != cols {
                return Err(Error::Dimension(format!(
                    "stack parts disagree on width: {:?} vs {:?}",
                    values[0].shape(),
                    v.shape()
                )));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(Op::StackRows(parts.iter().map(|p| p.id).collect()), out))
    }

    /// Computes the gradient of the scalar `loss` with respect to every node
    /// recorded before it.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id].value;
        if root.numel() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::new(root.shape().to_vec(), vec![1.0])?);
        let fault = self.matmul_fault.get();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    {
                        let ga = slot(&mut grads, *a, av);
                        // dA = dC · Bᵀ
                        gemm(
                            m,
                            n,
                            k,
                            g.data(),
                            Layout::Normal(n),
                            bv.data(),
                            Layout::Transposed(n),
                            ga.data_mut(),
                            1.0,
                        );
                    }
                    if let Some(f) = fault {
                        let ga = slot(&mut grads, *a, av);
                        ga.data_mut().iter_mut().for_each(|v| *v *= f);
                    }
                    let gb = slot(&mut grads, *b, bv);
                    // dB = Aᵀ · dC
                    gemm(
                        k,
                        m,
                        n,
                        av.data(),
                        Layout::Transposed(k),
                        g.data(),
                        Layout::Normal(n),
                        gb.data_mut(),
                        1.0,
                    );
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g.scale(-1.0));
                }
                Op::Scale(a, alpha) => accumulate(&mut grads, *a, &g.scale(*alpha)),
                Op::Sum(a) => {
                    let av = &nodes[*a].value;
                    let gi = g.item();
                    let ga = slot(&mut grads, *a, av);
                    ga.data_mut().iter_mut().for_each(|v| *v += gi);
                }
                Op::AddRow(x, b) => {
                    accumulate(&mut grads, *x, &g);
                    let bv = &nodes[*b].value;
                    let cols = g.cols();
                    let gb = slot(&mut grads, *b, bv);
                    for r in 0..g.rows() {
                        for (acc, v) in gb.data_mut().iter_mut().zip(g.row_slice(r)) {
                            *acc += v;
                        }
                    }
                    debug_assert_eq!(cols, bv.cols());
                }
                Op::Relu(x) => {
                    let xv = &nodes[*x].value;
                    let gx = slot(&mut grads, *x, xv);
                    for ((acc, gv), xi) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        if *xi > 0.0 {
                            *acc += gv;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let pv = &nodes[*p].value;
                        let w = pv.cols();
                        let gp = slot(&mut grads, *p, pv);
                        for r in 0..g.rows() {
                            let src = &g.row_slice(r)[offset..offset + w];
                            for (acc, v) in gp.data_mut()[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *acc += v;
                            }
                        }
                        offset += w;
                    }
                }
                Op::StackRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let pv = &nodes[*p].value;
                        let n = pv.numel();
                        let gp = slot(&mut grads, *p, pv);
                        for (acc, v) in gp.data_mut().iter_mut().zip(&g.data()[offset..offset + n]) {
                            *acc += v;
                        }
                        offset += n;
                    }
                }
                Op::SelectRows(x, idx) => {
                    let xv = &nodes[*x].value;
                    let w = xv.cols();
                    let gx = slot(&mut grads, *x, xv);
                    for (i, &src) in idx.iter().enumerate() {
                        for (acc, v) in gx.data_mut()[src * w..(src + 1) * w]
                            .iter_mut()
                            .zip(g.row_slice(i))
                        {
                            *acc += v;
                        }
                    }
                }
                Op::GatherMean(x, lists) => {
                    let xv = &nodes[*x].value;
                    let w = xv.cols();
                    let gx = slot(&mut grads, *x, xv);
                    for (i, list) in lists.iter().enumerate() {
                        if list.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / list.len() as f64;
                        for &src in list {
                            for (acc, v) in gx.data_mut()[src * w..(src + 1) * w]
                                .iter_mut()
                                .zip(g.row_slice(i))
                            {
                                *acc += v * inv;
                            }
                        }
                    }
                }
                Op::MeanPoolRows(x) => {
                    let xv = &nodes[*x].value;
                    let (n, w) = (xv.rows(), xv.cols());
                    let inv = 1.0 / n as f64;
                    let gx = slot(&mut grads, *x, xv);
                    for r in 0..n {
                        for (acc, v) in gx.data_mut()[r * w..(r + 1) * w].iter_mut().zip(g.data()) {
                            *acc += v * inv;
                        }
                    }
                }
                Op::FrobeniusNormalize(x, norm) => {
                    let y = &node.value;
                    let dot: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
                    let xv = &nodes[*x].value;
                    let gx = slot(&mut grads, *x, xv);
                    for ((acc, gv), yv) in gx.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *acc += (gv - yv * dot) / norm;
                    }
                }
                Op::SoftmaxCrossEntropy(x, labels, probs) => {
                    let xv = &nodes[*x].value;
                    let c = xv.cols();
                    let scale = g.item() / labels.len() as f64;
                    let gx = slot(&mut grads, *x, xv);
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            gx.data_mut()[r * c + j] += (probs.get(r, j) - onehot) * scale;
                        }
                    }
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn slot<'g>(grads: &'g mut [Option<Tensor>], id: usize, like: &Tensor) -> &'g mut Tensor {
    grads[id].get_or_insert_with(|| Tensor::zeros(like.shape()))
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: &Tensor) {
    match &mut grads[id] {
        Some(acc) => acc.add_assign(g),
        empty => *empty = Some(g.clone()),
    }
}

/// Gradients of one backward pass, indexed by recorded node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when `var` does not reach the loss.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.grads.get(var.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.value().shape()),
        }
    }

    /// Moves the gradient out, leaving nothing behind.
    pub fn take(&mut self, var: Var<'_>) -> Tensor {
        match self.grads.get_mut(var.id).and_then(Option::take) {
            Some(g) => g,
            None => Tensor::zeros(var.value().shape()),
        }
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.value().matmul(&other.value())?;
        Ok(self.tape.push(Op::MatMul(self.id, other.id), out))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "add")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.push(Op::Add(self.id, other.id), out))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "sub")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.push(Op::Sub(self.id, other.id), out))
    }

    pub fn scale(self, alpha: f64) -> Var<'t> {
        let out = self.value().scale(alpha);
        self.tape.push(Op::Scale(self.id, alpha), out)
    }

    pub fn sum(self) -> Var<'t> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.push(Op::Sum(self.id), out)
    }

    /// Adds the `1×d` row `bias` to every row of `self`.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, b) = (self.value(), bias.value());
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(Error::Dimension(format!(
                "cannot broadcast {:?} over {:?}",
                b.shape(),
                x.shape()
            )));
        }
        let w = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b.data()[i % w])
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.tape.push(Op::AddRow(self.id, bias.id), out))
    }

    pub fn relu(self) -> Var<'t> {
        let out = self.value().map(|v| if v > 0.0 { v } else { 0.0 });
        self.tape.push(Op::Relu(self.id), out)
    }

    pub fn select_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let w = x.cols();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            if i >= x.rows() {
                return Err(Error::Argument(format!(
                    "row {} out of range for {:?}",
                    i,
                    x.shape()
                )));
            }
            data.extend_from_slice(x.row_slice(i));
        }
        let out = Tensor::matrix(idx.len(), w, data)?;
        Ok(self.tape.push(Op::SelectRows(self.id, idx.to_vec()), out))
    }

    /// Row `i` of the result is the mean of the rows of `self` listed in
    /// `lists[i]`; an empty list yields a zero row.
    pub fn gather_mean(self, lists: &[Vec<usize>]) -> Result<Var<'t>> {
        let x = self.value();
        let w = x.cols();
        let mut data = vec![0.0; lists.len() * w];
        for (i, list) in lists.iter().enumerate() {
            let out = &mut data[i * w..(i + 1) * w];
            for &src in list {
                if src >= x.rows() {
                    return Err(Error::Argument(format!(
                        "neighbor row {} out of range for {:?}",
                        src,
                        x.shape()
                    )));
                }
                for (o, v) in out.iter_mut().zip(x.row_slice(src)) {
                    *o += v;
                }
            }
            if !list.is_empty() {
                let inv = 1.0 / list.len() as f64;
                out.iter_mut().for_each(|o| *o *= inv);
            }
        }
        let out = Tensor::matrix(lists.len(), w, data)?;
        Ok(self.tape.push(Op::GatherMean(self.id, lists.to_vec()), out))
    }

    /// Mean over rows: `n×c → 1×c`.
    pub fn mean_pool_rows(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rows() == 0 {
            return Err(Error::Argument("mean pool over zero rows".into()));
        }
        let refs: Vec<Tensor> = (0..x.rows()).map(|r| Tensor::row(x.row_slice(r))).collect();
        let out = Tensor::mean_rows(&refs, x.cols())?;
        Ok(self.tape.push(Op::MeanPoolRows(self.id), out))
    }

    pub fn frobenius_normalize(self) -> Result<Var<'t>> {
        let x = self.value();
        let norm = x.frobenius_norm();
        let out = x.frobenius_normalize()?;
        Ok(self.tape.push(Op::FrobeniusNormalize(self.id, norm), out))
    }

    /// Mean over rows of `−log softmax(row)[label]`, computed with
    /// max-subtraction.
    pub fn softmax_cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if x.rows() != labels.len() || labels.is_empty() {
            return Err(Error::Argument(format!(
                "{} labels for logits of shape {:?}",
                labels.len(),
                x.shape()
            )));
        }
        let c = x.cols();
        let mut probs = Vec::with_capacity(x.numel());
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(Error::Argument(format!(
                    "label {} out of range for {} classes",
                    label, c
                )));
            }
            let row = x.row_slice(r);
            let (lse, p) = log_softmax_parts(row);
            loss += lse - row[label];
            probs.extend(p);
        }
        let probs = Tensor::matrix(labels.len(), c, probs)?;
        let out = Tensor::scalar(loss / labels.len() as f64);
        Ok(self
            .tape
            .push(Op::SoftmaxCrossEntropy(self.id, labels.to_vec(), probs), out))
    }
}

/// Returns `(logsumexp(row), softmax(row))`.
pub fn log_softmax_parts(row: &[f64]) -> (f64, Vec<f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let lse = max + total.ln();
    (lse, exps.into_iter().map(|e| e / total).collect())
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    log_softmax_parts(row).1
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{}: {:?} vs {:?}",
            what,
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}
