//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and produces a gradient for
//! every node that transitively depends on a parameter or an input. One graph
//! is built per example; graphs are cheap and never shared between threads.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Result, WeakTrError};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{
    bilinear_taps, check_upsample, gelu_grad_scalar, gelu_scalar, gemm_a_bt_acc, gemm_at_b_acc,
    layer_norm_stats, matmul, sigmoid_scalar, softmax_last, transpose_raw, Tensor,
};

/// Index marking a gathered element that reads as zero (used for padding).
pub const GATHER_ZERO: usize = usize::MAX;

/// Label value excluded from cross-entropy and every statistic derived from it.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

enum Op<T> {
    Constant,
    Input,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Transpose(Var),
    Reshape(Var),
    Gather(Var, Arc<Vec<usize>>),
    Concat(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Mean(Var),
    GlobalAvgPool(Var),
    Upsample(Var),
    L2NormalizeRows(Var, Vec<T>),
    /// Per-element derivative of the loss w.r.t. the logits, fixed at forward time.
    SoftMargin(Var, Vec<T>),
    /// `probs` minus one-hot, zero rows for ignored pixels.
    SoftmaxCe(Var, Vec<T>),
    MaskedMean(Var, Vec<T>, T),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every differentiable node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` when `v` does not influence the loss.
    pub fn wrt(&self, graph: &Graph<T>, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(graph.shape(v).to_vec(), g.clone()).unwrap())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = match &op {
            Op::Constant => false,
            Op::Input | Op::Param => true,
            other => inputs_of(other).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant)
    }

    /// A leaf that receives a gradient (for differentiating w.r.t. data).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input)
    }

    /// Binds a stored parameter. Repeated binds of the same id share one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    /// The node of a parameter bound with [`Graph::param`], if any.
    pub fn bound_param(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds vector `b` (length = last dim of `a`) to every slice of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.cols();
        if bv.len() != n {
            return Err(WeakTrError::shape(format!(
                "add_row: bias {:?} does not match {:?}",
                bv.shape(),
                av.shape()
            )));
        }
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, b)))
    }

    /// `x · W + b` for `x: m×k`, `W: k×n`, `b: n`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let out = self.value(a).scale(k);
        self.push(out, Op::Scale(a, k))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = crate::tensor::transpose(self.value(a))?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// `out.flat[j] = a.flat[index[j]]`, or zero where `index[j] == GATHER_ZERO`.
    pub fn gather(&mut self, a: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        let data: Vec<T> = index
            .iter()
            .map(|&i| {
                if i == GATHER_ZERO {
                    Ok(T::zero())
                } else {
                    src.get(i).copied().ok_or_else(|| {
                        WeakTrError::shape(format!("gather: index {i} out of {}", src.len()))
                    })
                }
            })
            .collect::<Result<_>>()?;
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(out, Op::Gather(a, index)))
    }

    /// Concatenates along the leading axis; trailing dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != first[1..] {
                return Err(WeakTrError::shape(format!(
                    "concat: trailing dims {:?} vs {:?}",
                    s, first
                )));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = first;
        shape[0] = lead;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let inner = self.shape(parts[0]).to_vec();
        let mut lifted = Vec::with_capacity(parts.len());
        for &p in parts {
            let mut s = vec![1];
            s.extend_from_slice(&inner);
            lifted.push(self.reshape(p, &s)?);
        }
        self.concat(&lifted)
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            match self.shape(p) {
                [r, c] if *r == rows => widths.push(*c),
                s => {
                    return Err(WeakTrError::shape(format!(
                        "concat_cols: {s:?} incompatible with {rows} rows"
                    )))
                }
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        let [rows, cols] = *v.shape() else {
            return Err(WeakTrError::shape(format!("slice_rows: {:?}", v.shape())));
        };
        if start + len > rows || len == 0 {
            return Err(WeakTrError::shape(format!(
                "slice_rows: {start}..{} outside {rows} rows",
                start + len
            )));
        }
        let out = Tensor::new(
            vec![len, cols],
            v.data()[start * cols..(start + len) * cols].to_vec(),
        )?;
        Ok(self.push(out, Op::SliceRows(a, start)))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        let [rows, cols] = *v.shape() else {
            return Err(WeakTrError::shape(format!("slice_cols: {:?}", v.shape())));
        };
        if start + len > cols || len == 0 {
            return Err(WeakTrError::shape(format!(
                "slice_cols: {start}..{} outside {cols} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&v.data()[r * cols + start..r * cols + start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_last(self.value(a));
        self.push(out, Op::Softmax(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != n || b.len() != n {
            return Err(WeakTrError::shape(format!(
                "layer_norm: gamma {:?} / beta {:?} vs input {:?}",
                g.shape(),
                b.shape(),
                xv.shape()
            )));
        }
        let (xhat, rstd) = layer_norm_stats(xv.data(), n, eps);
        let mut out = xhat.clone();
        for row in out.chunks_mut(n) {
            for ((o, &gv), &bv) in row.iter_mut().zip(g.data()).zip(b.data()) {
                *o = *o * gv + bv;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu_scalar);
        self.push(out, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid_scalar);
        self.push(out, Op::Sigmoid(a))
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        self.push(out, Op::Mean(a))
    }

    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let out = crate::tensor::global_avg_pool(self.value(a))?;
        Ok(self.push(out, Op::GlobalAvgPool(a)))
    }

    pub fn upsample_bilinear(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = crate::tensor::upsample_bilinear(self.value(a), out_h, out_w)?;
        Ok(self.push(out, Op::Upsample(a)))
    }

    /// Divides each row by `max(‖row‖₂, eps)`.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: T) -> Var {
        let v = self.value(a);
        let n = v.cols();
        let mut out = v.data().to_vec();
        let mut norms = Vec::with_capacity(v.rows());
        for row in out.chunks_mut(n) {
            let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt().max(eps);
            row.iter_mut().for_each(|x| *x /= norm);
            norms.push(norm);
        }
        let out = Tensor::new(v.shape().to_vec(), out).unwrap();
        self.push(out, Op::L2NormalizeRows(a, norms))
    }

    /// Multi-label soft margin loss of a logit vector against a {0,1} target
    /// vector; log arguments clamped below at 1e-12.
    pub fn multilabel_soft_margin(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let y_hat = self.value(logits);
        if y_hat.len() != targets.len() {
            return Err(WeakTrError::shape(format!(
                "soft margin: {} logits vs {} targets",
                y_hat.len(),
                targets.len()
            )));
        }
        let c = T::from_usize_lossy(targets.len());
        let floor = T::lit(1e-12).ln();
        let mut total = T::zero();
        let mut dlogits = Vec::with_capacity(targets.len());
        for (&x, &y) in y_hat.data().iter().zip(targets) {
            // log σ(x) = -softplus(-x), log(1-σ(x)) = -softplus(x)
            let log_p = -softplus(-x);
            let log_q = -softplus(x);
            let s = sigmoid_scalar(x);
            let (lp, dp) = if log_p > floor { (log_p, T::one() - s) } else { (floor, T::zero()) };
            let (lq, dq) = if log_q > floor { (log_q, -s) } else { (floor, T::zero()) };
            total += y * lp + (T::one() - y) * lq;
            dlogits.push(-(y * dp + (T::one() - y) * dq) / c);
        }
        let out = Tensor::scalar(-total / c);
        Ok(self.push(out, Op::SoftMargin(logits, dlogits)))
    }

    /// Per-row softmax cross-entropy of `logits: P×C` against `labels`;
    /// [`IGNORE_LABEL`] rows yield 0 and receive no gradient.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let v = self.value(logits);
        let classes = v.cols();
        if v.rows() != labels.len() {
            return Err(WeakTrError::shape(format!(
                "cross entropy: {} rows vs {} labels",
                v.rows(),
                labels.len()
            )));
        }
        let probs = softmax_last(v);
        let mut out = Vec::with_capacity(labels.len());
        let mut dlogits = probs.into_data();
        for (row, (&label, d)) in v
            .data()
            .chunks(classes)
            .zip(labels.iter().zip(dlogits.chunks_mut(classes)))
        {
            if label == IGNORE_LABEL {
                out.push(T::zero());
                d.iter_mut().for_each(|x| *x = T::zero());
                continue;
            }
            let label = label as usize;
            if label >= classes {
                return Err(WeakTrError::domain(format!(
                    "cross entropy: label {label} outside 0..{classes}"
                )));
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            out.push(lse - row[label]);
            d[label] -= T::one();
        }
        let out = Tensor::new(vec![labels.len()], out)?;
        Ok(self.push(out, Op::SoftmaxCe(logits, dlogits)))
    }

    /// `Σ x·m / Σ m` for a fixed mask (0 when the mask is empty).
    pub fn masked_mean(&mut self, x: Var, mask: &[T]) -> Result<Var> {
        let v = self.value(x);
        if v.len() != mask.len() {
            return Err(WeakTrError::shape(format!(
                "masked_mean: {} values vs {} mask entries",
                v.len(),
                mask.len()
            )));
        }
        let count: T = mask.iter().copied().sum();
        let total: T = v.data().iter().zip(mask).map(|(&a, &m)| a * m).sum();
        let mean = if count > T::zero() { total / count } else { T::zero() };
        Ok(self.push(Tensor::scalar(mean), Op::MaskedMean(x, mask.to_vec(), count)))
    }

    /// Reverse pass from a one-element `loss`, seeded with `seed`.
    pub fn backward_with_seed(&self, loss: Var, seed: T) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(WeakTrError::shape(format!(
                "backward needs a scalar loss, got {:?}",
                lv.shape()
            )));
        }
        if !lv.is_finite() {
            return Err(WeakTrError::Evaluation(format!(
                "non-finite loss {}",
                lv.item()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![seed]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.backward_with_seed(loss, T::one())
    }

    /// Runs backward scaled by `seed` and adds the parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, seed: T, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.backward_with_seed(loss, seed)?;
        let mut bound: Vec<_> = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        bound.sort();
        for (id, v) in bound {
            if let Some(g) = &grads.grads[v.0] {
                for (acc, &x) in store.get_mut(id).grad.data_mut().iter_mut().zip(g) {
                    *acc += x;
                }
            }
        }
        Ok(())
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Constant | Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if let Some(da) = self.slot(grads, *a) {
                    gemm_a_bt_acc(g, bv.data(), m, n, k, da);
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm_at_b_acc(av.data(), g, m, k, n, db);
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    axpy(da, g, T::one());
                }
                if let Some(db) = self.slot(grads, *b) {
                    axpy(db, g, T::one());
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    axpy(da, g, T::one());
                }
                if let Some(db) = self.slot(grads, *b) {
                    axpy(db, g, -T::one());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &gi), &bi) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((d, &gi), &ai) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                }
            }
            Op::AddRow(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    axpy(da, g, T::one());
                }
                let n = self.value(*b).len();
                if let Some(db) = self.slot(grads, *b) {
                    for row in g.chunks(n) {
                        axpy(db, row, T::one());
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(da) = self.slot(grads, *a) {
                    axpy(da, g, *k);
                }
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                let gt = transpose_raw(g, s[0], s[1]);
                if let Some(da) = self.slot(grads, *a) {
                    axpy(da, &gt, T::one());
                }
            }
            Op::Reshape(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    axpy(da, g, T::one());
                }
            }
            Op::Gather(a, index) => {
                if let Some(da) = self.slot(grads, *a) {
                    for (&src, &gi) in index.iter().zip(g) {
                        if src != GATHER_ZERO {
                            da[src] += gi;
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(dp) = self.slot(grads, p) {
                        axpy(dp, &g[off..off + len], T::one());
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(dp) = self.slot(grads, p) {
                        for (r, drow) in dp.chunks_mut(w).enumerate() {
                            axpy(drow, &g[r * total + off..r * total + off + w], T::one());
                        }
                    }
                    off += w;
                }
            }
            Op::SliceRows(a, start) => {
                let cols = node.value.cols();
                if let Some(da) = self.slot(grads, *a) {
                    axpy(&mut da[start * cols..start * cols + g.len()], g, T::one());
                }
            }
            Op::SliceCols(a, start) => {
                let len = node.value.cols();
                let cols = self.value(*a).cols();
                if let Some(da) = self.slot(grads, *a) {
                    for (r, grow) in g.chunks(len).enumerate() {
                        axpy(&mut da[r * cols + start..r * cols + start + len], grow, T::one());
                    }
                }
            }
            Op::Softmax(a) => {
                let n = node.value.cols();
                if let Some(da) = self.slot(grads, *a) {
                    for ((drow, grow), yrow) in da.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&gi, &yi)| gi * yi).sum();
                        for ((d, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = node.value.cols();
                let gam = self.value(*gamma).data();
                if let Some(dg) = self.slot(grads, *gamma) {
                    for (grow, xrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for ((d, &gi), &xi) in dg.iter_mut().zip(grow).zip(xrow) {
                            *d += gi * xi;
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *beta) {
                    for grow in g.chunks(n) {
                        axpy(db, grow, T::one());
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let nf = T::from_usize_lossy(n);
                    let mut dxhat = vec![T::zero(); n];
                    for (((dxrow, grow), xrow), &r) in dx
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(xhat.chunks(n))
                        .zip(rstd)
                    {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..n {
                            dxhat[j] = grow[j] * gam[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xrow[j];
                        }
                        let k = r / nf;
                        for j in 0..n {
                            dxrow[j] += k * (nf * dxhat[j] - s1 - xrow[j] * s2);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &gi), &xi) in da.iter_mut().zip(g).zip(av) {
                        *d += gi * gelu_grad_scalar(xi);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &gi), &yi) in da.iter_mut().zip(g).zip(y) {
                        *d += gi * yi * (T::one() - yi);
                    }
                }
            }
            Op::Mean(a) => {
                let n = T::from_usize_lossy(self.value(*a).len());
                if let Some(da) = self.slot(grads, *a) {
                    let k = g[0] / n;
                    da.iter_mut().for_each(|d| *d += k);
                }
            }
            Op::GlobalAvgPool(a) => {
                let lead = node.value.len();
                if let Some(da) = self.slot(grads, *a) {
                    let inner = da.len() / lead;
                    let denom = T::from_usize_lossy(inner);
                    for (chunk, &gi) in da.chunks_mut(inner).zip(g) {
                        let k = gi / denom;
                        chunk.iter_mut().for_each(|d| *d += k);
                    }
                }
            }
            Op::Upsample(a) => {
                let src = self.value(*a).shape();
                let (h, w, c) = (src[0], src[1], src[2]);
                let (oh, ow) = (node.value.shape()[0], node.value.shape()[1]);
                let _ = check_upsample(src, oh, ow);
                let ty = bilinear_taps::<T>(h, oh);
                let tx = bilinear_taps::<T>(w, ow);
                if let Some(da) = self.slot(grads, *a) {
                    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                            let gp = &g[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                            let taps = [
                                (y0, x0, (T::one() - wy) * (T::one() - wx)),
                                (y0, x1, (T::one() - wy) * wx),
                                (y1, x0, wy * (T::one() - wx)),
                                (y1, x1, wy * wx),
                            ];
                            for (sy, sx, wt) in taps {
                                if wt == T::zero() {
                                    continue;
                                }
                                let off = (sy * w + sx) * c;
                                axpy(&mut da[off..off + c], gp, wt);
                            }
                        }
                    }
                }
            }
            Op::L2NormalizeRows(a, norms) => {
                let n = node.value.cols();
                let av = self.value(*a).data();
                if let Some(da) = self.slot(grads, *a) {
                    for ((((drow, grow), yrow), xrow), &norm) in da
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(y.chunks(n))
                        .zip(av.chunks(n))
                        .zip(norms)
                    {
                        let raw = xrow.iter().map(|&v| v * v).sum::<T>().sqrt();
                        // On the clamped branch the denominator is constant.
                        let dot: T = if raw >= norm {
                            grow.iter().zip(yrow).map(|(&gi, &yi)| gi * yi).sum()
                        } else {
                            T::zero()
                        };
                        for ((d, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += (gi - yi * dot) / norm;
                        }
                    }
                }
            }
            Op::SoftMargin(a, dlogits) => {
                if let Some(da) = self.slot(grads, *a) {
                    axpy(da, dlogits, g[0]);
                }
            }
            Op::SoftmaxCe(a, dlogits) => {
                let c = self.value(*a).cols();
                if let Some(da) = self.slot(grads, *a) {
                    for ((drow, srow), &gi) in da.chunks_mut(c).zip(dlogits.chunks(c)).zip(g) {
                        axpy(drow, srow, gi);
                    }
                }
            }
            Op::MaskedMean(a, mask, count) => {
                if *count > T::zero() {
                    let k = g[0] / *count;
                    if let Some(da) = self.slot(grads, *a) {
                        for (d, &m) in da.iter_mut().zip(mask) {
                            *d += k * m;
                        }
                    }
                }
            }
        }
    }
}

fn inputs_of<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Constant | Op::Input | Op::Param => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
            vec![*a, *b]
        }
        Op::Scale(a, _)
        | Op::Transpose(a)
        | Op::Reshape(a)
        | Op::Gather(a, _)
        | Op::SliceRows(a, _)
        | Op::SliceCols(a, _)
        | Op::Softmax(a)
        | Op::Gelu(a)
        | Op::Sigmoid(a)
        | Op::Mean(a)
        | Op::GlobalAvgPool(a)
        | Op::Upsample(a)
        | Op::L2NormalizeRows(a, _)
        | Op::SoftMargin(a, _)
        | Op::SoftmaxCe(a, _)
        | Op::MaskedMean(a, _, _) => vec![*a],
        Op::Concat(parts) | Op::ConcatCols(parts) => parts.clone(),
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
    }
}

#[inline]
fn axpy<T: Scalar>(dst: &mut [T], src: &[T], k: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

#[inline]
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_loss_required() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::ones(&[2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f32>::new();
        let c = g.constant(Tensor::ones(&[2, 2]));
        let x = g.input(Tensor::ones(&[2, 2]));
        let p = g.mul(c, x).unwrap();
        let l = g.mean(p);
        let grads = g.backward(l).unwrap();
        assert!(grads.wrt(&g, c).is_none());
        assert_eq!(grads.wrt(&g, x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn shared_param_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_f64(&[1, 1], &[3.0]).unwrap());
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let w2 = g.param(&store, id);
        assert_eq!(w, w2);
        let sq = g.mul(w, w2).unwrap();
        let l = g.mean(sq);
        g.backward_into(l, 1.0, &mut store).unwrap();
        assert_eq!(store.get(id).grad.data(), &[6.0]);
    }

    #[test]
    fn ignored_labels_have_zero_loss() {
        let mut g = Graph::<f32>::new();
        let logits = g.input(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let ce = g.softmax_cross_entropy(logits, &[0, IGNORE_LABEL]).unwrap();
        assert_eq!(g.value(ce).data()[1], 0.0);
        assert!(g.softmax_cross_entropy(logits, &[0, 2]).is_err());
    }
}
