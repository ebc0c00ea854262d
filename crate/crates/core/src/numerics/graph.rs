//! Reverse-mode differentiation tape over rank-2 tensors.
//!
//! Every forward primitive appends a node holding its value and the
//! information its backward rule needs. `backward` walks the tape once in
//! reverse and returns dense gradients for every parameter of the store the
//! graph was built against.

use super::params::{Grads, ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// sqrt(2/pi), used by the tanh form of GELU.
pub const GELU_C: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh form of GELU.
pub const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    SetRow(Var, usize, Var),
    SoftmaxRows(Var),
    MaskCols(Var, Vec<bool>),
    SegmentSoftmax(Var, Vec<usize>, usize),
    BlockSumCols(Var, usize),
    ExpandBlocks(Var, usize),
    LayerNorm(Var, Var, Var),
    Dropout(Var, Vec<T>),
    SumAll(Var),
    CrossEntropy(Var, usize),
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    backward_done: bool,
}

fn dims<T: Real>(t: &Tensor<T>) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; params.len()],
            backward_done: false,
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.tensor(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, t: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Value::Owned(t),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// The parameter as a graph leaf. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = (dims(ta), dims(tb));
        if k != k2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (n, k2)) = (dims(ta), dims(tb));
        if k != k2 {
            return Err(Error::shape("matmul_nt", ta.shape(), tb.shape()));
        }
        let out = matmul_nt_raw(ta.data(), tb.data(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if dims(ta) != dims(tb) {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(vec![ta.rows(), ta.cols()], data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// Adds the `[1, n]` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, n) = dims(ta);
        if tb.rows() != 1 || tb.cols() != n {
            return Err(Error::shape("add_row", ta.shape(), tb.shape()));
        }
        let bias = tb.data();
        let mut data = ta.data().to_vec();
        for r in 0..m {
            for (x, &bv) in data[r * n..(r + 1) * n].iter_mut().zip(bias) {
                *x = *x + bv;
            }
        }
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, Op::AddRow(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if dims(ta) != dims(tb) {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(vec![ta.rows(), ta.cols()], data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// Multiplies row `i` of `a` by the scalar `c[i, 0]`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(c));
        let (m, n) = dims(ta);
        if tc.rows() != m || tc.cols() != 1 {
            return Err(Error::shape("mul_col", ta.shape(), tc.shape()));
        }
        let mut data = ta.data().to_vec();
        for r in 0..m {
            let s = tc.data()[r];
            for x in &mut data[r * n..(r + 1) * n] {
                *x = *x * s;
            }
        }
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, Op::MulCol(a, c), &[a, c]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let s = T::of(s);
        let data = ta.data().iter().map(|&x| x * s).collect();
        let t = Tensor::new(vec![ta.rows(), ta.cols()], data).expect("scale shape");
        self.push(t, Op::Scale(a, s), &[a])
    }

    /// GELU, tanh form: `0.5·x·(1 + tanh(c·(x + a·x³)))` with
    /// `c = GELU_C`, `a = GELU_A`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| gelu(x)).collect();
        let t = Tensor::new(vec![ta.rows(), ta.cols()], data).expect("gelu shape");
        self.push(t, Op::Gelu(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let tp = self.value(p);
            if tp.rows() != m {
                return Err(Error::shape("concat_cols", self.value(parts[0]).shape(), tp.shape()));
            }
            widths.push(tp.cols());
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let tp = self.value(p);
            if tp.cols() != n {
                return Err(Error::shape("concat_rows", self.value(parts[0]).shape(), tp.shape()));
            }
            m += tp.rows();
            data.extend_from_slice(tp.data());
        }
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = dims(ta);
        if len == 0 || start + len > n {
            return Err(Error::shape("slice_cols", ta.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&ta.row(r)[start..start + len]);
        }
        let t = Tensor::new(vec![m, len], data)?;
        Ok(self.push(t, Op::SliceCols(a, start), &[a]))
    }

    /// `out[i] = a[idx[i]]`. Embedding lookup is a gather over a table.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = dims(ta);
        if idx.is_empty() {
            return Err(Error::shape("gather_rows", ta.shape(), &[0]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::shape("gather_rows", ta.shape(), &[bad]));
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(ta.row(i));
        }
        let t = Tensor::new(vec![idx.len(), n], data)?;
        Ok(self.push(t, Op::GatherRows(a, idx.to_vec()), &[a]))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        self.gather_rows(a, &[i])
    }

    /// `out[idx[e]] += a[e]`, with `out` of `n_out` rows. Rows are summed in
    /// ascending `e` order.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], n_out: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = dims(ta);
        if idx.len() != m || idx.iter().any(|&i| i >= n_out) {
            return Err(Error::shape("scatter_add_rows", ta.shape(), &[idx.len(), n_out]));
        }
        let mut data = vec![T::zero(); n_out * n];
        for (e, &i) in idx.iter().enumerate() {
            for (o, &x) in data[i * n..(i + 1) * n].iter_mut().zip(ta.row(e)) {
                *o = *o + x;
            }
        }
        let t = Tensor::new(vec![n_out, n], data)?;
        Ok(self.push(t, Op::ScatterAddRows(a, idx.to_vec()), &[a]))
    }

    /// Copy of `a` with row `i` replaced by the `[1, n]` tensor `r`.
    pub fn set_row(&mut self, a: Var, i: usize, r: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(r));
        let (m, n) = dims(ta);
        if i >= m || tr.rows() != 1 || tr.cols() != n {
            return Err(Error::shape("set_row", ta.shape(), tr.shape()));
        }
        let mut data = ta.data().to_vec();
        data[i * n..(i + 1) * n].copy_from_slice(tr.data());
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, Op::SetRow(a, i, r), &[a, r]))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (m, n) = dims(ta);
        let mut data = ta.data().to_vec();
        for r in 0..m {
            softmax_in_place(&mut data[r * n..(r + 1) * n]);
        }
        let t = Tensor::new(vec![m, n], data).expect("softmax shape");
        self.push(t, Op::SoftmaxRows(a), &[a])
    }

    /// Sets column `j` of every row to `-inf` wherever `keep[j]` is false.
    pub fn mask_cols(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = dims(ta);
        if keep.len() != n {
            return Err(Error::shape("mask_cols", ta.shape(), &[keep.len()]));
        }
        let mut data = ta.data().to_vec();
        for r in 0..m {
            for (x, &k) in data[r * n..(r + 1) * n].iter_mut().zip(keep) {
                if !k {
                    *x = T::neg_infinity();
                }
            }
        }
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, Op::MaskCols(a, keep.to_vec()), &[a]))
    }

    /// Column-wise softmax within groups of rows: rows `e` with equal
    /// `seg[e]` form one distribution per column.
    pub fn segment_softmax(&mut self, a: Var, seg: &[usize], n_seg: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = dims(ta);
        if seg.len() != m || seg.iter().any(|&s| s >= n_seg) {
            return Err(Error::shape("segment_softmax", ta.shape(), &[seg.len(), n_seg]));
        }
        let x = ta.data();
        let mut max = vec![T::neg_infinity(); n_seg * n];
        for e in 0..m {
            for c in 0..n {
                let slot = &mut max[seg[e] * n + c];
                *slot = slot.max(x[e * n + c]);
            }
        }
        let mut data = vec![T::zero(); m * n];
        let mut denom = vec![T::zero(); n_seg * n];
        for e in 0..m {
            for c in 0..n {
                let v = (x[e * n + c] - max[seg[e] * n + c]).exp();
                data[e * n + c] = v;
                denom[seg[e] * n + c] = denom[seg[e] * n + c] + v;
            }
        }
        for e in 0..m {
            for c in 0..n {
                data[e * n + c] = data[e * n + c] / denom[seg[e] * n + c];
            }
        }
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, Op::SegmentSoftmax(a, seg.to_vec(), n_seg), &[a]))
    }

    /// Sums consecutive blocks of `n / blocks` columns: `[m, n] -> [m, blocks]`.
    pub fn block_sum_cols(&mut self, a: Var, blocks: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = dims(ta);
        if blocks == 0 || n % blocks != 0 {
            return Err(Error::shape("block_sum_cols", ta.shape(), &[blocks]));
        }
        let w = n / blocks;
        let mut data = Vec::with_capacity(m * blocks);
        for r in 0..m {
            let row = ta.row(r);
            for b in 0..blocks {
                data.push(row[b * w..(b + 1) * w].iter().copied().sum());
            }
        }
        let t = Tensor::new(vec![m, blocks], data)?;
        Ok(self.push(t, Op::BlockSumCols(a, blocks), &[a]))
    }

    /// Repeats every column `width` times: `[m, h] -> [m, h·width]`.
    pub fn expand_blocks(&mut self, a: Var, width: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, h) = dims(ta);
        if width == 0 {
            return Err(Error::shape("expand_blocks", ta.shape(), &[width]));
        }
        let mut data = Vec::with_capacity(m * h * width);
        for r in 0..m {
            for &x in ta.row(r) {
                data.extend(std::iter::repeat_n(x, width));
            }
        }
        let t = Tensor::new(vec![m, h * width], data)?;
        Ok(self.push(t, Op::ExpandBlocks(a, width), &[a]))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of shape `[1, n]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (m, n) = dims(tx);
        if dims(tg) != (1, n) || dims(tb) != (1, n) {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            let (xhat, _) = normalize_row(tx.row(r));
            for ((&xh, &g), &b) in xhat.iter().zip(tg.data()).zip(tb.data()) {
                data.push(xh * g + b);
            }
        }
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, Op::LayerNorm(x, gamma, beta), &[x, gamma, beta]))
    }

    /// Elementwise product with an explicit scaled keep-mask (see
    /// [`super::dropout::keep_mask`]). An all-ones mask is the identity.
    pub fn dropout(&mut self, a: Var, mask: Vec<T>) -> Result<Var> {
        let ta = self.value(a);
        if mask.len() != ta.numel() {
            return Err(Error::shape("dropout", ta.shape(), &[mask.len()]));
        }
        let data = ta.data().iter().zip(&mask).map(|(&x, &k)| x * k).collect();
        let t = Tensor::new(vec![ta.rows(), ta.cols()], data)?;
        Ok(self.push(t, Op::Dropout(a, mask), &[a]))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    /// Softmax cross-entropy of a `[1, k]` logit row against `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let tl = self.value(logits);
        if tl.rows() != 1 || label >= tl.cols() {
            return Err(Error::shape("cross_entropy", tl.shape(), &[label]));
        }
        let x = tl.data();
        let mx = x.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = mx + x.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
        Ok(self.push(
            Tensor::scalar(lse - x[label]),
            Op::CrossEntropy(logits, label),
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Parameters not reachable from the
    /// loss get zero gradients.
    pub fn backward(&mut self, loss: Var) -> Result<Grads<T>> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(&[1, 1], T::one()));
        let mut out = Grads::zeros_like(self.params);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>], out: &mut Grads<T>) {
        let node = &self.nodes[i];
        let y = match &node.value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.tensor(*id),
        };
        let gd = g.data();
        let (m, n) = dims(y);
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => out.0[id.0].add_assign(g),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = ta.cols();
                if self.wants(*a) {
                    let ga = matmul_nt_raw(gd, tb.data(), m, n, k);
                    self.accum(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = matmul_tn_raw(ta.data(), gd, m, k, n);
                    self.accum(grads, *b, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = ta.cols();
                if self.wants(*a) {
                    let ga = matmul_raw(gd, tb.data(), m, n, k);
                    self.accum(grads, *a, ga);
                }
                if self.wants(*b) {
                    // d(b)[j, :] = Σ_i g[i, j] · a[i, :]
                    let gb = matmul_tn_raw(gd, ta.data(), m, n, k);
                    self.accum(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, gd.to_vec());
                self.accum(grads, *b, gd.to_vec());
            }
            Op::AddRow(a, b) => {
                self.accum(grads, *a, gd.to_vec());
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); n];
                    for r in 0..m {
                        for (acc, &x) in gb.iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                            *acc = *acc + x;
                        }
                    }
                    self.accum(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let ga = gd.iter().zip(tb.data()).map(|(&g, &x)| g * x).collect();
                    self.accum(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = gd.iter().zip(ta.data()).map(|(&g, &x)| g * x).collect();
                    self.accum(grads, *b, gb);
                }
            }
            Op::MulCol(a, c) => {
                let (ta, tc) = (self.value(*a), self.value(*c));
                if self.wants(*a) {
                    let mut ga = gd.to_vec();
                    for r in 0..m {
                        let s = tc.data()[r];
                        ga[r * n..(r + 1) * n].iter_mut().for_each(|x| *x = *x * s);
                    }
                    self.accum(grads, *a, ga);
                }
                if self.wants(*c) {
                    let gc = (0..m)
                        .map(|r| gd[r * n..(r + 1) * n].iter().zip(ta.row(r)).map(|(&g, &x)| g * x).sum())
                        .collect();
                    self.accum(grads, *c, gc);
                }
            }
            Op::Scale(a, s) => {
                let ga = gd.iter().map(|&x| x * *s).collect();
                self.accum(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let ta = self.value(*a);
                let ga = gd.iter().zip(ta.data()).map(|(&g, &x)| g * gelu_grad(x)).collect();
                self.accum(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            gp.extend_from_slice(&gd[r * n + offset..r * n + offset + w]);
                        }
                        self.accum(grads, p, gp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.wants(p) {
                        self.accum(grads, p, gd[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                let na = self.value(*a).cols();
                let mut ga = vec![T::zero(); m * na];
                for r in 0..m {
                    ga[r * na + start..r * na + start + n].copy_from_slice(&gd[r * n..(r + 1) * n]);
                }
                self.accum(grads, *a, ga);
            }
            Op::GatherRows(a, idx) => {
                let ma = self.value(*a).rows();
                let mut ga = vec![T::zero(); ma * n];
                for (r, &src) in idx.iter().enumerate() {
                    for (o, &x) in ga[src * n..(src + 1) * n].iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                        *o = *o + x;
                    }
                }
                self.accum(grads, *a, ga);
            }
            Op::ScatterAddRows(a, idx) => {
                let mut ga = Vec::with_capacity(idx.len() * n);
                for &dst in idx {
                    ga.extend_from_slice(&gd[dst * n..(dst + 1) * n]);
                }
                self.accum(grads, *a, ga);
            }
            Op::SetRow(a, row, r) => {
                if self.wants(*a) {
                    let mut ga = gd.to_vec();
                    ga[row * n..(row + 1) * n].iter_mut().for_each(|x| *x = T::zero());
                    self.accum(grads, *a, ga);
                }
                if self.wants(*r) {
                    self.accum(grads, *r, gd[row * n..(row + 1) * n].to_vec());
                }
            }
            Op::SoftmaxRows(a) => {
                let yd = y.data();
                let mut ga = vec![T::zero(); m * n];
                for r in 0..m {
                    let (yr, gr) = (&yd[r * n..(r + 1) * n], &gd[r * n..(r + 1) * n]);
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for c in 0..n {
                        ga[r * n + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accum(grads, *a, ga);
            }
            Op::MaskCols(a, keep) => {
                let mut ga = gd.to_vec();
                for r in 0..m {
                    for (x, &k) in ga[r * n..(r + 1) * n].iter_mut().zip(keep) {
                        if !k {
                            *x = T::zero();
                        }
                    }
                }
                self.accum(grads, *a, ga);
            }
            Op::SegmentSoftmax(a, seg, n_seg) => {
                let yd = y.data();
                let mut dot = vec![T::zero(); n_seg * n];
                for e in 0..m {
                    for c in 0..n {
                        let s = &mut dot[seg[e] * n + c];
                        *s = *s + yd[e * n + c] * gd[e * n + c];
                    }
                }
                let ga = (0..m * n)
                    .map(|k| {
                        let (e, c) = (k / n, k % n);
                        yd[k] * (gd[k] - dot[seg[e] * n + c])
                    })
                    .collect();
                self.accum(grads, *a, ga);
            }
            Op::BlockSumCols(a, blocks) => {
                let na = self.value(*a).cols();
                let w = na / blocks;
                let mut ga = Vec::with_capacity(m * na);
                for r in 0..m {
                    for b in 0..*blocks {
                        ga.extend(std::iter::repeat_n(gd[r * blocks + b], w));
                    }
                }
                self.accum(grads, *a, ga);
            }
            Op::ExpandBlocks(a, width) => {
                let h = n / width;
                let mut ga = Vec::with_capacity(m * h);
                for r in 0..m {
                    for b in 0..h {
                        ga.push(gd[r * n + b * width..r * n + (b + 1) * width].iter().copied().sum());
                    }
                }
                self.accum(grads, *a, ga);
            }
            Op::LayerNorm(x, gamma, beta) => {
                let (tx, tg) = (self.value(*x), self.value(*gamma));
                let mut gx = Vec::with_capacity(m * n);
                let mut ggamma = vec![T::zero(); n];
                let mut gbeta = vec![T::zero(); n];
                let nf = T::of(n as f64);
                for r in 0..m {
                    let (xhat, inv_std) = normalize_row(tx.row(r));
                    let gr = &gd[r * n..(r + 1) * n];
                    let dxhat: Vec<T> = gr.iter().zip(tg.data()).map(|(&g, &w)| g * w).collect();
                    let mean_d: T = dxhat.iter().copied().sum::<T>() / nf;
                    let mean_dx: T = dxhat.iter().zip(&xhat).map(|(&d, &h)| d * h).sum::<T>() / nf;
                    for c in 0..n {
                        gx.push(inv_std * (dxhat[c] - mean_d - xhat[c] * mean_dx));
                        ggamma[c] = ggamma[c] + gr[c] * xhat[c];
                        gbeta[c] = gbeta[c] + gr[c];
                    }
                }
                if self.wants(*x) {
                    self.accum(grads, *x, gx);
                }
                if self.wants(*gamma) {
                    self.accum(grads, *gamma, ggamma);
                }
                if self.wants(*beta) {
                    self.accum(grads, *beta, gbeta);
                }
            }
            Op::Dropout(a, mask) => {
                let ga = gd.iter().zip(mask).map(|(&g, &k)| g * k).collect();
                self.accum(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let na = self.value(*a).numel();
                self.accum(grads, *a, vec![gd[0]; na]);
            }
            Op::CrossEntropy(a, label) => {
                let x = self.value(*a).data();
                let mut p = x.to_vec();
                softmax_in_place(&mut p);
                p[*label] = p[*label] - T::one();
                let ga = p.into_iter().map(|v| v * gd[0]).collect();
                self.accum(grads, *a, ga);
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Vec<T>) {
        if !self.wants(v) {
            return;
        }
        let shape = self.value(v).shape();
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(shape.to_vec(), g).expect("gradient shape"));
            }
        }
    }
}

#[inline]
fn gelu<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    half * x * (T::one() + u.tanh())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        sum = sum + *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

/// Returns `(x̂, 1/σ)` for one row.
fn normalize_row<T: Real>(row: &[T]) -> (Vec<T>, T) {
    let nf = T::of(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / nf;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / nf;
    let inv_std = T::one() / (var + T::of(LAYER_NORM_EPS)).sqrt();
    (row.iter().map(|&x| (x - mean) * inv_std).collect(), inv_std)
}

/// `[m, k] · [k, n]`.
pub(crate) fn matmul_raw<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `[m, k] · [n, k]ᵀ`.
pub(crate) fn matmul_nt_raw<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out.push(arow.iter().zip(&b[j * k..(j + 1) * k]).map(|(&x, &y)| x * y).sum());
        }
    }
    out
}

/// `[m, k]ᵀ · [m, n]` giving `[k, n]`.
pub(crate) fn matmul_tn_raw<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}
