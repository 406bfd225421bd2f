//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive applied during one forward pass. Each
//! recorded node keeps its value and the indices of its operands, so
//! [`Tape::backward`] can walk the record in reverse and apply the local
//! derivative of every op. Handles ([`Var`]) are plain indices into the
//! record; they are only meaningful for the tape that produced them.
//!
//! Matrices are row-major `[rows, cols]`. Affine maps are written `x·W + b`
//! with `W` stored `[in, out]`, so a batch of inputs is one matrix product.

use std::collections::HashMap;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Relu,
    Sigmoid,
    Tanh,
    Add,
    Mul,
    Sub,
}

impl ElementwiseOp {
    pub fn arity(self) -> usize {
        match self {
            Self::Relu | Self::Sigmoid | Self::Tanh => 1,
            Self::Add | Self::Mul | Self::Sub => 2,
        }
    }
}

impl FromStr for ElementwiseOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "relu" => Self::Relu,
            "sigmoid" => Self::Sigmoid,
            "tanh" => Self::Tanh,
            "add" => Self::Add,
            "mul" => Self::Mul,
            "sub" => Self::Sub,
            other => return Err(Error::UnknownOp(other.to_string())),
        })
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    OneMinus(usize),
    Scale(usize, T),
    MulConst(usize, Vec<T>),
    Select(Vec<bool>, usize, usize),
    MaskRows(usize, Vec<bool>),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    Gather(usize, Vec<Option<usize>>),
    Sum(usize),
    Mean(usize),
    BceWithLogits(usize, Vec<T>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded forward computation.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    bound: HashMap<ParamId, Var>,
    consumed: bool,
    track_params: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            bound: HashMap::new(),
            consumed: false,
            track_params: true,
        }
    }

    /// A tape whose parameter leaves do not require gradients. Used for
    /// evaluation, where no backward pass follows.
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op_name(&op).to_string()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Binds a stored parameter as a leaf. Binding the same id twice returns
    /// the same handle.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let v = self.leaf(store.value(id).clone(), self.track_params)?;
        self.bound.insert(id, v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v.0)
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, T::zero(), &mut out);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a.0, b.0), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: Op<T>, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(out, op, rg)
    }

    fn map(&mut self, op: Op<T>, a: Var, f: impl Fn(T) -> T) -> Result<Var> {
        let out = self.value(a).map(f);
        let rg = self.rg(a.0);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        self.zip_with(Op::Add(a.0, b.0), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        self.zip_with(Op::Sub(a.0, b.0), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        self.zip_with(Op::Mul(a.0, b.0), a, b, |x, y| x * y)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(Op::Relu(a.0), a, |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(Op::Sigmoid(a.0), a, sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(Op::Tanh(a.0), a, T::tanh)
    }

    /// `1 − a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        self.map(Op::OneMinus(a.0), a, |x| T::one() - x)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.map(Op::Scale(a.0, c), a, |x| x * c)
    }

    /// Dispatch by op tag; unary tags take one operand, binary tags two.
    pub fn elementwise(&mut self, op: ElementwiseOp, operands: &[Var]) -> Result<Var> {
        if operands.len() != op.arity() {
            return Err(Error::Arity {
                op: "elementwise",
                expected: op.arity(),
                got: operands.len(),
            });
        }
        match op {
            ElementwiseOp::Relu => self.relu(operands[0]),
            ElementwiseOp::Sigmoid => self.sigmoid(operands[0]),
            ElementwiseOp::Tanh => self.tanh(operands[0]),
            ElementwiseOp::Add => self.add(operands[0], operands[1]),
            ElementwiseOp::Mul => self.mul(operands[0], operands[1]),
            ElementwiseOp::Sub => self.sub(operands[0], operands[1]),
        }
    }

    /// Adds a bias vector (`[n]` or `[1, n]`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.value(a).cols();
        let bshape = self.shape(bias);
        if self.value(bias).len() != n || bshape.len() > 2 || (bshape.len() == 2 && bshape[0] != 1) {
            return Err(Error::shape("add_row", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let va = self.value(a);
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            for (x, &y) in row.iter_mut().zip(&b) {
                *x += y;
            }
        }
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a.0) || self.rg(bias.0);
        self.push(out, Op::AddRow(a.0, bias.0), rg)
    }

    /// `x·W + b`.
    pub fn affine(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_row(y, bias)
    }

    /// Elementwise product with a constant of the same shape (no gradient
    /// flows into the constant).
    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Result<Var> {
        if c.shape() != self.shape(a) {
            return Err(Error::shape("mul_const", self.shape(a), c.shape()));
        }
        let va = self.value(a);
        let data = va.data().iter().zip(c.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a.0);
        self.push(out, Op::MulConst(a.0, c.into_data()), rg)
    }

    /// Row-wise choice: row `r` of the result is row `r` of `on_true` when
    /// `mask[r]`, else of `on_false`. Values are copied exactly.
    pub fn select_rows(&mut self, mask: &[bool], on_true: Var, on_false: Var) -> Result<Var> {
        self.same_shape("select_rows", on_true, on_false)?;
        let rows = self.value(on_true).rows();
        if mask.len() != rows {
            return Err(Error::shape("select_rows", self.shape(on_true), &[mask.len()]));
        }
        let cols = self.value(on_true).cols();
        let (vt, vf) = (self.value(on_true), self.value(on_false));
        let mut data = Vec::with_capacity(rows * cols);
        for (r, &m) in mask.iter().enumerate() {
            data.extend_from_slice(if m { vt.row(r) } else { vf.row(r) });
        }
        let out = Tensor::new(vt.shape().to_vec(), data)?;
        let rg = self.rg(on_true.0) || self.rg(on_false.0);
        self.push(out, Op::Select(mask.to_vec(), on_true.0, on_false.0), rg)
    }

    /// Zeroes every row whose mask bit is false.
    pub fn mask_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let va = self.value(a);
        if mask.len() != va.rows() {
            return Err(Error::shape("mask_rows", va.shape(), &[mask.len()]));
        }
        let cols = va.cols();
        let mut data = va.data().to_vec();
        for (row, &m) in data.chunks_mut(cols.max(1)).zip(mask) {
            if !m {
                row.iter_mut().for_each(|x| *x = T::zero());
            }
        }
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a.0);
        self.push(out, Op::MaskRows(a.0, mask.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Arity {
            op: "concat_cols",
            expected: 1,
            got: 0,
        })?;
        let rows = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_cols")?;
            if r != rows {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        let out = Tensor::new(vec![rows, total], data)?;
        self.push(out, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(a, "slice_rows")?;
        if start + len > rows {
            return Err(Error::OutOfRange {
                what: "rows",
                index: start + len,
                len: rows,
            });
        }
        let data = self.value(a).data()[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(a.0);
        self.push(Tensor::new(vec![len, cols], data)?, Op::SliceRows(a.0, start), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(a, "slice_cols")?;
        if start + len > cols {
            return Err(Error::OutOfRange {
                what: "columns",
                index: start + len,
                len: cols,
            });
        }
        let va = self.value(a);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&va.row(r)[start..start + len]);
        }
        let rg = self.rg(a.0);
        self.push(Tensor::new(vec![rows, len], data)?, Op::SliceCols(a.0, start), rg)
    }

    /// Row lookup into a `[vocab, dim]` table; `None` yields a zero row.
    pub fn gather_rows(&mut self, table: Var, indices: &[Option<usize>]) -> Result<Var> {
        let (vocab, dim) = self.matrix_dims(table, "gather_rows")?;
        let vt = self.value(table);
        let mut data = Vec::with_capacity(indices.len() * dim);
        for idx in indices {
            match *idx {
                Some(i) if i >= vocab => {
                    return Err(Error::OutOfRange {
                        what: "embedding table",
                        index: i,
                        len: vocab,
                    })
                }
                Some(i) => data.extend_from_slice(vt.row(i)),
                None => data.extend(std::iter::repeat_n(T::zero(), dim)),
            }
        }
        let rg = self.rg(table.0);
        let out = Tensor::new(vec![indices.len(), dim], data)?;
        self.push(out, Op::Gather(table.0, indices.to_vec()), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let s = self.value(a).sum() / T::from_usize(n).expect("count");
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(s), Op::Mean(a.0), rg)
    }

    /// Mean binary cross-entropy of `labels` under `sigmoid(logits)`,
    /// evaluated in the overflow-free form `max(x,0) − x·y + ln(1 + e^−|x|)`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[T]) -> Result<Var> {
        let vl = self.value(logits);
        if vl.len() != labels.len() {
            return Err(Error::shape("bce_with_logits", vl.shape(), &[labels.len()]));
        }
        if labels.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != T::zero() && y != T::one()) {
            return Err(Error::Contract(format!("label {bad} is not binary")));
        }
        let total: T = vl
            .data()
            .iter()
            .zip(labels)
            .map(|(&x, &y)| x.max(T::zero()) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let loss = total / T::from_usize(labels.len()).expect("count");
        let rg = self.rg(logits.0);
        self.push(Tensor::scalar(loss), Op::BceWithLogits(logits.0, labels.to_vec()), rg)
    }

    /// Propagates `d loss / d node` to every ancestor that requires a
    /// gradient. A tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss.0) {
            grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                g.ensure_finite(&format!("gradient of node {i}"))?;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[*a].value.shape()[0], self.nodes[*a].value.shape()[1]);
                let n = self.nodes[*b].value.shape()[1];
                if self.rg(*a) {
                    // dA = G·Bᵀ
                    let ga = acc_slot(grads, *a, &self.nodes[*a].value);
                    T::gemm(m, n, k, gd, false, self.nodes[*b].value.data(), true, T::one(), ga.data_mut());
                }
                if self.rg(*b) {
                    // dB = Aᵀ·G
                    let gb = acc_slot(grads, *b, &self.nodes[*b].value);
                    T::gemm(k, m, n, self.nodes[*a].value.data(), true, gd, false, T::one(), gb.data_mut());
                }
            }
            Op::Add(a, b) => {
                self.acc_map(grads, *a, gd, |_, g| g);
                self.acc_map(grads, *b, gd, |_, g| g);
            }
            Op::Sub(a, b) => {
                self.acc_map(grads, *a, gd, |_, g| g);
                self.acc_map(grads, *b, gd, |_, g| -g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                self.acc_map(grads, *a, gd, |i, g| g * vb[i]);
                self.acc_map(grads, *b, gd, |i, g| g * va[i]);
            }
            Op::AddRow(a, bias) => {
                self.acc_map(grads, *a, gd, |_, g| g);
                if self.rg(*bias) {
                    let n = self.nodes[*bias].value.len();
                    let gb = acc_slot(grads, *bias, &self.nodes[*bias].value);
                    for row in gd.chunks(n.max(1)) {
                        for (x, &y) in gb.data_mut().iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Relu(a) => {
                let va = self.nodes[*a].value.data();
                self.acc_map(grads, *a, gd, |i, g| if va[i] > T::zero() { g } else { T::zero() });
            }
            Op::Sigmoid(a) => {
                let out = node.value.data();
                self.acc_map(grads, *a, gd, |i, g| g * out[i] * (T::one() - out[i]));
            }
            Op::Tanh(a) => {
                let out = node.value.data();
                self.acc_map(grads, *a, gd, |i, g| g * (T::one() - out[i] * out[i]));
            }
            Op::OneMinus(a) => self.acc_map(grads, *a, gd, |_, g| -g),
            Op::Scale(a, c) => self.acc_map(grads, *a, gd, |_, g| g * *c),
            Op::MulConst(a, c) => self.acc_map(grads, *a, gd, |i, g| g * c[i]),
            Op::Select(mask, t, f) => {
                let cols = node.value.cols().max(1);
                self.acc_map(grads, *t, gd, |i, g| if mask[i / cols] { g } else { T::zero() });
                self.acc_map(grads, *f, gd, |i, g| if mask[i / cols] { T::zero() } else { g });
            }
            Op::MaskRows(a, mask) => {
                let cols = node.value.cols().max(1);
                self.acc_map(grads, *a, gd, |i, g| if mask[i / cols] { g } else { T::zero() });
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p].value.cols();
                    if self.rg(p) {
                        let gp = acc_slot(grads, p, &self.nodes[p].value);
                        let dst = gp.data_mut();
                        for r in 0..rows {
                            for c in 0..w {
                                dst[r * w + c] += gd[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceRows(a, start) => {
                if self.rg(*a) {
                    let cols = node.value.cols();
                    let ga = acc_slot(grads, *a, &self.nodes[*a].value);
                    for (x, &y) in ga.data_mut()[start * cols..].iter_mut().zip(gd) {
                        *x += y;
                    }
                }
            }
            Op::SliceCols(a, start) => {
                if self.rg(*a) {
                    let len = node.value.cols();
                    let cols = self.nodes[*a].value.cols();
                    let ga = acc_slot(grads, *a, &self.nodes[*a].value);
                    let dst = ga.data_mut();
                    for (r, row) in gd.chunks(len.max(1)).enumerate() {
                        for (c, &y) in row.iter().enumerate() {
                            dst[r * cols + start + c] += y;
                        }
                    }
                }
            }
            Op::Gather(table, indices) => {
                if self.rg(*table) {
                    let dim = self.nodes[*table].value.cols();
                    let gt = acc_slot(grads, *table, &self.nodes[*table].value);
                    let dst = gt.data_mut();
                    for (r, idx) in indices.iter().enumerate() {
                        if let Some(i) = *idx {
                            for c in 0..dim {
                                dst[i * dim + c] += gd[r * dim + c];
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let g0 = gd[0];
                self.acc_map(grads, *a, gd, |_, _| g0);
            }
            Op::Mean(a) => {
                let n = T::from_usize(self.nodes[*a].value.len()).expect("count");
                let g0 = gd[0] / n;
                self.acc_map(grads, *a, gd, |_, _| g0);
            }
            Op::BceWithLogits(a, labels) => {
                let n = T::from_usize(labels.len()).expect("count");
                let g0 = gd[0] / n;
                let logits = self.nodes[*a].value.data();
                self.acc_map(grads, *a, gd, |i, _| g0 * (sigmoid(logits[i]) - labels[i]));
            }
        }
        Ok(())
    }

    // grads[target][i] += f(i, upstream[i]) over every element of the
    // target, where `upstream` is only indexed when shapes agree.
    fn acc_map(&self, grads: &mut [Option<Tensor<T>>], target: usize, upstream: &[T], f: impl Fn(usize, T) -> T) {
        if !self.rg(target) {
            return;
        }
        let slot = acc_slot(grads, target, &self.nodes[target].value);
        let broadcast = upstream.len() != slot.len();
        for (i, x) in slot.data_mut().iter_mut().enumerate() {
            let g = if broadcast { upstream[0] } else { upstream[i] };
            *x += f(i, g);
        }
    }

    /// Adds the gradients of every bound parameter into `store`. Parameters
    /// that were bound but received no gradient get an explicit zero.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) -> Result<()> {
        if !self.consumed {
            return Err(Error::Contract("accumulate_param_grads before backward".into()));
        }
        let mut bound: Vec<_> = self.bound.iter().collect();
        bound.sort_by_key(|(id, _)| **id);
        for (&id, &var) in bound {
            match self.grad(var) {
                Some(g) => store.get_mut(id).accumulate_grad(g)?,
                None => {
                    let z = Tensor::zeros(store.value(id).shape());
                    store.get_mut(id).accumulate_grad(&z)?;
                }
            }
        }
        Ok(())
    }
}

fn acc_slot<'a, T: Scalar>(grads: &'a mut [Option<Tensor<T>>], idx: usize, like: &Tensor<T>) -> &'a mut Tensor<T> {
    grads[idx].get_or_insert_with(|| Tensor::zeros(like.shape()))
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::Relu(..) => "relu",
        Op::Sigmoid(..) => "sigmoid",
        Op::Tanh(..) => "tanh",
        Op::OneMinus(..) => "one_minus",
        Op::Scale(..) => "scale",
        Op::MulConst(..) => "mul_const",
        Op::Select(..) => "select_rows",
        Op::MaskRows(..) => "mask_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceRows(..) => "slice_rows",
        Op::SliceCols(..) => "slice_cols",
        Op::Gather(..) => "gather_rows",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::BceWithLogits(..) => "bce_with_logits",
    }
}
