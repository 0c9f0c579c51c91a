//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value and
//! the handles of its inputs. Nodes are appended in evaluation order, so the
//! tape is acyclic by construction and [`Graph::backward`] walks it once in
//! reverse, accumulating adjoints into every node that requires a gradient.
//!
//! Operands are 2-D (`rows × cols`) except for scalars produced by
//! [`Graph::sum`]. The only broadcasting is row-vector expansion in
//! [`Graph::add_row`] and [`Graph::mul_row`].

use std::sync::Arc;

use super::real::Real;
use super::tensor::Tensor;
use crate::error::{MelleError, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MulConst(Var, Arc<Vec<T>>),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Square(Var),
    Softplus(Var),
    Clamp(Var, T, T),
    Softmax(Var),
    LayerNorm(Var, Vec<T>),
    Sum(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    Unfold(Var, usize),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MulConst(..) => "mul_const",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Abs(..) => "abs",
            Op::Square(..) => "square",
            Op::Softplus(..) => "softplus",
            Op::Clamp(..) => "clamp",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::Sum(..) => "sum",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::Reshape(..) => "reshape",
            Op::GatherRows(..) => "gather_rows",
            Op::Unfold(..) => "unfold",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    non_finite: Option<(usize, &'static str)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some((id, op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(id)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Fails if any forward value so far contained NaN or ±inf.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            None => Ok(()),
            Some((node, op)) => Err(MelleError::NonFinite { op, node }),
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn dims2(&self, v: Var, op: &'static str) -> (usize, usize) {
        let s = self.value(v).shape();
        assert!(s.len() == 2, "{op}: expected a 2-D operand, got shape {s:?}");
        (s[0], s[1])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims2(a, "matmul");
        let (k2, n) = self.dims2(b, "matmul");
        assert_eq!(k, k2, "matmul: inner dimensions {k} vs {k2}");
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&[m, n], out).unwrap(), Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims2(a, "transpose");
        let x = self.value(a);
        let t = Tensor::from_fn(n, m, |i, j| x.at(j, i));
        let rg = self.rg(a);
        self.push(t, Op::Transpose(a), rg)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(
            x.shape(),
            y.shape(),
            "{}: operand shapes differ",
            op.name()
        );
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let t = Tensor::new(x.shape(), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |p, q| p * q)
    }

    fn row_broadcast(&mut self, a: Var, row: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let (m, n) = self.dims2(a, op.name());
        let r = self.value(row);
        assert_eq!(r.len(), n, "{}: row length {} vs {n} columns", op.name(), r.len());
        let x = self.value(a);
        let t = Tensor::from_fn(m, n, |i, j| f(x.at(i, j), r.data()[j]));
        let rg = self.rg(a) || self.rg(row);
        self.push(t, op, rg)
    }

    /// `a[i, j] + row[j]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        self.row_broadcast(a, row, Op::AddRow(a, row), |p, q| p + q)
    }

    /// `a[i, j] * row[j]`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        self.row_broadcast(a, row, Op::MulRow(a, row), |p, q| p * q)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg)
    }

    /// Elementwise product with a non-differentiable tensor of the same length (masks, noise).
    pub fn mul_const(&mut self, a: Var, c: Arc<Vec<T>>) -> Var {
        let x = self.value(a);
        assert_eq!(x.len(), c.len(), "mul_const: length mismatch");
        let data = x.data().iter().zip(c.iter()).map(|(&p, &q)| p * q).collect();
        let t = Tensor::new(x.shape(), data).unwrap();
        let rg = self.rg(a);
        self.push(t, Op::MulConst(a, c), rg)
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let t = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(T::zero()))
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k) = (T::c(GELU_C), T::c(GELU_A));
        let half = T::c(0.5);
        self.unary(a, Op::Gelu(a), move |x| {
            half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
        })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    /// Natural log; inputs must be positive.
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), |x| x.ln())
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), |x| x.abs())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    /// Clamp to `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), move |x| x.max(lo).min(hi))
    }

    /// Row-wise softmax. Entries where `allowed(row, col)` is false get probability 0.
    /// Every row must allow at least one column.
    pub fn softmax_rows_masked(&mut self, a: Var, allowed: impl Fn(usize, usize) -> bool) -> Var {
        let (m, n) = self.dims2(a, "softmax");
        let x = self.value(a);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = x.row(i);
            let mut mx = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if allowed(i, j) && v > mx {
                    mx = v;
                }
            }
            assert!(mx > T::neg_infinity(), "softmax: row {i} fully masked");
            let mut s = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if allowed(i, j) {
                    let e = (v - mx).exp();
                    out[i * n + j] = e;
                    s = s + e;
                }
            }
            for o in &mut out[i * n..(i + 1) * n] {
                *o = *o / s;
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::new(&[m, n], out).unwrap(), Op::Softmax(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.softmax_rows_masked(a, |_, _| true)
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: T) -> Var {
        let (m, n) = self.dims2(a, "layer_norm");
        let x = self.value(a);
        let nn = T::c(n as f64);
        let mut out = vec![T::zero(); m * n];
        let mut rstd = Vec::with_capacity(m);
        for i in 0..m {
            let row = x.row(i);
            let mean = row.iter().copied().sum::<T>() / nn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nn;
            let r = T::one() / (var + eps).sqrt();
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * r;
            }
            rstd.push(r);
        }
        let rg = self.rg(a);
        self.push(Tensor::new(&[m, n], out).unwrap(), Op::LayerNorm(a, rstd), rg)
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no operands");
        let n = self.dims2(parts[0], "concat_rows").1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.dims2(p, "concat_rows");
            assert_eq!(pn, n, "concat_rows: column counts differ");
            data.extend_from_slice(self.value(p).data());
            m += pm;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::new(&[m, n], data).unwrap(),
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no operands");
        let m = self.dims2(parts[0], "concat_cols").0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pm, pn) = self.dims2(p, "concat_cols");
                assert_eq!(pm, m, "concat_cols: row counts differ");
                pn
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::new(&[m, n], data).unwrap(),
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (m, _) = self.dims2(a, "slice_rows");
        assert!(start <= end && end <= m, "slice_rows: {start}..{end} of {m}");
        let t = self.value(a).slice_rows(start, end);
        let rg = self.rg(a);
        self.push(t, Op::SliceRows(a, start), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (m, n) = self.dims2(a, "slice_cols");
        assert!(start <= end && end <= n, "slice_cols: {start}..{end} of {n}");
        let x = self.value(a);
        let t = Tensor::from_fn(m, end - start, |i, j| x.at(i, start + j));
        let rg = self.rg(a);
        self.push(t, Op::SliceCols(a, start), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self
            .value(a)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("{e}"));
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg)
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let (m, n) = self.dims2(table, "gather_rows");
        let x = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            assert!(id < m, "gather_rows: id {id} out of range {m}");
            data.extend_from_slice(x.row(id));
        }
        let rg = self.rg(table);
        self.push(
            Tensor::new(&[ids.len(), n], data).unwrap(),
            Op::GatherRows(table, ids.to_vec()),
            rg,
        )
    }

    /// Time-unfolding for "same"-padded 1-D convolution over rows.
    ///
    /// `x: T×C` becomes `T×(k·C)` where block `j` of row `t` holds
    /// `x[t + j - (k-1)/2]`, or zeros outside `[0, T)`. `k` must be odd.
    pub fn unfold_rows(&mut self, a: Var, k: usize) -> Var {
        assert!(k % 2 == 1, "unfold_rows: kernel size must be odd");
        let (t, c) = self.dims2(a, "unfold_rows");
        let x = self.value(a);
        let pad = (k - 1) / 2;
        let mut data = vec![T::zero(); t * k * c];
        for row in 0..t {
            for j in 0..k {
                let src = row as isize + j as isize - pad as isize;
                if src >= 0 && (src as usize) < t {
                    let dst = row * k * c + j * c;
                    data[dst..dst + c].copy_from_slice(x.row(src as usize));
                }
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::new(&[t, k * c], data).unwrap(), Op::Unfold(a, k), rg)
    }

    /// Reverse sweep from a rank-0 `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check_finite()?;
        let lv = self.value(loss);
        if !lv.shape().is_empty() {
            return Err(MelleError::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }

        let mut out = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let g = grads
                    .get_mut(i)
                    .and_then(|g| g.take())
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                out.push((Var(i), g));
            }
        }
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a, "matmul");
                let n = self.value(*b).cols();
                if self.rg(*a) {
                    // dA = G · Bᵀ
                    let buf = slot(grads, self, *a);
                    T::gemm(m, n, k, gd, (n as isize, 1), self.value(*b).data(), (1, n as isize), buf, true);
                }
                if self.rg(*b) {
                    // dB = Aᵀ · G
                    let buf = slot(grads, self, *b);
                    T::gemm(k, m, n, self.value(*a).data(), (1, k as isize), gd, (n as isize, 1), buf, true);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.dims2(*a, "transpose");
                let buf = slot(grads, self, *a);
                for i in 0..m {
                    for j in 0..n {
                        buf[i * n + j] = buf[i * n + j] + gd[j * m + i];
                    }
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, self, *a, |buf| add_into(buf, gd));
                accumulate(grads, self, *b, |buf| add_into(buf, gd));
            }
            Op::Sub(a, b) => {
                accumulate(grads, self, *a, |buf| add_into(buf, gd));
                accumulate(grads, self, *b, |buf| {
                    for (o, &d) in buf.iter_mut().zip(gd) {
                        *o = *o - d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                accumulate(grads, self, *a, |buf| {
                    for ((o, &d), &q) in buf.iter_mut().zip(gd).zip(xb) {
                        *o = *o + d * q;
                    }
                });
                accumulate(grads, self, *b, |buf| {
                    for ((o, &d), &p) in buf.iter_mut().zip(gd).zip(xa) {
                        *o = *o + d * p;
                    }
                });
            }
            Op::AddRow(a, row) => {
                let n = y.cols();
                accumulate(grads, self, *a, |buf| add_into(buf, gd));
                accumulate(grads, self, *row, |buf| {
                    for chunk in gd.chunks(n) {
                        add_into(buf, chunk);
                    }
                });
            }
            Op::MulRow(a, row) => {
                let n = y.cols();
                let (x, r) = (self.value(*a).data(), self.value(*row).data());
                accumulate(grads, self, *a, |buf| {
                    for (idx, (o, &d)) in buf.iter_mut().zip(gd).enumerate() {
                        *o = *o + d * r[idx % n];
                    }
                });
                accumulate(grads, self, *row, |buf| {
                    for (idx, (&d, &p)) in gd.iter().zip(x).enumerate() {
                        buf[idx % n] = buf[idx % n] + d * p;
                    }
                });
            }
            Op::Scale(a, c) => {
                accumulate(grads, self, *a, |buf| {
                    for (o, &d) in buf.iter_mut().zip(gd) {
                        *o = *o + d * *c;
                    }
                });
            }
            Op::AddScalar(a) => accumulate(grads, self, *a, |buf| add_into(buf, gd)),
            Op::MulConst(a, c) => {
                accumulate(grads, self, *a, |buf| {
                    for ((o, &d), &q) in buf.iter_mut().zip(gd).zip(c.iter()) {
                        *o = *o + d * q;
                    }
                });
            }
            Op::Relu(a) => self.pointwise_back(*a, gd, grads, |x, _| {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }),
            Op::Gelu(a) => {
                let (c, k, half) = (T::c(GELU_C), T::c(GELU_A), T::c(0.5));
                let three = T::c(3.0);
                self.pointwise_back(*a, gd, grads, |x, _| {
                    let th = (c * (x + k * x * x * x)).tanh();
                    half * (T::one() + th)
                        + half * x * (T::one() - th * th) * c * (T::one() + three * k * x * x)
                })
            }
            Op::Tanh(a) => self.output_back(*a, y, gd, grads, |t| T::one() - t * t),
            Op::Sigmoid(a) => self.output_back(*a, y, gd, grads, |s| s * (T::one() - s)),
            Op::Exp(a) => self.output_back(*a, y, gd, grads, |e| e),
            Op::Ln(a) => self.pointwise_back(*a, gd, grads, |x, _| T::one() / x),
            Op::Abs(a) => self.pointwise_back(*a, gd, grads, |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }),
            Op::Square(a) => self.pointwise_back(*a, gd, grads, |x, _| x + x),
            Op::Softplus(a) => self.pointwise_back(*a, gd, grads, |x, _| sigmoid(x)),
            Op::Clamp(a, lo, hi) => self.pointwise_back(*a, gd, grads, |x, _| {
                if x >= *lo && x <= *hi {
                    T::one()
                } else {
                    T::zero()
                }
            }),
            Op::Softmax(a) => {
                let n = y.cols();
                let yd = y.data();
                accumulate(grads, self, *a, |buf| {
                    for ((o, yr), gr) in buf.chunks_mut(n).zip(yd.chunks(n)).zip(gd.chunks(n)) {
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for ((ob, &p), &q) in o.iter_mut().zip(yr).zip(gr) {
                            *ob = *ob + p * (q - dot);
                        }
                    }
                });
            }
            Op::LayerNorm(a, rstd) => {
                let n = y.cols();
                let nn = T::c(n as f64);
                let yd = y.data();
                accumulate(grads, self, *a, |buf| {
                    for (i, ((o, yr), gr)) in buf
                        .chunks_mut(n)
                        .zip(yd.chunks(n))
                        .zip(gd.chunks(n))
                        .enumerate()
                    {
                        let gmean = gr.iter().copied().sum::<T>() / nn;
                        let gy = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum::<T>() / nn;
                        for ((ob, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                            *ob = *ob + rstd[i] * (gv - gmean - yv * gy);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let s = gd[0];
                accumulate(grads, self, *a, |buf| {
                    for o in buf.iter_mut() {
                        *o = *o + s;
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let piece = &gd[off..off + len];
                    accumulate(grads, self, p, |buf| add_into(buf, piece));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let n = y.cols();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    accumulate(grads, self, p, |buf| {
                        for (o, gr) in buf.chunks_mut(w).zip(gd.chunks(n)) {
                            add_into(o, &gr[col..col + w]);
                        }
                    });
                    col += w;
                }
            }
            Op::SliceRows(a, start) => {
                let n = y.cols();
                accumulate(grads, self, *a, |buf| {
                    add_into(&mut buf[start * n..start * n + gd.len()], gd)
                });
            }
            Op::SliceCols(a, start) => {
                let w = y.cols();
                let n = self.value(*a).cols();
                accumulate(grads, self, *a, |buf| {
                    for (o, gr) in buf.chunks_mut(n).zip(gd.chunks(w)) {
                        add_into(&mut o[*start..*start + w], gr);
                    }
                });
            }
            Op::Reshape(a) => accumulate(grads, self, *a, |buf| add_into(buf, gd)),
            Op::GatherRows(table, ids) => {
                let n = y.cols();
                accumulate(grads, self, *table, |buf| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut buf[id * n..(id + 1) * n], &gd[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::Unfold(a, k) => {
                let (t, c) = self.dims2(*a, "unfold_rows");
                let pad = (k - 1) / 2;
                accumulate(grads, self, *a, |buf| {
                    for row in 0..t {
                        for j in 0..*k {
                            let src = row as isize + j as isize - pad as isize;
                            if src >= 0 && (src as usize) < t {
                                let s = src as usize;
                                let from = row * k * c + j * c;
                                add_into(&mut buf[s * c..(s + 1) * c], &gd[from..from + c]);
                            }
                        }
                    }
                });
            }
        }
    }

    /// Backward for `y = f(x)` with derivative expressed in terms of the input.
    fn pointwise_back(
        &self,
        a: Var,
        gd: &[T],
        grads: &mut [Option<Tensor<T>>],
        df: impl Fn(T, T) -> T,
    ) {
        let x = self.value(a).data();
        accumulate(grads, self, a, |buf| {
            for ((o, &d), &xv) in buf.iter_mut().zip(gd).zip(x) {
                *o = *o + d * df(xv, d);
            }
        });
    }

    /// Backward for `y = f(x)` with derivative expressed in terms of the output.
    fn output_back(
        &self,
        a: Var,
        y: &Tensor<T>,
        gd: &[T],
        grads: &mut [Option<Tensor<T>>],
        df: impl Fn(T) -> T,
    ) {
        let yd = y.data();
        accumulate(grads, self, a, |buf| {
            for ((o, &d), &yv) in buf.iter_mut().zip(gd).zip(yd) {
                *o = *o + d * df(yv);
            }
        });
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (o, &s) in dst.iter_mut().zip(src) {
        *o = *o + s;
    }
}

fn slot<'a, T: Real>(grads: &'a mut [Option<Tensor<T>>], g: &Graph<T>, v: Var) -> &'a mut [T] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(g.value(v).shape()))
        .data_mut()
}

fn accumulate<T: Real>(
    grads: &mut [Option<Tensor<T>>],
    g: &Graph<T>,
    v: Var,
    f: impl FnOnce(&mut [T]),
) {
    if g.rg(v) {
        f(slot(grads, g, v));
    }
}

/// Gradients of a scalar with respect to every differentiable leaf of a graph.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<(Var, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads
            .binary_search_by_key(&v, |(k, _)| *k)
            .ok()
            .map(|i| &self.grads[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> {
        self.grads.iter().map(|(v, t)| (*v, t))
    }

    pub fn into_map(self) -> Vec<(Var, Tensor<T>)> {
        self.grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn square_at_three_has_gradient_six() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1, 1], &[3.0]));
        let y = g.mul(x, x);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn identity_matmul_sum_gives_ones() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_fn(3, 3, |i, j| if i == j { 1.0 } else { 0.0 }));
        let x = g.param(t(&[3, 1], &[0.3, -2.0, 5.0]));
        let y = g.matmul(a, x);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1, 2], &[1.0, 2.0]));
        let y = g.square(x);
        assert!(matches!(g.backward(y), Err(MelleError::Shape { .. })));
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1, 2], &[1.0, 2.0]));
        let unused = g.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn nan_is_reported_with_its_op() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1, 1], &[1000.0]));
        let e = g.exp(x);
        let y = g.sub(e, e);
        let s = g.sum(y);
        let err = g.backward(s).unwrap_err();
        assert!(matches!(err, MelleError::NonFinite { op: "exp", .. }), "{err}");
    }

    #[test]
    fn softmax_rows_sum_to_one_and_respect_mask() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.7 - 3.0));
        let y = g.softmax_rows_masked(x, |i, j| j <= i + 1);
        let v = g.value(y);
        for i in 0..3 {
            let s: f64 = v.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            for j in (i + 2)..4 {
                assert_eq!(v.at(i, j), 0.0);
            }
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(2, 6, |i, j| ((i + 1) * (j * j + 1)) as f64));
        let y = g.layer_norm_rows(x, 1e-12);
        let v = g.value(y);
        for i in 0..2 {
            let r = v.row(i);
            let mean = r.iter().sum::<f64>() / 6.0;
            let var = r.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn unfold_matches_direct_convolution() {
        // 1 channel, kernel [1, 2, 3] centered.
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[4, 1], &[1.0, 0.0, -1.0, 2.0]));
        let u = g.unfold_rows(x, 3);
        let w = g.constant(t(&[3, 1], &[1.0, 2.0, 3.0]));
        let y = g.matmul(u, w);
        // y[t] = x[t-1] + 2 x[t] + 3 x[t+1]
        assert_eq!(g.value(y).data(), &[2.0, -2.0, 4.0, 3.0]);
    }
}
