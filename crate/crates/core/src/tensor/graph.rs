use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::str::FromStr;
use std::sync::Arc;

use super::kernels::{self, ConvShape, Layout};
use super::{Real, Tensor};
use crate::error::{shape_mismatch, Error, Result};
use crate::geometry::sampling::{self, SampleLayout};
use crate::geometry::transform::{self, GridLayout};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Silu,
    /// tanh approximation of GELU.
    Gelu,
}

impl Activation {
    pub fn leaky_relu(slope: f64) -> Result<Self> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::config(format!("leaky_relu slope {slope} outside (0, 1)")));
        }
        Ok(Activation::LeakyRelu(slope))
    }

    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::LeakyRelu(slope) => {
                if x > T::zero() {
                    x
                } else {
                    x * T::lit(slope)
                }
            }
            Activation::Silu => x / (T::one() + (-x).exp()),
            Activation::Gelu => {
                let u = T::lit(GELU_C) * (x + T::lit(0.044715) * x * x * x);
                T::lit(0.5) * x * (T::one() + u.tanh())
            }
        }
    }

    fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::LeakyRelu(slope) => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::lit(slope)
                }
            }
            Activation::Silu => {
                let sig = T::one() / (T::one() + (-x).exp());
                sig * (T::one() + x * (T::one() - sig))
            }
            Activation::Gelu => {
                let u = T::lit(GELU_C) * (x + T::lit(0.044715) * x * x * x);
                let t = u.tanh();
                let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * 0.044715) * x * x);
                T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl FromStr for Activation {
    type Err = Error;

    /// Parses `silu`, `gelu`, `leaky_relu` (slope 0.01) or `leaky_relu:<slope>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(Activation::Silu),
            "gelu" => Ok(Activation::Gelu),
            "leaky_relu" => Activation::leaky_relu(0.01),
            other => match other.strip_prefix("leaky_relu:") {
                Some(slope) => {
                    let slope = slope
                        .parse::<f64>()
                        .map_err(|_| Error::config(format!("bad leaky_relu slope {slope:?}")))?;
                    Activation::leaky_relu(slope)
                }
                None => Err(Error::config(format!("unknown activation {other:?}"))),
            },
        }
    }
}

/// Mean and biased variance per normalized slice.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum NormAxis {
    /// normalize each row over its columns
    Rows,
    /// normalize each column over the rows
    Cols,
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul { a: Var, b: Var, batch: usize, dims: (usize, usize, usize), trans_b: bool },
    Transpose(Var),
    Reshape(Var),
    Gather { x: Var, index: Arc<[Option<usize>]> },
    Sum(Var),
    SumAxis { x: Var, outer: usize, len: usize, inner: usize },
    Softmax(Var),
    Activation(Var, Activation),
    Normalize { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T>, axis: NormAxis, fixed: bool },
    Conv2d { x: Var, kernel: Var, shape: ConvShape },
    TransformGrid { params: Var, layout: Arc<GridLayout> },
    Bilinear { feature: Var, coords: Var, layout: SampleLayout },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Define-by-run tape: values are computed eagerly and every operation is
/// recorded with what its backward rule needs. Nodes are appended in
/// evaluation order, so the node list is always topologically sorted.
pub struct Graph<T: Real = f64> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn record(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.push(value, op)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor { shape: ta.shape().to_vec(), data }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let c = T::lit(factor);
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    fn row_operand(&self, op: &str, x: Var, row: Var) -> Result<usize> {
        let n = *self.shape(x).last().unwrap_or(&1);
        if self.shape(row) != [n] {
            return Err(shape_mismatch(op, self.shape(x), self.shape(row)));
        }
        Ok(n)
    }

    /// `x[.., j] + row[j]`, broadcasting over all leading axes.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.row_operand("add_row", x, row)?;
        let r = self.value(row).data().to_vec();
        let tx = self.value(x);
        let data = tx.data().iter().enumerate().map(|(i, &v)| v + r[i % n]).collect();
        let v = Tensor { shape: tx.shape().to_vec(), data };
        Ok(self.push(v, Op::AddRow(x, row)))
    }

    /// `x[.., j] * row[j]`, broadcasting over all leading axes.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = self.row_operand("mul_row", x, row)?;
        let r = self.value(row).data().to_vec();
        let tx = self.value(x);
        let data = tx.data().iter().enumerate().map(|(i, &v)| v * r[i % n]).collect();
        let v = Tensor { shape: tx.shape().to_vec(), data };
        Ok(self.push(v, Op::MulRow(x, row)))
    }

    /// Matrix product of `m×k` and `k×n` operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_mismatch("matmul", sa, sb));
        }
        let dims = (sa[0], sa[1], sb[1]);
        self.matmul_impl(a, b, 1, dims, false, vec![dims.0, dims.2])
    }

    /// Batched product `a[b,m,k] · b[b,k,n]`, or `a · bᵀ` with `b[b,n,k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(shape_mismatch("bmm", sa, sb));
        }
        let n = if trans_b { sb[1] } else { sb[2] };
        let (batch, dims) = (sa[0], (sa[1], sa[2], n));
        self.matmul_impl(a, b, batch, dims, trans_b, vec![batch, dims.0, n])
    }

    fn matmul_impl(
        &mut self,
        a: Var,
        b: Var,
        batch: usize,
        dims: (usize, usize, usize),
        trans_b: bool,
        shape: Vec<usize>,
    ) -> Result<Var> {
        let mut out = vec![T::zero(); batch * dims.0 * dims.2];
        let layout = if trans_b { Layout::NT } else { Layout::NN };
        kernels::bmm(self.value(a).data(), self.value(b).data(), &mut out, batch, dims, layout);
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul { a, b, batch, dims, trans_b }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim(format!("transpose expects a matrix, got {s:?}")));
        }
        let v = transpose2(self.value(x));
        Ok(self.push(v, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// `out[i] = x[index[i]]`, or zero where the index is `None`. Duplicate
    /// indices are allowed; their gradients accumulate.
    pub fn gather(
        &mut self,
        x: Var,
        shape: impl Into<Vec<usize>>,
        index: Arc<[Option<usize>]>,
    ) -> Result<Var> {
        let shape = shape.into();
        let src = self.value(x).data();
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::dim(format!("gather: index of length {} for shape {shape:?}", index.len())));
        }
        if let Some(bad) = index.iter().flatten().find(|&&j| j >= src.len()) {
            return Err(Error::dim(format!("gather: index {bad} outside source of length {}", src.len())));
        }
        let data = index.iter().map(|j| j.map_or(T::zero(), |j| src[j])).collect();
        Ok(self.push(Tensor { shape, data }, Op::Gather { x, index }))
    }

    /// Sum of all elements, as a scalar. Accumulates in `f64` whatever `T` is.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        self.push(Tensor::scalar(T::lit(total)), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums out one axis.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("sum_axis: axis {axis} for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + src[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(Tensor { shape: out_shape, data: out }, Op::SumAxis { x, outer, len, inner }))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::dim(format!("mean_axis: axis {axis} out of range")))?;
        if len == 0 {
            return Err(Error::dim("mean_axis over an empty axis"));
        }
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if n == 0 {
            return Err(Error::dim("softmax over an empty last dimension"));
        }
        let tx = self.value(x);
        let mut out = vec![T::zero(); tx.len()];
        kernels::softmax_rows(tx.data(), &mut out, n);
        let v = Tensor { shape: tx.shape().to_vec(), data: out };
        Ok(self.push(v, Op::Softmax(x)))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let v = self.value(x).map(|z| act.apply(z));
        self.push(v, Op::Activation(x, act))
    }

    fn check_affine(&self, op: &str, x: Var, gain: Var, bias: Var, eps: f64, width: usize) -> Result<()> {
        if !(eps > 0.0) {
            return Err(Error::config(format!("{op}: epsilon must be positive, got {eps}")));
        }
        if width == 0 {
            return Err(Error::dim(format!("{op}: zero-length normalization axis")));
        }
        if self.shape(gain) != [width] || self.shape(bias) != [width] {
            return Err(shape_mismatch(op, self.shape(x), self.shape(gain)));
        }
        Ok(())
    }

    /// Layer normalization over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        self.check_affine("layer_norm", x, gain, bias, eps, c)?;
        self.normalize(x, gain, bias, eps, NormAxis::Rows, None)
    }

    /// Batch normalization of an `N×C` matrix with statistics of this batch.
    pub fn batch_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::dim(format!("batch_norm expects a non-empty N×C matrix, got {s:?}")));
        }
        self.check_affine("batch_norm", x, gain, bias, eps, s[1])?;
        let stats = column_stats(self.value(x));
        let out = self.normalize(x, gain, bias, eps, NormAxis::Cols, None)?;
        Ok((out, stats))
    }

    /// Batch normalization with fixed (running) statistics, as used at inference.
    pub fn batch_norm_fixed(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        stats: &BatchStats<T>,
        eps: f64,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dim(format!("batch_norm expects an N×C matrix, got {s:?}")));
        }
        self.check_affine("batch_norm", x, gain, bias, eps, s[1])?;
        if stats.mean.len() != s[1] || stats.var.len() != s[1] {
            return Err(Error::dim("batch_norm: running statistics width mismatch"));
        }
        self.normalize(x, gain, bias, eps, NormAxis::Cols, Some(stats))
    }

    fn normalize(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
        axis: NormAxis,
        fixed: Option<&BatchStats<T>>,
    ) -> Result<Var> {
        let tx = self.value(x);
        let c = *tx.shape().last().unwrap_or(&1);
        let rows = tx.len() / c.max(1);
        let eps = T::lit(eps);
        let (groups, stats) = match axis {
            NormAxis::Rows => (rows, row_stats(tx)),
            NormAxis::Cols => (c, fixed.cloned().unwrap_or_else(|| column_stats(tx))),
        };
        let inv_std: Vec<T> = stats.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let group_of = |i: usize| match axis {
            NormAxis::Rows => i / c,
            NormAxis::Cols => i % c,
        };
        debug_assert_eq!(inv_std.len(), groups);
        let xhat: Vec<T> = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let g = group_of(i);
                (v - stats.mean[g]) * inv_std[g]
            })
            .collect();
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let data = xhat.iter().enumerate().map(|(i, &h)| h * gv[i % c] + bv[i % c]).collect();
        let v = Tensor { shape: tx.shape().to_vec(), data };
        let op = Op::Normalize { x, gain, bias, xhat, inv_std, axis, fixed: fixed.is_some() };
        Ok(self.push(v, op))
    }

    /// Grouped stride-1 cross-correlation of a `C×H×W` map with a
    /// `C_out×(C/groups)×k×k` kernel. Padding must preserve the spatial size.
    pub fn conv2d(&mut self, x: Var, kernel: Var, groups: usize, pad: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 3 || sk.len() != 4 {
            return Err(shape_mismatch("conv2d", &sx, &sk));
        }
        if groups == 0 || sx[0] % groups != 0 || sk[0] % groups != 0 {
            return Err(Error::config(format!(
                "conv2d: {} input / {} output channels not divisible into {groups} groups",
                sx[0], sk[0]
            )));
        }
        if sk[1] != sx[0] / groups || sk[2] != sk[3] || sk[2] % 2 == 0 {
            return Err(Error::dim(format!("conv2d: kernel {sk:?} unsuitable for input {sx:?}")));
        }
        if 2 * pad + 1 != sk[2] {
            return Err(Error::dim(format!("conv2d: pad {pad} does not preserve size for kernel {}", sk[2])));
        }
        let shape = ConvShape {
            in_channels: sx[0],
            out_channels: sk[0],
            height: sx[1],
            width: sx[2],
            kernel: sk[2],
            groups,
            pad,
        };
        let mut out = vec![T::zero(); shape.out_channels * shape.out_height() * shape.out_width()];
        kernels::conv2d_forward(self.value(x).data(), self.value(kernel).data(), &shape, &mut out);
        let v = Tensor { shape: vec![shape.out_channels, shape.out_height(), shape.out_width()], data: out };
        Ok(self.push(v, Op::Conv2d { x, kernel, shape }))
    }

    /// Hash of every discrete branch taken in this graph: bilinear sample
    /// cells and leaky-relu sides. Two evaluations with equal signatures lie
    /// in the same smooth piece of the function.
    pub fn regime_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Bilinear { coords, .. } => {
                    for c in self.value(*coords).data() {
                        (c.floor().as_f64() as i64).hash(&mut h);
                    }
                }
                Op::Activation(x, Activation::LeakyRelu(_)) => {
                    for v in self.value(*x).data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse accumulation from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![T::one()]);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|data| Tensor { shape: n.value.shape().to_vec(), data }))
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            let n = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(d, &v)| *d = *d - v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    s.iter_mut().zip(g).zip(vb).for_each(|((d, &gv), &y)| *d = *d + gv * y)
                });
                acc(*b, &mut |s| {
                    s.iter_mut().zip(g).zip(va).for_each(|((d, &gv), &x)| *d = *d + gv * x)
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + *c * v)),
            Op::AddRow(x, row) => {
                let n = val(*row).len();
                acc(*x, &mut |s| add_into(s, g));
                acc(*row, &mut |s| {
                    for (k, &v) in g.iter().enumerate() {
                        s[k % n] = s[k % n] + v;
                    }
                });
            }
            Op::MulRow(x, row) => {
                let (vx, vr) = (val(*x), val(*row));
                let n = vr.len();
                acc(*x, &mut |s| {
                    for (k, &v) in g.iter().enumerate() {
                        s[k] = s[k] + v * vr[k % n];
                    }
                });
                acc(*row, &mut |s| {
                    for (k, &v) in g.iter().enumerate() {
                        s[k % n] = s[k % n] + v * vx[k];
                    }
                });
            }
            Op::MatMul { a, b, batch, dims, trans_b } => {
                let (m, k, n) = *dims;
                let (va, vb) = (val(*a), val(*b));
                let mut tmp_a = vec![T::zero(); batch * m * k];
                let mut tmp_b = vec![T::zero(); batch * k * n];
                if *trans_b {
                    // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                    kernels::bmm(g, vb, &mut tmp_a, *batch, (m, n, k), Layout::NN);
                    kernels::bmm(g, va, &mut tmp_b, *batch, (n, m, k), Layout::TN);
                } else {
                    // C = A·B: dA = dC·Bᵀ, dB = Aᵀ·dC
                    kernels::bmm(g, vb, &mut tmp_a, *batch, (m, n, k), Layout::NT);
                    kernels::bmm(va, g, &mut tmp_b, *batch, (k, m, n), Layout::TN);
                }
                acc(*a, &mut |s| add_into(s, &tmp_a));
                acc(*b, &mut |s| add_into(s, &tmp_b));
            }
            Op::Transpose(x) => {
                let gt = transpose2(&Tensor { shape: node.value.shape().to_vec(), data: g.to_vec() });
                acc(*x, &mut |s| add_into(s, gt.data()));
            }
            Op::Reshape(x) => acc(*x, &mut |s| add_into(s, g)),
            Op::Gather { x, index } => acc(*x, &mut |s| {
                for (&gv, j) in g.iter().zip(index.iter()) {
                    if let Some(j) = *j {
                        s[j] = s[j] + gv;
                    }
                }
            }),
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|d| *d = *d + g[0])),
            Op::SumAxis { x, outer, len, inner } => acc(*x, &mut |s| {
                for o in 0..*outer {
                    for l in 0..*len {
                        let base = (o * len + l) * inner;
                        for q in 0..*inner {
                            s[base + q] = s[base + q] + g[o * inner + q];
                        }
                    }
                }
            }),
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap_or(&1);
                acc(*x, &mut |s| {
                    for ((sr, yr), gr) in s.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((d, &yv), &gv) in sr.iter_mut().zip(yr).zip(gr) {
                            *d = *d + yv * (gv - dot);
                        }
                    }
                });
            }
            Op::Activation(x, act) => {
                let vx = val(*x);
                acc(*x, &mut |s| {
                    for ((d, &gv), &xv) in s.iter_mut().zip(g).zip(vx) {
                        *d = *d + gv * act.derivative(xv);
                    }
                });
            }
            Op::Normalize { x, gain, bias, xhat, inv_std, axis, fixed } => {
                let gv = val(*gain);
                let c = gv.len();
                acc(*gain, &mut |s| {
                    for (k, (&gr, &h)) in g.iter().zip(xhat).enumerate() {
                        s[k % c] = s[k % c] + gr * h;
                    }
                });
                acc(*bias, &mut |s| {
                    for (k, &gr) in g.iter().enumerate() {
                        s[k % c] = s[k % c] + gr;
                    }
                });
                let dxhat: Vec<T> = g.iter().enumerate().map(|(k, &gr)| gr * gv[k % c]).collect();
                let dx = normalize_backward(&dxhat, xhat, inv_std, *axis, *fixed, c);
                acc(*x, &mut |s| add_into(s, &dx));
            }
            Op::Conv2d { x, kernel, shape } => {
                let (vx, vk) = (val(*x), val(*kernel));
                acc(*x, &mut |s| kernels::conv2d_backward(vx, vk, shape, g, Some(s), None));
                acc(*kernel, &mut |s| kernels::conv2d_backward(vx, vk, shape, g, None, Some(s)));
            }
            Op::TransformGrid { params, layout } => {
                let vp = val(*params);
                acc(*params, &mut |s| transform::transform_backward(vp, layout, g, s));
            }
            Op::Bilinear { feature, coords, layout } => {
                let (vf, vc) = (val(*feature), val(*coords));
                acc(*feature, &mut |s| sampling::bilinear_backward(vf, vc, layout, g, Some(s), None));
                acc(*coords, &mut |s| sampling::bilinear_backward(vf, vc, layout, g, None, Some(s)));
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &v)| *d = *d + v);
}

fn transpose2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let src = x.data();
    let mut data = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = src[i * c + j];
        }
    }
    Tensor { shape: vec![c, r], data }
}

fn row_stats<T: Real>(x: &Tensor<T>) -> BatchStats<T> {
    let c = *x.shape().last().unwrap_or(&1);
    let n = T::lit(c as f64);
    let mut stats = BatchStats { mean: Vec::new(), var: Vec::new() };
    for row in x.data().chunks(c) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        stats.mean.push(mean);
        stats.var.push(var);
    }
    stats
}

fn column_stats<T: Real>(x: &Tensor<T>) -> BatchStats<T> {
    let c = *x.shape().last().unwrap_or(&1);
    let rows = x.len() / c.max(1);
    let n = T::lit(rows as f64);
    let d = x.data();
    let mut mean = vec![T::zero(); c];
    for row in d.chunks(c) {
        add_into(&mut mean, row);
    }
    mean.iter_mut().for_each(|m| *m = *m / n);
    let mut var = vec![T::zero(); c];
    for row in d.chunks(c) {
        for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
            *v = *v + (x - m) * (x - m);
        }
    }
    var.iter_mut().for_each(|v| *v = *v / n);
    BatchStats { mean, var }
}

fn normalize_backward<T: Real>(
    dxhat: &[T],
    xhat: &[T],
    inv_std: &[T],
    axis: NormAxis,
    fixed: bool,
    c: usize,
) -> Vec<T> {
    let group_of = |k: usize| match axis {
        NormAxis::Rows => k / c,
        NormAxis::Cols => k % c,
    };
    if fixed {
        return dxhat.iter().enumerate().map(|(k, &d)| d * inv_std[group_of(k)]).collect();
    }
    let groups = inv_std.len();
    let mut sum_d = vec![T::zero(); groups];
    let mut sum_dh = vec![T::zero(); groups];
    for (k, (&d, &h)) in dxhat.iter().zip(xhat).enumerate() {
        let gi = group_of(k);
        sum_d[gi] = sum_d[gi] + d;
        sum_dh[gi] = sum_dh[gi] + d * h;
    }
    let m = T::lit((dxhat.len() / groups) as f64);
    dxhat
        .iter()
        .zip(xhat)
        .enumerate()
        .map(|(k, (&d, &h))| {
            let gi = group_of(k);
            inv_std[gi] / m * (m * d - sum_d[gi] - h * sum_dh[gi])
        })
        .collect()
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `v`, or `None` when the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, materialized as zeros when untouched.
    pub fn wrt(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(graph.shape(v).to_vec()))
    }
}
