use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::shape::{
    broadcast_shapes, broadcast_strides, for_each_broadcast, numel, split_axis,
};
use super::Tensor;
use crate::error::{Error, Result};

/// Recorded provenance of an interior node.
pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Minimum(Tensor, Tensor),
    Maximum(Tensor, Tensor),
    Scale(Tensor, f64),
    Shift(Tensor),
    MatMul(Tensor, Tensor),
    Conv1d { input: Tensor, weight: Tensor, stride: usize },
    Sigmoid(Tensor),
    Gelu(Tensor),
    Softmax(Tensor),
    LogSoftmax(Tensor),
    Log(Tensor),
    Exp(Tensor),
    Clamp { input: Tensor, lo: f64, hi: f64 },
    Sum { input: Tensor, axis: Option<usize> },
    Mean { input: Tensor, axis: Option<usize> },
    Concat { inputs: Vec<Tensor>, axis: usize },
    Slice { input: Tensor, axis: usize, start: usize },
    LayerNorm { input: Tensor, width: usize, mean: Vec<f64>, rstd: Vec<f64> },
    Reshape(Tensor),
    TransposeLast2(Tensor),
}

/// Operation kinds with their attributes, for table-driven callers.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
    MatMul,
    Conv1d { stride: usize },
    Sigmoid,
    Gelu,
    Softmax,
    LogSoftmax,
    Log,
    Exp,
    Clamp { lo: f64, hi: f64 },
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
    Scale(f64),
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    LayerNorm { width: usize },
    Reshape(Vec<usize>),
    TransposeLast2,
}

impl OpKind {
    pub fn arity(&self) -> Option<usize> {
        match self {
            OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::Div
            | OpKind::Min
            | OpKind::Max
            | OpKind::MatMul
            | OpKind::Conv1d { .. } => Some(2),
            OpKind::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Applies `kind` to `inputs`.
pub fn forward_op(kind: &OpKind, inputs: &[Tensor]) -> Result<Tensor> {
    if let Some(n) = kind.arity() {
        if inputs.len() != n {
            return Err(Error::shape(
                "forward_op",
                format!("{kind:?} takes {n} inputs, got {}", inputs.len()),
            ));
        }
    }
    let x = &inputs[0];
    match kind {
        OpKind::Add => x.add(&inputs[1]),
        OpKind::Sub => x.sub(&inputs[1]),
        OpKind::Mul => x.mul(&inputs[1]),
        OpKind::Div => x.div(&inputs[1]),
        OpKind::Min => x.minimum(&inputs[1]),
        OpKind::Max => x.maximum(&inputs[1]),
        OpKind::MatMul => x.matmul(&inputs[1]),
        OpKind::Conv1d { stride } => x.conv1d(&inputs[1], *stride),
        OpKind::Sigmoid => Ok(x.sigmoid()),
        OpKind::Gelu => Ok(x.gelu()),
        OpKind::Softmax => x.softmax(),
        OpKind::LogSoftmax => x.log_softmax(),
        OpKind::Log => Ok(x.log()),
        OpKind::Exp => Ok(x.exp()),
        OpKind::Clamp { lo, hi } => Ok(x.clamp(*lo, *hi)),
        OpKind::Sum { axis: None } => Ok(x.sum()),
        OpKind::Sum { axis: Some(a) } => x.sum_axis(*a),
        OpKind::Mean { axis: None } => Ok(x.mean()),
        OpKind::Mean { axis: Some(a) } => x.mean_axis(*a),
        OpKind::Scale(c) => Ok(x.scale(*c)),
        OpKind::Concat { axis } => Tensor::concat(inputs, *axis),
        OpKind::Slice { axis, start, end } => x.slice(*axis, *start, *end),
        OpKind::LayerNorm { width } => x.layer_norm(*width),
        OpKind::Reshape(shape) => x.reshape(shape),
        OpKind::TransposeLast2 => x.transpose_last2(),
    }
}

fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

fn sigmoid_value(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

impl Tensor {
    fn unary(&self, f: impl Fn(f64) -> f64, op: impl FnOnce(Tensor) -> Op) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&v| f(v)).collect();
        Tensor::from_op(self.shape().to_vec(), data, op(self.clone()))
    }

    fn binary(&self, other: &Tensor, kind: Binary) -> Result<Tensor> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
            Binary::Min => "min",
            Binary::Max => "max",
        };
        let f = match kind {
            Binary::Add => |a: f64, b: f64| a + b,
            Binary::Sub => |a: f64, b: f64| a - b,
            Binary::Mul => |a: f64, b: f64| a * b,
            Binary::Div => |a: f64, b: f64| a / b,
            Binary::Min => |a: f64, b: f64| if a <= b { a } else { b },
            Binary::Max => |a: f64, b: f64| if a >= b { a } else { b },
        };
        let data = {
            let (a, b) = (self.data(), other.data());
            if self.shape() == other.shape() {
                (self.shape().to_vec(), a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect())
            } else {
                let out_shape = broadcast_shapes(name, self.shape(), other.shape())?;
                let sa = broadcast_strides(self.shape(), &out_shape);
                let sb = broadcast_strides(other.shape(), &out_shape);
                let mut out = vec![0.0; numel(&out_shape)];
                for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(a[ia], b[ib]));
                (out_shape, out)
            }
        };
        let (l, r) = (self.clone(), other.clone());
        let op = match kind {
            Binary::Add => Op::Add(l, r),
            Binary::Sub => Op::Sub(l, r),
            Binary::Mul => Op::Mul(l, r),
            Binary::Div => Op::Div(l, r),
            Binary::Min => Op::Minimum(l, r),
            Binary::Max => Op::Maximum(l, r),
        };
        Ok(Tensor::from_op(data.0, data.1, op))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Binary::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Binary::Div)
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn minimum(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Binary::Min)
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn maximum(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Binary::Max)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(|v| v * c, |x| Op::Scale(x, c))
    }

    pub fn shift(&self, c: f64) -> Tensor {
        self.unary(|v| v + c, Op::Shift)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(sigmoid_value, Op::Sigmoid)
    }

    /// Exact GeLU, `x·Φ(x)`.
    pub fn gelu(&self) -> Tensor {
        self.unary(gelu_value, Op::Gelu)
    }

    pub fn log(&self) -> Tensor {
        self.unary(f64::ln, Op::Log)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, Op::Exp)
    }

    pub fn square(&self) -> Tensor {
        self.mul(self).expect("same shape")
    }

    /// Clamp into `[lo, hi]`. The gradient is 1 on the closed interval
    /// (boundaries count as interior) and 0 outside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(|v| v.max(lo).min(hi), |x| Op::Clamp { input: x, lo, hi })
    }

    fn last_axis_rows(&self, op: &'static str) -> Result<(usize, usize)> {
        let d = *self.shape().last().ok_or_else(|| Error::shape(op, "needs at least one axis"))?;
        Ok((self.numel() / d.max(1), d))
    }

    pub fn softmax(&self) -> Result<Tensor> {
        let (rows, d) = self.last_axis_rows("softmax")?;
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - m).exp();
                z += *o;
            }
            out[r * d..(r + 1) * d].iter_mut().for_each(|o| *o /= z);
        }
        drop(x);
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::Softmax(self.clone())))
    }

    pub fn log_softmax(&self) -> Result<Tensor> {
        let (rows, d) = self.last_axis_rows("log_softmax")?;
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        drop(x);
        Ok(Tensor::from_op(self.shape().to_vec(), out, Op::LogSoftmax(self.clone())))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(vec![], vec![s], Op::Sum { input: self.clone(), axis: None })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(vec![], vec![s / n], Op::Mean { input: self.clone(), axis: None })
    }

    fn reduce_axis(&self, op: &'static str, axis: usize) -> Result<(Vec<usize>, Vec<f64>, usize)> {
        if axis >= self.ndim() {
            return Err(Error::shape(op, format!("axis {axis} out of range for {:?}", self.shape())));
        }
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let base = (o * n + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x[base + i];
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok((shape, out, n))
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let (shape, out, _) = self.reduce_axis("sum", axis)?;
        Ok(Tensor::from_op(shape, out, Op::Sum { input: self.clone(), axis: Some(axis) }))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let (shape, mut out, n) = self.reduce_axis("mean", axis)?;
        out.iter_mut().for_each(|v| *v /= n as f64);
        Ok(Tensor::from_op(shape, out, Op::Mean { input: self.clone(), axis: Some(axis) }))
    }

    /// `[..., m, k] × [k, n]` or batched `[..., m, k] × [..., k, n]` with equal batch dims.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::shape("matmul", format!("operands need rank ≥ 2, got {a:?} and {b:?}")));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dims differ: {a:?} × {b:?}")));
        }
        let batch_a = &a[..a.len() - 2];
        let b_batched = b.len() > 2;
        if b_batched && batch_a != &b[..b.len() - 2] {
            return Err(Error::shape("matmul", format!("batch dims differ: {a:?} × {b:?}")));
        }
        let batches = numel(batch_a);
        let (x, y) = (self.data(), other.data());
        let mut out = vec![0.0; batches * m * n];
        for bi in 0..batches {
            let xa = &x[bi * m * k..(bi + 1) * m * k];
            let yb = if b_batched { &y[bi * k * n..(bi + 1) * k * n] } else { &y[..] };
            let ob = &mut out[bi * m * n..(bi + 1) * m * n];
            matmul_into(xa, yb, ob, m, k, n);
        }
        drop((x, y));
        let mut shape = batch_a.to_vec();
        shape.extend([m, n]);
        Ok(Tensor::from_op(shape, out, Op::MatMul(self.clone(), other.clone())))
    }

    /// Valid (unpadded) 1-D convolution: `[B, C_in, T] ⊛ [C_out, C_in, K]`
    /// with output length `floor((T − K) / stride) + 1`.
    pub fn conv1d(&self, weight: &Tensor, stride: usize) -> Result<Tensor> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 3 || ws.len() != 3 {
            return Err(Error::shape("conv1d", format!("expected [B,C,T] and [O,C,K], got {xs:?} and {ws:?}")));
        }
        let (bsz, cin, t_in) = (xs[0], xs[1], xs[2]);
        let (cout, cin_w, k) = (ws[0], ws[1], ws[2]);
        if cin != cin_w {
            return Err(Error::shape("conv1d", format!("input channels {cin} vs weight channels {cin_w}")));
        }
        if stride == 0 || t_in < k {
            return Err(Error::shape("conv1d", format!("length {t_in} too short for kernel {k} (stride {stride})")));
        }
        let t_out = conv_out_len(t_in, k, stride);
        let (x, w) = (self.data(), weight.data());
        let mut out = vec![0.0; bsz * cout * t_out];
        for b in 0..bsz {
            for o in 0..cout {
                let orow = &mut out[(b * cout + o) * t_out..(b * cout + o + 1) * t_out];
                for c in 0..cin {
                    let xrow = &x[(b * cin + c) * t_in..(b * cin + c + 1) * t_in];
                    let wrow = &w[(o * cin + c) * k..(o * cin + c + 1) * k];
                    for (kk, &wv) in wrow.iter().enumerate() {
                        if stride == 1 {
                            for (ov, &xv) in orow.iter_mut().zip(&xrow[kk..kk + t_out]) {
                                *ov += wv * xv;
                            }
                        } else {
                            for (ov, &xv) in orow.iter_mut().zip(xrow[kk..].iter().step_by(stride)) {
                                *ov += wv * xv;
                            }
                        }
                    }
                }
            }
        }
        drop((x, w));
        Ok(Tensor::from_op(
            vec![bsz, cout, t_out],
            out,
            Op::Conv1d { input: self.clone(), weight: weight.clone(), stride },
        ))
    }

    pub fn concat(inputs: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        if axis >= first.ndim() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {:?}", first.shape())));
        }
        let mut total = 0;
        for t in inputs {
            let ok = t.ndim() == first.ndim()
                && t.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", format!("{:?} vs {:?} along axis {axis}", t.shape(), first.shape())));
            }
            total += t.shape()[axis];
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for t in inputs {
                let n = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * n..(o + 1) * n]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(shape, out, Op::Concat { inputs: inputs.to_vec(), axis }))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        if axis >= self.ndim() || start >= end || end > self.shape()[axis] {
            return Err(Error::shape("slice", format!("range {start}..{end} on axis {axis} of {:?}", self.shape())));
        }
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * n + start) * inner..(o * n + end) * inner]);
        }
        drop(x);
        let mut shape = self.shape().to_vec();
        shape[axis] = end - start;
        Ok(Tensor::from_op(shape, out, Op::Slice { input: self.clone(), axis, start }))
    }

    /// Normalizes the last axis as if it had `width` entries, the missing
    /// ones being zero. With `width` equal to the axis length this is the
    /// usual layer norm (no affine part).
    pub fn layer_norm(&self, width: usize) -> Result<Tensor> {
        let (rows, d) = self.last_axis_rows("layer_norm")?;
        if width < d || width == 0 {
            return Err(Error::shape("layer_norm", format!("width {width} smaller than axis length {d}")));
        }
        let nf = width as f64;
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / nf;
            let ss: f64 = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() + (width - d) as f64 * mu * mu;
            let rstd = 1.0 / (ss / nf + LAYER_NORM_EPS).sqrt();
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mu) * rstd;
            }
            means.push(mu);
            rstds.push(rstd);
        }
        drop(x);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::LayerNorm { input: self.clone(), width, mean: means, rstd: rstds },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::shape("reshape", format!("{:?} → {shape:?}", self.shape())));
        }
        Ok(Tensor::from_op(shape.to_vec(), self.to_vec(), Op::Reshape(self.clone())))
    }

    pub fn transpose_last2(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(Error::shape("transpose", format!("rank ≥ 2 required, got {s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let out = transpose_batches(&self.data(), r, c);
        let mut shape = s.to_vec();
        let nd = shape.len();
        shape.swap(nd - 2, nd - 1);
        Ok(Tensor::from_op(shape, out, Op::TransposeLast2(self.clone())))
    }
}

pub fn conv_out_len(t_in: usize, kernel: usize, stride: usize) -> usize {
    (t_in - kernel) / stride + 1
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn transpose_batches(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let per = r * c;
    for b in 0..x.len() / per.max(1) {
        for i in 0..r {
            for j in 0..c {
                out[b * per + j * r + i] = x[b * per + i * c + j];
            }
        }
    }
    out
}

/// Sums a gradient shaped like `out_shape` back onto a broadcast operand.
fn unbroadcast(
    g: &[f64],
    out_shape: &[usize],
    in_shape: &[usize],
    weight: impl Fn(usize, usize) -> f64,
    other_shape: &[usize],
) -> Vec<f64> {
    let mut acc = vec![0.0; numel(in_shape)];
    if in_shape == out_shape && other_shape == out_shape {
        for (o, a) in acc.iter_mut().enumerate() {
            *a = g[o] * weight(o, o);
        }
        return acc;
    }
    let s_in = broadcast_strides(in_shape, out_shape);
    let s_other = broadcast_strides(other_shape, out_shape);
    for_each_broadcast(out_shape, &s_in, &s_other, |o, ii, io| {
        acc[ii] += g[o] * weight(ii, io);
    });
    acc
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Minimum(a, b) | Op::Maximum(a, b) | Op::MatMul(a, b) => {
                vec![a, b]
            }
            Op::Conv1d { input, weight, .. } => vec![input, weight],
            Op::Concat { inputs, .. } => inputs.iter().collect(),
            Op::Scale(x, _)
            | Op::Shift(x)
            | Op::Sigmoid(x)
            | Op::Gelu(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Log(x)
            | Op::Exp(x)
            | Op::Reshape(x)
            | Op::TransposeLast2(x) => vec![x],
            Op::Clamp { input, .. }
            | Op::Sum { input, .. }
            | Op::Mean { input, .. }
            | Op::Slice { input, .. }
            | Op::LayerNorm { input, .. } => vec![input],
        }
    }

    /// Vector-Jacobian products for every parent that requires a gradient.
    pub(crate) fn backward(&self, out: &Tensor, g: &[f64]) -> Vec<(Tensor, Vec<f64>)> {
        let mut grads = Vec::new();
        let mut push = |t: &Tensor, v: Vec<f64>| {
            if t.requires_grad() {
                grads.push((t.clone(), v));
            }
        };
        let out_shape = out.shape();
        match self {
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self, Op::Sub(..)) { -1.0 } else { 1.0 };
                if a.requires_grad() {
                    push(a, unbroadcast(g, out_shape, a.shape(), |_, _| 1.0, b.shape()));
                }
                if b.requires_grad() {
                    push(b, unbroadcast(g, out_shape, b.shape(), |_, _| sign, a.shape()));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (a.data(), b.data());
                if a.requires_grad() {
                    push(a, unbroadcast(g, out_shape, a.shape(), |_, ib| bv[ib], b.shape()));
                }
                if b.requires_grad() {
                    push(b, unbroadcast(g, out_shape, b.shape(), |_, ia| av[ia], a.shape()));
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (a.data(), b.data());
                if a.requires_grad() {
                    push(a, unbroadcast(g, out_shape, a.shape(), |_, ib| 1.0 / bv[ib], b.shape()));
                }
                if b.requires_grad() {
                    push(
                        b,
                        unbroadcast(g, out_shape, b.shape(), |ib, ia| -av[ia] / (bv[ib] * bv[ib]), a.shape()),
                    );
                }
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let is_min = matches!(self, Op::Minimum(..));
                let (av, bv) = (a.data(), b.data());
                let pick_a = |x: f64, y: f64| if is_min { x <= y } else { x >= y };
                if a.requires_grad() {
                    push(
                        a,
                        unbroadcast(g, out_shape, a.shape(), |ia, ib| f64::from(u8::from(pick_a(av[ia], bv[ib]))), b.shape()),
                    );
                }
                if b.requires_grad() {
                    push(
                        b,
                        unbroadcast(g, out_shape, b.shape(), |ib, ia| f64::from(u8::from(!pick_a(av[ia], bv[ib]))), a.shape()),
                    );
                }
            }
            Op::Scale(x, c) => push(x, g.iter().map(|v| v * c).collect()),
            Op::Shift(x) | Op::Reshape(x) => push(x, g.to_vec()),
            Op::Sigmoid(x) => {
                let y = out.data();
                push(x, g.iter().zip(y.iter()).map(|(gv, s)| gv * s * (1.0 - s)).collect());
            }
            Op::Gelu(x) => {
                let xv = x.data();
                push(x, g.iter().zip(xv.iter()).map(|(gv, &v)| gv * gelu_derivative(v)).collect());
            }
            Op::Log(x) => {
                let xv = x.data();
                push(x, g.iter().zip(xv.iter()).map(|(gv, v)| gv / v).collect());
            }
            Op::Exp(x) => {
                let y = out.data();
                push(x, g.iter().zip(y.iter()).map(|(gv, v)| gv * v).collect());
            }
            Op::Clamp { input, lo, hi } => {
                let xv = input.data();
                push(
                    input,
                    g.iter().zip(xv.iter()).map(|(gv, &v)| if v >= *lo && v <= *hi { *gv } else { 0.0 }).collect(),
                );
            }
            Op::Softmax(x) => {
                let y = out.data();
                let d = *out_shape.last().unwrap();
                let mut gx = vec![0.0; g.len()];
                for r in 0..g.len() / d {
                    let sl = r * d..(r + 1) * d;
                    let dot: f64 = g[sl.clone()].iter().zip(&y[sl.clone()]).map(|(a, b)| a * b).sum();
                    for i in sl {
                        gx[i] = y[i] * (g[i] - dot);
                    }
                }
                push(x, gx);
            }
            Op::LogSoftmax(x) => {
                let y = out.data();
                let d = *out_shape.last().unwrap();
                let mut gx = vec![0.0; g.len()];
                for r in 0..g.len() / d {
                    let sl = r * d..(r + 1) * d;
                    let gs: f64 = g[sl.clone()].iter().sum();
                    for i in sl {
                        gx[i] = g[i] - y[i].exp() * gs;
                    }
                }
                push(x, gx);
            }
            Op::Sum { input, axis } | Op::Mean { input, axis } => {
                let is_mean = matches!(self, Op::Mean { .. });
                match axis {
                    None => {
                        let n = input.numel();
                        let v = if is_mean { g[0] / n as f64 } else { g[0] };
                        push(input, vec![v; n]);
                    }
                    Some(ax) => {
                        let (outer, n, inner) = split_axis(input.shape(), *ax);
                        let div = if is_mean { n as f64 } else { 1.0 };
                        let mut gx = vec![0.0; input.numel()];
                        for o in 0..outer {
                            for a in 0..n {
                                for i in 0..inner {
                                    gx[(o * n + a) * inner + i] = g[o * inner + i] / div;
                                }
                            }
                        }
                        push(input, gx);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ash, bsh) = (a.shape(), b.shape());
                let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
                let n = bsh[bsh.len() - 1];
                let batches = a.numel() / (m * k);
                let b_batched = bsh.len() > 2;
                let (av, bv) = (a.data(), b.data());
                if a.requires_grad() {
                    let mut ga = vec![0.0; a.numel()];
                    for bi in 0..batches {
                        let boff = if b_batched { bi * k * n } else { 0 };
                        for i in 0..m {
                            let grow = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
                            for p in 0..k {
                                let brow = &bv[boff + p * n..boff + (p + 1) * n];
                                ga[(bi * m + i) * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            }
                        }
                    }
                    push(a, ga);
                }
                if b.requires_grad() {
                    let mut gb = vec![0.0; b.numel()];
                    for bi in 0..batches {
                        let boff = if b_batched { bi * k * n } else { 0 };
                        for i in 0..m {
                            let grow = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
                            for p in 0..k {
                                let aval = av[(bi * m + i) * k + p];
                                let gbrow = &mut gb[boff + p * n..boff + (p + 1) * n];
                                for (o, &gv) in gbrow.iter_mut().zip(grow) {
                                    *o += aval * gv;
                                }
                            }
                        }
                    }
                    push(b, gb);
                }
            }
            Op::Conv1d { input, weight, stride } => {
                let (xs, ws) = (input.shape(), weight.shape());
                let (bsz, cin, t_in) = (xs[0], xs[1], xs[2]);
                let (cout, k) = (ws[0], ws[2]);
                let t_out = out_shape[2];
                let (xv, wv) = (input.data(), weight.data());
                if input.requires_grad() {
                    let mut gx = vec![0.0; input.numel()];
                    for b in 0..bsz {
                        for o in 0..cout {
                            let grow = &g[(b * cout + o) * t_out..(b * cout + o + 1) * t_out];
                            for c in 0..cin {
                                let wrow = &wv[(o * cin + c) * k..(o * cin + c + 1) * k];
                                let gxrow = &mut gx[(b * cin + c) * t_in..(b * cin + c + 1) * t_in];
                                for (kk, &w) in wrow.iter().enumerate() {
                                    for (gxv, &gv) in gxrow[kk..].iter_mut().step_by(*stride).zip(grow) {
                                        *gxv += gv * w;
                                    }
                                }
                            }
                        }
                    }
                    push(input, gx);
                }
                if weight.requires_grad() {
                    let mut gw = vec![0.0; weight.numel()];
                    for b in 0..bsz {
                        for o in 0..cout {
                            let grow = &g[(b * cout + o) * t_out..(b * cout + o + 1) * t_out];
                            for c in 0..cin {
                                let xrow = &xv[(b * cin + c) * t_in..(b * cin + c + 1) * t_in];
                                for kk in 0..k {
                                    let s: f64 = grow.iter().zip(xrow[kk..].iter().step_by(*stride)).map(|(&gv, &xv)| gv * xv).sum();
                                    gw[(o * cin + c) * k + kk] += s;
                                }
                            }
                        }
                    }
                    push(weight, gw);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for t in inputs {
                    let n = t.shape()[*axis];
                    if t.requires_grad() {
                        let mut gt = Vec::with_capacity(t.numel());
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gt.extend_from_slice(&g[base..base + n * inner]);
                        }
                        push(t, gt);
                    }
                    offset += n;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, n, inner) = split_axis(input.shape(), *axis);
                let len = out_shape[*axis];
                let mut gx = vec![0.0; input.numel()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                push(input, gx);
            }
            Op::LayerNorm { input, width, mean, rstd } => {
                let d = *out_shape.last().unwrap();
                let nf = *width as f64;
                let xv = input.data();
                let mut gx = vec![0.0; g.len()];
                for r in 0..g.len() / d {
                    let sl = r * d..(r + 1) * d;
                    let (mu, rs) = (mean[r], rstd[r]);
                    let gsum: f64 = g[sl.clone()].iter().sum();
                    let gxc: f64 = g[sl.clone()].iter().zip(&xv[sl.clone()]).map(|(gv, xv)| gv * (xv - mu)).sum();
                    for i in sl {
                        gx[i] = rs * g[i] - rs / nf * gsum - rs * rs * rs / nf * (xv[i] - mu) * gxc;
                    }
                }
                push(input, gx);
            }
            Op::TransposeLast2(x) => {
                let (r, c) = (out_shape[out_shape.len() - 2], out_shape[out_shape.len() - 1]);
                push(x, transpose_batches(g, r, c));
            }
        }
        grads
    }
}
