use rayon::prelude::*;

use super::{broadcast_binary, reduce_to_shape, Precision, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

/// Spatial padding for convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy)]
enum UnOp {
    Neg,
    Abs,
    Square,
    Relu,
    Tanh,
}

/// Reduction kinds. `MaxAbs` returns max(|x|).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Min,
    Max,
    MaxAbs,
}

enum Entry {
    Binary { op: BinOp, a: usize, b: usize, out: usize },
    Unary { op: UnOp, a: usize, out: usize },
    Clamp { a: usize, out: usize, lo: f64, hi: f64 },
    MatMul { a: usize, b: usize, out: usize },
    Conv2d { input: usize, kernel: usize, out: usize, stride: usize, padding: Padding },
    MaxPool2 { a: usize, out: usize, argmax: Vec<usize> },
    Reshape { a: usize, out: usize },
    Reduce { a: usize, out: usize, count: usize, op: ReduceOp, arg: Vec<usize>, reduce_axis: Vec<bool> },
    CrossEntropy { logits: usize, out: usize, labels: Vec<usize>, softmax: Tensor },
    RoundSte { a: usize, out: usize },
}

/// Single-writer record of executed differentiable operations.
///
/// Values are stored in execution order; `backward` replays the entries in
/// exact reverse order, accumulating gradients additively whenever a value
/// feeds several consumers. Gradients persist across `backward` calls until
/// [`Tape::zero_grads`] is called.
pub struct Tape {
    precision: Precision,
    grad_enabled: bool,
    values: Vec<Tensor>,
    requires: Vec<bool>,
    entries: Vec<Entry>,
    accum: Vec<Option<Tensor>>,
}

/// Round half away from zero; the single rounding rule used by every
/// quantization path in the crate.
#[inline]
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            precision,
            grad_enabled: true,
            values: Vec::new(),
            requires: Vec::new(),
            entries: Vec::new(),
            accum: Vec::new(),
        }
    }

    /// A tape that only computes values; nothing is recorded.
    pub fn no_grad(precision: Precision) -> Self {
        let mut t = Tape::new(precision);
        t.grad_enabled = false;
        t
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    fn push_value(&mut self, mut t: Tensor, requires: bool) -> Var {
        self.precision.apply(t.data_mut());
        self.values.push(t);
        self.requires.push(requires && self.grad_enabled);
        self.accum.push(None);
        Var { id: self.values.len() - 1 }
    }

    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push_value(t, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_value(t, false)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.id]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.id].shape()
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.accum[v.id].as_ref()
    }

    pub fn zero_grads(&mut self) {
        for g in self.accum.iter_mut() {
            *g = None;
        }
    }

    fn record(&mut self, entry: Entry, out_requires: bool) {
        if self.grad_enabled && out_requires {
            self.entries.push(entry);
        }
    }

    fn finish(&mut self, out: Tensor, requires: bool, entry: impl FnOnce(usize) -> Entry, op: &'static str) -> Result<Var> {
        out.check_finite(op)?;
        let v = self.push_value(out, requires);
        self.record(entry(v.id), self.requires[v.id]);
        Ok(v)
    }

    // ---- elementwise ----

    fn binary(&mut self, op: BinOp, a: Var, b: Var) -> Result<Var> {
        let name = match op {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        };
        if let BinOp::Div = op {
            if self.values[b.id].data().iter().any(|&x| x == 0.0) {
                return Err(Error::DivisionByZero);
            }
        }
        let out = broadcast_binary(&self.values[a.id], &self.values[b.id], name, |x, y| match op {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
            BinOp::Div => x / y,
        })?;
        let req = self.requires[a.id] || self.requires[b.id];
        self.finish(out, req, |id| Entry::Binary { op, a: a.id, b: b.id, out: id }, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let s = self.scalar(c);
        self.add(a, s)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let s = self.scalar(c);
        self.mul(a, s)
    }

    fn unary(&mut self, op: UnOp, a: Var) -> Result<Var> {
        let (name, f): (&'static str, fn(f64) -> f64) = match op {
            UnOp::Neg => ("neg", |x| -x),
            UnOp::Abs => ("abs", f64::abs),
            UnOp::Square => ("square", |x| x * x),
            UnOp::Relu => ("relu", |x| x.max(0.0)),
            UnOp::Tanh => ("tanh", f64::tanh),
        };
        let out = self.values[a.id].map(f);
        let req = self.requires[a.id];
        self.finish(out, req, |id| Entry::Unary { op, a: a.id, out: id }, name)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Neg, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Abs, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Square, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Relu, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Tanh, a)
    }

    /// Clamp to `[lo, hi]`; gradient is 1 inside the closed interval, 0 outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.values[a.id].map(|x| x.clamp(lo, hi));
        let req = self.requires[a.id];
        self.finish(out, req, |id| Entry::Clamp { a: a.id, out: id, lo, hi }, "clamp")
    }

    /// Round half away from zero with the straight-through gradient
    /// (backward treats rounding as identity).
    pub fn round_ste(&mut self, a: Var) -> Result<Var> {
        let out = self.values[a.id].map(round_half_away);
        let req = self.requires[a.id];
        self.finish(out, req, |id| Entry::RoundSte { a: a.id, out: id }, "round_ste")
    }

    /// Round half away from zero, detached from the graph: the result is a
    /// constant and no gradient flows through it.
    pub fn round_detach(&mut self, a: Var) -> Var {
        let out = self.values[a.id].map(round_half_away);
        self.constant(out)
    }

    /// Copy of a value as a fresh constant (no gradient path).
    pub fn detach(&mut self, a: Var) -> Var {
        let out = self.values[a.id].clone();
        self.constant(out)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.values[a.id].shape(), self.values[b.id].shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.values[a.id].data(), self.values[b.id].data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        let req = self.requires[a.id] || self.requires[b.id];
        self.finish(out, req, |id| Entry::MatMul { a: a.id, b: b.id, out: id }, "matmul")
    }

    /// 2-D cross-correlation over NHWC input with an `[kh, kw, cin, cout]`
    /// kernel (no kernel flip).
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let ishape = self.values[input.id].shape().to_vec();
        let kshape = self.values[kernel.id].shape().to_vec();
        if ishape.len() != 4 || kshape.len() != 4 || ishape[3] != kshape[2] {
            return Err(Error::ShapeMismatch { op: "conv2d", lhs: ishape, rhs: kshape });
        }
        let geom = ConvGeom::new(&ishape, &kshape, stride, padding)?;
        let col = im2col(self.values[input.id].data(), &geom);
        let kmat = self.values[kernel.id].data();
        let data = matmul_raw(&col, kmat, geom.rows(), geom.patch(), geom.cout);
        let out = Tensor::new(vec![geom.n, geom.oh, geom.ow, geom.cout], data)?;
        let req = self.requires[input.id] || self.requires[kernel.id];
        self.finish(
            out,
            req,
            |id| Entry::Conv2d { input: input.id, kernel: kernel.id, out: id, stride, padding },
            "conv2d",
        )
    }

    /// 2x2 max pooling with stride 2 over NHWC; odd trailing rows/cols dropped.
    pub fn max_pool2(&mut self, a: Var) -> Result<Var> {
        let shape = self.values[a.id].shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::ShapeMismatch { op: "max_pool2", lhs: shape, rhs: vec![] });
        }
        let (n, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::EmptyReduction { op: "max_pool2" });
        }
        let x = self.values[a.id].data();
        let mut out = vec![0.0; n * oh * ow * c];
        let mut argmax = vec![0usize; out.len()];
        for b in 0..n {
            for i in 0..oh {
                for j in 0..ow {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut arg = 0usize;
                        for di in 0..2 {
                            for dj in 0..2 {
                                let src = ((b * h + 2 * i + di) * w + 2 * j + dj) * c + ch;
                                if x[src] > best {
                                    best = x[src];
                                    arg = src;
                                }
                            }
                        }
                        let dst = ((b * oh + i) * ow + j) * c + ch;
                        out[dst] = best;
                        argmax[dst] = arg;
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, oh, ow, c], out)?;
        let req = self.requires[a.id];
        self.finish(out, req, |id| Entry::MaxPool2 { a: a.id, out: id, argmax }, "max_pool2")
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.values[a.id].clone().reshape(shape)?;
        let req = self.requires[a.id];
        self.finish(out, req, |id| Entry::Reshape { a: a.id, out: id }, "reshape")
    }

    // ---- reductions ----

    /// Reduce over `axes` (all axes when `None`); reduced axes are removed
    /// from the shape. `Min`/`Max`/`MaxAbs` route gradients to the first
    /// attaining element.
    pub fn reduce(&mut self, op: ReduceOp, a: Var, axes: Option<&[usize]>) -> Result<Var> {
        let in_shape = self.values[a.id].shape().to_vec();
        let rank = in_shape.len();
        let mut reduce_axis = vec![false; rank];
        match axes {
            None => reduce_axis.iter_mut().for_each(|x| *x = true),
            Some(list) => {
                for &ax in list {
                    if ax >= rank {
                        return Err(Error::InvalidAxis { axis: ax, rank });
                    }
                    reduce_axis[ax] = true;
                }
            }
        }
        let out_shape: Vec<usize> = in_shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !reduce_axis[*i])
            .map(|(_, &d)| d)
            .collect();
        let count: usize = in_shape
            .iter()
            .enumerate()
            .filter(|(i, _)| reduce_axis[*i])
            .map(|(_, &d)| d)
            .product();
        let out_len: usize = out_shape.iter().product();
        if count == 0 || out_len == 0 {
            return Err(Error::EmptyReduction { op: "reduce" });
        }

        let x = self.values[a.id].data();
        let init = match op {
            ReduceOp::Sum | ReduceOp::Mean => 0.0,
            ReduceOp::Min => f64::INFINITY,
            ReduceOp::Max => f64::NEG_INFINITY,
            ReduceOp::MaxAbs => -1.0,
        };
        let mut out = vec![init; out_len];
        let mut arg = vec![0usize; if matches!(op, ReduceOp::Sum | ReduceOp::Mean) { 0 } else { out_len }];

        // Walk the input once, computing the flat output index of each element.
        let mut idx = vec![0usize; rank];
        let mut out_strides = vec![0usize; rank];
        {
            let mut acc = 1usize;
            for i in (0..rank).rev() {
                if !reduce_axis[i] {
                    out_strides[i] = acc;
                    acc *= in_shape[i];
                }
            }
        }
        let mut oi = 0usize;
        for (flat, &v) in x.iter().enumerate() {
            match op {
                ReduceOp::Sum | ReduceOp::Mean => out[oi] += v,
                ReduceOp::Min => {
                    if v < out[oi] {
                        out[oi] = v;
                        arg[oi] = flat;
                    }
                }
                ReduceOp::Max => {
                    if v > out[oi] {
                        out[oi] = v;
                        arg[oi] = flat;
                    }
                }
                ReduceOp::MaxAbs => {
                    if v.abs() > out[oi] {
                        out[oi] = v.abs();
                        arg[oi] = flat;
                    }
                }
            }
            for d in (0..rank).rev() {
                idx[d] += 1;
                oi += out_strides[d];
                if idx[d] < in_shape[d] {
                    break;
                }
                idx[d] = 0;
                oi -= out_strides[d] * in_shape[d];
            }
        }
        if op == ReduceOp::Mean {
            for v in out.iter_mut() {
                *v /= count as f64;
            }
        }
        let out = Tensor::new(out_shape, out)?;
        let req = self.requires[a.id];
        self.finish(
            out,
            req,
            |id| Entry::Reduce { a: a.id, out: id, count, op, arg, reduce_axis },
            "reduce",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(ReduceOp::Sum, a, None)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(ReduceOp::Mean, a, None)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, stabilized by
    /// max-subtraction.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.values[logits.id].shape().to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        let (n, k) = (shape[0], shape[1]);
        for &l in labels {
            if l >= k {
                return Err(Error::LabelOutOfRange { label: l, num_classes: k });
            }
        }
        let x = self.values[logits.id].data();
        let mut softmax = vec![0.0; n * k];
        let mut total = 0.0;
        for i in 0..n {
            let row = &x[i * k..(i + 1) * k];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for j in 0..k {
                let e = (row[j] - m).exp();
                softmax[i * k + j] = e;
                z += e;
            }
            for j in 0..k {
                softmax[i * k + j] /= z;
            }
            total += z.ln() + m - row[labels[i]];
        }
        let out = Tensor::scalar(total / n as f64);
        let req = self.requires[logits.id];
        let softmax = Tensor::new(vec![n, k], softmax)?;
        self.finish(
            out,
            req,
            |id| Entry::CrossEntropy { logits: logits.id, out: id, labels: labels.to_vec(), softmax },
            "cross_entropy",
        )
    }

    // ---- backward ----

    /// Reverse replay from `loss` (a single-element value). Gradients are
    /// added into the persistent per-value accumulators, so running backward
    /// twice without `zero_grads` yields exactly twice the gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.id].len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                lhs: self.values[loss.id].shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut flow: Vec<Option<Tensor>> = vec![None; self.values.len()];
        flow[loss.id] = Some(Tensor::new(
            self.values[loss.id].shape().to_vec(),
            vec![1.0],
        )?);

        for entry in self.entries.iter().rev() {
            match entry {
                Entry::Binary { op, a, b, out } => {
                    let Some(g) = flow[*out].clone() else { continue };
                    let (va, vb) = (&self.values[*a], &self.values[*b]);
                    let (ga, gb) = match op {
                        BinOp::Add => (g.clone(), g),
                        BinOp::Sub => (g.clone(), g.map(|x| -x)),
                        BinOp::Mul => (
                            broadcast_binary(&g, vb, "mul_bwd", |gx, y| gx * y)?,
                            broadcast_binary(&g, va, "mul_bwd", |gx, x| gx * x)?,
                        ),
                        BinOp::Div => {
                            let ga = broadcast_binary(&g, vb, "div_bwd", |gx, y| gx / y)?;
                            let ratio = broadcast_binary(va, vb, "div_bwd", |x, y| -x / (y * y))?;
                            let gb = broadcast_binary(&g, &ratio, "div_bwd", |gx, r| gx * r)?;
                            (ga, gb)
                        }
                    };
                    if self.requires[*a] {
                        accumulate(&mut flow, *a, reduce_to_shape(&ga, self.values[*a].shape()));
                    }
                    if self.requires[*b] {
                        accumulate(&mut flow, *b, reduce_to_shape(&gb, self.values[*b].shape()));
                    }
                }
                Entry::Unary { op, a, out } => {
                    let Some(g) = flow[*out].clone() else { continue };
                    if !self.requires[*a] {
                        continue;
                    }
                    let x = &self.values[*a];
                    let y = &self.values[*out];
                    let ga = match op {
                        UnOp::Neg => g.map(|v| -v),
                        UnOp::Abs => zip_map(&g, x, |gv, xv| gv * sign_or_zero(xv)),
                        UnOp::Square => zip_map(&g, x, |gv, xv| gv * 2.0 * xv),
                        UnOp::Relu => zip_map(&g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }),
                        UnOp::Tanh => zip_map(&g, y, |gv, yv| gv * (1.0 - yv * yv)),
                    };
                    accumulate(&mut flow, *a, ga);
                }
                Entry::Clamp { a, out, lo, hi } => {
                    let Some(g) = flow[*out].clone() else { continue };
                    if !self.requires[*a] {
                        continue;
                    }
                    let x = &self.values[*a];
                    let ga = zip_map(&g, x, |gv, xv| if xv >= *lo && xv <= *hi { gv } else { 0.0 });
                    accumulate(&mut flow, *a, ga);
                }
                Entry::RoundSte { a, out } => {
                    let Some(g) = flow[*out].clone() else { continue };
                    if self.requires[*a] {
                        accumulate(&mut flow, *a, g);
                    }
                }
                Entry::MatMul { a, b, out } => {
                    let Some(g) = flow[*out].clone() else { continue };
                    let (m, k) = (self.values[*a].shape()[0], self.values[*a].shape()[1]);
                    let n = self.values[*b].shape()[1];
                    if self.requires[*a] {
                        // dA = G . B^T
                        let bt = transpose2(self.values[*b].data(), k, n);
                        let da = matmul_raw(g.data(), &bt, m, n, k);
                        accumulate(&mut flow, *a, Tensor::new(vec![m, k], da)?);
                    }
                    if self.requires[*b] {
                        // dB = A^T . G
                        let at = transpose2(self.values[*a].data(), m, k);
                        let db = matmul_raw(&at, g.data(), k, m, n);
                        accumulate(&mut flow, *b, Tensor::new(vec![k, n], db)?);
                    }
                }
                Entry::Conv2d { input, kernel, out, stride, padding } => {
                    let Some(g) = flow[*out].clone() else { continue };
                    let ishape = self.values[*input].shape();
                    let kshape = self.values[*kernel].shape();
                    let geom = ConvGeom::new(ishape, kshape, *stride, *padding)?;
                    if self.requires[*kernel] {
                        // dK = col^T . G  with G as [rows, cout]
                        let col = im2col(self.values[*input].data(), &geom);
                        let colt = transpose2(&col, geom.rows(), geom.patch());
                        let dk = matmul_raw(&colt, g.data(), geom.patch(), geom.rows(), geom.cout);
                        accumulate(&mut flow, *kernel, Tensor::new(kshape.to_vec(), dk)?);
                    }
                    if self.requires[*input] {
                        // dIn = col2im(G . K^T)
                        let kt = transpose2(self.values[*kernel].data(), geom.patch(), geom.cout);
                        let dcol = matmul_raw(g.data(), &kt, geom.rows(), geom.cout, geom.patch());
                        let din = col2im(&dcol, &geom);
                        accumulate(&mut flow, *input, Tensor::new(ishape.to_vec(), din)?);
                    }
                }
                Entry::MaxPool2 { a, out, argmax } => {
                    let Some(g) = flow[*out].clone() else { continue };
                    if !self.requires[*a] {
                        continue;
                    }
                    let mut da = Tensor::zeros(self.values[*a].shape().to_vec());
                    for (gi, &src) in g.data().iter().zip(argmax.iter()) {
                        da.data_mut()[src] += *gi;
                    }
                    accumulate(&mut flow, *a, da);
                }
                Entry::Reshape { a, out } => {
                    let Some(g) = flow[*out].clone() else { continue };
                    if self.requires[*a] {
                        let ga = g.reshape(self.values[*a].shape().to_vec())?;
                        accumulate(&mut flow, *a, ga);
                    }
                }
                Entry::Reduce { a, out, count, op, arg, reduce_axis } => {
                    let Some(g) = flow[*out].clone() else { continue };
                    if !self.requires[*a] {
                        continue;
                    }
                    let in_shape = self.values[*a].shape().to_vec();
                    let mut da = Tensor::zeros(in_shape.clone());
                    match op {
                        ReduceOp::Sum | ReduceOp::Mean => {
                            let scale = if *op == ReduceOp::Mean { 1.0 / *count as f64 } else { 1.0 };
                            // Broadcast g back over the reduced axes: walk input
                            // exactly as the forward did.
                            spread_reduce_grad(&mut da, &g, &in_shape, reduce_axis, scale);
                        }
                        ReduceOp::Min | ReduceOp::Max => {
                            for (oi, &src) in arg.iter().enumerate() {
                                da.data_mut()[src] += g.data()[oi];
                            }
                        }
                        ReduceOp::MaxAbs => {
                            let x = self.values[*a].data();
                            for (oi, &src) in arg.iter().enumerate() {
                                da.data_mut()[src] += g.data()[oi] * sign_or_zero(x[src]);
                            }
                        }
                    }
                    accumulate(&mut flow, *a, da);
                }
                Entry::CrossEntropy { logits, out, labels, softmax } => {
                    let Some(g) = flow[*out].clone() else { continue };
                    if !self.requires[*logits] {
                        continue;
                    }
                    let gs = g.item();
                    let (n, k) = (softmax.shape()[0], softmax.shape()[1]);
                    let mut da = softmax.clone();
                    for i in 0..n {
                        da.data_mut()[i * k + labels[i]] -= 1.0;
                    }
                    let scale = gs / n as f64;
                    for v in da.data_mut() {
                        *v *= scale;
                    }
                    accumulate(&mut flow, *logits, da);
                }
            }
        }

        for (id, f) in flow.into_iter().enumerate() {
            if let Some(f) = f {
                match &mut self.accum[id] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(f.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(f),
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn sign_or_zero(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: x.shape().to_vec(),
        data: g.data().iter().zip(x.data()).map(|(&gv, &xv)| f(gv, xv)).collect(),
    }
}

fn accumulate(flow: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut flow[id] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot => *slot = Some(g),
    }
}

/// Spread a reduced gradient back over the input, scaling by `scale`.
fn spread_reduce_grad(da: &mut Tensor, g: &Tensor, in_shape: &[usize], reduce_axis: &[bool], scale: f64) {
    let rank = in_shape.len();
    let mut out_strides = vec![0usize; rank];
    let mut acc = 1usize;
    for d in (0..rank).rev() {
        if !reduce_axis[d] {
            out_strides[d] = acc;
            acc *= in_shape[d];
        }
    }
    let mut idx = vec![0usize; rank];
    let mut gidx = 0usize;
    for v in da.data.iter_mut() {
        *v += g.data()[gidx] * scale;
        for d in (0..rank).rev() {
            idx[d] += 1;
            gidx += out_strides[d];
            if idx[d] < in_shape[d] {
                break;
            }
            idx[d] = 0;
            gidx -= out_strides[d] * in_shape[d];
        }
    }
}

/// Row-major matmul `A[m,k] . B[k,n]`, parallel over blocks of output rows.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let row_block = |(block, rows): (usize, &mut [f64])| {
        let base = block * BLOCK;
        for (r, row) in rows.chunks_mut(n).enumerate() {
            let i = base + r;
            for p in 0..k {
                let aik = a[i * k + p];
                if aik == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (cj, &bj) in row.iter_mut().zip(brow) {
                    *cj += aik * bj;
                }
            }
        }
    };
    const BLOCK: usize = 64;
    if m * k * n >= 262_144 && m > BLOCK {
        c.par_chunks_mut(n * BLOCK).enumerate().for_each(row_block);
    } else {
        c.chunks_mut(n * BLOCK).enumerate().for_each(row_block);
    }
    c
}

pub(crate) fn transpose2(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// Geometry of one conv2d application (static per call).
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    pub fn new(ishape: &[usize], kshape: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        let (n, h, w, cin) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (kh, kw, _, cout) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        let (oh, ow, pad_top, pad_left) = match padding {
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::KernelTooLarge { kernel: (kh, kw), input: (h, w) });
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                let pad_h = ((oh - 1) * stride + kh).saturating_sub(h);
                let pad_w = ((ow - 1) * stride + kw).saturating_sub(w);
                if kh > h + pad_h || kw > w + pad_w {
                    return Err(Error::KernelTooLarge { kernel: (kh, kw), input: (h + pad_h, w + pad_w) });
                }
                (oh, ow, pad_h / 2, pad_w / 2)
            }
        };
        Ok(ConvGeom { n, h, w, cin, kh, kw, cout, oh, ow, stride, pad_top, pad_left })
    }

    pub fn rows(&self) -> usize {
        self.n * self.oh * self.ow
    }

    pub fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }
}

/// Materialize conv patches: output is `[n*oh*ow, kh*kw*cin]` with zeros in
/// padded positions.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let mut col = vec![0.0; g.rows() * patch];
    let fill = |(chunk, slab): (usize, &mut [f64])| {
        // one chunk = one (batch, output row) pair
        let b = chunk / g.oh;
        let i = chunk % g.oh;
        for j in 0..g.ow {
            let dst = &mut slab[j * patch..(j + 1) * patch];
            let base_i = (i * g.stride) as isize - g.pad_top as isize;
            let base_j = (j * g.stride) as isize - g.pad_left as isize;
            for ki in 0..g.kh {
                let si = base_i + ki as isize;
                if si < 0 || si >= g.h as isize {
                    continue;
                }
                for kj in 0..g.kw {
                    let sj = base_j + kj as isize;
                    if sj < 0 || sj >= g.w as isize {
                        continue;
                    }
                    let src = ((b * g.h + si as usize) * g.w + sj as usize) * g.cin;
                    let d = (ki * g.kw + kj) * g.cin;
                    dst[d..d + g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    };
    let row_chunk = g.ow * patch;
    if col.len() >= 1 << 21 {
        col.par_chunks_mut(row_chunk).enumerate().for_each(fill);
    } else {
        col.chunks_mut(row_chunk).enumerate().for_each(fill);
    }
    col
}

/// Scatter-add the column gradient back to input positions.
pub(crate) fn col2im(dcol: &[f64], g: &ConvGeom) -> Vec<f64> {
    let patch = g.patch();
    let mut dx = vec![0.0; g.n * g.h * g.w * g.cin];
    let per_image = g.h * g.w * g.cin;
    dx.par_chunks_mut(per_image).enumerate().for_each(|(b, img)| {
        for i in 0..g.oh {
            for j in 0..g.ow {
                let row = ((b * g.oh + i) * g.ow + j) * patch;
                let base_i = (i * g.stride) as isize - g.pad_top as isize;
                let base_j = (j * g.stride) as isize - g.pad_left as isize;
                for ki in 0..g.kh {
                    let si = base_i + ki as isize;
                    if si < 0 || si >= g.h as isize {
                        continue;
                    }
                    for kj in 0..g.kw {
                        let sj = base_j + kj as isize;
                        if sj < 0 || sj >= g.w as isize {
                            continue;
                        }
                        let dst = ((si as usize) * g.w + sj as usize) * g.cin;
                        let src = row + (ki * g.kw + kj) * g.cin;
                        for c in 0..g.cin {
                            img[dst + c] += dcol[src + c];
                        }
                    }
                }
            }
        }
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::no_grad(Precision::F64);
        let a = tape.input(t(&[2], &[1.0, 2.0]), false);
        let b = tape.input(t(&[2], &[3.0, 4.0]), false);
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);

        let x = tape.input(t(&[2], &[-0.5, 0.5]), false);
        let y = tape.abs(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let z = tape.input(t(&[3], &[-2.0, 0.3, 2.0]), false);
        let c = tape.clamp(z, -1.0, 1.0).unwrap();
        assert_eq!(tape.value(c).data(), &[-1.0, 0.3, 1.0]);
    }

    #[test]
    fn division_by_zero_is_an_error() {
        let mut tape = Tape::no_grad(Precision::F64);
        let a = tape.input(t(&[2], &[1.0, 2.0]), false);
        let b = tape.input(t(&[2], &[1.0, 0.0]), false);
        assert!(matches!(tape.div(a, b), Err(Error::DivisionByZero)));
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::no_grad(Precision::F64);
        let i = tape.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), false);
        let b = tape.input(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]), false);
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c).data(), &[5.0, 6.0, 7.0, 8.0]);

        let a = tape.input(t(&[1, 2], &[1.0, 2.0]), false);
        let b = tape.input(t(&[2, 1], &[3.0, 4.0]), false);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        // independent naive oracle
        let mut expect = vec![0.0; 3 * 2];
        for i in 0..3 {
            for j in 0..2 {
                for p in 0..4 {
                    expect[i * 2 + j] += a[i * 4 + p] * b[p * 2 + j];
                }
            }
        }
        let mut tape = Tape::no_grad(Precision::F64);
        let av = tape.input(t(&[3, 4], &a), false);
        let bv = tape.input(t(&[4, 2], &b), false);
        let c = tape.matmul(av, bv).unwrap();
        assert_eq!(tape.value(c).data(), &expect[..]);
    }

    #[test]
    fn conv_constant_field_and_impulse() {
        let mut tape = Tape::no_grad(Precision::F64);
        let x = tape.input(t(&[1, 3, 3, 1], &[1.0; 9]), false);
        let k = tape.input(t(&[2, 2, 1, 1], &[1.0; 4]), false);
        let y = tape.conv2d(x, k, 1, Padding::Valid).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 2, 1]);
        assert_eq!(tape.value(y).data(), &[4.0; 4]);

        // delta input reproduces the kernel (cross-correlation placement)
        let mut d = vec![0.0; 25];
        d[12] = 1.0; // center of 5x5
        let x = tape.input(t(&[1, 5, 5, 1], &d), false);
        let k = tape.input(t(&[3, 3, 1, 1], &(1..=9).map(|v| v as f64).collect::<Vec<_>>()), false);
        let y = tape.conv2d(x, k, 1, Padding::Valid).unwrap();
        // output[i,j] = sum_k x[i+ki, j+kj] k[ki,kj]; the delta at (2,2) hits
        // kernel index (2-i, 2-j): the flipped-index placement.
        let out = tape.value(y).data();
        assert_eq!(out.len(), 9);
        for i in 0..3 {
            for j in 0..3 {
                let expect = ((2 - i) * 3 + (2 - j) + 1) as f64;
                assert_eq!(out[i * 3 + j], expect);
            }
        }
    }

    #[test]
    fn conv_matches_naive_six_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..1 * 5 * 5 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..3 * 3 * 2 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        // naive oracle, valid padding, stride 1
        let (h, w, cin, kh, kw, cout) = (5usize, 5usize, 2usize, 3usize, 3usize, 3usize);
        let (oh, ow) = (3usize, 3usize);
        let mut expect = vec![0.0; oh * ow * cout];
        for i in 0..oh {
            for j in 0..ow {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for ki in 0..kh {
                        for kj in 0..kw {
                            for ci in 0..cin {
                                let xv = x[((i + ki) * w + (j + kj)) * cin + ci];
                                let kv = k[((ki * kw + kj) * cin + ci) * cout + co];
                                acc += xv * kv;
                            }
                        }
                    }
                    expect[(i * ow + j) * cout + co] = acc;
                }
            }
        }
        let mut tape = Tape::no_grad(Precision::F64);
        let xv = tape.input(t(&[1, h, w, cin], &x), false);
        let kv = tape.input(t(&[kh, kw, cin, cout], &k), false);
        let y = tape.conv2d(xv, kv, 1, Padding::Valid).unwrap();
        for (got, want) in tape.value(y).data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn reduce_examples() {
        let mut tape = Tape::no_grad(Precision::F64);
        let a = tape.input(t(&[3], &[1.0, 2.0, 3.0]), false);
        let s = tape.sum(a).unwrap();
        assert_eq!(tape.value(s).item(), 6.0);

        let b = tape.input(t(&[3], &[-2.0, 1.0, 0.5]), false);
        let m = tape.reduce(ReduceOp::MaxAbs, b, None).unwrap();
        assert_eq!(tape.value(m).item(), 2.0);

        // mean of 10 random values vs naive accumulation
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f64> = (0..10).map(|_| rng.random_range(-5.0..5.0)).collect();
        let naive = vals.iter().sum::<f64>() / 10.0;
        let v = tape.input(t(&[10], &vals), false);
        let m = tape.mean(v).unwrap();
        assert!((tape.value(m).item() - naive).abs() <= 1e-6 * naive.abs().max(1.0));
    }

    #[test]
    fn reduce_along_axis() {
        let mut tape = Tape::no_grad(Precision::F64);
        let a = tape.input(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), false);
        let s0 = tape.reduce(ReduceOp::Sum, a, Some(&[0])).unwrap();
        assert_eq!(tape.value(s0).data(), &[5.0, 7.0, 9.0]);
        let s1 = tape.reduce(ReduceOp::Max, a, Some(&[1])).unwrap();
        assert_eq!(tape.value(s1).data(), &[3.0, 6.0]);
        assert!(matches!(
            tape.reduce(ReduceOp::Sum, a, Some(&[2])),
            Err(Error::InvalidAxis { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let mut tape = Tape::no_grad(Precision::F64);
        let logits = tape.input(Tensor::zeros(vec![1, 10]), false);
        let ce = tape.cross_entropy(logits, &[4]).unwrap();
        assert!((tape.value(ce).item() - 10.0f64.ln()).abs() < 1e-12);

        let mut hot = vec![0.0; 10];
        hot[3] = 20.0;
        let logits = tape.input(t(&[1, 10], &hot), false);
        let ce = tape.cross_entropy(logits, &[3]).unwrap();
        assert!(tape.value(ce).item() < 1e-3);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::no_grad(Precision::F64);
        let logits = tape.input(Tensor::zeros(vec![1, 3]), false);
        assert!(matches!(
            tape.cross_entropy(logits, &[3]),
            Err(Error::LabelOutOfRange { label: 3, num_classes: 3 })
        ));
    }

    #[test]
    fn backward_twice_accumulates_exactly_double() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.input(t(&[3], &[1.0, 2.0, 3.0]), true);
        let sq = tape.square(x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        let g1 = tape.grad(x).unwrap().clone();
        assert_eq!(g1.data(), &[2.0, 4.0, 6.0]);
        tape.backward(loss).unwrap();
        let g2 = tape.grad(x).unwrap();
        assert_eq!(g2.data(), &[4.0, 8.0, 12.0]);
    }

    #[test]
    fn gradient_accumulates_across_consumers() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.input(t(&[2], &[3.0, 4.0]), true);
        let a = tape.mul(x, x).unwrap(); // x^2
        let b = tape.add(x, a).unwrap(); // x + x^2
        let loss = tape.sum(b).unwrap();
        tape.backward(loss).unwrap();
        // d/dx (x + x^2) = 1 + 2x
        assert_eq!(tape.grad(x).unwrap().data(), &[7.0, 9.0]);
    }

    #[test]
    fn broadcast_sum_matches_sum_of_parts_exactly() {
        // On integer-valued f64 inputs, sum(a+b) == sum(a) + sum(b) exactly.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..24).map(|_| rng.random_range(-100..100) as f64).collect();
        let b: Vec<f64> = (0..6).map(|_| rng.random_range(-100..100) as f64).collect();
        let mut tape = Tape::no_grad(Precision::F64);
        let av = tape.input(t(&[4, 6], &a), false);
        let bv = tape.input(t(&[6], &b), false);
        let sum_ab = {
            let s = tape.add(av, bv).unwrap();
            let s = tape.sum(s).unwrap();
            tape.value(s).item()
        };
        let sa = tape.sum(av).unwrap();
        let sb = tape.sum(bv).unwrap();
        let expect = tape.value(sa).item() + tape.value(sb).item() * 4.0;
        assert_eq!(sum_ab, expect);
    }

    #[test]
    fn round_ste_forward_rounds_backward_passes() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.input(t(&[4], &[0.4, 0.5, -0.5, 1.6]), true);
        let r = tape.round_ste(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 1.0, -1.0, 2.0]);
        let loss = tape.sum(r).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn f32_tape_truncates_stored_values() {
        let mut tape = Tape::no_grad(Precision::F32);
        let x = tape.input(t(&[1], &[1.0 / 3.0]), false);
        assert_eq!(tape.value(x).data()[0], (1.0f32 / 3.0f32) as f64);
    }

    #[test]
    fn maxpool_takes_window_max() {
        let mut tape = Tape::new(Precision::F64);
        let x = tape.input(
            t(&[1, 2, 4, 1], &[1.0, 2.0, 5.0, 4.0, 3.0, 0.0, -1.0, 6.0]),
            true,
        );
        let y = tape.max_pool2(x).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 1]);
        assert_eq!(tape.value(y).data(), &[3.0, 6.0]);
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
    }
}
