//! Reverse-mode differentiation over a Wengert list.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Parameters are
//! borrowed, not copied, so the tape must be dropped before the parameters are
//! updated. [`Tape::backward`] walks the list once in reverse, in a fixed order,
//! and returns the gradient of every reachable trainable parameter.

use std::borrow::Cow;
use std::collections::HashMap;

use super::gemm::{gemm, Mat};
use super::{ParamId, Parameter, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Relu(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        window: [usize; 2],
    },
    MixedPool {
        x: Var,
        mix: Var,
        window: [usize; 2],
        argmax: Vec<usize>,
        max_minus_avg: Vec<f64>,
        alpha: f64,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
    BceWithLogits {
        z: Var,
        targets: Vec<f64>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn spatial_out(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Unfolds sample `n` of `x` into `cols[patch × spatial_out]`.
    fn im2col(&self, x: &[f64], n: usize, cols: &mut [f64]) {
        let so = self.spatial_out();
        let base = n * self.c_in * self.h * self.w;
        for c in 0..self.c_in {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut cols[row * so..(row + 1) * so];
                    for oy in 0..self.h_out {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        for ox in 0..self.w_out {
                            let xx = (ox * self.stride + j) as isize - self.pad as isize;
                            dst[oy * self.w_out + ox] = if y >= 0
                                && xx >= 0
                                && (y as usize) < self.h
                                && (xx as usize) < self.w
                            {
                                x[base + (c * self.h + y as usize) * self.w + xx as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    /// Inverse of [`im2col`](Self::im2col): accumulates `cols` into sample `n` of `dx`.
    fn col2im(&self, cols: &[f64], n: usize, dx: &mut [f64]) {
        let so = self.spatial_out();
        let base = n * self.c_in * self.h * self.w;
        for c in 0..self.c_in {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &cols[row * so..(row + 1) * so];
                    for oy in 0..self.h_out {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        if y < 0 || y as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.w_out {
                            let xx = (ox * self.stride + j) as isize - self.pad as isize;
                            if xx < 0 || xx as usize >= self.w {
                                continue;
                            }
                            dx[base + (c * self.h + y as usize) * self.w + xx as usize] +=
                                src[oy * self.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Output extent of a strided, padded window along one axis.
pub fn conv_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

/// Gradients of a scalar loss with respect to reachable trainable parameters.
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    /// Adds each gradient into the matching parameter's `grad`.
    pub fn accumulate_into<'p>(
        &self,
        params: impl IntoIterator<Item = &'p mut Parameter>,
    ) -> Result<()> {
        for p in params {
            if let Some(g) = self.by_param.get(&p.id()) {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Constant, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Constant, false)
    }

    /// Leaf for a parameter. Frozen parameters are recorded as constants.
    pub fn param(&mut self, p: &'a Parameter) -> Var {
        self.push(Cow::Borrowed(p.value()), Op::Param(p.id()), !p.is_frozen())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::matmul(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Cow::Owned(out), Op::MatMul(a, b), rg))
    }

    /// `x[b×n] + bias[n]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if xs.len() != 2 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(Error::dim("add_bias", xs, bs));
        }
        let n = bs[0];
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.needs(x) || self.needs(bias);
        Ok(self.push(Cow::Owned(out), Op::AddBias(x, bias), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Cow::Owned(out), Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim("mul", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Cow::Owned(out), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        let rg = self.needs(a);
        self.push(Cow::Owned(out), Op::Scale(a, c), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.needs(a);
        self.push(Cow::Owned(Tensor::scalar(s)), Op::Sum(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        let rg = self.needs(a);
        self.push(Cow::Owned(out), Op::Relu(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.needs(a);
        Ok(self.push(Cow::Owned(out), Op::Reshape(a), rg))
    }

    /// Keeps the leading (batch) extent and flattens the rest.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let batch = *s.first().ok_or_else(|| Error::Contract("flatten of rank-0".into()))?;
        let rest: usize = s[1..].iter().product();
        self.reshape(a, &[batch, rest])
    }

    /// Cross-correlation of `x[B×Cin×H×W]` with `w[Cout×Cin×kh×kw]`, plus `b[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::dim("conv2d", xs, ws));
        }
        if bs != [ws[0]] {
            return Err(Error::dim("conv2d bias", ws, bs));
        }
        let (h_out, w_out) = match (
            conv_extent(xs[2], ws[2], stride, pad),
            conv_extent(xs[3], ws[3], stride, pad),
        ) {
            (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
            _ => {
                return Err(Error::Config(format!(
                    "conv output extent not positive for input {xs:?}, kernel {ws:?}, stride {stride}, pad {pad}"
                )))
            }
        };
        let geom = ConvGeometry {
            batch: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            h_out,
            w_out,
        };
        let (k, so) = (geom.patch(), geom.spatial_out());
        let mut out = Tensor::zeros(&[geom.batch, geom.c_out, h_out, w_out]);
        let mut cols = vec![0.0; k * so];
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        for n in 0..geom.batch {
            geom.im2col(xv, n, &mut cols);
            let dst = &mut out.data_mut()[n * geom.c_out * so..(n + 1) * geom.c_out * so];
            for (co, chunk) in dst.chunks_mut(so).enumerate() {
                chunk.fill(bv[co]);
            }
            gemm(
                geom.c_out,
                k,
                so,
                Mat::new(wv, false, k),
                Mat::new(&cols, false, so),
                dst,
                true,
            );
        }
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Cow::Owned(out), Op::Conv2d { x, w, b, geom }, rg))
    }

    fn pool_shape(&self, x: Var, window: [usize; 2]) -> Result<[usize; 6]> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::Contract(format!("pooling needs a rank-4 input, got {s:?}")));
        }
        let [kh, kw] = window;
        if kh == 0 || kw == 0 || s[2] % kh != 0 || s[3] % kw != 0 {
            return Err(Error::Config(format!(
                "pool window {window:?} does not evenly divide spatial extents {:?}",
                &s[2..]
            )));
        }
        Ok([s[0], s[1], s[2], s[3], s[2] / kh, s[3] / kw])
    }

    /// Per-window (max value, flat argmax, mean). Ties go to the lowest index.
    fn pool_windows(&self, x: Var, window: [usize; 2]) -> Result<(Vec<usize>, Vec<f64>, Vec<usize>, Vec<f64>)> {
        let [b, c, h, w, ho, wo] = self.pool_shape(x, window)?;
        let [kh, kw] = window;
        let xv = self.value(x).data();
        let count = b * c * ho * wo;
        let (mut maxv, mut arg, mut avg) = (Vec::with_capacity(count), Vec::with_capacity(count), Vec::with_capacity(count));
        let inv = 1.0 / (kh * kw) as f64;
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    let mut acc = 0.0;
                    for i in 0..kh {
                        for j in 0..kw {
                            let idx = base + (oy * kh + i) * w + ox * kw + j;
                            let v = xv[idx];
                            acc += v;
                            if v > best || best_i == usize::MAX {
                                best = v;
                                best_i = idx;
                            }
                        }
                    }
                    maxv.push(best);
                    arg.push(best_i);
                    avg.push(acc * inv);
                }
            }
        }
        Ok((vec![b, c, ho, wo], maxv, arg, avg))
    }

    pub fn max_pool(&mut self, x: Var, window: [usize; 2]) -> Result<Var> {
        let (shape, maxv, argmax, _) = self.pool_windows(x, window)?;
        let out = Tensor::new(shape, maxv)?;
        let rg = self.needs(x);
        Ok(self.push(Cow::Owned(out), Op::MaxPool { x, argmax }, rg))
    }

    pub fn avg_pool(&mut self, x: Var, window: [usize; 2]) -> Result<Var> {
        let (shape, _, _, avg) = self.pool_windows(x, window)?;
        let out = Tensor::new(shape, avg)?;
        let rg = self.needs(x);
        Ok(self.push(Cow::Owned(out), Op::AvgPool { x, window }, rg))
    }

    /// `a·max + (1−a)·avg` per window with `a = logistic(mix)`; `mix` is a scalar.
    pub fn mixed_pool(&mut self, x: Var, mix: Var, window: [usize; 2]) -> Result<Var> {
        let alpha = match self.value(mix).item() {
            Some(m) => logistic(m),
            None => return Err(Error::dim("mixed_pool mix", &[1], self.shape(mix))),
        };
        let (shape, maxv, argmax, avg) = self.pool_windows(x, window)?;
        let data = maxv
            .iter()
            .zip(&avg)
            .map(|(m, a)| alpha * m + (1.0 - alpha) * a)
            .collect();
        let max_minus_avg = maxv.iter().zip(&avg).map(|(m, a)| m - a).collect();
        let out = Tensor::new(shape, data)?;
        let rg = self.needs(x) || self.needs(mix);
        Ok(self.push(
            Cow::Owned(out),
            Op::MixedPool {
                x,
                mix,
                window,
                argmax,
                max_minus_avg,
                alpha,
            },
            rg,
        ))
    }

    /// Mean over the batch of `−log softmax(logits)[label]`, fused via
    /// log-sum-exp. Also returns the row-wise probabilities.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<(Var, Tensor)> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim("softmax_cross_entropy", s, &[labels.len()]));
        }
        let (b, c) = (s[0], s[1]);
        if b == 0 {
            return Err(Error::Contract("cross-entropy over an empty batch".into()));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(Error::Data(format!("label {l} at index {i} out of range for {c} classes")));
        }
        let z = self.value(logits).data();
        let mut probs = Tensor::zeros(&[b, c]);
        let mut total = 0.0;
        for (i, (row, prow)) in z.chunks(c).zip(probs.data_mut().chunks_mut(c)).enumerate() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (v - m).exp();
                denom += *p;
            }
            for p in prow.iter_mut() {
                *p /= denom;
            }
            total += m + denom.ln() - row[labels[i]];
        }
        let loss = Tensor::scalar(total / b as f64);
        let rg = self.needs(logits);
        let v = self.push(
            Cow::Owned(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs: probs.clone(),
            },
            rg,
        );
        Ok((v, probs))
    }

    /// Mean binary cross-entropy of logits `z[b×1]` against `{0,1}` targets,
    /// in the fused `max(z,0) − z·t + ln(1+e^{−|z|})` form.
    pub fn bce_with_logits(&mut self, z: Var, targets: &[f64]) -> Result<Var> {
        let s = self.shape(z);
        let n = self.value(z).len();
        if s.is_empty() || s[0] != targets.len() || n != targets.len() {
            return Err(Error::dim("bce_with_logits", s, &[targets.len()]));
        }
        if n == 0 {
            return Err(Error::Contract("binary cross-entropy over an empty batch".into()));
        }
        if let Some((i, t)) = targets.iter().enumerate().find(|(_, &t)| t != 0.0 && t != 1.0) {
            return Err(Error::Data(format!("BCE target {t} at index {i} is not 0 or 1")));
        }
        let total: f64 = self
            .value(z)
            .data()
            .iter()
            .zip(targets)
            .map(|(&zi, &t)| zi.max(0.0) - zi * t + (-zi.abs()).exp().ln_1p())
            .sum();
        let loss = Tensor::scalar(total / n as f64);
        let rg = self.needs(z);
        Ok(self.push(
            Cow::Owned(loss),
            Op::BceWithLogits {
                z,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every trainable
    /// parameter leaf it depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut out = Gradients::default();
        if !self.needs(loss) {
            return Ok(out);
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => match out.by_param.get_mut(id) {
                    Some(acc) => acc.add_assign(&g)?,
                    None => {
                        out.by_param.insert(*id, g);
                    }
                },
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if self.needs(*a) {
                        let mut ga = Tensor::zeros(&[m, k]);
                        gemm(m, n, k, Mat::new(g.data(), false, n), Mat::new(bv.data(), true, n), ga.data_mut(), false);
                        self.send(&mut grads, *a, ga)?;
                    }
                    if self.needs(*b) {
                        let mut gb = Tensor::zeros(&[k, n]);
                        gemm(k, m, n, Mat::new(av.data(), true, k), Mat::new(g.data(), false, n), gb.data_mut(), false);
                        self.send(&mut grads, *b, gb)?;
                    }
                }
                Op::AddBias(x, bias) => {
                    if self.needs(*bias) {
                        let n = self.shape(*bias)[0];
                        let mut gb = Tensor::zeros(&[n]);
                        for row in g.data().chunks(n) {
                            for (acc, v) in gb.data_mut().iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        self.send(&mut grads, *bias, gb)?;
                    }
                    if self.needs(*x) {
                        self.send(&mut grads, *x, g)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        self.send(&mut grads, *a, g.clone())?;
                    }
                    if self.needs(*b) {
                        self.send(&mut grads, *b, g)?;
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let ga = zip_with(&g, self.value(*b), |gi, bi| gi * bi)?;
                        self.send(&mut grads, *a, ga)?;
                    }
                    if self.needs(*b) {
                        let gb = zip_with(&g, self.value(*a), |gi, ai| gi * ai)?;
                        self.send(&mut grads, *b, gb)?;
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    self.send(&mut grads, *a, g.map(|v| v * c))?;
                }
                Op::Sum(a) => {
                    let gs = g.data()[0];
                    self.send(&mut grads, *a, Tensor::filled(self.shape(*a), gs))?;
                }
                Op::Relu(a) => {
                    let ga = zip_with(&g, self.value(*a), |gi, ai| if ai > 0.0 { gi } else { 0.0 })?;
                    self.send(&mut grads, *a, ga)?;
                }
                Op::Reshape(a) => {
                    let ga = g.reshape(self.shape(*a))?;
                    self.send(&mut grads, *a, ga)?;
                }
                Op::Conv2d { x, w, b, geom } => {
                    self.conv_backward(&mut grads, &g, *x, *w, *b, geom)?;
                }
                Op::MaxPool { x, argmax } => {
                    let mut gx = Tensor::zeros(self.shape(*x));
                    for (&src, gv) in argmax.iter().zip(g.data()) {
                        gx.data_mut()[src] += gv;
                    }
                    self.send(&mut grads, *x, gx)?;
                }
                Op::AvgPool { x, window } => {
                    let gx = self.avg_pool_backward(*x, *window, g.data(), 1.0);
                    self.send(&mut grads, *x, gx)?;
                }
                Op::MixedPool {
                    x,
                    mix,
                    window,
                    argmax,
                    max_minus_avg,
                    alpha,
                } => {
                    if self.needs(*x) {
                        let mut gx = self.avg_pool_backward(*x, *window, g.data(), 1.0 - alpha);
                        for (&src, gv) in argmax.iter().zip(g.data()) {
                            gx.data_mut()[src] += alpha * gv;
                        }
                        self.send(&mut grads, *x, gx)?;
                    }
                    if self.needs(*mix) {
                        let dot: f64 = g.data().iter().zip(max_minus_avg).map(|(a, b)| a * b).sum();
                        let gm = dot * alpha * (1.0 - alpha);
                        self.send(&mut grads, *mix, Tensor::filled(self.shape(*mix), gm))?;
                    }
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let c = probs.shape()[1];
                    let scale = g.data()[0] / labels.len() as f64;
                    let mut gl = probs.clone();
                    for (row, &l) in gl.data_mut().chunks_mut(c).zip(labels) {
                        row[l] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= scale);
                    }
                    self.send(&mut grads, *logits, gl)?;
                }
                Op::BceWithLogits { z, targets } => {
                    let scale = g.data()[0] / targets.len() as f64;
                    let zv = self.value(*z);
                    let data = zv
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&zi, &t)| (logistic(zi) - t) * scale)
                        .collect();
                    self.send(&mut grads, *z, Tensor::new(zv.shape().to_vec(), data)?)?;
                }
            }
        }
        Ok(out)
    }

    fn send(&self, grads: &mut [Option<Tensor>], to: Var, g: Tensor) -> Result<()> {
        match &mut grads[to.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn avg_pool_backward(&self, x: Var, window: [usize; 2], g: &[f64], weight: f64) -> Tensor {
        let s = self.shape(x);
        let (h, w) = (s[2], s[3]);
        let [kh, kw] = window;
        let (ho, wo) = (h / kh, w / kw);
        let share = weight / (kh * kw) as f64;
        let mut gx = Tensor::zeros(s);
        let gxd = gx.data_mut();
        for plane in 0..s[0] * s[1] {
            for oy in 0..ho {
                for ox in 0..wo {
                    let gv = g[(plane * ho + oy) * wo + ox] * share;
                    for i in 0..kh {
                        for j in 0..kw {
                            gxd[plane * h * w + (oy * kh + i) * w + ox * kw + j] += gv;
                        }
                    }
                }
            }
        }
        gx
    }

    fn conv_backward(
        &self,
        grads: &mut [Option<Tensor>],
        g: &Tensor,
        x: Var,
        w: Var,
        b: Var,
        geom: &ConvGeometry,
    ) -> Result<()> {
        let (k, so) = (geom.patch(), geom.spatial_out());
        let per_sample = geom.c_out * so;
        if self.needs(b) {
            let mut gb = Tensor::zeros(&[geom.c_out]);
            for sample in g.data().chunks(per_sample) {
                for (co, chunk) in sample.chunks(so).enumerate() {
                    gb.data_mut()[co] += chunk.iter().sum::<f64>();
                }
            }
            self.send(grads, b, gb)?;
        }
        let (need_w, need_x) = (self.needs(w), self.needs(x));
        if !need_w && !need_x {
            return Ok(());
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut gw = Tensor::zeros(self.shape(w));
        let mut gx = Tensor::zeros(self.shape(x));
        let mut cols = vec![0.0; k * so];
        for n in 0..geom.batch {
            let gn = &g.data()[n * per_sample..(n + 1) * per_sample];
            if need_w {
                geom.im2col(xv, n, &mut cols);
                gemm(geom.c_out, so, k, Mat::new(gn, false, so), Mat::new(&cols, true, so), gw.data_mut(), true);
            }
            if need_x {
                gemm(k, geom.c_out, so, Mat::new(wv, true, k), Mat::new(gn, false, so), &mut cols, false);
                geom.col2im(&cols, n, gx.data_mut());
            }
        }
        if need_w {
            self.send(grads, w, gw)?;
        }
        if need_x {
            self.send(grads, x, gx)?;
        }
        Ok(())
    }
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim("elementwise", a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}
