//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends a node holding its output value and whatever it
//! needs for the backward pass. `backward` walks the tape in reverse and
//! accumulates gradients additively, so a value that feeds several consumers
//! receives the sum of their contributions.

use rand::Rng;

use crate::error::{invalid, shape_err, Result};
use crate::kernels;
use crate::tensor::{Dims, Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    LeakyRelu,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Real>(self, v: T) -> T {
        match self {
            Activation::Relu => v.max(T::zero()),
            Activation::LeakyRelu => {
                if v > T::zero() {
                    v
                } else {
                    v * T::lit(LEAKY_SLOPE)
                }
            }
            Activation::Sigmoid => sigmoid(v),
        }
    }
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub enum BnMode<'a, T> {
    /// Normalize with batch statistics over `(n, h, w)`.
    Train,
    /// Normalize with the supplied running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel batch statistics (biased variance) from a training-mode pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    ConvTranspose2d,
    MaxPool,
    BatchNorm,
    Activation,
    GlobalAvgPool,
    Concat,
    Add,
    Mul,
    ScaleChannels,
    ScaleSpatial,
    Dropout,
    Upsample,
    Sum,
    Scale,
    Bce,
    Dice,
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, stride: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Activation { x: Var, kind: Activation },
    GlobalAvgPool { x: Var },
    Concat { parts: Vec<Var> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    ScaleChannels { x: Var, s: Var },
    ScaleSpatial { x: Var, q: Var },
    Dropout { x: Var, mask: Vec<T> },
    Upsample { x: Var, factor: usize },
    Sum { x: Var },
    Scale { x: Var, factor: T },
    Bce { p: Var, target: Vec<T> },
    Dice { p: Var, target: Vec<T>, eps: T },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConvTranspose2d { .. } => OpKind::ConvTranspose2d,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Activation { .. } => OpKind::Activation,
            Op::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            Op::Concat { .. } => OpKind::Concat,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::ScaleChannels { .. } => OpKind::ScaleChannels,
            Op::ScaleSpatial { .. } => OpKind::ScaleSpatial,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Upsample { .. } => OpKind::Upsample,
            Op::Sum { .. } => OpKind::Sum,
            Op::Scale { .. } => OpKind::Scale,
            Op::Bce { .. } => OpKind::Bce,
            Op::Dice { .. } => OpKind::Dice,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { parts } => parts.clone(),
            Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::ScaleChannels { x, s } => vec![*x, *s],
            Op::ScaleSpatial { x, q } => vec![*x, *q],
            Op::MaxPool { x, .. }
            | Op::Activation { x, .. }
            | Op::GlobalAvgPool { x }
            | Op::Dropout { x, .. }
            | Op::Upsample { x, .. }
            | Op::Sum { x }
            | Op::Scale { x, .. } => vec![*x],
            Op::Bce { p, .. } | Op::Dice { p, .. } => vec![*p],
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    param: Option<usize>,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    corruption: Option<(OpKind, f64)>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), corruption: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Test fixture: scales every input gradient emitted by ops of `kind`.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, kind: OpKind, factor: f64) {
        self.corruption = Some((kind, factor));
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> Dims {
        self.nodes[v.0].value.dims()
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A leaf bound to an external parameter slot, reported by
    /// [`Gradients::params`].
    pub fn param_leaf(&mut self, id: usize, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn param_id(&self, v: Var) -> Option<usize> {
        self.nodes[v.0].param
    }

    pub fn count_ops(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    /// Number of recorded ops that consume `v` directly.
    pub fn consumers(&self, v: Var) -> usize {
        self.nodes.iter().filter(|n| n.op.inputs().contains(&v)).count()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op, param: None });
        Var(self.nodes.len() - 1)
    }

    fn vector_len(&self, v: Var) -> usize {
        self.dims(v).numel()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xd = self.dims(x);
        let wd = self.dims(w);
        if xd.c != wd.c {
            return Err(shape_err!("conv2d: input has {} channels, weight expects {}", xd.c, wd.c));
        }
        if let Some(b) = b {
            if self.vector_len(b) != wd.n {
                return Err(shape_err!("conv2d: bias length {} != {}", self.vector_len(b), wd.n));
            }
        }
        let (oh, ow) = match (
            kernels::conv_out_extent(xd.h, wd.h, stride, pad),
            kernels::conv_out_extent(xd.w, wd.w, stride, pad),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => return Err(shape_err!("conv2d: non-positive output for input {xd} kernel {wd}")),
        };
        let od = Dims::new(xd.n, wd.n, oh, ow);
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            xd,
            self.value(w).data(),
            wd,
            b.map(|b| self.value(b).data()),
            stride,
            pad,
            od,
        );
        let t = Tensor::from_vec(od, out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, stride, pad }))
    }

    /// Transposed convolution with weight `(ci, co, kh, kw)` and no padding.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(invalid!("conv_transpose2d: stride must be >= 1"));
        }
        let xd = self.dims(x);
        let wd = self.dims(w);
        if xd.c != wd.n {
            return Err(shape_err!(
                "conv_transpose2d: input has {} channels, weight expects {}",
                xd.c,
                wd.n
            ));
        }
        if let Some(b) = b {
            if self.vector_len(b) != wd.c {
                return Err(shape_err!("conv_transpose2d: bias length {} != {}", self.vector_len(b), wd.c));
            }
        }
        if xd.h == 0 || xd.w == 0 {
            return Err(shape_err!("conv_transpose2d: empty input {xd}"));
        }
        let od = Dims::new(xd.n, wd.c, (xd.h - 1) * stride + wd.h, (xd.w - 1) * stride + wd.w);
        let out = kernels::conv_transpose2d_forward(
            self.value(x).data(),
            xd,
            self.value(w).data(),
            wd,
            b.map(|b| self.value(b).data()),
            stride,
            od,
        );
        let t = Tensor::from_vec(od, out)?;
        Ok(self.push(t, Op::ConvTranspose2d { x, w, b, stride }))
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let xd = self.dims(x);
        if xd.h % 2 != 0 || xd.w % 2 != 0 || xd.h == 0 || xd.w == 0 {
            return Err(shape_err!("maxpool2x2 needs even spatial dims, got {xd}"));
        }
        let (out, argmax) = kernels::maxpool2x2_forward(self.value(x).data(), xd);
        let t = Tensor::from_vec(Dims::new(xd.n, xd.c, xd.h / 2, xd.w / 2), out)?;
        Ok(self.push(t, Op::MaxPool { x, argmax }))
    }

    /// Batch normalization. In training mode also returns the batch
    /// statistics so the caller can update its running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xd = self.dims(x);
        if self.vector_len(gamma) != xd.c || self.vector_len(beta) != xd.c {
            return Err(shape_err!("batch_norm: affine params do not match {} channels", xd.c));
        }
        let count = xd.n * xd.plane();
        if count == 0 {
            return Err(shape_err!("batch_norm: zero spatial extent in {xd}"));
        }
        let plane = xd.plane();
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let eps = T::lit(eps);
        let (mean, var, batch_stats) = match mode {
            BnMode::Train => {
                let mut mean = vec![T::zero(); xd.c];
                let mut var = vec![T::zero(); xd.c];
                let inv_count = T::lit(1.0 / count as f64);
                for c in 0..xd.c {
                    let mut s = T::zero();
                    for n in 0..xd.n {
                        s += xs[(n * xd.c + c) * plane..(n * xd.c + c + 1) * plane].iter().copied().sum();
                    }
                    let m = s * inv_count;
                    let mut v = T::zero();
                    for n in 0..xd.n {
                        for &e in &xs[(n * xd.c + c) * plane..(n * xd.c + c + 1) * plane] {
                            v += (e - m) * (e - m);
                        }
                    }
                    mean[c] = m;
                    var[c] = v * inv_count;
                }
                (mean, var, true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != xd.c || var.len() != xd.c {
                    return Err(shape_err!("batch_norm: running stats do not match {} channels", xd.c));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(xs.len());
        let mut out = Vec::with_capacity(xs.len());
        for n in 0..xd.n {
            for c in 0..xd.c {
                for &e in &xs[(n * xd.c + c) * plane..(n * xd.c + c + 1) * plane] {
                    let h = (e - mean[c]) * inv_std[c];
                    xhat.push(h);
                    out.push(g[c] * h + bt[c]);
                }
            }
        }
        let t = Tensor::from_vec(xd, out)?;
        let v = self.push(t, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats });
        Ok((v, batch_stats.then_some(BatchStats { mean, var })))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let t = self.value(x).map(|v| kind.apply(v));
        self.push(t, Op::Activation { x, kind })
    }

    /// `(n, c, h, w) -> (n, c, 1, 1)` channel means.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xd = self.dims(x);
        let plane = xd.plane();
        if plane == 0 || xd.numel() == 0 {
            return Err(shape_err!("global_avg_pool: empty tensor {xd}"));
        }
        let inv = T::lit(1.0 / plane as f64);
        let xs = self.value(x).data();
        let out: Vec<T> = (0..xd.n * xd.c)
            .map(|i| xs[i * plane..(i + 1) * plane].iter().copied().sum::<T>() * inv)
            .collect();
        let t = Tensor::from_vec(Dims::new(xd.n, xd.c, 1, 1), out)?;
        Ok(self.push(t, Op::GlobalAvgPool { x }))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid!("concat_channels: no inputs"))?;
        let d0 = self.dims(*first);
        let mut c_total = 0;
        for &p in parts {
            let d = self.dims(p);
            if d.n != d0.n || d.h != d0.h || d.w != d0.w {
                return Err(shape_err!("concat_channels: {d} incompatible with {d0}"));
            }
            c_total += d.c;
        }
        let od = Dims::new(d0.n, c_total, d0.h, d0.w);
        let mut out = Vec::with_capacity(od.numel());
        for n in 0..d0.n {
            for &p in parts {
                let d = self.dims(p);
                let chunk = d.c * d.plane();
                out.extend_from_slice(&self.value(p).data()[n * chunk..(n + 1) * chunk]);
            }
        }
        let t = Tensor::from_vec(od, out)?;
        Ok(self.push(t, Op::Concat { parts: parts.to_vec() }))
    }

    fn same_dims(&self, a: Var, b: Var, what: &str) -> Result<Dims> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(shape_err!("{what}: {da} vs {db}"));
        }
        Ok(da)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.same_dims(a, b, "add")?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::from_vec(d, out)?;
        Ok(self.push(t, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.same_dims(a, b, "mul")?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::from_vec(d, out)?;
        Ok(self.push(t, Op::Mul { a, b }))
    }

    /// `y[n,c,i,j] = x[n,c,i,j] * s[n,c]` with `s` shaped `(n, c, 1, 1)`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let xd = self.dims(x);
        let sd = self.dims(s);
        if sd != Dims::new(xd.n, xd.c, 1, 1) {
            return Err(shape_err!("scale_channels: scale {sd} does not broadcast over {xd}"));
        }
        let plane = xd.plane();
        let sv = self.value(s).data();
        let out = self.value(x).data().iter().enumerate().map(|(i, &v)| v * sv[i / plane]).collect();
        let t = Tensor::from_vec(xd, out)?;
        Ok(self.push(t, Op::ScaleChannels { x, s }))
    }

    /// `y[n,c,i,j] = x[n,c,i,j] * q[n,0,i,j]` with `q` shaped `(n, 1, h, w)`.
    pub fn scale_spatial(&mut self, x: Var, q: Var) -> Result<Var> {
        let xd = self.dims(x);
        let qd = self.dims(q);
        if qd != Dims::new(xd.n, 1, xd.h, xd.w) {
            return Err(shape_err!("scale_spatial: map {qd} does not broadcast over {xd}"));
        }
        let plane = xd.plane();
        let qv = self.value(q).data();
        let out = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let n = i / (xd.c * plane);
                v * qv[n * plane + i % plane]
            })
            .collect();
        let t = Tensor::from_vec(xd, out)?;
        Ok(self.push(t, Op::ScaleSpatial { x, q }))
    }

    /// Inverted dropout. Identity (and no tape entry) in eval mode or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R, mode: Mode) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid!("dropout rate must be in [0, 1), got {rate}"));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() >= rate { keep } else { T::zero() })
            .collect();
        let out = self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::from_vec(self.dims(x), out)?;
        Ok(self.push(t, Op::Dropout { x, mask }))
    }

    /// Bilinear upsampling by an integer factor (half-pixel centers, edge clamp).
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(invalid!("upsample factor must be >= 1"));
        }
        if factor == 1 {
            return Ok(x);
        }
        let (out, od) = kernels::upsample_bilinear_forward(self.value(x).data(), self.dims(x), factor);
        let t = Tensor::from_vec(od, out)?;
        Ok(self.push(t, Op::Upsample { x, factor }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum { x })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::lit(factor);
        let t = self.value(x).map(|v| v * f);
        self.push(t, Op::Scale { x, factor: f })
    }

    fn check_target(&self, p: Var, target: &[T], what: &str) -> Result<()> {
        if self.value(p).numel() != target.len() {
            return Err(shape_err!(
                "{what}: prediction {} vs target of {} pixels",
                self.dims(p),
                target.len()
            ));
        }
        Ok(())
    }

    /// Mean binary cross-entropy with probabilities clamped to
    /// `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn bce(&mut self, p: Var, target: &[T]) -> Result<Var> {
        self.check_target(p, target, "bce")?;
        // Accumulated in f64 so the mean does not drift with image size.
        let mut acc = 0.0f64;
        for (&pv, &m) in self.value(p).data().iter().zip(target) {
            let pc = pv.as_f64().clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let m = m.as_f64();
            acc -= m * pc.ln() + (1.0 - m) * (1.0 - pc).ln();
        }
        let loss = T::lit(acc / target.len() as f64);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { p, target: target.to_vec() }))
    }

    /// Soft Dice loss with squared-sum denominator.
    pub fn dice(&mut self, p: Var, target: &[T], eps: f64) -> Result<Var> {
        self.check_target(p, target, "dice")?;
        if eps <= 0.0 {
            return Err(invalid!("dice eps must be positive"));
        }
        let eps = T::lit(eps);
        let (inter, denom) = dice_terms(self.value(p).data(), target);
        let loss = T::one() - (T::lit(2.0) * inter + eps) / (denom + eps);
        Ok(self.push(Tensor::scalar(loss), Op::Dice { p, target: target.to_vec(), eps }))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(invalid!("backward on an empty tape"));
        }
        if self.value(loss).numel() != 1 {
            return Err(invalid!("backward needs a scalar loss, got {}", self.dims(loss)));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let contributions = self.node_backward(idx, &g);
            grads[idx] = Some(g);
            for (v, mut cg) in contributions {
                if let Some((kind, factor)) = self.corruption {
                    if kind == self.nodes[idx].op.kind() {
                        let f = T::lit(factor);
                        cg.iter_mut().for_each(|e| *e *= f);
                    }
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&cg).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(cg),
                }
            }
        }
        Ok(Gradients { grads, params: self.nodes.iter().map(|n| n.param).collect() })
    }

    fn node_backward(&self, idx: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        let od = node.value.dims();
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, stride, pad } => {
                let xd = self.dims(*x);
                let wd = self.dims(*w);
                let gx = kernels::conv2d_backward_input(g, od, self.value(*w).data(), wd, xd, *stride, *pad);
                let gw = kernels::conv2d_backward_weight(g, od, self.value(*x).data(), xd, wd, *stride, *pad);
                let mut out = vec![(*x, gx), (*w, gw)];
                if let Some(b) = b {
                    out.push((*b, kernels::channel_sums(g, od)));
                }
                out
            }
            Op::ConvTranspose2d { x, w, b, stride } => {
                let xd = self.dims(*x);
                let wd = self.dims(*w);
                let gx = kernels::conv_transpose2d_backward_input(g, od, self.value(*w).data(), wd, xd, *stride);
                let gw = kernels::conv_transpose2d_backward_weight(g, od, self.value(*x).data(), xd, wd, *stride);
                let mut out = vec![(*x, gx), (*w, gw)];
                if let Some(b) = b {
                    out.push((*b, kernels::channel_sums(g, od)));
                }
                out
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for (&i, &gv) in argmax.iter().zip(g) {
                    gx[i] += gv;
                }
                vec![(*x, gx)]
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let plane = od.plane();
                let count = T::lit((od.n * plane) as f64);
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); od.c];
                let mut sum_gx = vec![T::zero(); od.c];
                for n in 0..od.n {
                    for c in 0..od.c {
                        let r = (n * od.c + c) * plane..(n * od.c + c + 1) * plane;
                        for (&gv, &h) in g[r.clone()].iter().zip(&xhat[r]) {
                            sum_g[c] += gv;
                            sum_gx[c] += gv * h;
                        }
                    }
                }
                let mut gx = vec![T::zero(); g.len()];
                for n in 0..od.n {
                    for c in 0..od.c {
                        let base = (n * od.c + c) * plane;
                        let k = gam[c] * inv_std[c];
                        for i in base..base + plane {
                            gx[i] = if *batch_stats {
                                k / count * (count * g[i] - sum_g[c] - xhat[i] * sum_gx[c])
                            } else {
                                k * g[i]
                            };
                        }
                    }
                }
                vec![(*x, gx), (*gamma, sum_gx), (*beta, sum_g)]
            }
            Op::Activation { x, kind } => {
                let xs = self.value(*x).data();
                let ys = node.value.data();
                let slope = T::lit(LEAKY_SLOPE);
                let gx = match kind {
                    Activation::Relu => {
                        g.iter().zip(xs).map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() }).collect()
                    }
                    Activation::LeakyRelu => {
                        g.iter().zip(xs).map(|(&gv, &v)| if v > T::zero() { gv } else { gv * slope }).collect()
                    }
                    Activation::Sigmoid => g.iter().zip(ys).map(|(&gv, &y)| gv * y * (T::one() - y)).collect(),
                };
                vec![(*x, gx)]
            }
            Op::GlobalAvgPool { x } => {
                let xd = self.dims(*x);
                let plane = xd.plane();
                let inv = T::lit(1.0 / plane as f64);
                let gx = (0..xd.numel()).map(|i| g[i / plane] * inv).collect();
                vec![(*x, gx)]
            }
            Op::Concat { parts } => {
                let mut out = Vec::with_capacity(parts.len());
                let mut offset = 0;
                let plane = od.plane();
                for &p in parts {
                    let d = self.dims(p);
                    let chunk = d.c * plane;
                    let mut gp = Vec::with_capacity(d.numel());
                    for n in 0..od.n {
                        let base = n * od.c * plane + offset;
                        gp.extend_from_slice(&g[base..base + chunk]);
                    }
                    offset += chunk;
                    out.push((p, gp));
                }
                out
            }
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                vec![
                    (*a, g.iter().zip(bv).map(|(&gv, &y)| gv * y).collect()),
                    (*b, g.iter().zip(av).map(|(&gv, &y)| gv * y).collect()),
                ]
            }
            Op::ScaleChannels { x, s } => {
                let plane = od.plane();
                let xs = self.value(*x).data();
                let sv = self.value(*s).data();
                let gx = g.iter().enumerate().map(|(i, &gv)| gv * sv[i / plane]).collect();
                let mut gs = vec![T::zero(); sv.len()];
                for (i, (&gv, &v)) in g.iter().zip(xs).enumerate() {
                    gs[i / plane] += gv * v;
                }
                vec![(*x, gx), (*s, gs)]
            }
            Op::ScaleSpatial { x, q } => {
                let plane = od.plane();
                let xs = self.value(*x).data();
                let qv = self.value(*q).data();
                let mut gx = Vec::with_capacity(g.len());
                let mut gq = vec![T::zero(); qv.len()];
                for (i, (&gv, &v)) in g.iter().zip(xs).enumerate() {
                    let qi = (i / (od.c * plane)) * plane + i % plane;
                    gx.push(gv * qv[qi]);
                    gq[qi] += gv * v;
                }
                vec![(*x, gx), (*q, gq)]
            }
            Op::Dropout { x, mask } => vec![(*x, g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect())],
            Op::Upsample { x, factor } => {
                vec![(*x, kernels::upsample_bilinear_backward(g, self.dims(*x), *factor))]
            }
            Op::Sum { x } => vec![(*x, vec![g[0]; self.value(*x).numel()])],
            Op::Scale { x, factor } => vec![(*x, g.iter().map(|&gv| gv * *factor).collect())],
            Op::Bce { p, target } => {
                let (lo, hi) = (T::lit(PROB_CLAMP), T::one() - T::lit(PROB_CLAMP));
                let scale = g[0] / T::lit(target.len() as f64);
                let gp = self
                    .value(*p)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&pv, &m)| {
                        if pv < lo || pv > hi {
                            T::zero()
                        } else {
                            scale * (-m / pv + (T::one() - m) / (T::one() - pv))
                        }
                    })
                    .collect();
                vec![(*p, gp)]
            }
            Op::Dice { p, target, eps } => {
                let pv = self.value(*p).data();
                let (inter, denom) = dice_terms(pv, target);
                let num = T::lit(2.0) * inter + *eps;
                let den = denom + *eps;
                let two = T::lit(2.0);
                let gp = pv
                    .iter()
                    .zip(target)
                    .map(|(&pj, &mj)| -g[0] * (two * mj * den - num * two * pj) / (den * den))
                    .collect();
                vec![(*p, gp)]
            }
        }
    }
}

/// `(sum(p * m), sum(p^2) + sum(m^2))`.
fn dice_terms<T: Real>(p: &[T], m: &[T]) -> (T, T) {
    let mut inter = 0.0f64;
    let mut denom = 0.0f64;
    for (&a, &b) in p.iter().zip(m) {
        let (a, b) = (a.as_f64(), b.as_f64());
        inter += a * b;
        denom += a * a + b * b;
    }
    (T::lit(inter), T::lit(denom))
}

/// Result of a reverse sweep: one optional gradient per tape node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<Option<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, or zeros if nothing reached it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); len])
    }

    /// `(param id, gradient)` for every parameter leaf the loss reached.
    pub fn params(&self) -> impl Iterator<Item = (usize, &[T])> + '_ {
        self.params
            .iter()
            .zip(&self.grads)
            .filter_map(|(p, g)| Some(((*p)?, g.as_deref()?)))
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

impl<T: Real> Tape<T> {
    /// Convenience for tests and probes: a leaf holding `values` as `(1, 1, 1, len)`.
    pub fn leaf_row(&mut self, values: Vec<T>) -> Var {
        let d = Dims::new(1, 1, 1, values.len());
        self.leaf(Tensor::from_vec(d, values).expect("row dims"))
    }
}
