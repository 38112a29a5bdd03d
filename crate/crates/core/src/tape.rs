//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to run its backward rule. [`Tape::backward`] consumes the tape and
//! walks it in reverse, so a tape serves exactly one backward pass.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{config_err, contract, Result};
use crate::kernels::{self, ConvDims, ConvGeometry};
use crate::{Error, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
}

/// Running per-channel mean and (unbiased) variance for batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }

    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn update(&mut self, batch: &BatchStats<T>, momentum: T) {
        let keep = T::one() - momentum;
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = keep * *r + momentum * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var_unbiased) {
            *r = keep * *r + momentum * b;
        }
    }
}

/// Per-channel statistics of one training-mode batch normalization call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

/// Which statistics batch normalization divides by.
#[derive(Debug)]
pub enum Normalization<'a, T> {
    /// Batch statistics; the returned [`BatchStats`] may be folded into running stats.
    Batch,
    /// Frozen running statistics (evaluation).
    Running(&'a RunningStats<T>),
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: T },
    Act { x: Var, kind: Activation },
    Conv2d { x: Var, w: Var, b: Option<Var>, dims: ConvDims },
    ConvT2d { x: Var, w: Var, b: Option<Var>, dims: ConvDims },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch: bool },
    Dropout { x: Var, scale: Vec<T> },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, f: usize },
    Upsample { x: Var, f: usize },
    GlobalAvgPool { x: Var },
    Linear { x: Var, w: Var, b: Var },
    Reshape { x: Var },
    Concat { parts: Vec<Var> },
    Sum { x: Var },
    Mean { x: Var },
    LogClamped { x: Var, lo: T, hi: T },
    Compose { context: Var, generated: Var, keep: Box<[bool]>, plane: usize, channels: usize },
    SoftmaxXent { logits: Var, probs: Vec<T>, labels: Vec<Option<usize>> },
    SigmoidBce { logits: Var, targets: Vec<Option<Vec<bool>>> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Linear record of a forward computation.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), check_finite: false }
    }

    /// Debug mode: every recorded value is checked for NaN/Inf.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(alloc::format!("output of tape node {}", self.nodes.len())));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records an input. Gradients are reported for it only if `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(contract!("{op}: shape mismatch {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        let v = self.value(x).map(|e| scale * e + shift);
        let ng = self.ng(&[x]);
        self.push(v, Op::Affine { x, scale }, ng)
    }

    pub fn scalar_mul(&mut self, x: Var, s: T) -> Result<Var> {
        self.affine(x, s, T::zero())
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let f: fn(T, f64) -> T = match kind {
            Activation::Relu => |v, _| if v > T::zero() { v } else { T::zero() },
            Activation::LeakyRelu(_) => |v, s| if v > T::zero() { v } else { T::of(s) * v },
            Activation::Sigmoid => |v, _| T::one() / (T::one() + (-v).exp()),
            Activation::Tanh => |v, _| v.tanh(),
        };
        let slope = if let Activation::LeakyRelu(s) = kind { s } else { 0.0 };
        let v = self.value(x).map(|e| f(e, slope));
        let ng = self.ng(&[x]);
        self.push(v, Op::Act { x, kind }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    fn conv_dims(&self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry, transposed: bool) -> Result<ConvDims> {
        let (_, c, h, wd) = self.value(x).dims4()?;
        let ws = self.shape(w);
        let [w0, w1, kh, kw] = *ws else {
            return Err(contract!("conv weight must be rank 4, got {ws:?}"));
        };
        // conv weight is out x in; transposed conv weight is in x out.
        let (input_ch, output_ch) = if transposed { (w0, w1) } else { (w1, w0) };
        if c != input_ch {
            return Err(contract!("conv input has {c} channels, weight expects {input_ch}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [output_ch] {
                return Err(contract!("conv bias shape {:?}, expected [{output_ch}]", self.shape(b)));
            }
        }
        if !transposed {
            return ConvDims::resolve(w1, h, wd, w0, kh, kw, geom);
        }
        // A transposed conv is the input-gradient of the conv (w1, H', W') -> (w0, h, wd).
        let ho = kernels::conv_transpose_output_size(h, kh, geom.stride.0, geom.pad.0)?;
        let wo = kernels::conv_transpose_output_size(wd, kw, geom.stride.1, geom.pad.1)?;
        let d = ConvDims::resolve(w1, ho, wo, w0, kh, kw, geom)?;
        if d.ho != h || d.wo != wd {
            return Err(config_err!("transposed conv geometry does not invert for input {h}x{wd}"));
        }
        Ok(d)
    }

    /// 2-D cross-correlation. `w` is `out x in x kH x kW`, `b` has length `out`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let dims = self.conv_dims(x, w, b, geom, false)?;
        let n = self.shape(x)[0];
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            n,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &dims,
        );
        let value = Tensor::new(&[n, dims.c_out, dims.ho, dims.wo], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(value, Op::Conv2d { x, w, b, dims }, ng)
    }

    /// Fractionally-strided convolution, the adjoint of [`Tape::conv2d`] with
    /// the same weight. `w` is `in x out x kH x kW`, `b` has length `out`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let dims = self.conv_dims(x, w, b, geom, true)?;
        let n = self.shape(x)[0];
        let mut out = kernels::conv2d_input_grad(self.value(x).data(), n, self.value(w).data(), &dims);
        if let Some(b) = b {
            let bias = self.value(b).data();
            let plane = dims.h * dims.w;
            for (i, chunk) in out.chunks_mut(plane).enumerate() {
                let bv = bias[i % dims.c_in];
                chunk.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
        let value = Tensor::new(&[n, dims.c_in, dims.h, dims.w], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(value, Op::ConvT2d { x, w, b, dims }, ng)
    }

    /// Spatial batch normalization over N, H, W per channel.
    ///
    /// With [`Normalization::Batch`] the batch statistics are returned so the
    /// caller can fold them into its running statistics.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        norm: Normalization<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(contract!("batch norm affine params must have shape [{c}]"));
        }
        let plane = h * w;
        let count = n * plane;
        let xs = self.value(x).data();
        let (mean, var, stats) = match norm {
            Normalization::Batch => {
                if n < 2 {
                    return Err(contract!("batch norm in train mode needs batch size >= 2, got {n}"));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = T::zero();
                    for s in 0..n {
                        let base = (s * c + ch) * plane;
                        acc = acc + xs[base..base + plane].iter().copied().sum::<T>();
                    }
                    let m = acc / T::of(count as f64);
                    let mut sq = T::zero();
                    for s in 0..n {
                        let base = (s * c + ch) * plane;
                        for &v in &xs[base..base + plane] {
                            sq = sq + (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = sq / T::of(count as f64);
                }
                let bessel = T::of(count as f64 / (count.max(2) - 1) as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var_unbiased: var.iter().map(|&v| v * bessel).collect(),
                };
                (mean, var, Some(stats))
            }
            Normalization::Running(rs) => {
                if rs.mean.len() != c || rs.var.len() != c {
                    return Err(contract!("running stats have wrong channel count"));
                }
                (rs.mean.clone(), rs.var.clone(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                for i in base..base + plane {
                    let xh = (xs[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        let ng = self.ng(&[x, gamma, beta]);
        let batch = stats.is_some();
        let v = self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch }, ng)?;
        Ok((v, stats))
    }

    /// Inverted dropout. Identity in inference or with `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(config_err!("dropout rate {rate} outside [0, 1)"));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let scale: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let data = self.value(x).data().iter().zip(&scale).map(|(&v, &s)| v * s).collect();
        let value = Tensor::new(self.shape(x), data)?;
        let ng = self.ng(&[x]);
        self.push(value, Op::Dropout { x, scale }, ng)
    }

    /// Non-overlapping `f x f` max pooling; spatial dims must be divisible by `f`.
    pub fn max_pool2d(&mut self, x: Var, f: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(config_err!("max pool {f}x{f} does not tile {h}x{w}"));
        }
        let (ho, wo) = (h / f, w / f);
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * f * w + ox * f;
                    for dy in 0..f {
                        for dx in 0..f {
                            let i = base + (oy * f + dy) * w + ox * f + dx;
                            if xs[i] > xs[best] {
                                best = i;
                            }
                        }
                    }
                    let o = (p * ho + oy) * wo + ox;
                    out[o] = xs[best];
                    argmax[o] = best;
                }
            }
        }
        let value = Tensor::new(&[n, c, ho, wo], out)?;
        let ng = self.ng(&[x]);
        self.push(value, Op::MaxPool { x, argmax }, ng)
    }

    /// Non-overlapping `f x f` average pooling; spatial dims must be divisible by `f`.
    pub fn avg_pool2d(&mut self, x: Var, f: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(config_err!("average pool {f}x{f} does not tile {h}x{w}"));
        }
        let out = kernels::avg_pool(self.value(x).data(), n * c, h, w, f);
        let value = Tensor::new(&[n, c, h / f, w / f], out)?;
        let ng = self.ng(&[x]);
        self.push(value, Op::AvgPool { x, f }, ng)
    }

    pub fn upsample_nearest(&mut self, x: Var, f: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if f == 0 {
            return Err(config_err!("upsample factor must be positive"));
        }
        let out = kernels::upsample_nearest(self.value(x).data(), n * c, h, w, f);
        let value = Tensor::new(&[n, c, h * f, w * f], out)?;
        let ng = self.ng(&[x]);
        self.push(value, Op::Upsample { x, f }, ng)
    }

    /// Global average pooling, `N x C x H x W -> N x C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        let inv = T::one() / T::of(plane as f64);
        let out = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(&[n, c], out)?;
        let ng = self.ng(&[x]);
        self.push(value, Op::GlobalAvgPool { x }, ng)
    }

    /// `x * w + b` with `x: N x F`, `w: F x O`, `b: O`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, f) = match *self.shape(x) {
            [n, f] => (n, f),
            ref s => return Err(contract!("linear input must be N x F, got {s:?}")),
        };
        let o = match *self.shape(w) {
            [wf, o] if wf == f => o,
            ref s => return Err(contract!("linear weight {s:?} does not match {f} input features")),
        };
        if self.shape(b) != [o] {
            return Err(contract!("linear bias shape {:?}, expected [{o}]", self.shape(b)));
        }
        let bias = self.value(b).data();
        let mut out: Vec<T> = (0..n).flat_map(|_| bias.iter().copied()).collect();
        T::gemm(
            n,
            f,
            o,
            T::one(),
            self.value(x).data(),
            (f as isize, 1),
            self.value(w).data(),
            (o as isize, 1),
            T::one(),
            &mut out,
            (o as isize, 1),
        );
        let value = Tensor::new(&[n, o], out)?;
        let ng = self.ng(&[x, w, b]);
        self.push(value, Op::Linear { x, w, b }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(&[x]);
        self.push(value, Op::Reshape { x }, ng)
    }

    /// Concatenate NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| contract!("concat of nothing"))?;
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut chans = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(contract!("concat: {:?} incompatible with {:?}", self.shape(p), self.shape(first)));
            }
            chans.push(pc);
        }
        let total: usize = chans.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for s in 0..n {
            for (&p, &c) in parts.iter().zip(&chans) {
                out.extend_from_slice(&self.value(p).data()[s * c * plane..(s + 1) * c * plane]);
            }
        }
        let value = Tensor::new(&[n, total, h, w], out)?;
        let ng = self.ng(parts);
        self.push(value, Op::Concat { parts: parts.to_vec() }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(&[x]);
        self.push(value, Op::Sum { x }, ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let value = Tensor::scalar(self.value(x).sum() / T::of(n as f64));
        let ng = self.ng(&[x]);
        self.push(value, Op::Mean { x }, ng)
    }

    /// `ln(clamp(x, lo, hi))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(lo).min(hi).ln());
        let ng = self.ng(&[x]);
        self.push(value, Op::LogClamped { x, lo, hi }, ng)
    }

    /// Keep-mask selection `keep ? context : generated`, per pixel and broadcast over channels.
    ///
    /// `keep` holds `N * H * W` flags. For binary masks this is exactly
    /// `m * context + (1 - m) * generated`, without rounding.
    pub fn compose(&mut self, context: Var, generated: Var, keep: &[bool]) -> Result<Var> {
        self.same_shape("compose", context, generated)?;
        let (n, c, h, w) = self.value(context).dims4()?;
        let plane = h * w;
        if keep.len() != n * plane {
            return Err(contract!("compose: mask has {} entries, expected {}", keep.len(), n * plane));
        }
        let out = compose_values(self.value(context).data(), self.value(generated).data(), keep, c, plane);
        let value = Tensor::new(&[n, c, h, w], out)?;
        let ng = self.ng(&[context, generated]);
        self.push(
            value,
            Op::Compose { context, generated, keep: keep.into(), plane, channels: c },
            ng,
        )
    }

    /// Mean softmax cross-entropy over the rows that carry a label.
    ///
    /// Rows with `None` contribute nothing; with no labeled rows the loss is 0.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[Option<usize>]) -> Result<Var> {
        let [n, c] = *self.shape(logits) else {
            return Err(contract!("logits must be N x C, got {:?}", self.shape(logits)));
        };
        if labels.len() != n {
            return Err(contract!("{} labels for {n} rows", labels.len()));
        }
        if let Some(bad) = labels.iter().flatten().find(|&&l| l >= c) {
            return Err(contract!("label {bad} out of range for {c} classes"));
        }
        let xs = self.value(logits).data();
        let mut probs = vec![T::zero(); n * c];
        let mut total = T::zero();
        let mut count = 0usize;
        for r in 0..n {
            let row = &xs[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            for (p, &v) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (v - max).exp() / z;
            }
            if let Some(l) = labels[r] {
                total = total + (z.ln() + max - row[l]);
                count += 1;
            }
        }
        let loss = if count == 0 { T::zero() } else { total / T::of(count as f64) };
        let ng = self.ng(&[logits]);
        self.push(Tensor::scalar(loss), Op::SoftmaxXent { logits, probs, labels: labels.to_vec() }, ng)
    }

    /// Mean per-class sigmoid binary cross-entropy over rows that carry a target vector.
    pub fn sigmoid_bce(&mut self, logits: Var, targets: &[Option<Vec<bool>>]) -> Result<Var> {
        let [n, c] = *self.shape(logits) else {
            return Err(contract!("logits must be N x C, got {:?}", self.shape(logits)));
        };
        if targets.len() != n {
            return Err(contract!("{} targets for {n} rows", targets.len()));
        }
        if let Some(t) = targets.iter().flatten().find(|t| t.len() != c) {
            return Err(contract!("target vector of length {} for {c} classes", t.len()));
        }
        let xs = self.value(logits).data();
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = t else { continue };
            for (j, &y) in t.iter().enumerate() {
                let v = xs[r * c + j];
                // softplus(v) - y*v, stable for both signs
                let sp = v.max(T::zero()) + (T::one() + (-v.abs()).exp()).ln();
                total = total + sp - if y { v } else { T::zero() };
                count += 1;
            }
        }
        let loss = if count == 0 { T::zero() } else { total / T::of(count as f64) };
        let ng = self.ng(&[logits]);
        self.push(Tensor::scalar(loss), Op::SigmoidBce { logits, targets: targets.to_vec() }, ng)
    }

    /// Runs the backward pass from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(contract!("backward needs a scalar loss, got shape {:?}", self.shape(loss)));
        }
        let Tape { nodes, .. } = self;
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let leaf: Vec<bool> = nodes.iter().map(|n| matches!(n.op, Op::Leaf) && n.needs_grad).collect();
        if nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape()));
        }
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backward_node(&nodes, node, g, &mut grads)?;
        }
        for (i, g) in grads.iter_mut().enumerate() {
            if !leaf[i] {
                *g = None;
            } else if g.is_none() {
                *g = Some(Tensor::zeros(nodes[i].value.shape()));
            }
        }
        Ok(Gradients { grads })
    }
}

pub(crate) fn compose_values<T: Copy>(context: &[T], generated: &[T], keep: &[bool], c: usize, plane: usize) -> Vec<T> {
    context
        .iter()
        .zip(generated)
        .enumerate()
        .map(|(i, (&x, &g))| {
            let s = i / (c * plane);
            if keep[s * plane + i % plane] { x } else { g }
        })
        .collect()
}

fn accumulate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        slot => *slot = Some(g),
    }
}

fn accumulate_slice<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], v: Var, g: Vec<T>) -> Result<()> {
    let t = Tensor::new(nodes[v.0].value.shape(), g)?;
    accumulate(nodes, grads, v, t);
    Ok(())
}

fn backward_node<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) -> Result<()> {
    let val = |v: Var| &nodes[v.0].value;
    let ng = |v: Var| nodes[v.0].needs_grad;
    let gd = g.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *b, g.clone());
            accumulate(nodes, grads, *a, g);
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *b, g.map(|v| -v));
            accumulate(nodes, grads, *a, g);
        }
        Op::Mul(a, b) => {
            if ng(*a) {
                accumulate(nodes, grads, *a, g.zip_map(val(*b), |x, y| x * y)?);
            }
            if ng(*b) {
                accumulate(nodes, grads, *b, g.zip_map(val(*a), |x, y| x * y)?);
            }
        }
        Op::Affine { x, scale } => accumulate(nodes, grads, *x, g.map(|v| v * *scale)),
        Op::Act { x, kind } => {
            let xin = val(*x).data();
            let y = node.value.data();
            let out: Vec<T> = match *kind {
                Activation::Relu => gd.iter().zip(xin).map(|(&g, &x)| if x > T::zero() { g } else { T::zero() }).collect(),
                Activation::LeakyRelu(s) => {
                    let s = T::of(s);
                    gd.iter().zip(xin).map(|(&g, &x)| if x > T::zero() { g } else { g * s }).collect()
                }
                Activation::Sigmoid => gd.iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)).collect(),
                Activation::Tanh => gd.iter().zip(y).map(|(&g, &y)| g * (T::one() - y * y)).collect(),
            };
            accumulate_slice(nodes, grads, *x, out)?;
        }
        Op::Conv2d { x, w, b, dims } => {
            let n = val(*x).shape()[0];
            if ng(*x) {
                let gx = kernels::conv2d_input_grad(gd, n, val(*w).data(), dims);
                accumulate_slice(nodes, grads, *x, gx)?;
            }
            if ng(*w) {
                let mut gw = vec![T::zero(); val(*w).len()];
                kernels::conv2d_weight_grad(val(*x).data(), gd, n, dims, &mut gw);
                accumulate_slice(nodes, grads, *w, gw)?;
            }
            if let Some(b) = b.filter(|b| ng(*b)) {
                let gb = kernels::channel_sums(gd, n, dims.c_out, dims.ho * dims.wo);
                accumulate_slice(nodes, grads, b, gb)?;
            }
        }
        Op::ConvT2d { x, w, b, dims } => {
            // Forward was y = conv2d_input_grad(x); its adjoint is the forward conv.
            let n = val(*x).shape()[0];
            if ng(*x) {
                let gx = kernels::conv2d_forward(gd, n, val(*w).data(), None, dims);
                accumulate_slice(nodes, grads, *x, gx)?;
            }
            if ng(*w) {
                let mut gw = vec![T::zero(); val(*w).len()];
                kernels::conv2d_weight_grad(gd, val(*x).data(), n, dims, &mut gw);
                accumulate_slice(nodes, grads, *w, gw)?;
            }
            if let Some(b) = b.filter(|b| ng(*b)) {
                let gb = kernels::channel_sums(gd, n, dims.c_in, dims.h * dims.w);
                accumulate_slice(nodes, grads, b, gb)?;
            }
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch } => {
            let (n, c, h, w) = val(*x).dims4()?;
            let plane = h * w;
            let m = T::of((n * plane) as f64);
            let gam = val(*gamma).data();
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * plane;
                    for i in base..base + plane {
                        sum_g[ch] = sum_g[ch] + gd[i];
                        sum_gx[ch] = sum_gx[ch] + gd[i] * xhat[i];
                    }
                }
            }
            if ng(*x) {
                let mut gx = vec![T::zero(); gd.len()];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * plane;
                        let k = gam[ch] * inv_std[ch];
                        for i in base..base + plane {
                            gx[i] = if *batch {
                                k * (gd[i] - sum_g[ch] / m - xhat[i] * sum_gx[ch] / m)
                            } else {
                                k * gd[i]
                            };
                        }
                    }
                }
                accumulate_slice(nodes, grads, *x, gx)?;
            }
            accumulate_slice(nodes, grads, *gamma, sum_gx)?;
            accumulate_slice(nodes, grads, *beta, sum_g)?;
        }
        Op::Dropout { x, scale } => {
            let gx = gd.iter().zip(scale).map(|(&g, &s)| g * s).collect();
            accumulate_slice(nodes, grads, *x, gx)?;
        }
        Op::MaxPool { x, argmax } => {
            let mut gx = vec![T::zero(); val(*x).len()];
            for (&i, &g) in argmax.iter().zip(gd) {
                gx[i] = gx[i] + g;
            }
            accumulate_slice(nodes, grads, *x, gx)?;
        }
        Op::AvgPool { x, f } => {
            let (n, c, h, w) = val(*x).dims4()?;
            let inv = T::one() / T::of((f * f) as f64);
            let up = kernels::upsample_nearest(gd, n * c, h / f, w / f, *f);
            accumulate_slice(nodes, grads, *x, up.into_iter().map(|v| v * inv).collect())?;
        }
        Op::Upsample { x, f } => {
            let (n, c, h, w) = val(*x).dims4()?;
            accumulate_slice(nodes, grads, *x, kernels::sum_pool(gd, n * c, h, w, *f))?;
        }
        Op::GlobalAvgPool { x } => {
            let (_, _, h, w) = val(*x).dims4()?;
            let plane = h * w;
            let inv = T::one() / T::of(plane as f64);
            let gx = gd.iter().flat_map(|&g| core::iter::repeat_n(g * inv, plane)).collect();
            accumulate_slice(nodes, grads, *x, gx)?;
        }
        Op::Linear { x, w, b } => {
            let (n, f) = (val(*x).shape()[0], val(*x).shape()[1]);
            let o = val(*w).shape()[1];
            if ng(*x) {
                let mut gx = vec![T::zero(); n * f];
                T::gemm(n, o, f, T::one(), gd, (o as isize, 1), val(*w).data(), (1, o as isize), T::zero(), &mut gx, (f as isize, 1));
                accumulate_slice(nodes, grads, *x, gx)?;
            }
            if ng(*w) {
                let mut gw = vec![T::zero(); f * o];
                T::gemm(f, n, o, T::one(), val(*x).data(), (1, f as isize), gd, (o as isize, 1), T::zero(), &mut gw, (o as isize, 1));
                accumulate_slice(nodes, grads, *w, gw)?;
            }
            if ng(*b) {
                let mut gb = vec![T::zero(); o];
                for row in gd.chunks(o) {
                    for (a, &v) in gb.iter_mut().zip(row) {
                        *a = *a + v;
                    }
                }
                accumulate_slice(nodes, grads, *b, gb)?;
            }
        }
        Op::Reshape { x } => accumulate_slice(nodes, grads, *x, g.into_data())?,
        Op::Concat { parts } => {
            let (n, total, h, w) = node.value.dims4()?;
            let plane = h * w;
            let mut offset = 0;
            for &p in parts {
                let c = val(p).shape()[1];
                if ng(p) {
                    let mut gp = Vec::with_capacity(n * c * plane);
                    for s in 0..n {
                        let start = (s * total + offset) * plane;
                        gp.extend_from_slice(&gd[start..start + c * plane]);
                    }
                    accumulate_slice(nodes, grads, p, gp)?;
                }
                offset += c;
            }
        }
        Op::Sum { x } => {
            accumulate(nodes, grads, *x, Tensor::full(val(*x).shape(), gd[0]));
        }
        Op::Mean { x } => {
            let n = T::of(val(*x).len() as f64);
            accumulate(nodes, grads, *x, Tensor::full(val(*x).shape(), gd[0] / n));
        }
        Op::LogClamped { x, lo, hi } => {
            let gx = gd
                .iter()
                .zip(val(*x).data())
                .map(|(&g, &v)| if v < *lo || v > *hi { T::zero() } else { g / v })
                .collect();
            accumulate_slice(nodes, grads, *x, gx)?;
        }
        Op::Compose { context, generated, keep, plane, channels } => {
            let zeros = vec![T::zero(); gd.len()];
            if ng(*context) {
                let gc = compose_values(gd, &zeros, keep, *channels, *plane);
                accumulate_slice(nodes, grads, *context, gc)?;
            }
            if ng(*generated) {
                let gg = compose_values(&zeros, gd, keep, *channels, *plane);
                accumulate_slice(nodes, grads, *generated, gg)?;
            }
        }
        Op::SoftmaxXent { logits, probs, labels } => {
            let c = val(*logits).shape()[1];
            let count = labels.iter().flatten().count();
            let mut gx = vec![T::zero(); probs.len()];
            if count > 0 {
                let k = gd[0] / T::of(count as f64);
                for (r, l) in labels.iter().enumerate() {
                    let Some(l) = *l else { continue };
                    for j in 0..c {
                        let onehot = if j == l { T::one() } else { T::zero() };
                        gx[r * c + j] = k * (probs[r * c + j] - onehot);
                    }
                }
            }
            accumulate_slice(nodes, grads, *logits, gx)?;
        }
        Op::SigmoidBce { logits, targets } => {
            let c = val(*logits).shape()[1];
            let xs = val(*logits).data();
            let count = targets.iter().flatten().count() * c;
            let mut gx = vec![T::zero(); xs.len()];
            if count > 0 {
                let k = gd[0] / T::of(count as f64);
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = t else { continue };
                    for (j, &y) in t.iter().enumerate() {
                        let p = T::one() / (T::one() + (-xs[r * c + j]).exp());
                        let y = if y { T::one() } else { T::zero() };
                        gx[r * c + j] = k * (p - y);
                    }
                }
            }
            accumulate_slice(nodes, grads, *logits, gx)?;
        }
    }
    Ok(())
}

/// Gradients of a loss with respect to the leaves recorded with `requires_grad`.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf recorded with `requires_grad`; zeros when it did not
    /// participate. `None` for non-leaves and constants.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
