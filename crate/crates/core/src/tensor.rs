//! Dense NCHW tensors and the handful of kernels the enhancer needs.
//!
//! Everything here is a pure function of its inputs. Convolution follows the
//! usual deep-learning convention (cross-correlation, zero padding). Work is
//! split across rows with rayon for large planes; every output element is
//! accumulated in the same order either way, so parallel and sequential runs
//! agree bit for bit.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rayon::prelude::*;

use crate::error::{invalid, shape_mismatch, Error, Result};

/// Floating-point element type. Implemented for `f32` (production) and
/// `f64` (gradient and equivalence oracles).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Sum + Debug + Display + Send + Sync + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Real>(v: f64) -> T {
    T::from_f64(v).expect("literal representable")
}

/// Below this many output elements a plane is processed on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Row-major N -> C -> H -> W array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(shape_mismatch(
                "Tensor::new",
                format!(
                    "shape {shape} needs {} values, got {}",
                    shape.len(),
                    data.len()
                ),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut T {
        let i = self.index(n, c, y, x);
        &mut self.data[i]
    }

    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// Copies sample `n` out as a batch of one.
    pub fn sample(&self, n: usize) -> Tensor<T> {
        let per = self.shape.c * self.shape.plane();
        Tensor {
            shape: Shape::new(1, self.shape.c, self.shape.h, self.shape.w),
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| invalid("Tensor::stack", "no tensors to stack"))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(s.len() * items.len());
        let mut n = 0;
        for t in items {
            if (t.shape.c, t.shape.h, t.shape.w) != (s.c, s.h, s.w) {
                return Err(shape_mismatch(
                    "Tensor::stack",
                    format!("{} vs {}", t.shape, s),
                ));
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape::new(n, s.c, s.h, s.w),
            data,
        })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor<T>, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_mismatch(
                op,
                format!("{} vs {}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_map(other, |a, b| a * b)
    }

    /// Elementwise `self / max(other, floor)`.
    pub fn div_floored(&self, other: &Tensor<T>, floor: T) -> Result<Tensor<T>> {
        self.zip_map(other, |a, b| a / b.max(floor))
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        self.map(|v| v * s)
    }

    pub fn add_scalar(&self, s: T) -> Tensor<T> {
        self.map(|v| v + s)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.map(sigmoid)
    }

    pub fn clamp(&self, lo: T, hi: T) -> Tensor<T> {
        self.map(|v| v.max(lo).min(hi))
    }

    /// Multiplies every channel of `self` by a single-channel map of the same
    /// batch size and spatial extent.
    pub fn mul_broadcast_channels(&self, map: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.shape;
        let m = map.shape;
        if m.c != 1 || (m.n, m.h, m.w) != (s.n, s.h, s.w) {
            return Err(shape_mismatch(
                "mul_broadcast_channels",
                format!("tensor {s} vs map {m}"),
            ));
        }
        let mut out = self.clone();
        for n in 0..s.n {
            let mp = map.plane(n, 0);
            for c in 0..s.c {
                for (o, &k) in out.plane_mut(n, c).iter_mut().zip(mp) {
                    *o = *o * k;
                }
            }
        }
        Ok(out)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        self.sum() / lit(self.data.len() as f64)
    }

    pub fn min(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Convolution weights `[c_out][c_in][k_h][k_w]` plus one bias per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<T = f32> {
    c_out: usize,
    c_in: usize,
    k_h: usize,
    k_w: usize,
    weight: Vec<T>,
    bias: Vec<T>,
}

impl<T: Real> ConvKernel<T> {
    pub fn new(
        c_out: usize,
        c_in: usize,
        k_h: usize,
        k_w: usize,
        weight: Vec<T>,
        bias: Vec<T>,
    ) -> Result<Self> {
        for k in [k_h, k_w] {
            if k != 1 && k != 3 {
                return Err(invalid(
                    "ConvKernel::new",
                    format!("kernel extent {k} not in {{1, 3}}"),
                ));
            }
        }
        if weight.len() != c_out * c_in * k_h * k_w {
            return Err(shape_mismatch(
                "ConvKernel::new",
                format!(
                    "weight [{c_out}][{c_in}][{k_h}][{k_w}] needs {} values, got {}",
                    c_out * c_in * k_h * k_w,
                    weight.len()
                ),
            ));
        }
        if bias.len() != c_out {
            return Err(shape_mismatch(
                "ConvKernel::new",
                format!("bias needs {c_out} values, got {}", bias.len()),
            ));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(invalid("ConvKernel::new", "non-finite weight or bias"));
        }
        Ok(Self {
            c_out,
            c_in,
            k_h,
            k_w,
            weight,
            bias,
        })
    }

    pub fn zeros(c_out: usize, c_in: usize, k_h: usize, k_w: usize) -> Self {
        Self {
            c_out,
            c_in,
            k_h,
            k_w,
            weight: vec![T::zero(); c_out * c_in * k_h * k_w],
            bias: vec![T::zero(); c_out],
        }
    }

    /// 3x3 identity: centre tap 1 on matching channels.
    pub fn dirac(c: usize) -> Self {
        let mut k = Self::zeros(c, c, 3, 3);
        for ch in 0..c {
            *k.at_mut(ch, ch, 1, 1) = T::one();
        }
        k
    }

    /// 1x1 channel identity.
    pub fn identity_1x1(c: usize) -> Self {
        let mut k = Self::zeros(c, c, 1, 1);
        for ch in 0..c {
            *k.at_mut(ch, ch, 0, 0) = T::one();
        }
        k
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn k_h(&self) -> usize {
        self.k_h
    }

    pub fn k_w(&self) -> usize {
        self.k_w
    }

    pub fn weight(&self) -> &[T] {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut [T] {
        &mut self.weight
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [T] {
        &mut self.bias
    }

    #[inline]
    pub fn idx(&self, o: usize, i: usize, u: usize, v: usize) -> usize {
        ((o * self.c_in + i) * self.k_h + u) * self.k_w + v
    }

    #[inline]
    pub fn at(&self, o: usize, i: usize, u: usize, v: usize) -> T {
        self.weight[self.idx(o, i, u, v)]
    }

    #[inline]
    pub fn at_mut(&mut self, o: usize, i: usize, u: usize, v: usize) -> &mut T {
        let j = self.idx(o, i, u, v);
        &mut self.weight[j]
    }

    /// Weights plus biases.
    pub fn scalar_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Padding that keeps the spatial size unchanged at stride 1.
    pub fn same_padding(&self) -> [usize; 2] {
        [self.k_h / 2, self.k_w / 2]
    }

    pub fn cast<U: Real>(&self) -> ConvKernel<U> {
        let c = |v: &T| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan());
        ConvKernel {
            c_out: self.c_out,
            c_in: self.c_in,
            k_h: self.k_h,
            k_w: self.k_w,
            weight: self.weight.iter().map(c).collect(),
            bias: self.bias.iter().map(c).collect(),
        }
    }
}

/// Inference-time batch-norm statistics and affine parameters.
///
/// `sigma` holds `sqrt(var + eps)`; `eps` is kept so running variances can be
/// recovered when the statistics are updated during training.
#[derive(Clone, Debug, PartialEq)]
pub struct BNParams<T = f32> {
    pub mu: Vec<T>,
    pub sigma: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub eps: T,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl<T: Real> BNParams<T> {
    /// Freshly initialised layer: zero mean, unit variance, `gamma = 1`, `beta = 0`.
    pub fn fresh(c: usize) -> Self {
        let eps = lit::<T>(BN_EPS);
        Self {
            mu: vec![T::zero(); c],
            sigma: vec![(T::one() + eps).sqrt(); c],
            gamma: vec![T::one(); c],
            beta: vec![T::zero(); c],
            eps,
        }
    }

    /// Exact pass-through: `mu = 0`, `sigma = 1`, `gamma = 1`, `beta = 0`.
    pub fn identity(c: usize) -> Self {
        Self {
            mu: vec![T::zero(); c],
            sigma: vec![T::one(); c],
            gamma: vec![T::one(); c],
            beta: vec![T::zero(); c],
            eps: T::zero(),
        }
    }

    pub fn channels(&self) -> usize {
        self.mu.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.mu.len();
        if self.sigma.len() != c || self.gamma.len() != c || self.beta.len() != c {
            return Err(shape_mismatch(
                "BNParams",
                "per-channel arrays differ in length",
            ));
        }
        for (channel, &s) in self.sigma.iter().enumerate() {
            if !(s > T::zero()) || !s.is_finite() {
                return Err(Error::NonPositiveSigma {
                    channel,
                    value: s.to_f64().unwrap_or(f64::NAN),
                });
            }
        }
        Ok(())
    }

    /// Exponential moving average of the batch statistics into `mu` and `sigma`.
    pub fn update_running(&mut self, stats: &BatchStats<T>, momentum: T) {
        let keep = T::one() - momentum;
        for c in 0..self.channels() {
            let running_var = (self.sigma[c] * self.sigma[c] - self.eps).max(T::zero());
            let var = keep * running_var + momentum * stats.var[c];
            self.mu[c] = keep * self.mu[c] + momentum * stats.mean[c];
            self.sigma[c] = (var + self.eps).sqrt();
        }
    }

    pub fn cast<U: Real>(&self) -> BNParams<U> {
        let c = |v: &T| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan());
        BNParams {
            mu: self.mu.iter().map(c).collect(),
            sigma: self.sigma.iter().map(c).collect(),
            gamma: self.gamma.iter().map(c).collect(),
            beta: self.beta.iter().map(c).collect(),
            eps: c(&self.eps),
        }
    }
}

/// Per-channel batch statistics captured by [`batch_norm_train`].
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
    /// `1 / sqrt(var + eps)`.
    pub inv_std: Vec<T>,
}

/// Copies `x` into a zero-bordered buffer.
fn pad_planes<T: Real>(x: &Tensor<T>, ph: usize, pw: usize) -> (Vec<T>, usize, usize) {
    let s = x.shape();
    let (hp, wp) = (s.h + 2 * ph, s.w + 2 * pw);
    let mut buf = vec![T::zero(); s.n * s.c * hp * wp];
    for nc in 0..s.n * s.c {
        let src = &x.data[nc * s.plane()..(nc + 1) * s.plane()];
        let dst = &mut buf[nc * hp * wp..(nc + 1) * hp * wp];
        for y in 0..s.h {
            dst[(y + ph) * wp + pw..(y + ph) * wp + pw + s.w]
                .copy_from_slice(&src[y * s.w..(y + 1) * s.w]);
        }
    }
    (buf, hp, wp)
}

/// Output extent of a sliding window, or `None` if the window does not fit.
pub fn window_extent(len: usize, pad: usize, k: usize, stride: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < k || stride == 0 {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

/// 2-D cross-correlation with zero padding `[pad_h, pad_w]`.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    k: &ConvKernel<T>,
    stride: usize,
    padding: [usize; 2],
) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.c != k.c_in {
        return Err(shape_mismatch(
            "conv2d",
            format!("input has {} channels, kernel expects {}", s.c, k.c_in),
        ));
    }
    if stride == 0 {
        return Err(invalid("conv2d", "stride must be at least 1"));
    }
    let [ph, pw] = padding;
    let (oh, ow) = match (
        window_extent(s.h, ph, k.k_h, stride),
        window_extent(s.w, pw, k.k_w, stride),
    ) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(shape_mismatch(
                "conv2d",
                format!(
                    "{}x{} kernel does not fit input {s} with padding {padding:?}",
                    k.k_h, k.k_w
                ),
            ))
        }
    };
    let (buf, hp, wp) = pad_planes(x, ph, pw);
    let out_shape = Shape::new(s.n, k.c_out, oh, ow);
    let mut out = vec![T::zero(); out_shape.len()];
    let in_plane = hp * wp;

    // One output row at a time: bias, then taps in (i, u, v) order.
    let row = |n: usize, o: usize, y: usize, dst: &mut [T]| {
        dst.fill(k.bias[o]);
        let img = &buf[n * s.c * in_plane..(n + 1) * s.c * in_plane];
        for i in 0..k.c_in {
            let plane = &img[i * in_plane..(i + 1) * in_plane];
            for u in 0..k.k_h {
                let src_row = &plane[(y * stride + u) * wp..(y * stride + u + 1) * wp];
                for v in 0..k.k_w {
                    let w = k.at(o, i, u, v);
                    if stride == 1 {
                        for (d, &a) in dst.iter_mut().zip(&src_row[v..v + ow]) {
                            *d = *d + w * a;
                        }
                    } else {
                        for (xo, d) in dst.iter_mut().enumerate() {
                            *d = *d + w * src_row[xo * stride + v];
                        }
                    }
                }
            }
        }
    };

    let rows_per_plane = oh;
    let body = |(r, dst): (usize, &mut [T])| {
        let plane = r / rows_per_plane;
        let y = r % rows_per_plane;
        row(plane / k.c_out, plane % k.c_out, y, dst);
    };
    if oh * ow >= PAR_THRESHOLD {
        out.par_chunks_mut(ow).enumerate().for_each(body);
    } else {
        out.chunks_mut(ow).enumerate().for_each(body);
    }
    Tensor::new(out_shape, out)
}

/// Inference batch norm: `(x - mu) * gamma / sigma + beta` per channel.
pub fn batch_norm<T: Real>(x: &Tensor<T>, p: &BNParams<T>) -> Result<Tensor<T>> {
    p.validate()?;
    let s = x.shape();
    if s.c != p.channels() {
        return Err(shape_mismatch(
            "batch_norm",
            format!("input has {} channels, params have {}", s.c, p.channels()),
        ));
    }
    let mut out = x.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let (mu, sigma, gamma, beta) = (p.mu[c], p.sigma[c], p.gamma[c], p.beta[c]);
            for v in out.plane_mut(n, c) {
                *v = (*v - mu) * (gamma / sigma) + beta;
            }
        }
    }
    Ok(out)
}

/// Training batch norm: normalises with the batch's own statistics.
/// Running statistics are left alone; see [`BNParams::update_running`].
pub fn batch_norm_batch<T: Real>(
    x: &Tensor<T>,
    p: &BNParams<T>,
) -> Result<(Tensor<T>, BatchStats<T>)> {
    p.validate()?;
    let s = x.shape();
    if s.c != p.channels() {
        return Err(shape_mismatch(
            "batch_norm_batch",
            format!("input has {} channels, params have {}", s.c, p.channels()),
        ));
    }
    let count: T = lit((s.n * s.plane()) as f64);
    let mut stats = BatchStats {
        mean: vec![T::zero(); s.c],
        var: vec![T::zero(); s.c],
        inv_std: vec![T::zero(); s.c],
    };
    for c in 0..s.c {
        let sum: T = (0..s.n).flat_map(|n| x.plane(n, c).iter().copied()).sum();
        let m = sum / count;
        let var: T = (0..s.n)
            .flat_map(|n| x.plane(n, c).iter().map(move |&v| (v - m) * (v - m)))
            .sum::<T>()
            / count;
        stats.mean[c] = m;
        stats.var[c] = var;
        stats.inv_std[c] = T::one() / (var + p.eps).sqrt();
    }
    let mut out = x.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let (m, is, g, b) = (stats.mean[c], stats.inv_std[c], p.gamma[c], p.beta[c]);
            for v in out.plane_mut(n, c) {
                *v = (*v - m) * is * g + b;
            }
        }
    }
    Ok((out, stats))
}

/// [`batch_norm_batch`] followed by the running-statistics update.
pub fn batch_norm_train<T: Real>(
    x: &Tensor<T>,
    p: &mut BNParams<T>,
    momentum: T,
) -> Result<(Tensor<T>, BatchStats<T>)> {
    let (y, stats) = batch_norm_batch(x, p)?;
    p.update_running(&stats, momentum);
    Ok((y, stats))
}

/// Average pooling with zero padding; padded taps count toward the `k * k` divisor.
pub fn avg_pool<T: Real>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    if k == 0 || stride == 0 {
        return Err(invalid("avg_pool", "kernel and stride must be positive"));
    }
    let s = x.shape();
    let (oh, ow) = match (
        window_extent(s.h, padding, k, stride),
        window_extent(s.w, padding, k, stride),
    ) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(shape_mismatch(
                "avg_pool",
                format!("window {k} does not fit {s}"),
            ))
        }
    };
    let (buf, hp, wp) = pad_planes(x, padding, padding);
    let norm = T::one() / lit((k * k) as f64);
    let out_shape = Shape::new(s.n, s.c, oh, ow);
    let mut out = Vec::with_capacity(out_shape.len());
    for nc in 0..s.n * s.c {
        let plane = &buf[nc * hp * wp..(nc + 1) * hp * wp];
        for y in 0..oh {
            for xo in 0..ow {
                let mut acc = T::zero();
                for u in 0..k {
                    for v in 0..k {
                        acc = acc + plane[(y * stride + u) * wp + xo * stride + v];
                    }
                }
                out.push(acc * norm);
            }
        }
    }
    Tensor::new(out_shape, out)
}

/// Stride-1 max pooling that keeps the spatial size. Windows are clipped at
/// the border, which is the same as replicating edge pixels.
pub fn max_pool_same<T: Real>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    if k % 2 == 0 {
        return Err(invalid(
            "max_pool_same",
            format!("kernel size {k} must be odd"),
        ));
    }
    let r = k / 2;
    let s = x.shape();
    let mut tmp = vec![T::zero(); s.plane()];
    let mut out = x.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            // Max is separable over rectangular windows: rows first, then columns.
            for y in 0..s.h {
                let row = &src[y * s.w..(y + 1) * s.w];
                for xo in 0..s.w {
                    let lo = xo.saturating_sub(r);
                    let hi = (xo + r).min(s.w - 1);
                    tmp[y * s.w + xo] =
                        row[lo..=hi].iter().copied().fold(T::neg_infinity(), T::max);
                }
            }
            let dst = out.plane_mut(n, c);
            for y in 0..s.h {
                let lo = y.saturating_sub(r);
                let hi = (y + r).min(s.h - 1);
                for xo in 0..s.w {
                    let mut m = T::neg_infinity();
                    for yy in lo..=hi {
                        m = m.max(tmp[yy * s.w + xo]);
                    }
                    dst[y * s.w + xo] = m;
                }
            }
        }
    }
    Ok(out)
}
