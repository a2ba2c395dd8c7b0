//! Forward pass with cached intermediates and its hand-written reverse pass.
//!
//! Subgradient conventions: clamps pass the gradient where the input lies in
//! the closed active range and block it elsewhere; `|0|` has slope 0; the
//! division floor blocks the gradient where the illumination is at or below
//! it. The condition map is a function of the input alone and carries none.

use crate::error::{shape_mismatch, Result};
use crate::glle::{check_image, Branch, Layer, ILLUM_FLOOR};
use crate::local_adapt::{condition_pathway, curve_apply};
use crate::tensor::{
    avg_pool, batch_norm, batch_norm_batch, conv2d, lit, sigmoid, BatchStats, ConvKernel, Real,
    Shape, Tensor,
};

use super::TrainModel;

/// How batch norm behaves during a training forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BnMode {
    /// Normalise with the batch's statistics.
    Batch,
    /// Use the stored running statistics.
    Running,
}

/// Mean absolute error over all elements.
pub fn l1_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(shape_mismatch(
            "l1_loss",
            format!("{} vs {}", pred.shape(), target.shape()),
        ));
    }
    let sum: T = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a - b).abs())
        .sum();
    Ok(sum / lit(pred.len() as f64))
}

struct BranchCache<T> {
    /// Input of every layer.
    inputs: Vec<Tensor<T>>,
    /// Normalised pre-BN activation.
    xhat: Tensor<T>,
    /// Per-channel `1/sigma` actually used.
    inv_std: Vec<T>,
    stats: Option<BatchStats<T>>,
}

/// Everything the reverse pass needs.
pub struct ForwardCache<T> {
    branches: Vec<BranchCache<T>>,
    pub illumination: Tensor<T>,
    /// `x / max(illum, floor)` before clamping.
    pub quotient: Tensor<T>,
    pub coarse: Tensor<T>,
    pub condition: Tensor<T>,
    pub gain: Tensor<T>,
    /// `gain * coarse` before clamping.
    pub product: Tensor<T>,
    pub output: Tensor<T>,
}

impl<T: Real> ForwardCache<T> {
    /// Batch statistics of every branch, in branch order (batch mode only).
    pub fn batch_stats(&self) -> Vec<Option<&BatchStats<T>>> {
        self.branches.iter().map(|b| b.stats.as_ref()).collect()
    }
}

fn branch_forward<T: Real>(
    b: &Branch<T>,
    x: &Tensor<T>,
    mode: BnMode,
) -> Result<(Tensor<T>, BranchCache<T>)> {
    let mut inputs = Vec::with_capacity(b.layers.len());
    let mut h = x.clone();
    for layer in &b.layers {
        let next = match layer {
            Layer::Conv { kernel, padding } => conv2d(&h, kernel, 1, *padding)?,
            Layer::AvgPool { k } => avg_pool(&h, *k, 1, 0)?,
        };
        inputs.push(std::mem::replace(&mut h, next));
    }
    let c = h.shape().c;
    let (y, inv_std, mean, stats) = match mode {
        BnMode::Batch => {
            let (y, st) = batch_norm_batch(&h, &b.bn)?;
            (y, st.inv_std.clone(), st.mean.clone(), Some(st))
        }
        BnMode::Running => {
            let y = batch_norm(&h, &b.bn)?;
            let inv: Vec<T> = b.bn.sigma.iter().map(|&s| T::one() / s).collect();
            (y, inv, b.bn.mu.clone(), None)
        }
    };
    let mut xhat = h;
    let s = xhat.shape();
    for n in 0..s.n {
        for ch in 0..c {
            let (m, is) = (mean[ch], inv_std[ch]);
            for v in xhat.plane_mut(n, ch) {
                *v = (*v - m) * is;
            }
        }
    }
    Ok((
        y,
        BranchCache {
            inputs,
            xhat,
            inv_std,
            stats,
        },
    ))
}

/// Full training forward pass.
pub fn forward<T: Real>(
    model: &TrainModel<T>,
    x: &Tensor<T>,
    mode: BnMode,
) -> Result<ForwardCache<T>> {
    check_image(x)?;
    let mut logits = x.clone();
    let mut branches = Vec::with_capacity(model.glle.branches.len());
    for b in &model.glle.branches {
        let (y, cache) = branch_forward(b, x, mode)?;
        logits.add_assign(&y)?;
        branches.push(cache);
    }
    let illumination = logits.map(sigmoid);
    let quotient = x.div_floored(&illumination, lit(ILLUM_FLOOR))?;
    let coarse = quotient.clamp(T::zero(), T::one());
    let condition = condition_pathway(x, model.pool_k)?;
    let gain = curve_apply(&condition, &model.curve);
    let product = coarse.mul_broadcast_channels(&gain)?;
    let output = product.clamp(T::zero(), T::one());
    Ok(ForwardCache {
        branches,
        illumination,
        quotient,
        coarse,
        condition,
        gain,
        product,
        output,
    })
}

#[inline]
fn in_unit<T: Real>(v: T) -> bool {
    v >= T::zero() && v <= T::one()
}

/// Gradients of a stride-1 convolution with the given zero padding.
pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    k: &ConvKernel<T>,
    padding: [usize; 2],
    grad_out: &Tensor<T>,
    need_input: bool,
) -> (Option<Tensor<T>>, Vec<T>, Vec<T>) {
    let s = x.shape();
    let g = grad_out.shape();
    let [ph, pw] = padding;
    let (hp, wp) = (s.h + 2 * ph, s.w + 2 * pw);
    let (oh, ow) = (g.h, g.w);

    let mut xpad = vec![T::zero(); s.c * hp * wp];
    let mut gpad = vec![T::zero(); if need_input { s.n * s.c * hp * wp } else { 0 }];
    let mut gw = vec![T::zero(); k.weight().len()];
    let mut gb = vec![T::zero(); k.c_out()];

    for n in 0..s.n {
        for i in 0..s.c {
            let src = x.plane(n, i);
            let dst = &mut xpad[i * hp * wp..(i + 1) * hp * wp];
            for y in 0..s.h {
                dst[(y + ph) * wp + pw..(y + ph) * wp + pw + s.w]
                    .copy_from_slice(&src[y * s.w..(y + 1) * s.w]);
            }
        }
        for o in 0..k.c_out() {
            let go = grad_out.plane(n, o);
            gb[o] = gb[o] + go.iter().copied().sum::<T>();
            for i in 0..s.c {
                let xp = &xpad[i * hp * wp..(i + 1) * hp * wp];
                for u in 0..k.k_h() {
                    for v in 0..k.k_w() {
                        let mut acc = T::zero();
                        for y in 0..oh {
                            let grow = &go[y * ow..(y + 1) * ow];
                            let xrow = &xp[(y + u) * wp + v..(y + u) * wp + v + ow];
                            for (&a, &b) in grow.iter().zip(xrow) {
                                acc = acc + a * b;
                            }
                        }
                        let j = k.idx(o, i, u, v);
                        gw[j] = gw[j] + acc;
                        if need_input {
                            let w = k.at(o, i, u, v);
                            let gp =
                                &mut gpad[(n * s.c + i) * hp * wp..(n * s.c + i + 1) * hp * wp];
                            for y in 0..oh {
                                let grow = &go[y * ow..(y + 1) * ow];
                                let drow = &mut gp[(y + u) * wp + v..(y + u) * wp + v + ow];
                                for (d, &a) in drow.iter_mut().zip(grow) {
                                    *d = *d + w * a;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    let grad_in = need_input.then(|| {
        Tensor::from_fn(s, |n, i, y, xx| {
            gpad[((n * s.c + i) * hp + y + ph) * wp + xx + pw]
        })
    });
    (grad_in, gw, gb)
}

/// Gradient of stride-1, unpadded average pooling.
fn avg_pool_backward<T: Real>(in_shape: Shape, k: usize, grad_out: &Tensor<T>) -> Tensor<T> {
    let g = grad_out.shape();
    let norm = T::one() / lit((k * k) as f64);
    let mut out = Tensor::zeros(in_shape);
    for n in 0..g.n {
        for c in 0..g.c {
            let go = grad_out.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..g.h {
                for xx in 0..g.w {
                    let v = go[y * g.w + xx] * norm;
                    for u in 0..k {
                        for w in 0..k {
                            let j = (y + u) * in_shape.w + xx + w;
                            dst[j] = dst[j] + v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Appends the branch's parameter gradients to `flat` in parameter order.
fn branch_backward<T: Real>(
    b: &Branch<T>,
    cache: &BranchCache<T>,
    grad_y: &Tensor<T>,
    mode: BnMode,
    flat: &mut Vec<T>,
) -> Result<()> {
    let s = grad_y.shape();
    let c = s.c;
    let count: T = lit((s.n * s.plane()) as f64);
    let mut g_gamma = vec![T::zero(); c];
    let mut g_beta = vec![T::zero(); c];
    let mut g_z = grad_y.clone();
    for ch in 0..c {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for n in 0..s.n {
            for (&g, &xh) in grad_y.plane(n, ch).iter().zip(cache.xhat.plane(n, ch)) {
                sum_g = sum_g + g;
                sum_gx = sum_gx + g * xh;
            }
        }
        g_beta[ch] = sum_g;
        g_gamma[ch] = sum_gx;
        let scale = b.bn.gamma[ch] * cache.inv_std[ch];
        for n in 0..s.n {
            let xh = cache.xhat.plane(n, ch).to_vec();
            for (gz, xh) in g_z.plane_mut(n, ch).iter_mut().zip(xh) {
                *gz = match mode {
                    BnMode::Batch => scale * (*gz - sum_g / count - xh * sum_gx / count),
                    BnMode::Running => scale * *gz,
                };
            }
        }
    }

    // Walk the layers backwards, collecting per-layer (weight, bias) grads.
    let mut layer_grads: Vec<Option<(Vec<T>, Vec<T>)>> = vec![None; b.layers.len()];
    let mut grad = g_z;
    for (li, layer) in b.layers.iter().enumerate().rev() {
        let input = &cache.inputs[li];
        match layer {
            Layer::Conv { kernel, padding } => {
                let (gi, gw, gb) = conv2d_backward(input, kernel, *padding, &grad, li > 0);
                layer_grads[li] = Some((gw, gb));
                if let Some(gi) = gi {
                    grad = gi;
                }
            }
            Layer::AvgPool { k } => {
                grad = avg_pool_backward(input.shape(), *k, &grad);
            }
        }
    }
    for (gw, gb) in layer_grads.into_iter().flatten() {
        flat.extend(gw);
        flat.extend(gb);
    }
    flat.extend(g_gamma);
    flat.extend(g_beta);
    Ok(())
}

/// Loss and flat gradient (same layout as [`TrainModel::flat_params`]).
pub fn loss_and_grad<T: Real>(
    model: &TrainModel<T>,
    x: &Tensor<T>,
    target: &Tensor<T>,
    mode: BnMode,
) -> Result<(T, Vec<T>, ForwardCache<T>)> {
    let cache = forward(model, x, mode)?;
    let loss = l1_loss(&cache.output, target)?;
    let grad = backward(model, &cache, target, mode)?;
    Ok((loss, grad, cache))
}

/// Reverse pass of the L1 loss through the whole pipeline.
pub fn backward<T: Real>(
    model: &TrainModel<T>,
    cache: &ForwardCache<T>,
    target: &Tensor<T>,
    mode: BnMode,
) -> Result<Vec<T>> {
    let out = &cache.output;
    if out.shape() != target.shape() {
        return Err(shape_mismatch(
            "backward",
            format!("{} vs {}", out.shape(), target.shape()),
        ));
    }
    let s = out.shape();
    let inv_count = T::one() / lit(out.len() as f64);
    let floor = lit::<T>(ILLUM_FLOOR);

    // d loss / d product, through |.| and the output clamp.
    let g_p = Tensor::from_fn(s, |n, c, y, x| {
        let o = cache.output.at(n, c, y, x);
        let d = o - target.at(n, c, y, x);
        let sign = if d > T::zero() {
            T::one()
        } else if d < T::zero() {
            -T::one()
        } else {
            T::zero()
        };
        if in_unit(cache.product.at(n, c, y, x)) {
            sign * inv_count
        } else {
            T::zero()
        }
    });

    // Gain map and curve coefficients.
    let mut g_gain = Tensor::zeros(cache.gain.shape());
    for n in 0..s.n {
        for c in 0..s.c {
            let gp = g_p.plane(n, c);
            let co = cache.coarse.plane(n, c).to_vec();
            for ((gg, &a), b) in g_gain.plane_mut(n, 0).iter_mut().zip(gp).zip(co) {
                *gg = *gg + a * b;
            }
        }
    }
    let (mut g_alpha, mut g_beta, mut g_gamma) = (T::zero(), T::zero(), T::zero());
    for (&g, &m) in g_gain.data().iter().zip(cache.condition.data()) {
        g_alpha = g_alpha + g * m * m;
        g_beta = g_beta + g * m;
        g_gamma = g_gamma + g;
    }

    // Back through the coarse clamp, the floored division and the sigmoid.
    let g_logits = Tensor::from_fn(s, |n, c, y, x| {
        let gain = cache.gain.at(n, 0, y, x);
        let g_coarse = g_p.at(n, c, y, x) * gain;
        let q = cache.quotient.at(n, c, y, x);
        let il = cache.illumination.at(n, c, y, x);
        if !in_unit(q) || il <= floor {
            return T::zero();
        }
        let g_il = -g_coarse * q / il;
        g_il * il * (T::one() - il)
    });

    let mut flat = Vec::with_capacity(model.param_len());
    for (b, bc) in model.glle.branches.iter().zip(&cache.branches) {
        branch_backward(b, bc, &g_logits, mode, &mut flat)?;
    }
    flat.extend([g_alpha, g_beta, g_gamma]);
    debug_assert_eq!(flat.len(), model.param_len());
    Ok(flat)
}
