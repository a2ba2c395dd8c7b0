//! Kernel algebra that collapses a multi-branch estimator into one 3x3 conv.
//!
//! Every transform here is exact in real arithmetic; the float results differ
//! from the source pipelines only by rounding. Sequential branches are
//! expected in the form produced by [`crate::glle`]: a 1x1 conv that carries
//! the branch's zero padding, followed by an unpadded 3x3 conv or average
//! pool. Padding the input of the 1x1 conv (rather than its output) makes the
//! border ring equal to the 1x1 bias, so the merged kernel matches at the
//! image border as well as in the interior.

use crate::error::{invalid, shape_mismatch, Error, Result};
use crate::glle::{Branch, BranchModel, FusedModel, Layer};
use crate::local_adapt::CurveParams;
use crate::tensor::{lit, BNParams, ConvKernel, Real};

/// Folds inference batch norm into the preceding convolution.
///
/// `W' = W * gamma / sigma` per output channel and
/// `b' = (b - mu) * gamma / sigma + beta`.
pub fn fuse_bn<T: Real>(k: &ConvKernel<T>, p: &BNParams<T>) -> Result<ConvKernel<T>> {
    p.validate()?;
    if p.channels() != k.c_out() {
        return Err(shape_mismatch(
            "fuse_bn",
            format!(
                "kernel has {} outputs, batch norm has {} channels",
                k.c_out(),
                p.channels()
            ),
        ));
    }
    let mut out = k.clone();
    let per_out = k.c_in() * k.k_h() * k.k_w();
    for o in 0..k.c_out() {
        let scale = p.gamma[o] / p.sigma[o];
        for w in &mut out.weight_mut()[o * per_out..(o + 1) * per_out] {
            *w = *w * scale;
        }
        out.bias_mut()[o] = (k.bias()[o] - p.mu[o]) * scale + p.beta[o];
    }
    Ok(out)
}

/// Merges a 1x1 conv followed by a second conv into a single conv with the
/// second kernel's extent.
///
/// `merged[o][i][u][v] = sum_m second[o][m][u][v] * first[m][i]` and
/// `b'[o] = b2[o] + sum_{m,u,v} second[o][m][u][v] * b1[m]`.
pub fn fuse_sequential<T: Real>(
    first: &ConvKernel<T>,
    second: &ConvKernel<T>,
) -> Result<ConvKernel<T>> {
    if first.k_h() != 1 || first.k_w() != 1 {
        return Err(invalid(
            "fuse_sequential",
            format!(
                "leading kernel must be 1x1, got {}x{}",
                first.k_h(),
                first.k_w()
            ),
        ));
    }
    if first.c_out() != second.c_in() {
        return Err(shape_mismatch(
            "fuse_sequential",
            format!(
                "{} intermediate channels vs {}",
                first.c_out(),
                second.c_in()
            ),
        ));
    }
    let (c_out, c_in, mid) = (second.c_out(), first.c_in(), first.c_out());
    let (kh, kw) = (second.k_h(), second.k_w());
    let mut merged = ConvKernel::zeros(c_out, c_in, kh, kw);
    for o in 0..c_out {
        let mut b = second.bias()[o];
        for m in 0..mid {
            for u in 0..kh {
                for v in 0..kw {
                    let w2 = second.at(o, m, u, v);
                    b = b + w2 * first.bias()[m];
                    for i in 0..c_in {
                        let acc = merged.at(o, i, u, v) + w2 * first.at(m, i, 0, 0);
                        *merged.at_mut(o, i, u, v) = acc;
                    }
                }
            }
        }
        merged.bias_mut()[o] = b;
    }
    Ok(merged)
}

/// Average pooling over `k x k` windows written as a convolution: each
/// channel's own plane is filled with `1 / k^2`, cross-channel taps are zero.
pub fn avgpool_to_kernel<T: Real>(c: usize, k: usize) -> Result<ConvKernel<T>> {
    if k != 1 && k != 3 {
        return Err(invalid(
            "avgpool_to_kernel",
            format!("pool size {k} not in {{1, 3}}"),
        ));
    }
    let mut out = ConvKernel::zeros(c, c, k, k);
    let tap = T::one() / lit((k * k) as f64);
    for ch in 0..c {
        for u in 0..k {
            for v in 0..k {
                *out.at_mut(ch, ch, u, v) = tap;
            }
        }
    }
    Ok(out)
}

/// Embeds a 1x1, 1x3 or 3x1 kernel in a 3x3 one, centred.
pub fn pad_to_3x3<T: Real>(k: &ConvKernel<T>) -> ConvKernel<T> {
    if k.k_h() == 3 && k.k_w() == 3 {
        return k.clone();
    }
    let (du, dv) = ((3 - k.k_h()) / 2, (3 - k.k_w()) / 2);
    let mut out = ConvKernel::zeros(k.c_out(), k.c_in(), 3, 3);
    for o in 0..k.c_out() {
        for i in 0..k.c_in() {
            for u in 0..k.k_h() {
                for v in 0..k.k_w() {
                    *out.at_mut(o, i, u + du, v + dv) = k.at(o, i, u, v);
                }
            }
        }
    }
    out.bias_mut().copy_from_slice(k.bias());
    out
}

/// Sums parallel kernels of identical geometry.
pub fn fuse_parallel<T: Real>(ks: &[ConvKernel<T>]) -> Result<ConvKernel<T>> {
    let first = ks
        .first()
        .ok_or_else(|| invalid("fuse_parallel", "no kernels to merge"))?;
    let mut out = first.clone();
    for k in &ks[1..] {
        if (k.c_out(), k.c_in(), k.k_h(), k.k_w())
            != (first.c_out(), first.c_in(), first.k_h(), first.k_w())
        {
            return Err(shape_mismatch(
                "fuse_parallel",
                format!(
                    "[{}][{}][{}][{}] vs [{}][{}][{}][{}]",
                    k.c_out(),
                    k.c_in(),
                    k.k_h(),
                    k.k_w(),
                    first.c_out(),
                    first.c_in(),
                    first.k_h(),
                    first.k_w()
                ),
            ));
        }
        for (a, &b) in out.weight_mut().iter_mut().zip(k.weight()) {
            *a = *a + b;
        }
        for (a, &b) in out.bias_mut().iter_mut().zip(k.bias()) {
            *a = *a + b;
        }
    }
    Ok(out)
}

/// Adds the identity shortcut to a square 3x3 kernel: `conv(x, k') = conv(x, k) + x`.
pub fn fold_residual<T: Real>(k: &ConvKernel<T>) -> Result<ConvKernel<T>> {
    if k.c_out() != k.c_in() || k.k_h() != 3 || k.k_w() != 3 {
        return Err(invalid(
            "fold_residual",
            format!(
                "need a square 3x3 kernel, got [{}][{}][{}][{}]",
                k.c_out(),
                k.c_in(),
                k.k_h(),
                k.k_w()
            ),
        ));
    }
    fuse_parallel(&[k.clone(), ConvKernel::dirac(k.c_out())])
}

/// Reduces one branch (layers, then batch norm) to a single 3x3 kernel.
pub fn collapse_branch<T: Real>(b: &Branch<T>) -> Result<ConvKernel<T>> {
    b.validate()?;
    let mut layers = b.layers.iter();
    let mut acc = match layers.next() {
        Some(Layer::Conv { kernel, .. }) => kernel.clone(),
        _ => unreachable!("validated branches start with a conv"),
    };
    for layer in layers {
        let next = match layer {
            Layer::Conv { kernel, .. } => kernel.clone(),
            Layer::AvgPool { k } => avgpool_to_kernel(acc.c_out(), *k)?,
        };
        acc = fuse_sequential(&acc, &next)?;
    }
    Ok(pad_to_3x3(&fuse_bn(&acc, &b.bn)?))
}

/// Collapses every branch plus the residual shortcut into one 3x3 kernel.
pub fn collapse_kernel<T: Real>(m: &BranchModel<T>) -> Result<ConvKernel<T>> {
    if m.branches.is_empty() {
        return Err(Error::Topology("model has no branches".into()));
    }
    let kernels = m
        .branches
        .iter()
        .map(collapse_branch)
        .collect::<Result<Vec<_>>>()?;
    fold_residual(&fuse_parallel(&kernels)?)
}

/// Builds the deployable model: one 3x3 conv plus the curve coefficients.
pub fn collapse<T: Real>(
    m: &BranchModel<T>,
    curve: CurveParams<T>,
    pool_k: usize,
) -> Result<FusedModel<T>> {
    FusedModel::new(collapse_kernel(m)?, curve, pool_k)
}
