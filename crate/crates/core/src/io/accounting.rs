use crate::glle::FusedModel;
use crate::tensor::{ConvKernel, Real};

/// Learnable scalars of a deployed model.
pub fn count_params<T: Real>(m: &FusedModel<T>) -> usize {
    m.param_count()
}

/// Multiply-accumulates of a same-size convolution over an `h x w` image.
pub fn count_macs<T: Real>(k: &ConvKernel<T>, h: usize, w: usize) -> u64 {
    (h * w) as u64 * (k.c_out() * k.c_in() * k.k_h() * k.k_w()) as u64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FlopConvention {
    /// One FLOP per multiply-accumulate.
    #[default]
    Mac,
    /// A multiply and an add per multiply-accumulate.
    TwoPerMac,
}

/// GFLOPs of the fused convolution; curve and pointwise work is excluded.
pub fn count_flops<T: Real>(m: &FusedModel<T>, h: usize, w: usize, conv: FlopConvention) -> f64 {
    let per = match conv {
        FlopConvention::Mac => 1,
        FlopConvention::TwoPerMac => 2,
    };
    (count_macs(&m.kernel, h, w) * per) as f64 / 1e9
}

/// Elementwise operations per pixel outside the convolution: sigmoid,
/// floored division and clamp per colour channel, luma, median offset,
/// normalisation, a separable max pool, the curve, the product and the
/// final clamp. A rough count, reported next to the convolution.
pub fn pointwise_ops_per_pixel(pool_k: usize) -> u64 {
    let per_channel = 4 + 2 + 2 + 1 + 2; // sigmoid, divide + floor, clamp, product, clamp
    let luma = 5;
    let condition = 1 + 2 + 2 * (pool_k as u64).saturating_sub(1);
    let curve = 5;
    3 * per_channel + luma + condition + curve
}

/// Two significant figures, e.g. `0.168 -> "0.17"`.
pub fn format_gflops(g: f64) -> String {
    if g == 0.0 || !g.is_finite() {
        return format!("{g}");
    }
    let digits = (1 - g.abs().log10().floor() as i32).max(0) as usize;
    format!("{:.*}", digits, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::local_adapt::CurveParams;

    fn fused() -> FusedModel<f32> {
        FusedModel::new(ConvKernel::dirac(3), CurveParams::init(), 7).unwrap()
    }

    #[test]
    fn macs() {
        let m = fused();
        assert_eq!(count_params(&m), 87);
        assert_eq!(count_macs(&m.kernel, 1, 1), 81);
        assert_eq!(count_macs(&m.kernel, 1080, 1920), 1080 * 1920 * 81);
        assert_eq!(
            count_flops(&m, 1080, 1920, FlopConvention::TwoPerMac),
            2.0 * 0.1679616
        );
    }

    #[test]
    fn two_significant_figures() {
        assert_eq!(format_gflops(0.1679616), "0.17");
        assert_eq!(format_gflops(0.3359232), "0.34");
        assert_eq!(format_gflops(1.234), "1.2");
        assert_eq!(format_gflops(0.0012345), "0.0012");
        assert_eq!(format_gflops(0.0), "0");
    }

    #[test]
    fn pointwise_grows_with_pool() {
        assert!(pointwise_ops_per_pixel(7) > pointwise_ops_per_pixel(3));
    }
}
