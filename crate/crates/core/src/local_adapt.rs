//! Local adaptation: a per-pixel gain derived from how bright each pixel is
//! relative to the image median, shaped by a shared quadratic curve.
//!
//! The condition map depends only on the input image. The only learnable
//! part is the three curve coefficients.

use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Result};
use crate::glle::{
    check_image, estimate_illumination, retinex_divide, FusedModel, IlluminationModel,
};
use crate::tensor::{lit, max_pool_same, Real, Shape, Tensor};

/// BT.601 luma weights (full range).
pub const LUMA_R: f64 = 0.299;
pub const LUMA_B: f64 = 0.114;

/// `C(x) = alpha * x^2 + beta * x + gamma`, shared by every pixel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveParams<T = f32> {
    pub alpha: T,
    pub beta: T,
    pub gamma: T,
}

impl<T: Real> CurveParams<T> {
    pub const LEN: usize = 3;

    pub fn new(alpha: T, beta: T, gamma: T) -> Self {
        Self { alpha, beta, gamma }
    }

    /// Training start point: `C(0) = 1.5`, `C(0.5) = 1`, `C(1) = 0.8`.
    pub fn init() -> Self {
        Self::new(lit(0.6), lit(-1.3), lit(1.5))
    }

    /// `C == 1` everywhere.
    pub fn identity() -> Self {
        Self::new(T::zero(), T::zero(), T::one())
    }

    #[inline]
    pub fn eval(&self, x: T) -> T {
        self.alpha * x * x + self.beta * x + self.gamma
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.is_finite() && self.beta.is_finite() && self.gamma.is_finite()
    }

    pub fn to_array(&self) -> [T; 3] {
        [self.alpha, self.beta, self.gamma]
    }

    pub fn from_array(a: [T; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn cast<U: Real>(&self) -> CurveParams<U> {
        let c = |v: T| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan());
        CurveParams::new(c(self.alpha), c(self.beta), c(self.gamma))
    }
}

/// Luma of an RGB batch, one channel out.
///
/// Written as `G + 0.299 (R - G) + 0.114 (B - G)`, which equals
/// `0.299 R + 0.587 G + 0.114 B` but is exact for every gray pixel.
pub fn rgb_to_y<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.c != 3 {
        return Err(shape_mismatch(
            "rgb_to_y",
            format!("expected 3 channels, got {}", s.c),
        ));
    }
    let (wr, wb) = (lit::<T>(LUMA_R), lit::<T>(LUMA_B));
    let mut out = Tensor::zeros(Shape::new(s.n, 1, s.h, s.w));
    for n in 0..s.n {
        let (r, g, b) = (x.plane(n, 0), x.plane(n, 1), x.plane(n, 2));
        for (i, y) in out.plane_mut(n, 0).iter_mut().enumerate() {
            *y = g[i] + wr * (r[i] - g[i]) + wb * (b[i] - g[i]);
        }
    }
    Ok(out)
}

/// Lower median (element `(len - 1) / 2` in sorted order).
pub fn lower_median<T: Real>(values: &[T]) -> T {
    let mut v = values.to_vec();
    let mid = (v.len() - 1) / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).expect("finite values"));
    *m
}

fn expect_single_channel<T: Real>(m: &Tensor<T>, op: &'static str) -> Result<()> {
    if m.shape().c != 1 {
        return Err(shape_mismatch(
            op,
            format!("expected 1 channel, got {}", m.shape().c),
        ));
    }
    Ok(())
}

/// Deviation of each pixel's luma from the image's median luma.
pub fn condition_map<T: Real>(y: &Tensor<T>) -> Result<Tensor<T>> {
    expect_single_channel(y, "condition_map")?;
    let mut out = y.clone();
    for n in 0..y.shape().n {
        let med = lower_median(y.plane(n, 0));
        for v in out.plane_mut(n, 0) {
            *v = *v - med;
        }
    }
    Ok(out)
}

/// Min-max normalisation per image. A flat map becomes 0.5, where the
/// initial curve is neutral.
pub fn normalize_map<T: Real>(m: &Tensor<T>) -> Result<Tensor<T>> {
    expect_single_channel(m, "normalize_map")?;
    let mut out = m.clone();
    for n in 0..m.shape().n {
        let p = out.plane_mut(n, 0);
        let lo = p.iter().copied().fold(T::infinity(), T::min);
        let hi = p.iter().copied().fold(T::neg_infinity(), T::max);
        if hi > lo {
            let span = hi - lo;
            for v in p.iter_mut() {
                *v = (*v - lo) / span;
            }
        } else {
            p.fill(lit(0.5));
        }
    }
    Ok(out)
}

/// Same-size max pooling of the normalised map.
pub fn smooth_map<T: Real>(m: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    expect_single_channel(m, "smooth_map")?;
    max_pool_same(m, k)
}

/// Full condition pathway: luma, median deviation, normalisation, max pool.
pub fn condition_pathway<T: Real>(x: &Tensor<T>, pool_k: usize) -> Result<Tensor<T>> {
    smooth_map(&normalize_map(&condition_map(&rgb_to_y(x)?)?)?, pool_k)
}

/// Per-pixel gain map. Not clamped.
pub fn curve_apply<T: Real>(m: &Tensor<T>, p: &CurveParams<T>) -> Tensor<T> {
    m.map(|x| p.eval(x))
}

/// `clamp(C * coarse, 0, 1)` with `C` broadcast over the colour channels.
pub fn fuse_output<T: Real>(coarse: &Tensor<T>, gain: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(coarse
        .mul_broadcast_channels(gain)?
        .clamp(T::zero(), T::one()))
}

/// Every intermediate of one enhancement pass.
#[derive(Clone, Debug)]
pub struct EnhanceTrace<T> {
    pub illumination: Tensor<T>,
    pub coarse: Tensor<T>,
    pub condition: Tensor<T>,
    pub gain: Tensor<T>,
    pub output: Tensor<T>,
}

/// Runs the complete pipeline with any illumination estimator.
pub fn enhance_traced<T: Real, M: IlluminationModel<T> + ?Sized>(
    x: &Tensor<T>,
    model: &M,
    curve: &CurveParams<T>,
    pool_k: usize,
) -> Result<EnhanceTrace<T>> {
    check_image(x)?;
    let illumination = estimate_illumination(x, model)?;
    let coarse = retinex_divide(x, &illumination)?;
    let condition = condition_pathway(x, pool_k)?;
    let gain = curve_apply(&condition, curve);
    let output = fuse_output(&coarse, &gain)?;
    Ok(EnhanceTrace {
        illumination,
        coarse,
        condition,
        gain,
        output,
    })
}

/// Enhances an `N x 3 x H x W` batch in [0, 1] with a deployed model.
pub fn enhance<T: Real>(x: &Tensor<T>, m: &FusedModel<T>) -> Result<Tensor<T>> {
    Ok(enhance_traced(x, m, &m.curve, m.pool_k)?.output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glle::build_topology;
    use crate::glle::Topology;
    use crate::reparam::collapse;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(vals: &[f64], h: usize, w: usize) -> Tensor<f64> {
        Tensor::new(Shape::new(1, 1, h, w), vals.to_vec()).unwrap()
    }

    #[test]
    fn luma_examples() {
        let px = |r: f32, g: f32, b: f32| {
            let t = Tensor::new(Shape::new(1, 3, 1, 1), vec![r, g, b]).unwrap();
            rgb_to_y(&t).unwrap().data()[0]
        };
        assert_eq!(px(1.0, 1.0, 1.0), 1.0);
        assert_eq!(px(0.0, 0.0, 0.0), 0.0);
        assert_eq!(px(1.0, 0.0, 0.0), 0.299);
        assert!((px(0.0, 1.0, 0.0) - 0.587).abs() < 1e-7);
        assert!((px(0.2, 0.5, 0.9) - (0.299 * 0.2 + 0.587 * 0.5 + 0.114 * 0.9)).abs() < 1e-7);
    }

    #[test]
    fn condition_map_examples() {
        let c = condition_map(&map(&[0.3; 6], 2, 3)).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));

        let c = condition_map(&map(&[0.0, 0.5, 1.0, 1.0], 2, 2)).unwrap();
        assert_eq!(c.data(), &[-0.5, 0.0, 0.5, 0.5]);

        let y = map(&[0.1, 0.7, 0.3, 0.2, 0.9, 0.4], 2, 3);
        let a = condition_map(&y).unwrap();
        let b = condition_map(&y.add_scalar(0.25)).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-15);
    }

    #[test]
    fn normalize_examples() {
        let n = normalize_map(&map(&[-0.5, 0.0, 0.5], 1, 3)).unwrap();
        assert_eq!(n.data(), &[0.0, 0.5, 1.0]);
        let n = normalize_map(&map(&[0.2; 4], 2, 2)).unwrap();
        assert!(n.data().iter().all(|&v| v == 0.5));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = Tensor::from_fn(Shape::new(3, 1, 7, 5), |_, _, _, _| {
            rng.gen_range(-3.0..3.0)
        });
        let n = normalize_map(&r).unwrap();
        for i in 0..3 {
            let p = n.plane(i, 0);
            assert_eq!(p.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
            assert_eq!(p.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
        }
    }

    #[test]
    fn curve_examples() {
        let p = CurveParams::<f64>::init();
        assert_eq!(p.eval(0.0), 1.5);
        assert_eq!(p.eval(0.5), 1.0);
        assert!((p.eval(1.0) - 0.8).abs() <= f64::EPSILON);
        let id = CurveParams::<f64>::identity();
        assert!(curve_apply(&map(&[0.0, 0.3, 1.0], 1, 3), &id)
            .data()
            .iter()
            .all(|&v| v == 1.0));
        let sq = CurveParams::new(1.0, 0.0, 0.0);
        assert_eq!(sq.eval(0.25f64), 0.0625);
    }

    #[test]
    fn fuse_output_examples() {
        let coarse = Tensor::<f64>::full(Shape::new(1, 3, 2, 2), 0.6);
        let one = Tensor::full(Shape::new(1, 1, 2, 2), 1.0);
        assert_eq!(fuse_output(&coarse, &one).unwrap(), coarse);
        let two = Tensor::full(Shape::new(1, 1, 2, 2), 2.0);
        assert!(fuse_output(&coarse, &two)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
    }

    #[test]
    fn init_curve_lifts_dark_half_and_dims_bright_half() {
        let x = Tensor::<f64>::from_fn(
            Shape::new(1, 3, 16, 16),
            |_, _, _, xx| if xx < 8 { 0.1 } else { 0.4 },
        );
        let m = collapse(
            &build_topology(Topology::DiverseBranch, 3),
            CurveParams::init(),
            3,
        )
        .unwrap();
        let t = enhance_traced(&x, &m, &m.curve, m.pool_k).unwrap();
        for y in 0..16 {
            // The pool widens the bright half by one pixel; stay clear of it.
            assert!(t.gain.at(0, 0, y, 2) > 1.0);
            assert!(t.gain.at(0, 0, y, 12) < 1.0);
        }
    }

    #[test]
    fn identity_curve_leaves_coarse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x =
            Tensor::<f32>::from_fn(Shape::new(1, 3, 9, 9), |_, _, _, _| rng.gen_range(0.0..1.0));
        let mut m = collapse(
            &build_topology(Topology::AsymmetricBlock, 4),
            CurveParams::identity(),
            7,
        )
        .unwrap();
        let t = enhance_traced(&x, &m, &m.curve, m.pool_k).unwrap();
        assert_eq!(t.output, t.coarse);
        assert!(t
            .coarse
            .data()
            .iter()
            .zip(x.data())
            .all(|(c, x)| *c >= *x - 1e-6));
        m.curve = CurveParams::init();
        assert_eq!(enhance(&x, &m).unwrap(), enhance(&x, &m).unwrap());
    }

    #[test]
    fn condition_ignores_model_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x =
            Tensor::<f32>::from_fn(Shape::new(1, 3, 8, 8), |_, _, _, _| rng.gen_range(0.0..1.0));
        let a = collapse(
            &build_topology(Topology::DiverseBranch, 5),
            CurveParams::init(),
            7,
        )
        .unwrap();
        let b = collapse(
            &build_topology(Topology::DiverseBranch, 6),
            CurveParams::new(0.1, 0.2, 0.3),
            7,
        )
        .unwrap();
        let ta = enhance_traced(&x, &a, &a.curve, 7).unwrap();
        let tb = enhance_traced(&x, &b, &b.curve, 7).unwrap();
        assert_eq!(ta.condition, tb.condition);
    }
}
