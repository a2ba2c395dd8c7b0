//! Global low-light enhancement: illumination estimation and Retinex division.
//!
//! At training time the estimator is a set of parallel branches (each a short
//! conv chain followed by batch norm) plus an identity shortcut, squashed by a
//! sigmoid. At inference the whole thing is one 3x3 conv, produced by
//! [`crate::reparam::collapse`].

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape_mismatch, Error, Result};
use crate::local_adapt::CurveParams;
use crate::tensor::{avg_pool, batch_norm, conv2d, lit, BNParams, ConvKernel, Real, Tensor};

/// Colour channels in and out of the estimator.
pub const CHANNELS: usize = 3;

/// Floor applied to the illumination before dividing.
pub const ILLUM_FLOOR: f64 = 1e-4;

/// Default max-pool window for the condition map.
pub const DEFAULT_POOL_K: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Topology {
    /// 3x3 conv + BN.
    Plain,
    /// 3x3; 1x1; 1x1 -> 3x3; 1x1 -> avg pool. Each branch ends in BN.
    DiverseBranch,
    /// 3x3; 1x3; 3x1.
    AsymmetricBlock,
    /// Three 3x3 branches.
    TripleDuplicate,
}

impl Topology {
    pub const ALL: [Topology; 4] = [
        Topology::Plain,
        Topology::DiverseBranch,
        Topology::AsymmetricBlock,
        Topology::TripleDuplicate,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Topology::Plain => "plain",
            Topology::DiverseBranch => "db",
            Topology::AsymmetricBlock => "ab",
            Topology::TripleDuplicate => "td",
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.tag())
    }
}

impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "plain" => Ok(Topology::Plain),
            "db" | "diverse-branch" | "diverse_branch" => Ok(Topology::DiverseBranch),
            "ab" | "asymmetric-block" | "asymmetric_block" => Ok(Topology::AsymmetricBlock),
            "td" | "triple-duplicate" | "triple_duplicate" => Ok(Topology::TripleDuplicate),
            other => Err(invalid(
                "Topology::from_str",
                format!("unknown topology '{other}'"),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TopologyConfig {
    /// Window of the average-pool branch (stride 1). Must be 1 or 3.
    pub avg_pool_k: usize,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        Self { avg_pool_k: 3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T = f32> {
    Conv {
        kernel: ConvKernel<T>,
        padding: [usize; 2],
    },
    /// Stride 1, no padding; the preceding 1x1 conv carries the padding.
    AvgPool { k: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch<T = f32> {
    pub layers: Vec<Layer<T>>,
    pub bn: BNParams<T>,
}

impl<T: Real> Branch<T> {
    fn single(kernel: ConvKernel<T>) -> Self {
        let padding = kernel.same_padding();
        let c = kernel.c_out();
        Self {
            layers: vec![Layer::Conv { kernel, padding }],
            bn: BNParams::fresh(c),
        }
    }

    /// 1x1 conv padded for the following `k x k` stage, then that stage unpadded.
    fn sequential(first: ConvKernel<T>, then: Layer<T>) -> Self {
        let c = match &then {
            Layer::Conv { kernel, .. } => kernel.c_out(),
            Layer::AvgPool { .. } => first.c_out(),
        };
        let r = match &then {
            Layer::Conv { kernel, .. } => [kernel.k_h() / 2, kernel.k_w() / 2],
            Layer::AvgPool { k } => [k / 2, k / 2],
        };
        Self {
            layers: vec![
                Layer::Conv {
                    kernel: first,
                    padding: r,
                },
                then,
            ],
            bn: BNParams::fresh(c),
        }
    }

    /// Checks that the branch maps `H x W` to `H x W` and has a shape the
    /// fusion algebra can collapse exactly.
    pub fn validate(&self) -> Result<()> {
        let bad = |why: String| Err(Error::Topology(why));
        match self.layers.as_slice() {
            [Layer::Conv { kernel, padding }] => {
                if *padding != kernel.same_padding() {
                    return bad(format!(
                        "single conv needs padding {:?}, has {padding:?}",
                        kernel.same_padding()
                    ));
                }
            }
            [Layer::Conv {
                kernel: first,
                padding,
            }, second] => {
                if first.k_h() != 1 || first.k_w() != 1 {
                    return bad("leading conv of a sequential branch must be 1x1".into());
                }
                let (need, c_in) = match second {
                    Layer::Conv {
                        kernel,
                        padding: p2,
                    } => {
                        if *p2 != [0, 0] {
                            return bad(
                                "trailing conv of a sequential branch must be unpadded".into()
                            );
                        }
                        ([kernel.k_h() / 2, kernel.k_w() / 2], kernel.c_in())
                    }
                    Layer::AvgPool { k } => {
                        if *k != 1 && *k != 3 {
                            return bad(format!("average pool size {k} not in {{1, 3}}"));
                        }
                        ([k / 2, k / 2], first.c_out())
                    }
                };
                if *padding != need {
                    return bad(format!(
                        "leading 1x1 conv needs padding {need:?}, has {padding:?}"
                    ));
                }
                if c_in != first.c_out() {
                    return bad("channel count changes between stages".into());
                }
            }
            _ => {
                return bad(format!(
                    "unsupported branch with {} layers",
                    self.layers.len()
                ))
            }
        }
        if self.out_channels() != self.bn.channels() {
            return bad("batch norm width differs from branch output".into());
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        match &self.layers[0] {
            Layer::Conv { kernel, .. } => kernel.c_in(),
            Layer::AvgPool { .. } => self.bn.channels(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Conv { kernel, .. } => Some(kernel.c_out()),
                Layer::AvgPool { .. } => None,
            })
            .unwrap_or(0)
    }

    /// Output before batch norm.
    pub fn forward_pre_bn(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Conv { kernel, padding } => conv2d(&h, kernel, 1, *padding)?,
                Layer::AvgPool { k } => avg_pool(&h, *k, 1, 0)?,
            };
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        batch_norm(&self.forward_pre_bn(x)?, &self.bn)
    }

    /// Weights, biases and all four batch-norm arrays.
    pub fn scalar_count(&self) -> usize {
        let conv: usize = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv { kernel, .. } => kernel.scalar_count(),
                Layer::AvgPool { .. } => 0,
            })
            .sum();
        conv + 4 * self.bn.channels()
    }

    pub fn cast<U: Real>(&self) -> Branch<U> {
        Branch {
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Conv { kernel, padding } => Layer::Conv {
                        kernel: kernel.cast(),
                        padding: *padding,
                    },
                    Layer::AvgPool { k } => Layer::AvgPool { k: *k },
                })
                .collect(),
            bn: self.bn.cast(),
        }
    }
}

/// Training-time estimator. The identity shortcut is always present and is
/// not stored as a branch.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchModel<T = f32> {
    pub topology: Topology,
    pub branches: Vec<Branch<T>>,
}

impl<T: Real> BranchModel<T> {
    pub fn validate(&self) -> Result<()> {
        if self.branches.is_empty() {
            return Err(Error::Topology("model has no branches".into()));
        }
        for b in &self.branches {
            b.validate()?;
            if b.in_channels() != CHANNELS || b.out_channels() != CHANNELS {
                return Err(Error::Topology(format!(
                    "branches must map {CHANNELS} -> {CHANNELS} channels"
                )));
            }
        }
        Ok(())
    }

    /// Scalars held by the multi-branch model, batch-norm statistics included.
    pub fn scalar_count(&self) -> usize {
        self.branches.iter().map(Branch::scalar_count).sum()
    }

    /// Re-expresses a fused model as a single-branch model whose collapse
    /// reproduces it: conv weights minus the shortcut, pass-through batch norm.
    pub fn from_fused(m: &FusedModel<T>) -> Result<Self> {
        let mut kernel = m.kernel.clone();
        for (w, d) in kernel
            .weight_mut()
            .iter_mut()
            .zip(ConvKernel::<T>::dirac(CHANNELS).weight())
        {
            *w = *w - *d;
        }
        Ok(Self {
            topology: Topology::Plain,
            branches: vec![Branch {
                layers: vec![Layer::Conv {
                    kernel,
                    padding: [1, 1],
                }],
                bn: BNParams::identity(CHANNELS),
            }],
        })
    }

    pub fn cast<U: Real>(&self) -> BranchModel<U> {
        BranchModel {
            topology: self.topology,
            branches: self.branches.iter().map(Branch::cast).collect(),
        }
    }
}

/// Deployable model: a single 3x3 conv (residual folded in) and the curve.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedModel<T = f32> {
    pub kernel: ConvKernel<T>,
    pub curve: CurveParams<T>,
    /// Max-pool window of the condition map. A hyperparameter, not learned.
    pub pool_k: usize,
}

impl<T: Real> FusedModel<T> {
    pub fn new(kernel: ConvKernel<T>, curve: CurveParams<T>, pool_k: usize) -> Result<Self> {
        if (kernel.c_out(), kernel.c_in(), kernel.k_h(), kernel.k_w()) != (CHANNELS, CHANNELS, 3, 3)
        {
            return Err(shape_mismatch(
                "FusedModel::new",
                "kernel must be 3 -> 3 channels, 3x3",
            ));
        }
        if pool_k % 2 == 0 {
            return Err(invalid(
                "FusedModel::new",
                format!("pool size {pool_k} must be odd"),
            ));
        }
        if !curve.is_finite() {
            return Err(invalid(
                "FusedModel::new",
                "curve coefficients must be finite",
            ));
        }
        Ok(Self {
            kernel,
            curve,
            pool_k,
        })
    }

    /// Learnable scalars: 81 weights, 3 biases, 3 curve coefficients.
    pub fn param_count(&self) -> usize {
        self.kernel.scalar_count() + CurveParams::<T>::LEN
    }

    pub fn cast<U: Real>(&self) -> FusedModel<U> {
        FusedModel {
            kernel: self.kernel.cast(),
            curve: self.curve.cast(),
            pool_k: self.pool_k,
        }
    }
}

/// Anything that produces pre-sigmoid illumination logits from an image.
pub trait IlluminationModel<T: Real> {
    fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Real> IlluminationModel<T> for BranchModel<T> {
    /// Sum of branch outputs plus the input.
    fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut acc = x.clone();
        for b in &self.branches {
            acc.add_assign(&b.forward(x)?)?;
        }
        Ok(acc)
    }
}

impl<T: Real> IlluminationModel<T> for FusedModel<T> {
    fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.kernel, 1, [1, 1])
    }
}

/// Rejects anything but an N x 3 x H x W image with values in [0, 1].
pub fn check_image<T: Real>(x: &Tensor<T>) -> Result<()> {
    if x.shape().c != CHANNELS {
        return Err(shape_mismatch(
            "check_image",
            format!("expected {CHANNELS} channels, got {}", x.shape().c),
        ));
    }
    if let Some((index, v)) = x
        .data()
        .iter()
        .enumerate()
        .find(|(_, v)| !(**v >= T::zero() && **v <= T::one()))
    {
        return Err(Error::InputOutOfRange {
            index,
            value: v.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(())
}

/// Per-pixel, per-channel illumination in (0, 1).
pub fn estimate_illumination<T: Real, M: IlluminationModel<T> + ?Sized>(
    x: &Tensor<T>,
    m: &M,
) -> Result<Tensor<T>> {
    check_image(x)?;
    Ok(m.logits(x)?.sigmoid())
}

/// `clamp(x / max(illum, 1e-4), 0, 1)`.
pub fn retinex_divide<T: Real>(x: &Tensor<T>, illum: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(x.div_floored(illum, lit(ILLUM_FLOOR))?
        .clamp(T::zero(), T::one()))
}

/// Builds a freshly initialised estimator with the default pool size.
pub fn build_topology<T: Real>(t: Topology, seed: u64) -> BranchModel<T> {
    build_topology_with(t, seed, TopologyConfig::default()).expect("default config is valid")
}

/// Weights and biases are drawn uniformly from `+-1/sqrt(fan_in)`; batch
/// norm starts at `gamma = 1`, `beta = 0`, zero mean and unit variance.
pub fn build_topology_with<T: Real>(
    t: Topology,
    seed: u64,
    cfg: TopologyConfig,
) -> Result<BranchModel<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut conv = |kh: usize, kw: usize| -> ConvKernel<T> {
        let fan_in = CHANNELS * kh * kw;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..CHANNELS * fan_in)
            .map(|_| lit(rng.gen_range(-bound..bound)))
            .collect();
        let b = (0..CHANNELS)
            .map(|_| lit(rng.gen_range(-bound..bound)))
            .collect();
        ConvKernel::new(CHANNELS, CHANNELS, kh, kw, w, b).expect("generated kernel is well formed")
    };
    let branches = match t {
        Topology::Plain => vec![Branch::single(conv(3, 3))],
        Topology::DiverseBranch => {
            let b3 = Branch::single(conv(3, 3));
            let b1 = Branch::single(conv(1, 1));
            let seq_first = conv(1, 1);
            let seq_second = conv(3, 3);
            let b13 = Branch::sequential(
                seq_first,
                Layer::Conv {
                    kernel: seq_second,
                    padding: [0, 0],
                },
            );
            let b1p = Branch::sequential(conv(1, 1), Layer::AvgPool { k: cfg.avg_pool_k });
            vec![b3, b1, b13, b1p]
        }
        Topology::AsymmetricBlock => vec![
            Branch::single(conv(3, 3)),
            Branch::single(conv(1, 3)),
            Branch::single(conv(3, 1)),
        ],
        Topology::TripleDuplicate => (0..3).map(|_| Branch::single(conv(3, 3))).collect(),
    };
    let m = BranchModel {
        topology: t,
        branches,
    };
    m.validate()?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reparam::{collapse, collapse_branch, fold_residual, fuse_parallel};
    use crate::tensor::Shape;

    fn image(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn topology_tags_round_trip() {
        for t in Topology::ALL {
            assert_eq!(t.tag().parse::<Topology>().unwrap(), t);
        }
        assert!("resnet".parse::<Topology>().is_err());
    }

    #[test]
    fn diverse_branch_shape_and_count() {
        let m = build_topology::<f32>(Topology::DiverseBranch, 1);
        assert_eq!(m.branches.len(), 4);
        // 3x3 (81+3) + 1x1 (9+3) + [1x1 (9+3) + 3x3 (81+3)] + [1x1 (9+3)] + 4 BN x 12
        assert_eq!(m.scalar_count(), 84 + 12 + (12 + 84) + 12 + 4 * 12);
        assert_eq!(m.scalar_count(), 252);
        assert!(matches!(m.branches[3].layers[1], Layer::AvgPool { k: 3 }));
        assert_eq!(
            build_topology::<f32>(Topology::AsymmetricBlock, 1).scalar_count(),
            96 + 42 + 42
        );
        assert_eq!(
            build_topology::<f32>(Topology::TripleDuplicate, 1).scalar_count(),
            3 * 96
        );
        assert_eq!(build_topology::<f32>(Topology::Plain, 1).scalar_count(), 96);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_topology::<f32>(Topology::DiverseBranch, 9);
        let b = build_topology::<f32>(Topology::DiverseBranch, 9);
        let c = build_topology::<f32>(Topology::DiverseBranch, 10);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn triple_duplicate_collapses_to_sum() {
        let m = build_topology::<f64>(Topology::TripleDuplicate, 2);
        let ks: Vec<_> = m
            .branches
            .iter()
            .map(|b| collapse_branch(b).unwrap())
            .collect();
        let want = fold_residual(&fuse_parallel(&ks).unwrap()).unwrap();
        assert_eq!(crate::reparam::collapse_kernel(&m).unwrap(), want);
    }

    #[test]
    fn zero_model_gives_half_illumination() {
        let m =
            FusedModel::new(ConvKernel::<f64>::zeros(3, 3, 3, 3), CurveParams::init(), 7).unwrap();
        let x = Tensor::zeros(Shape::new(1, 3, 4, 4));
        let il = estimate_illumination(&x, &m).unwrap();
        assert!(il.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn fused_matches_branches() {
        for t in Topology::ALL {
            let m = build_topology::<f64>(t, 3);
            let f = collapse(&m, CurveParams::init(), 7).unwrap();
            let x = image(Shape::new(2, 3, 12, 10), 4);
            let a = estimate_illumination(&x, &m).unwrap();
            let b = estimate_illumination(&x, &f).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-12, "{t}");
        }
    }

    #[test]
    fn brighter_input_brighter_illumination() {
        let mut k = ConvKernel::<f64>::zeros(3, 3, 3, 3);
        for c in 0..3 {
            *k.at_mut(c, c, 1, 1) = 1.0;
        }
        let m = FusedModel::new(fold_residual(&k).unwrap(), CurveParams::init(), 7).unwrap();
        let dim = estimate_illumination(&Tensor::full(Shape::new(1, 3, 5, 5), 0.2), &m).unwrap();
        let bright = estimate_illumination(&Tensor::full(Shape::new(1, 3, 5, 5), 0.6), &m).unwrap();
        assert!(dim.data().iter().zip(bright.data()).all(|(a, b)| b > a));
    }

    #[test]
    fn rejects_out_of_range_input() {
        let m = build_topology::<f64>(Topology::Plain, 5);
        let mut x = image(Shape::new(1, 3, 4, 4), 6);
        *x.at_mut(0, 1, 2, 2) = 1.5;
        assert!(matches!(
            estimate_illumination(&x, &m),
            Err(Error::InputOutOfRange { .. })
        ));
        let gray = Tensor::<f64>::zeros(Shape::new(1, 1, 4, 4));
        assert!(estimate_illumination(&gray, &m).is_err());
    }

    #[test]
    fn retinex_divide_examples() {
        let x = image(Shape::new(1, 3, 4, 4), 7);
        let ones = Tensor::full(x.shape(), 1.0);
        assert_eq!(retinex_divide(&x, &ones).unwrap(), x);

        let half = Tensor::full(x.shape(), 0.5);
        let low = x.scale(0.5);
        let out = retinex_divide(&low, &half).unwrap();
        assert!(out
            .data()
            .iter()
            .zip(low.data())
            .all(|(o, l)| *o == 2.0 * l));

        let bright = Tensor::full(x.shape(), 0.9);
        assert!(retinex_divide(&bright, &half)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));

        let dark = Tensor::zeros(x.shape());
        let out = retinex_divide(&x, &dark).unwrap();
        assert!(out.all_finite() && out.min() >= 0.0 && out.max() <= 1.0);
    }

    #[test]
    fn from_fused_round_trips() {
        let m = build_topology::<f64>(Topology::DiverseBranch, 8);
        let f = collapse(&m, CurveParams::init(), 7).unwrap();
        let again = collapse(&BranchModel::from_fused(&f).unwrap(), f.curve, f.pool_k).unwrap();
        let d = again
            .kernel
            .weight()
            .iter()
            .zip(f.kernel.weight())
            .chain(again.kernel.bias().iter().zip(f.kernel.bias()))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(d < 1e-7);
    }

    #[test]
    fn validate_rejects_misaligned_padding() {
        let mut m = build_topology::<f32>(Topology::DiverseBranch, 1);
        if let Layer::Conv { padding, .. } = &mut m.branches[2].layers[0] {
            *padding = [0, 0];
        }
        assert!(matches!(m.validate(), Err(Error::Topology(_))));
        let cfg = TopologyConfig { avg_pool_k: 5 };
        assert!(build_topology_with::<f32>(Topology::DiverseBranch, 1, cfg).is_err());
    }
}
