//! Self-checks shared by the test suites and the `verify` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::glle::{
    build_topology, BranchModel, IlluminationModel, Layer, Topology, DEFAULT_POOL_K,
};
use crate::local_adapt::{enhance, enhance_traced, CurveParams};
use crate::reparam::collapse;
use crate::tensor::{Real, Shape, Tensor};

/// Perturbs every parameter and batch-norm statistic away from its
/// initial value, as training would.
pub fn randomize_trained_like<T: Real>(m: &mut BranchModel<T>, rng: &mut impl Rng) {
    let mut draw = |lo: f64, hi: f64| T::from_f64(rng.gen_range(lo..hi)).expect("representable");
    for b in &mut m.branches {
        for l in &mut b.layers {
            if let Layer::Conv { kernel, .. } = l {
                for w in kernel.weight_mut() {
                    *w = *w * draw(0.5, 1.5) + draw(-0.05, 0.05);
                }
                for w in kernel.bias_mut() {
                    *w = *w * draw(0.5, 1.5) + draw(-0.05, 0.05);
                }
            }
        }
        for v in &mut b.bn.mu {
            *v = draw(-0.5, 0.5);
        }
        for v in &mut b.bn.sigma {
            *v = draw(0.3, 2.0);
        }
        for v in &mut b.bn.gamma {
            *v = draw(0.5, 1.5);
        }
        for v in &mut b.bn.beta {
            *v = draw(-0.3, 0.3);
        }
    }
}

/// A curve near the initial one.
pub fn random_curve<T: Real>(rng: &mut impl Rng) -> CurveParams<T> {
    let init = CurveParams::<f64>::init();
    CurveParams::new(
        init.alpha + rng.gen_range(-0.2..0.2),
        init.beta + rng.gen_range(-0.2..0.2),
        init.gamma + rng.gen_range(-0.2..0.2),
    )
    .cast()
}

pub fn random_image<T: Real>(shape: Shape, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_, _, _, _| {
        T::from_f64(rng.gen_range(0.0..1.0)).expect("representable")
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionReport {
    pub topology: Topology,
    pub probes: usize,
    /// Largest |branch - fused| over the pre-sigmoid illumination logits.
    pub max_logit_diff: f64,
    /// Largest |branch - fused| over the enhanced outputs.
    pub max_output_diff: f64,
}

impl FusionReport {
    pub fn max_diff(&self) -> f64 {
        self.max_logit_diff.max(self.max_output_diff)
    }
}

/// Compares a branch model against its collapse on `probes` random images.
pub fn compare_fused<T: Real>(
    branch: &BranchModel<T>,
    curve: CurveParams<T>,
    pool_k: usize,
    probes: usize,
    shape: Shape,
    rng: &mut impl Rng,
) -> Result<FusionReport> {
    let fused = collapse(branch, curve, pool_k)?;
    let (mut logit, mut out) = (0.0f64, 0.0f64);
    for _ in 0..probes {
        let x = random_image::<T>(shape, rng);
        let a = branch.logits(&x)?;
        let b = fused.logits(&x)?;
        logit = logit.max(a.max_abs_diff(&b)?.to_f64().unwrap_or(f64::NAN));
        let ea = enhance_traced(&x, branch, &curve, pool_k)?.output;
        let eb = enhance(&x, &fused)?;
        out = out.max(ea.max_abs_diff(&eb)?.to_f64().unwrap_or(f64::NAN));
    }
    Ok(FusionReport {
        topology: branch.topology,
        probes,
        max_logit_diff: logit,
        max_output_diff: out,
    })
}

/// Builds a trained-like model of `topology` and checks its collapse.
pub fn fusion_equivalence<T: Real>(
    topology: Topology,
    probes: usize,
    size: usize,
    seed: u64,
) -> Result<FusionReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((topology as u64) << 32));
    let mut m = build_topology::<T>(topology, rng.gen());
    randomize_trained_like(&mut m, &mut rng);
    let curve = random_curve(&mut rng);
    compare_fused(
        &m,
        curve,
        DEFAULT_POOL_K,
        probes,
        Shape::new(1, 3, size, size),
        &mut rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_topology_collapses() {
        for t in Topology::ALL {
            let r64 = fusion_equivalence::<f64>(t, 3, 12, 1).unwrap();
            assert!(r64.max_diff() < 1e-10, "{t}: {r64:?}");
            let r32 = fusion_equivalence::<f32>(t, 3, 12, 1).unwrap();
            assert!(r32.max_diff() < 1e-4, "{t}: {r32:?}");
        }
    }

    #[test]
    fn randomization_moves_statistics() {
        let mut m = build_topology::<f64>(Topology::DiverseBranch, 0);
        let before = m.clone();
        randomize_trained_like(&mut m, &mut ChaCha8Rng::seed_from_u64(0));
        assert_ne!(m, before);
        m.validate().unwrap();
        assert!(m.branches.iter().all(|b| b.bn.validate().is_ok()));
    }
}
