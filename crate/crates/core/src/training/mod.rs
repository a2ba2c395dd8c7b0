//! End-to-end supervised training of the branch model and curve together.

mod augment;
mod backprop;
pub mod gradcheck;
mod optim;

pub use augment::{augment, crop, Transform};
pub use backprop::{backward, forward, l1_loss, loss_and_grad, BnMode, ForwardCache};
pub use optim::{cosine_lr, Adam};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::glle::{
    build_topology_with, BranchModel, FusedModel, Layer, Topology, TopologyConfig, DEFAULT_POOL_K,
};
use crate::local_adapt::CurveParams;
use crate::reparam::collapse;
use crate::tensor::{lit, Real, Tensor, BN_MOMENTUM};

/// Branch model plus curve: everything that is optimised jointly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainModel<T = f32> {
    pub glle: BranchModel<T>,
    pub curve: CurveParams<T>,
    pub pool_k: usize,
}

impl<T: Real> TrainModel<T> {
    pub fn new(glle: BranchModel<T>, curve: CurveParams<T>, pool_k: usize) -> Self {
        Self {
            glle,
            curve,
            pool_k,
        }
    }

    /// Number of learnable scalars (batch-norm running statistics excluded).
    pub fn param_len(&self) -> usize {
        let branches: usize = self
            .glle
            .branches
            .iter()
            .map(|b| {
                let conv: usize = b
                    .layers
                    .iter()
                    .map(|l| match l {
                        Layer::Conv { kernel, .. } => kernel.scalar_count(),
                        Layer::AvgPool { .. } => 0,
                    })
                    .sum();
                conv + 2 * b.bn.channels()
            })
            .sum();
        branches + CurveParams::<T>::LEN
    }

    /// Learnable scalars in a fixed order: per branch, each conv's weights
    /// then bias, then BN gamma and beta; finally alpha, beta, gamma.
    pub fn flat_params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_len());
        for b in &self.glle.branches {
            for l in &b.layers {
                if let Layer::Conv { kernel, .. } = l {
                    out.extend_from_slice(kernel.weight());
                    out.extend_from_slice(kernel.bias());
                }
            }
            out.extend_from_slice(&b.bn.gamma);
            out.extend_from_slice(&b.bn.beta);
        }
        out.extend(self.curve.to_array());
        out
    }

    pub fn set_flat_params(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_len() {
            return Err(invalid(
                "set_flat_params",
                format!("expected {} values, got {}", self.param_len(), flat.len()),
            ));
        }
        let mut rest = flat;
        let mut take = |dst: &mut [T]| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        for b in &mut self.glle.branches {
            for l in &mut b.layers {
                if let Layer::Conv { kernel, .. } = l {
                    take(kernel.weight_mut());
                    take(kernel.bias_mut());
                }
            }
            take(&mut b.bn.gamma);
            take(&mut b.bn.beta);
        }
        let mut c = [T::zero(); 3];
        take(&mut c);
        self.curve = CurveParams::from_array(c);
        Ok(())
    }

    pub fn fuse(&self) -> Result<FusedModel<T>> {
        collapse(&self.glle, self.curve, self.pool_k)
    }

    pub fn cast<U: Real>(&self) -> TrainModel<U> {
        TrainModel {
            glle: self.glle.cast(),
            curve: self.curve.cast(),
            pool_k: self.pool_k,
        }
    }
}

pub const DESK_LR_INIT: f64 = 2e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub topology: Topology,
    pub topology_cfg: TopologyConfig,
    pub pool_k: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub bn_momentum: f64,
    pub crop: usize,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    /// Random flips and quarter turns, applied identically to both images.
    pub augment: bool,
}

impl Default for TrainConfig {
    /// Desk-scale run: 64 px crops, batch 4, 2000 steps. The initial rate is
    /// ten times the full-scale one because far fewer pixels are seen.
    fn default() -> Self {
        Self {
            topology: Topology::DiverseBranch,
            topology_cfg: TopologyConfig::default(),
            pool_k: DEFAULT_POOL_K,
            lr_init: DESK_LR_INIT,
            lr_final: 1e-6,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            bn_momentum: BN_MOMENTUM,
            crop: 64,
            batch: 4,
            steps: 2000,
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    /// Full-scale recipe: 256 px crops, batch 16, initial rate 2e-4.
    pub fn full_scale(steps: usize) -> Self {
        Self {
            lr_init: 2e-4,
            crop: 256,
            batch: 16,
            steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |why: &str| Err(invalid("TrainConfig", why));
        if !(self.lr_final < self.lr_init) || self.lr_final < 0.0 {
            return bad("need 0 <= lr_final < lr_init");
        }
        if self.crop == 0 || self.batch == 0 || self.steps == 0 {
            return bad("crop, batch and steps must be positive");
        }
        if self.pool_k % 2 == 0 {
            return bad("pool_k must be odd");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_momentum must lie in [0, 1]");
        }
        Ok(())
    }
}

/// A degraded input and its reference, each `1 x 3 x H x W` in [0, 1].
#[derive(Clone, Debug)]
pub struct Pair<T = f32> {
    pub low: Tensor<T>,
    pub target: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    /// 1-based count of completed updates.
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Draws a batch of random crops, augmented per sample.
fn sample_batch<T: Real>(
    data: &[Pair<T>],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut lows = Vec::with_capacity(cfg.batch);
    let mut targets = Vec::with_capacity(cfg.batch);
    for _ in 0..cfg.batch {
        let p = &data[rng.gen_range(0..data.len())];
        let s = p.low.shape();
        let y0 = rng.gen_range(0..=s.h - cfg.crop);
        let x0 = rng.gen_range(0..=s.w - cfg.crop);
        let low = crop(&p.low, y0, x0, cfg.crop, cfg.crop)?;
        let target = crop(&p.target, y0, x0, cfg.crop, cfg.crop)?;
        if cfg.augment {
            let tf = Transform::random(rng);
            lows.push(tf.apply(&low));
            targets.push(tf.apply(&target));
        } else {
            lows.push(low);
            targets.push(target);
        }
    }
    Ok((Tensor::stack(&lows)?, Tensor::stack(&targets)?))
}

/// Trains a fresh model: branch weights from `cfg.seed`, curve at (0.6, -1.3, 1.5).
pub fn train<T: Real>(
    data: &[Pair<T>],
    cfg: &TrainConfig,
    on_step: impl FnMut(&StepLog),
) -> Result<TrainModel<T>> {
    cfg.validate()?;
    let glle = build_topology_with(cfg.topology, cfg.seed, cfg.topology_cfg)?;
    let model = TrainModel::new(glle, CurveParams::init(), cfg.pool_k);
    train_from(model, data, cfg, on_step)
}

/// Runs `cfg.steps` updates starting from `model`.
pub fn train_from<T: Real>(
    mut model: TrainModel<T>,
    data: &[Pair<T>],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainModel<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid("train", "empty dataset"));
    }
    for (i, p) in data.iter().enumerate() {
        p.low.expect_same_shape(&p.target, "train")?;
        let s = p.low.shape();
        if s.n != 1 || cfg.crop > s.h.min(s.w) {
            return Err(invalid(
                "train",
                format!(
                    "pair {i} is {s}; need a single image at least {} px on each side",
                    cfg.crop
                ),
            ));
        }
    }

    // Separate stream from the weight init, which also draws from cfg.seed.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c);
    let mut params = model.flat_params();
    let mut opt = Adam::new(params.len(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let momentum = lit::<T>(cfg.bn_momentum);

    for step in 0..cfg.steps {
        let (x, target) = sample_batch(data, cfg, &mut rng)?;
        let (loss, grad, cache) = loss_and_grad(&model, &x, &target, BnMode::Batch)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            let bad = grad.iter().position(|g| !g.is_finite());
            return Err(Error::NonFiniteLoss {
                step: step + 1,
                detail: format!("loss {loss}, first non-finite gradient index {bad:?}"),
            });
        }
        for (b, stats) in model.glle.branches.iter_mut().zip(cache.batch_stats()) {
            if let Some(stats) = stats {
                b.bn.update_running(stats, momentum);
            }
        }
        let lr = cosine_lr(step, cfg.steps, cfg.lr_init, cfg.lr_final);
        opt.step(&mut params, &grad, lr);
        model.set_flat_params(&params)?;
        on_step(&StepLog {
            step: step + 1,
            lr,
            loss: loss.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(model)
}

/// Mean L1 loss of a deployed model over full images.
pub fn evaluate<T: Real>(model: &FusedModel<T>, data: &[Pair<T>]) -> Result<f64> {
    if data.is_empty() {
        return Err(invalid("evaluate", "empty dataset"));
    }
    let mut total = 0.0;
    for p in data {
        let out = crate::local_adapt::enhance(&p.low, model)?;
        total += l1_loss(&out, &p.target)?.to_f64().unwrap_or(f64::NAN);
    }
    Ok(total / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glle::build_topology;
    use crate::tensor::Shape;

    fn toy_pairs(n: usize, seed: u64) -> Vec<Pair<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let base: f32 = rng.gen_range(0.3..0.8);
                let target = Tensor::from_fn(Shape::new(1, 3, 20, 20), |_, c, y, x| {
                    (base + 0.01 * (x as f32) - 0.005 * (y as f32) + 0.05 * c as f32)
                        .clamp(0.0, 1.0)
                });
                let low = target.scale(0.4);
                Pair { low, target }
            })
            .collect()
    }

    #[test]
    fn flat_params_round_trip_and_count() {
        let m = TrainModel::new(
            build_topology::<f32>(Topology::DiverseBranch, 1),
            CurveParams::init(),
            7,
        );
        // 204 conv scalars + 4 x (gamma, beta) + 3 curve coefficients.
        assert_eq!(m.param_len(), 204 + 24 + 3);
        let mut flat = m.flat_params();
        assert_eq!(flat.len(), m.param_len());
        let mut m2 = m.clone();
        m2.set_flat_params(&flat).unwrap();
        assert_eq!(m, m2);
        flat[0] += 1.0;
        *flat.last_mut().unwrap() = 9.0;
        m2.set_flat_params(&flat).unwrap();
        assert_eq!(m2.curve.gamma, 9.0);
        assert!(m2.set_flat_params(&flat[1..]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let full = TrainConfig::full_scale(100);
        assert_eq!(
            (full.crop, full.batch, full.lr_init, full.lr_final),
            (256, 16, 2e-4, 1e-6)
        );
        let bad = TrainConfig {
            lr_final: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            pool_k: 4,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let data = toy_pairs(2, 0);
        let too_big = TrainConfig {
            crop: 32,
            steps: 1,
            ..TrainConfig::default()
        };
        assert!(train(&data, &too_big, |_| {}).is_err());
    }

    #[test]
    fn training_is_reproducible_and_starts_from_init_curve() {
        let data = toy_pairs(4, 1);
        let cfg = TrainConfig {
            crop: 16,
            batch: 2,
            steps: 5,
            seed: 3,
            lr_init: 1e-2,
            ..TrainConfig::default()
        };
        let mut log_a = Vec::new();
        let a = train(&data, &cfg, |s| log_a.push(*s)).unwrap();
        let mut log_b = Vec::new();
        let b = train(&data, &cfg, |s| log_b.push(*s)).unwrap();
        assert_eq!(a, b);
        assert_eq!(log_a, log_b);
        assert_eq!(log_a.len(), 5);
        assert_eq!(log_a[0].lr, 1e-2);
        assert_ne!(a.curve, CurveParams::init());
        let zero_steps = TrainConfig {
            steps: 1,
            lr_init: 1e-12,
            lr_final: 0.0,
            ..cfg
        };
        let c = train(&data, &zero_steps, |_| {}).unwrap();
        assert!((c.curve.alpha - 0.6).abs() < 1e-6);
    }

    #[test]
    fn training_reduces_loss_on_toy_data() {
        let data = toy_pairs(8, 2);
        let cfg = TrainConfig {
            crop: 16,
            batch: 4,
            steps: 150,
            seed: 4,
            lr_init: 2e-2,
            lr_final: 1e-4,
            ..TrainConfig::default()
        };
        let before = evaluate(
            &TrainModel::new(
                build_topology(cfg.topology, cfg.seed),
                CurveParams::init(),
                cfg.pool_k,
            )
            .fuse()
            .unwrap(),
            &data,
        )
        .unwrap();
        let m = train(&data, &cfg, |_| {}).unwrap();
        let after = evaluate(&m.fuse().unwrap(), &data).unwrap();
        assert!(after < 0.5 * before, "{before} -> {after}");
    }
}
