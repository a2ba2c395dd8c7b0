//! Central finite-difference check of the analytic gradient, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::glle::{build_topology, Layer, Topology, ILLUM_FLOOR};
use crate::local_adapt::CurveParams;
use crate::tensor::{Shape, Tensor};

use super::backprop::{forward, l1_loss, loss_and_grad, BnMode, ForwardCache};
use super::TrainModel;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Accepted random points per topology.
    pub points: usize,
    pub step: f64,
    pub tol: f64,
    /// Lower bound on the denominator of the relative error.
    pub denom_floor: f64,
    /// Minimum distance of any clamp, floor or `|.|` argument from its kink.
    pub kink_margin: f64,
    pub size: usize,
    pub batch: usize,
    pub mode: BnMode,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            points: 20,
            step: 1e-5,
            tol: 1e-4,
            denom_floor: 1e-6,
            kink_margin: 1e-3,
            size: 16,
            batch: 1,
            mode: BnMode::Batch,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub point: usize,
    pub label: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub topology: Topology,
    pub points: usize,
    /// Draws discarded for lying too close to a kink.
    pub rejected: usize,
    pub checks: usize,
    pub worst: Option<ParamCheck>,
    pub failures: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checks > 0
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Human-readable name of every entry of [`TrainModel::flat_params`].
pub fn param_labels(model: &TrainModel<f64>) -> Vec<String> {
    let mut out = Vec::with_capacity(model.param_len());
    for (bi, b) in model.glle.branches.iter().enumerate() {
        for (li, l) in b.layers.iter().enumerate() {
            if let Layer::Conv { kernel, .. } = l {
                out.extend(
                    (0..kernel.weight().len()).map(|j| format!("branch{bi}.layer{li}.weight[{j}]")),
                );
                out.extend(
                    (0..kernel.bias().len()).map(|j| format!("branch{bi}.layer{li}.bias[{j}]")),
                );
            }
        }
        out.extend((0..b.bn.channels()).map(|j| format!("branch{bi}.bn.gamma[{j}]")));
        out.extend((0..b.bn.channels()).map(|j| format!("branch{bi}.bn.beta[{j}]")));
    }
    out.extend(["curve.alpha", "curve.beta", "curve.gamma"].map(String::from));
    out
}

/// Smallest distance from any non-smooth point of the pipeline.
pub fn kink_distance(cache: &ForwardCache<f64>, target: &Tensor<f64>) -> f64 {
    let unit = |v: f64| v.abs().min((v - 1.0).abs());
    let mut m = f64::INFINITY;
    for i in 0..cache.output.len() {
        m = m
            .min(unit(cache.product.data()[i]))
            .min(unit(cache.quotient.data()[i]))
            .min(cache.illumination.data()[i] - ILLUM_FLOOR)
            .min((cache.output.data()[i] - target.data()[i]).abs());
    }
    m
}

/// A random model near initialisation plus a dark input and an offset target.
fn draw_point(
    topology: Topology,
    cfg: &GradCheckConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(TrainModel<f64>, Tensor<f64>, Tensor<f64>)> {
    let mut glle = build_topology::<f64>(topology, rng.gen());
    for b in &mut glle.branches {
        for g in &mut b.bn.gamma {
            *g = rng.gen_range(0.8..1.2);
        }
        for v in &mut b.bn.beta {
            *v = rng.gen_range(-0.2..0.2);
        }
        for s in &mut b.bn.sigma {
            *s = rng.gen_range(0.5..2.0);
        }
        for mu in &mut b.bn.mu {
            *mu = rng.gen_range(-0.3..0.3);
        }
    }
    let init = CurveParams::<f64>::init();
    let curve = CurveParams::new(
        init.alpha + rng.gen_range(-0.1..0.1),
        init.beta + rng.gen_range(-0.1..0.1),
        init.gamma + rng.gen_range(-0.1..0.1),
    );
    let model = TrainModel::new(glle, curve, 3);
    let x = Tensor::from_fn(
        Shape::new(cfg.batch, 3, cfg.size, cfg.size),
        |_, _, _, _| rng.gen_range(0.05..0.35),
    );
    let out = forward(&model, &x, cfg.mode)?.output;
    let offsets: Vec<f64> = (0..out.len())
        .map(|_| {
            let d = rng.gen_range(0.05..0.2);
            if rng.gen() {
                d
            } else {
                -d
            }
        })
        .collect();
    let target = Tensor::new(
        out.shape(),
        out.data()
            .iter()
            .zip(&offsets)
            .map(|(o, d)| o + d)
            .collect(),
    )?;
    Ok((model, x, target))
}

/// Checks every learnable parameter of `topology` at `cfg.points` random points.
pub fn check_topology(topology: Topology, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.points == 0 || !(cfg.step > 0.0) {
        return Err(invalid("check_topology", "need points > 0 and step > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ topology as u64);
    let mut report = GradCheckReport {
        topology,
        points: 0,
        rejected: 0,
        checks: 0,
        worst: None,
        failures: Vec::new(),
    };
    while report.points < cfg.points {
        if report.rejected > 20 * cfg.points {
            return Err(invalid(
                "check_topology",
                "could not find points away from kinks",
            ));
        }
        let (model, x, target) = draw_point(topology, cfg, &mut rng)?;
        let (_, grad, cache) = loss_and_grad(&model, &x, &target, cfg.mode)?;
        if kink_distance(&cache, &target) < cfg.kink_margin {
            report.rejected += 1;
            continue;
        }
        let labels = param_labels(&model);
        let base = model.flat_params();
        let mut probe = model.clone();
        let mut params = base.clone();
        let mut loss_at = |params: &[f64]| -> Result<f64> {
            probe.set_flat_params(params)?;
            l1_loss(&forward(&probe, &x, cfg.mode)?.output, &target)
        };
        for (j, &analytic) in grad.iter().enumerate() {
            params[j] = base[j] + cfg.step;
            let up = loss_at(&params)?;
            params[j] = base[j] - cfg.step;
            let down = loss_at(&params)?;
            params[j] = base[j];
            let numeric = (up - down) / (2.0 * cfg.step);
            let check = ParamCheck {
                point: report.points,
                label: labels[j].clone(),
                analytic,
                numeric,
                rel_err: rel_err(analytic, numeric, cfg.denom_floor),
            };
            report.checks += 1;
            if report
                .worst
                .as_ref()
                .map_or(true, |w| check.rel_err > w.rel_err)
            {
                report.worst = Some(check.clone());
            }
            if !(check.rel_err < cfg.tol) {
                report.failures.push(check);
            }
        }
        report.points += 1;
    }
    Ok(report)
}
