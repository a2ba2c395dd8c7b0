//! Procedural scenes and exposure-reduced training pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::tensor::{Shape, Tensor};
use crate::training::Pair;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Exposure offsets in stops; one is drawn per pair. All must be <= 0.
    pub exposure_tiers: Vec<f64>,
    /// Range of `j` in the tone exponent `1 + j`.
    pub gamma_jitter: (f64, f64),
    /// Standard deviation of additive Gaussian noise; 0 disables it.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            exposure_tiers: vec![-1.5, -1.0],
            gamma_jitter: (-0.1, 0.1),
            noise: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.exposure_tiers.is_empty() {
            return Err(invalid("SynthConfig", "need at least one exposure tier"));
        }
        if let Some(ev) = self.exposure_tiers.iter().find(|ev| !(**ev <= 0.0)) {
            return Err(invalid(
                "SynthConfig",
                format!("exposure {ev} EV is not a reduction"),
            ));
        }
        let (lo, hi) = self.gamma_jitter;
        if !(lo <= hi) || lo <= -1.0 || !hi.is_finite() {
            return Err(invalid(
                "SynthConfig",
                format!("gamma jitter range ({lo}, {hi}) is invalid"),
            ));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(invalid(
                "SynthConfig",
                "noise must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

/// A well-exposed test scene: a sky-like gradient, coloured shapes, a
/// sinusoidal texture and fine grain, all in [0, 1].
pub fn synth_image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.35..0.95));
    let bottom: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.1..0.6));
    let tilt: f32 = rng.gen_range(-0.3..0.3);

    struct Blob {
        cy: f32,
        cx: f32,
        ry: f32,
        rx: f32,
        rect: bool,
        color: [f32; 3],
    }
    let blobs: Vec<Blob> = (0..rng.gen_range(3..9))
        .map(|_| Blob {
            cy: rng.gen_range(0.0..1.0),
            cx: rng.gen_range(0.0..1.0),
            ry: rng.gen_range(0.05..0.35),
            rx: rng.gen_range(0.05..0.35),
            rect: rng.gen(),
            color: std::array::from_fn(|_| rng.gen_range(0.05..1.0)),
        })
        .collect();
    let (fy, fx, amp): (f32, f32, f32) = (
        rng.gen_range(2.0..12.0),
        rng.gen_range(2.0..12.0),
        rng.gen_range(0.0..0.08),
    );
    let grain: Vec<f32> = (0..h * w).map(|_| rng.gen_range(-0.02..0.02)).collect();

    let mut rgb = vec![[0f32; 3]; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = y as f32 / h.max(2) as f32;
            let u = x as f32 / w.max(2) as f32;
            let t = (v + tilt * (u - 0.5)).clamp(0.0, 1.0);
            let mut px: [f32; 3] = std::array::from_fn(|c| top[c] * (1.0 - t) + bottom[c] * t);
            for b in &blobs {
                let (dy, dx) = ((v - b.cy) / b.ry, (u - b.cx) / b.rx);
                let inside = if b.rect {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                } else {
                    dy * dy + dx * dx <= 1.0
                };
                if inside {
                    px = b.color;
                }
            }
            let tex = amp * (std::f32::consts::TAU * (fy * v + fx * u)).sin();
            let g = grain[y * w + x];
            rgb[y * w + x] = px.map(|c| (c + tex + g).clamp(0.0, 1.0));
        }
    }
    Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| rgb[y * w + x][c])
}

/// `low = clamp(img * 2^EV, 0, 1)^(1 + j)` (plus optional noise), `target = img`.
pub fn synth_pair(img: &Tensor<f32>, cfg: &SynthConfig, seed: u64) -> Result<Pair<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ev = cfg.exposure_tiers[rng.gen_range(0..cfg.exposure_tiers.len())];
    let (lo, hi) = cfg.gamma_jitter;
    let jitter = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    let gain = 2f64.powf(ev) as f32;
    let exponent = (1.0 + jitter) as f32;
    let mut low = img.map(|v| (v * gain).clamp(0.0, 1.0).powf(exponent));
    if cfg.noise > 0.0 {
        let normal =
            Normal::new(0.0, cfg.noise).map_err(|e| invalid("synth_pair", e.to_string()))?;
        for v in low.data_mut() {
            *v = (*v + normal.sample(&mut rng) as f32).clamp(0.0, 1.0);
        }
    }
    Ok(Pair {
        low,
        target: img.clone(),
    })
}

/// `n` independent scenes of size `h x w`, each degraded once.
pub fn synth_dataset(
    n: usize,
    h: usize,
    w: usize,
    cfg: &SynthConfig,
    seed: u64,
) -> Result<Vec<Pair<f32>>> {
    cfg.validate()?;
    (0..n as u64)
        .map(|i| {
            let s = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i);
            synth_pair(&synth_image(h, w, s), cfg, s ^ 0xa5a5_a5a5)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::local_adapt::rgb_to_y;

    #[test]
    fn ev_zero_without_jitter_is_identity() {
        let img = synth_image(12, 10, 1);
        let cfg = SynthConfig {
            exposure_tiers: vec![0.0],
            gamma_jitter: (0.0, 0.0),
            noise: 0.0,
        };
        let p = synth_pair(&img, &cfg, 0).unwrap();
        assert_eq!(p.low, p.target);
    }

    #[test]
    fn one_stop_halves_mid_gray() {
        let img = Tensor::full(Shape::new(1, 3, 4, 4), 0.5f32);
        let cfg = SynthConfig {
            exposure_tiers: vec![-1.0],
            gamma_jitter: (0.0, 0.0),
            noise: 0.0,
        };
        let p = synth_pair(&img, &cfg, 3).unwrap();
        assert!(p.low.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn degraded_is_darker() {
        let cfg = SynthConfig::default();
        for seed in 0..20 {
            let p = synth_pair(&synth_image(16, 16, seed), &cfg, seed).unwrap();
            let lo = rgb_to_y(&p.low).unwrap().mean();
            let hi = rgb_to_y(&p.target).unwrap().mean();
            assert!(lo < hi, "seed {seed}: {lo} >= {hi}");
        }
    }

    #[test]
    fn scenes_are_valid_and_reproducible() {
        let a = synth_image(20, 30, 7);
        assert_eq!(a.shape(), Shape::new(1, 3, 20, 30));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, synth_image(20, 30, 7));
        assert_ne!(a, synth_image(20, 30, 8));
        let d = synth_dataset(3, 8, 8, &SynthConfig::default(), 1).unwrap();
        assert_eq!(d.len(), 3);
    }

    #[test]
    fn rejects_overexposure_and_bad_ranges() {
        let img = synth_image(4, 4, 0);
        let over = SynthConfig {
            exposure_tiers: vec![-1.0, 0.5],
            ..Default::default()
        };
        assert!(synth_pair(&img, &over, 0).is_err());
        let nan = SynthConfig {
            exposure_tiers: vec![f64::NAN],
            ..Default::default()
        };
        assert!(nan.validate().is_err());
        let jit = SynthConfig {
            gamma_jitter: (0.2, 0.1),
            ..Default::default()
        };
        assert!(jit.validate().is_err());
        assert!(SynthConfig {
            exposure_tiers: vec![],
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn noise_stays_in_range() {
        let img = synth_image(8, 8, 2);
        let cfg = SynthConfig {
            noise: 0.05,
            ..Default::default()
        };
        let p = synth_pair(&img, &cfg, 1).unwrap();
        assert!(p.low.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
