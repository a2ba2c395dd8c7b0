use std::f64::consts::PI;

use crate::tensor::{lit, Real};

/// Cosine annealing from `lr_init` at step 0 to `lr_final` at `total`.
pub fn cosine_lr(step: usize, total: usize, lr_init: f64, lr_final: f64) -> f64 {
    if total == 0 {
        return lr_final;
    }
    let t = step.min(total) as f64 / total as f64;
    lr_final + 0.5 * (lr_init - lr_final) * (1.0 + (PI * t).cos())
}

/// Adam optimiser state: first and second moments plus the step counter.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[T] {
        &self.m
    }

    pub fn second_moment(&self) -> &[T] {
        &self.v
    }

    /// One bias-corrected update of `params` in place.
    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        assert_eq!(
            params.len(),
            self.m.len(),
            "parameter count changed under the optimiser"
        );
        assert_eq!(
            grads.len(),
            self.m.len(),
            "gradient length differs from parameters"
        );
        self.t += 1;
        let (b1, b2) = (lit::<T>(self.beta1), lit::<T>(self.beta2));
        let bc1 = lit::<T>(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = lit::<T>(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (lit::<T>(lr), lit::<T>(self.eps));
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 1000, 2e-4, 1e-6), 2e-4);
        assert_eq!(cosine_lr(1000, 1000, 2e-4, 1e-6), 1e-6);
        assert!((cosine_lr(500, 1000, 2e-4, 1e-6) - (2e-4 + 1e-6) / 2.0).abs() < 1e-18);
        assert_eq!(cosine_lr(5000, 1000, 2e-4, 1e-6), 1e-6);
        let mut prev = f64::INFINITY;
        for s in 0..=100 {
            let lr = cosine_lr(s, 100, 2e-4, 1e-6);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![1.0f64, -2.0, 0.5];
        let mut opt = Adam::new(3, 0.9, 0.999, 1e-8);
        opt.step(&mut p, &[0.3, -4.0, 0.0], 0.01);
        // Bias correction makes the first step +-lr for any non-zero gradient.
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] + 1.99).abs() < 1e-9);
        assert_eq!(p[2], 0.5);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn adam_matches_reference_recurrence() {
        let grads = [[0.5, -0.1], [0.2, 0.3], [-0.4, 0.05]];
        let mut p = vec![0.0f64, 1.0];
        let mut opt = Adam::new(2, 0.9, 0.999, 1e-8);
        let (mut m, mut v, mut q) = ([0.0f64; 2], [0.0f64; 2], [0.0f64, 1.0]);
        for (t, g) in grads.iter().enumerate() {
            opt.step(&mut p, g, 1e-3);
            let t = t as i32 + 1;
            for j in 0..2 {
                m[j] = 0.9 * m[j] + 0.1 * g[j];
                v[j] = 0.999 * v[j] + 0.001 * g[j] * g[j];
                let mh = m[j] / (1.0 - 0.9f64.powi(t));
                let vh = v[j] / (1.0 - 0.999f64.powi(t));
                q[j] -= 1e-3 * mh / (vh.sqrt() + 1e-8);
            }
        }
        assert!((p[0] - q[0]).abs() < 1e-15 && (p[1] - q[1]).abs() < 1e-15);
    }
}
