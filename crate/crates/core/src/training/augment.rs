use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::tensor::{Real, Shape, Tensor};

/// A dihedral transform: optional flips followed by quarter turns clockwise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Transform {
    pub hflip: bool,
    pub vflip: bool,
    pub quarter_turns: u8,
}

impl Transform {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            hflip: rng.gen(),
            vflip: rng.gen(),
            quarter_turns: rng.gen_range(0..4),
        }
    }

    pub fn apply<T: Real>(&self, t: &Tensor<T>) -> Tensor<T> {
        let s = t.shape();
        let mut out = t.clone();
        if self.hflip {
            out = Tensor::from_fn(s, |n, c, y, x| t.at(n, c, y, s.w - 1 - x));
        }
        if self.vflip {
            let src = out.clone();
            out = Tensor::from_fn(s, |n, c, y, x| src.at(n, c, s.h - 1 - y, x));
        }
        for _ in 0..self.quarter_turns % 4 {
            let src = out;
            let ss = src.shape();
            out = Tensor::from_fn(Shape::new(ss.n, ss.c, ss.w, ss.h), |n, c, y, x| {
                src.at(n, c, ss.h - 1 - x, y)
            });
        }
        out
    }
}

/// Applies one random transform, drawn from `seed`, to both images of a pair.
pub fn augment<T: Real>(
    low: &Tensor<T>,
    target: &Tensor<T>,
    seed: u64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    low.expect_same_shape(target, "augment")?;
    let tf = Transform::random(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((tf.apply(low), tf.apply(target)))
}

/// Spatial window `[y0, y0 + h) x [x0, x0 + w)` of every sample and channel.
pub fn crop<T: Real>(t: &Tensor<T>, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = t.shape();
    if y0 + h > s.h || x0 + w > s.w {
        return Err(invalid(
            "crop",
            format!("window {h}x{w} at ({y0}, {x0}) exceeds {}x{}", s.h, s.w),
        ));
    }
    Ok(Tensor::from_fn(Shape::new(s.n, s.c, h, w), |n, c, y, x| {
        t.at(n, c, y0 + y, x0 + x)
    }))
}
