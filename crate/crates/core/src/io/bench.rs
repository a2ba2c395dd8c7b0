use std::time::{Duration, Instant};

use crate::error::{invalid, Result};
use crate::glle::{BranchModel, FusedModel, IlluminationModel};
use crate::local_adapt::{enhance, enhance_traced, CurveParams};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Timing {
    pub runs: usize,
    pub median: Duration,
    pub p95: Duration,
    pub min: Duration,
}

impl Timing {
    pub fn from_samples(samples: &[Duration]) -> Result<Self> {
        if samples.is_empty() {
            return Err(invalid("Timing::from_samples", "no samples"));
        }
        let mut s = samples.to_vec();
        s.sort_unstable();
        let n = s.len();
        let median = if n % 2 == 1 {
            s[n / 2]
        } else {
            (s[n / 2 - 1] + s[n / 2]) / 2
        };
        // Nearest-rank percentile.
        let p95 = s[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
        Ok(Self {
            runs: n,
            median,
            p95,
            min: s[0],
        })
    }
}

/// Runs `f` `warmup` times untimed, then `repeats` times timed.
pub fn time_runs<R>(
    warmup: usize,
    repeats: usize,
    mut f: impl FnMut() -> Result<R>,
) -> Result<Timing> {
    for _ in 0..warmup {
        std::hint::black_box(f()?);
    }
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        std::hint::black_box(f()?);
        samples.push(t0.elapsed());
    }
    Timing::from_samples(&samples)
}

/// Runs `f` inside a dedicated pool of `threads` workers.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| invalid("with_threads", e.to_string()))?;
    Ok(pool.install(f))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    /// `branch-logits`, `fused-logits`, `branch-enhance` or `fused-enhance`.
    pub name: &'static str,
    pub threads: usize,
    pub timing: Timing,
}

pub const CSV_HEADER: &str = "variant,threads,height,width,runs,median_ms,p95_ms,min_ms";

impl BenchRow {
    pub fn csv(&self, h: usize, w: usize) -> String {
        let ms = |d: Duration| d.as_secs_f64() * 1e3;
        format!(
            "{},{},{h},{w},{},{:.3},{:.3},{:.3}",
            self.name,
            self.threads,
            self.timing.runs,
            ms(self.timing.median),
            ms(self.timing.p95),
            ms(self.timing.min)
        )
    }
}

/// Times the multi-branch estimator against its fused single convolution,
/// both on the illumination logits alone and through the whole pipeline.
pub fn inference_rows(
    branch: &BranchModel<f32>,
    curve: CurveParams<f32>,
    fused: &FusedModel<f32>,
    image: &Tensor<f32>,
    warmup: usize,
    repeats: usize,
    threads: usize,
) -> Result<Vec<BenchRow>> {
    with_threads(threads, || -> Result<Vec<BenchRow>> {
        let row = |name, timing| BenchRow {
            name,
            threads,
            timing,
        };
        Ok(vec![
            row(
                "branch-logits",
                time_runs(warmup, repeats, || branch.logits(image))?,
            ),
            row(
                "fused-logits",
                time_runs(warmup, repeats, || fused.logits(image))?,
            ),
            row(
                "branch-enhance",
                time_runs(warmup, repeats, || {
                    enhance_traced(image, branch, &curve, fused.pool_k)
                })?,
            ),
            row(
                "fused-enhance",
                time_runs(warmup, repeats, || enhance(image, fused))?,
            ),
        ])
    })?
}

/// Mid-gray test frame of the given size.
pub fn bench_image(h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        0.1 + 0.3 * ((x + 2 * y + c) % 17) as f32 / 17.0
    })
}

/// `median(a) / median(b)` for two named rows at the same thread count.
pub fn speedup(rows: &[BenchRow], slow: &str, fast: &str, threads: usize) -> Option<f64> {
    let find = |n: &str| rows.iter().find(|r| r.name == n && r.threads == threads);
    let (a, b) = (find(slow)?, find(fast)?);
    Some(a.timing.median.as_secs_f64() / b.timing.median.as_secs_f64())
}
