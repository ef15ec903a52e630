//! Latency measurement: warmup-then-measure timing with percentile stats,
//! batch-1 model benchmarking per resolution, and the linear-vs-quadratic
//! attention scaling protocol.
//!
//! Timing covers forward computation only; inputs are generated (and any
//! files read) before the timed region. FPS is `1000 / median_ms` at batch
//! size 1.

use crate::attention::{ga_forward, naive_self_attention, GaParams};
use crate::error::Result;
use crate::net::{Fusion, SegModel};
use crate::nn::Mode;
use crate::rng;
use crate::tensor::{no_grad, Scalar, Shape, Tensor};
use rand::Rng;
use serde::Serialize;
use std::time::Instant;

#[derive(Debug, Clone, Serialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub fps: f64,
    pub runs: usize,
}

/// Runs `f` `warmup` times untimed, then `runs` timed repetitions.
pub fn measure(mut f: impl FnMut(), warmup: usize, runs: usize) -> LatencyStats {
    for _ in 0..warmup {
        f();
    }
    let mut samples = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        f();
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    stats_of(&mut samples)
}

fn stats_of(samples: &mut [f64]) -> LatencyStats {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let median = percentile_sorted(samples, 50.0);
    let p95 = percentile_sorted(samples, 95.0);
    LatencyStats {
        mean_ms: mean,
        median_ms: median,
        p95_ms: p95,
        fps: 1000.0 / median,
        runs: samples.len(),
    }
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let rank = ((q / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

// ---------------------------------------------------------------------------
// model benchmarking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ResolutionReport {
    pub h: usize,
    pub w: usize,
    pub stats: LatencyStats,
    /// Median time of one guided-attention head at this resolution's 1/8
    /// pixel count, when the fusion mode has one.
    pub ga_ms: Option<f64>,
    /// Median time of the null model (an input copy): the harness floor.
    pub null_ms: f64,
}

fn random_tensor<T: Scalar>(shape: Shape, seed: u64) -> Tensor<T> {
    let mut rng = rng::rng_from(seed);
    let data: Vec<T> = (0..shape.numel())
        .map(|_| T::from_f64(rng.random_range(-1.0..1.0)))
        .collect();
    Tensor::from_vec(shape, data).expect("size matches")
}

/// Batch-1 forward latency at each resolution, plus the GA-stage and
/// null-model timings.
pub fn bench_model<T: Scalar>(
    model: &SegModel<T>,
    resolutions: &[(usize, usize)],
    warmup: usize,
    runs: usize,
    seed: u64,
) -> Result<Vec<ResolutionReport>> {
    let mut reports = Vec::with_capacity(resolutions.len());
    for (i, &(h, w)) in resolutions.iter().enumerate() {
        let input = random_tensor::<T>(Shape::new(1, 3, h, w), rng::derive_seed(seed, i as u64));
        let mut forward_err = None;
        let stats = measure(
            || {
                if forward_err.is_some() {
                    return;
                }
                if let Err(e) = no_grad(|| model.forward(&input, Mode::Infer, 0)) {
                    forward_err = Some(e);
                }
            },
            warmup,
            runs,
        );
        if let Some(e) = forward_err {
            return Err(e);
        }

        let ga_ms = match &model.fusion {
            Fusion::Dga(p) => Some(time_ga(&p.ga_high, (h / 8) * (w / 8), warmup, runs, seed)?),
            Fusion::SingleEa(ga) => Some(time_ga(ga, (h / 8) * (w / 8), warmup, runs, seed)?),
            _ => None,
        };

        let null_stats = measure(
            || {
                std::hint::black_box(input.data().to_vec());
            },
            warmup,
            runs,
        );

        reports.push(ResolutionReport {
            h,
            w,
            stats,
            ga_ms,
            null_ms: null_stats.median_ms,
        });
    }
    Ok(reports)
}

fn time_ga<T: Scalar>(
    params: &GaParams<T>,
    pixels: usize,
    warmup: usize,
    runs: usize,
    seed: u64,
) -> Result<f64> {
    let f = random_tensor::<T>(
        Shape::matrix(pixels, params.feature_dim()),
        rng::derive_seed(seed, 0x6a_5),
    );
    let mut err = None;
    let stats = measure(
        || {
            if err.is_some() {
                return;
            }
            if let Err(e) = no_grad(|| ga_forward(&f, params, Mode::Infer, 0)) {
                err = Some(e);
            }
        },
        warmup,
        runs,
    );
    match err {
        Some(e) => Err(e),
        None => Ok(stats.median_ms),
    }
}

// ---------------------------------------------------------------------------
// linear-complexity scaling protocol
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ScalingReport {
    pub n_small: usize,
    pub n_large: usize,
    pub small_median_ms: f64,
    pub large_median_ms: f64,
    /// `large_median_ms / small_median_ms` for a 4x pixel-count increase.
    pub ratio: f64,
}

/// Times one GA head (S x d external units) at `n` and `4n` pixels.
pub fn ga_scaling(n: usize, s: usize, d: usize, runs: usize, seed: u64) -> Result<ScalingReport> {
    let init = crate::nn::Init::new(seed);
    let params = GaParams::<f32>::init(&init, "bench.ga", s, d, d);
    let small = time_ga(&params, n, 2, runs, rng::derive_seed(seed, 1))?;
    let large = time_ga(&params, 4 * n, 2, runs, rng::derive_seed(seed, 2))?;
    Ok(ScalingReport {
        n_small: n,
        n_large: 4 * n,
        small_median_ms: small,
        large_median_ms: large,
        ratio: large / small,
    })
}

/// Same protocol for the bundled naive quadratic self-attention comparator.
pub fn quadratic_scaling(n: usize, d: usize, runs: usize, seed: u64) -> ScalingReport {
    let time_at = |pixels: usize, salt: u64| {
        let f = random_tensor::<f32>(
            Shape::matrix(pixels, d),
            rng::derive_seed(seed, salt),
        );
        let mut out = vec![0.0f32; pixels * d];
        let stats = measure(
            || {
                naive_self_attention(f.data(), pixels, d, &mut out);
                std::hint::black_box(&out);
            },
            2,
            runs,
        );
        stats.median_ms
    };
    let small = time_at(n, 3);
    let large = time_at(4 * n, 4);
    ScalingReport {
        n_small: n,
        n_large: 4 * n,
        small_median_ms: small,
        large_median_ms: large,
        ratio: large / small,
    }
}
