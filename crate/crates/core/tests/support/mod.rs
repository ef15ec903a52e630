//! Shared test oracles: an independent six-loop convolution, a direct
//! evaluation of the guided-attention formulas, and a central
//! finite-difference gradient harness. Everything here recomputes expected
//! values from first principles, separately from the library kernels.

#![allow(dead_code)]

use bidganet::tensor::{no_grad, Tensor};
use bidganet::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;

/// Central finite difference vs. autodiff for one leaf tensor.
///
/// `forward` must rebuild the loss from the (possibly poked) leaf on every
/// call. Returns the max relative error over the probed indices and panics
/// when it exceeds `FD_TOL`.
///
/// Probes whose eps-window straddles a kink (relu zero crossing, pooling
/// argmax flip) violate the smoothness assumption of central differences;
/// they are detected by disagreeing one-sided slopes and skipped, capped at
/// half the probes so a genuine gradient bug cannot hide behind the filter.
pub fn fd_check_leaf(
    name: &str,
    leaf: &mut Tensor<f64>,
    forward: &mut dyn FnMut(&Tensor<f64>) -> Result<Tensor<f64>>,
    probes: usize,
    seed: u64,
) -> f64 {
    let loss = forward(leaf).expect("forward");
    loss.backward().expect("backward");
    let grad = leaf
        .grad()
        .unwrap_or_else(|| panic!("{name}: leaf received no gradient"));
    let mid = loss.item();
    drop(loss);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel: f64 = 0.0;
    let mut skipped = 0usize;
    let numel = leaf.numel();
    let total = probes.min(numel);
    for _ in 0..total {
        let idx = rng.random_range(0..numel);
        let orig = leaf.data()[idx];
        leaf.data_mut()[idx] = orig + FD_EPS;
        let up = no_grad(|| forward(leaf)).expect("forward +eps").item();
        leaf.data_mut()[idx] = orig - FD_EPS;
        let down = no_grad(|| forward(leaf)).expect("forward -eps").item();
        leaf.data_mut()[idx] = orig;
        let fd = (up - down) / (2.0 * FD_EPS);
        let ad = grad[idx];
        let denom = ad.abs().max(fd.abs()).max(1e-6);
        let rel = (ad - fd).abs() / denom;
        if rel >= FD_TOL {
            let right = (up - mid) / FD_EPS;
            let left = (mid - down) / FD_EPS;
            if (right - left).abs() > 10.0 * FD_TOL * denom {
                skipped += 1;
                continue;
            }
        }
        assert!(
            rel < FD_TOL,
            "{name}: index {idx}: autodiff {ad:.8e} vs finite diff {fd:.8e} (rel {rel:.3e})"
        );
        max_rel = max_rel.max(rel);
    }
    assert!(
        skipped <= total / 2,
        "{name}: {skipped}/{total} probes sat on kinks; too few valid probes"
    );
    max_rel
}

/// Random tensor helper for probes and fixed weighting masks.
pub fn rand_vec(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Literal six-loop convolution with explicit zero padding, stride and
/// dilation: the defining summation, nothing shared with the kernels.
#[allow(clippy::too_many_arguments)]
pub fn conv_oracle(
    x: &[f64],
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: Option<&[f64]>,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> (Vec<f64>, usize, usize) {
    let out_h = (h + 2 * pad - dilation * (k - 1) - 1) / stride + 1;
    let out_w = (w + 2 * pad - dilation * (k - 1) - 1) / stride + 1;
    let mut out = vec![0.0; n * c_out * out_h * out_w];
    for ni in 0..n {
        for co in 0..c_out {
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let mut acc = bias.map_or(0.0, |b| b[co]);
                    for ci in 0..c_in {
                        for kh in 0..k {
                            for kw in 0..k {
                                let ih = (oh * stride + kh * dilation) as i64 - pad as i64;
                                let iw = (ow * stride + kw * dilation) as i64 - pad as i64;
                                if ih < 0 || iw < 0 || ih >= h as i64 || iw >= w as i64 {
                                    continue;
                                }
                                acc += x[((ni * c_in + ci) * h + ih as usize) * w + iw as usize]
                                    * weight[((co * c_in + ci) * k + kh) * k + kw];
                            }
                        }
                    }
                    out[((ni * c_out + co) * out_h + oh) * out_w + ow] = acc;
                }
            }
        }
    }
    (out, out_h, out_w)
}

/// Direct evaluation of the guided-attention formulas: raw scores, column
/// softmax, row L1 normalization, value mix.
pub fn ga_formula_oracle(
    f: &[f64],
    m_k: &[f64],
    m_v: &[f64],
    n: usize,
    d: usize,
    s: usize,
    d_out: usize,
) -> Vec<f64> {
    let mut scores = vec![0.0; n * s];
    for i in 0..n {
        for j in 0..s {
            scores[i * s + j] = (0..d).map(|k| f[i * d + k] * m_k[j * d + k]).sum();
        }
    }
    for j in 0..s {
        let max = (0..n).map(|i| scores[i * s + j]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for i in 0..n {
            let e = (scores[i * s + j] - max).exp();
            scores[i * s + j] = e;
            sum += e;
        }
        for i in 0..n {
            scores[i * s + j] /= sum;
        }
    }
    for i in 0..n {
        let sum: f64 = scores[i * s..(i + 1) * s].iter().sum();
        for v in &mut scores[i * s..(i + 1) * s] {
            *v /= sum;
        }
    }
    let mut out = vec![0.0; n * d_out];
    for i in 0..n {
        for j in 0..s {
            let a = scores[i * s + j];
            for k in 0..d_out {
                out[i * d_out + k] += a * m_v[j * d_out + k];
            }
        }
    }
    out
}
