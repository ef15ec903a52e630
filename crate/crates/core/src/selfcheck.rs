//! Runtime invariant and oracle suite backing the `check` CLI subcommand.
//!
//! Each check re-derives its expected values independently of the kernels it
//! exercises: convolution against a literal six-loop summation with explicit
//! zero padding, gradients against central finite differences at 64-bit,
//! attention against a direct evaluation of the score/normalize/mix
//! formulas, and the complexity claim against wall-clock scaling.

use crate::attention::{double_norm, ga_forward, GaParams};
use crate::bench;
use crate::error::{Error, Result};
use crate::net::{NetworkConfig, SegModel, Version};
use crate::nn::{self, conv2d, Conv2dParams, Init, Mode};
use crate::rng;
use crate::rsu::{build_rsu, RsuConfig};
use crate::tensor::{no_grad, Shape, Tensor};
use rand::Rng;

pub struct CheckReport {
    pub name: &'static str,
    pub outcome: Result<String>,
}

/// Runs the full suite. `quick` shrinks case counts and the scaling
/// protocol so the command finishes in seconds.
pub fn run_all(quick: bool) -> Vec<CheckReport> {
    let conv_cases = if quick { 20 } else { 100 };
    let attn_cases = if quick { 25 } else { 100 };
    let (scale_n, scale_runs) = if quick { (1024, 5) } else { (4096, 20) };
    vec![
        CheckReport {
            name: "conv2d-oracle",
            outcome: check_conv_oracle(conv_cases, 0xc0c0),
        },
        CheckReport {
            name: "gradient-finite-difference",
            outcome: check_gradients(0x9d9d),
        },
        CheckReport {
            name: "attention-row-stochastic",
            outcome: check_attention(attn_cases, 0xa7a7),
        },
        CheckReport {
            name: "rsu-shape-preservation",
            outcome: check_rsu_shapes(),
        },
        CheckReport {
            name: "ga-linear-scaling",
            outcome: check_ga_scaling(scale_n, scale_runs, quick),
        },
    ]
}

// ---------------------------------------------------------------------------
// six-loop convolution oracle
// ---------------------------------------------------------------------------

/// Literal definition of conv2d: six nested loops over output and kernel
/// positions with explicit zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_six_loop(
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
) -> Vec<f64> {
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
                                if ih < 0 || ih >= h as i64 || iw < 0 || iw >= w as i64 {
                                    continue;
                                }
                                let xv = x[((ni * c_in + ci) * h + ih as usize) * w + iw as usize];
                                let wv = weight[((co * c_in + ci) * k + kh) * k + kw];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((ni * c_out + co) * out_h + oh) * out_w + ow] = acc;
                }
            }
        }
    }
    out
}

pub fn check_conv_oracle(cases: usize, seed: u64) -> Result<String> {
    let mut rng = rng::rng_from(seed);
    let mut max_rel: f64 = 0.0;
    for case in 0..cases {
        let c_in = rng.random_range(1..=4);
        let c_out = rng.random_range(1..=4);
        let n = rng.random_range(1..=2);
        let k = *[1usize, 3].get(rng.random_range(0..2)).unwrap();
        let stride = rng.random_range(1..=2);
        let dilation = if k == 1 { 1 } else { rng.random_range(1..=2) };
        let pad = rng.random_range(0..=2);
        let mut h;
        let mut w;
        loop {
            h = rng.random_range(1..=9);
            w = rng.random_range(1..=9);
            if h + 2 * pad >= dilation * (k - 1) + 1 && w + 2 * pad >= dilation * (k - 1) + 1 {
                break;
            }
        }
        let x: Vec<f64> = (0..n * c_in * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wgt: Vec<f64> = (0..c_out * c_in * k * k)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let use_bias: bool = rng.random();
        let bias: Option<Vec<f64>> = use_bias.then(|| (0..c_out).map(|_| rng.random_range(-1.0..1.0)).collect());

        let expected = conv2d_six_loop(
            &x, n, c_in, h, w, &wgt, bias.as_deref(), c_out, k, stride, pad, dilation,
        );

        let xt = Tensor::<f64>::from_vec(Shape::new(n, c_in, h, w), x)?;
        let wt = Tensor::<f64>::from_vec(Shape::new(c_out, c_in, k, k), wgt)?;
        let bt = match bias {
            Some(b) => Some(Tensor::<f64>::from_vec(Shape::new(1, c_out, 1, 1), b)?),
            None => None,
        };
        let params = Conv2dParams::new(wt, bt, stride, pad, dilation)?;
        let got = conv2d(&xt, &params)?;

        for (i, (&g, &e)) in got.data().iter().zip(expected.iter()).enumerate() {
            let rel = (g - e).abs() / e.abs().max(1.0);
            max_rel = max_rel.max(rel);
            if rel > 1e-5 {
                return Err(Error::InvalidConfig(format!(
                    "case {case}: output {i} deviates from the six-loop oracle by {rel:.2e}"
                )));
            }
        }
    }
    Ok(format!("{cases} randomized cases, max relative error {max_rel:.2e}"))
}

// ---------------------------------------------------------------------------
// finite-difference gradients
// ---------------------------------------------------------------------------

/// Central-difference check of `d loss / d leaf` for every probed index.
/// `forward` must rebuild the loss from the leaf each call.
pub fn fd_check_leaf(
    leaf: &mut Tensor<f64>,
    forward: &mut dyn FnMut(&Tensor<f64>) -> Result<Tensor<f64>>,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    let eps = 1e-4;
    let loss = forward(leaf)?;
    loss.backward()?;
    let grad = leaf
        .grad()
        .ok_or_else(|| Error::InvalidConfig("leaf received no gradient".into()))?;
    drop(loss);

    let mut rng = rng::rng_from(seed);
    let mut max_rel: f64 = 0.0;
    for _ in 0..probes {
        let idx = rng.random_range(0..leaf.numel());
        let orig = leaf.data()[idx];
        leaf.data_mut()[idx] = orig + eps;
        let up = no_grad(|| forward(leaf)).map(|t| t.item())?;
        leaf.data_mut()[idx] = orig - eps;
        let down = no_grad(|| forward(leaf)).map(|t| t.item())?;
        leaf.data_mut()[idx] = orig;
        let fd = (up - down) / (2.0 * eps);
        let ad = grad[idx];
        let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-6);
        max_rel = max_rel.max(rel);
        if rel > 1e-4 {
            return Err(Error::InvalidConfig(format!(
                "index {idx}: autodiff {ad:.6e} vs finite difference {fd:.6e} (rel {rel:.2e})"
            )));
        }
    }
    Ok(max_rel)
}

fn check_gradients(seed: u64) -> Result<String> {
    let mut worst: f64 = 0.0;
    let mut rng = rng::rng_from(seed);

    // conv2d + relu composite on a small input
    let init = Init::new(seed);
    let conv = init.conv_bn_relu::<f64>("check.conv", 2, 3, 3, 1, 1, 1);
    let mut x = Tensor::<f64>::from_vec(
        Shape::new(1, 2, 4, 4),
        (0..32).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?
    .requires_grad();
    worst = worst.max(fd_check_leaf(
        &mut x,
        &mut |leaf| conv.forward(leaf, Mode::Train)?.sum_all(),
        12,
        rng::derive_seed(seed, 1),
    )?);

    // double-normalized attention over a toy matrix
    let ga = GaParams::<f64>::init(&init, "check.ga", 4, 3, 2);
    let mut f = Tensor::<f64>::from_vec(
        Shape::matrix(5, 3),
        (0..15).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?
    .requires_grad();
    worst = worst.max(fd_check_leaf(
        &mut f,
        &mut |leaf| ga_forward(leaf, &ga, Mode::Infer, 0)?.sum_all(),
        12,
        rng::derive_seed(seed, 2),
    )?);

    Ok(format!("max relative error {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// attention invariants
// ---------------------------------------------------------------------------

fn check_attention(cases: usize, seed: u64) -> Result<String> {
    let mut rng = rng::rng_from(seed);
    for case in 0..cases {
        let n = rng.random_range(1..=64);
        let d = rng.random_range(1..=16);
        let s = rng.random_range(1..=8);
        let scores = Tensor::<f64>::from_vec(
            Shape::matrix(n, s),
            (0..n * s).map(|_| rng.random_range(-5.0..5.0)).collect(),
        )?;
        let map = double_norm(&scores)?;
        map.validate()
            .map_err(|e| Error::InvalidConfig(format!("case {case}: {e}")))?;

        let m_k = Tensor::<f64>::from_vec(
            Shape::matrix(s, d),
            (0..s * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )?;
        let m_v = Tensor::<f64>::from_vec(
            Shape::matrix(s, d),
            (0..s * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )?;
        let f = Tensor::<f64>::from_vec(
            Shape::matrix(n, d),
            (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )?;
        let params = GaParams::new(m_k.clone(), m_v.clone(), 0.0)?;
        let got = ga_forward(&f, &params, Mode::Infer, 0)?;
        let want = ga_oracle(f.data(), m_k.data(), m_v.data(), n, d, s, d);
        for (i, (&g, &e)) in got.data().iter().zip(want.iter()).enumerate() {
            if (g - e).abs() > 1e-10 {
                return Err(Error::InvalidConfig(format!(
                    "case {case}: ga output {i} deviates from the formula oracle by {:.2e}",
                    (g - e).abs()
                )));
            }
        }
    }
    Ok(format!("{cases} randomized instances"))
}

/// Direct evaluation of the GA formulas: scores, column softmax, row L1,
/// value mix. Written with plain loops, independent of the tensor ops.
pub fn ga_oracle(
    f: &[f64],
    m_k: &[f64],
    m_v: &[f64],
    n: usize,
    d: usize,
    s: usize,
    d_out: usize,
) -> Vec<f64> {
    // scores[i][j] = sum_k f[i][k] * m_k[j][k]
    let mut scores = vec![0.0; n * s];
    for i in 0..n {
        for j in 0..s {
            let mut acc = 0.0;
            for k in 0..d {
                acc += f[i * d + k] * m_k[j * d + k];
            }
            scores[i * s + j] = acc;
        }
    }
    // column softmax
    let mut soft = vec![0.0; n * s];
    for j in 0..s {
        let mut max = f64::NEG_INFINITY;
        for i in 0..n {
            max = max.max(scores[i * s + j]);
        }
        let mut sum = 0.0;
        for i in 0..n {
            let e = (scores[i * s + j] - max).exp();
            soft[i * s + j] = e;
            sum += e;
        }
        for i in 0..n {
            soft[i * s + j] /= sum;
        }
    }
    // row L1
    for i in 0..n {
        let sum: f64 = soft[i * s..(i + 1) * s].iter().sum();
        for j in 0..s {
            soft[i * s + j] /= sum;
        }
    }
    // mix values
    let mut out = vec![0.0; n * d_out];
    for i in 0..n {
        for j in 0..s {
            let a = soft[i * s + j];
            for k in 0..d_out {
                out[i * d_out + k] += a * m_v[j * d_out + k];
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// RSU shapes
// ---------------------------------------------------------------------------

fn check_rsu_shapes() -> Result<String> {
    let init = Init::new(7);
    let mut built = 0;
    for version in [Version::Light, Version::Base, Version::Large] {
        let cfg = NetworkConfig::preset(version, 19);
        for (i, block_cfg) in cfg.blocks().iter().enumerate() {
            build_rsu::<f32>(*block_cfg, &init, &format!("check.{version:?}.{i}"))?;
            built += 1;
        }
    }
    let block = build_rsu::<f32>(RsuConfig::new(7, 3, 4, 8)?, &init, "check.fwd")?;
    let x = Tensor::<f32>::zeros(Shape::new(1, 3, 64, 64));
    let y = no_grad(|| block.forward(&x, Mode::Infer))?;
    if y.shape() != Shape::new(1, 8, 64, 64) {
        return Err(Error::InvalidConfig(format!(
            "RSU-7 changed spatial size: {}",
            y.shape()
        )));
    }
    Ok(format!("{built} table configurations build; spatial size preserved"))
}

// ---------------------------------------------------------------------------
// scaling
// ---------------------------------------------------------------------------

fn check_ga_scaling(n: usize, runs: usize, quick: bool) -> Result<String> {
    let ga = bench::ga_scaling(n, 64, 64, runs, 0xbe7c)?;
    let quad = bench::quadratic_scaling(n, 64, runs, 0xbe7d);
    if !quick {
        if !(2.5..=6.0).contains(&ga.ratio) {
            return Err(Error::InvalidConfig(format!(
                "ga_forward 4x-pixel time ratio {:.2} outside [2.5, 6.0]",
                ga.ratio
            )));
        }
        if quad.ratio < 10.0 {
            return Err(Error::InvalidConfig(format!(
                "quadratic comparator ratio {:.2} below 10",
                quad.ratio
            )));
        }
    }
    Ok(format!(
        "ga ratio {:.2} (linear target ~4), quadratic comparator ratio {:.2}",
        ga.ratio, quad.ratio
    ))
}

/// Ensures the check path also exercises a full tiny model end to end.
pub fn smoke_forward() -> Result<()> {
    let cfg = NetworkConfig::preset(Version::Light, 3);
    let model = SegModel::<f32>::build(cfg, 11)?;
    let x = Tensor::<f32>::zeros(Shape::new(1, 3, 64, 64));
    let y = no_grad(|| model.forward(&x, Mode::Infer, 0))?;
    if y.shape() != Shape::new(1, 3, 64, 64) {
        return Err(Error::InvalidConfig(format!("unexpected logits {}", y.shape())));
    }
    let _ = nn::maxpool2(&x)?;
    Ok(())
}
