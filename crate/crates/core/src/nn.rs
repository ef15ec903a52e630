//! Differentiable network primitives: 2-D convolution (stride/dilation),
//! 2x2 max-pooling, x2 bilinear upsampling, batch normalization and dropout,
//! plus the conv-BN-ReLU unit the whole network is assembled from.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::rng;
use crate::tensor::autodiff::{grad_enabled, Node};
use crate::tensor::{Scalar, Shape, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::sync::RwLock;

/// Whether an op runs with training semantics (batch statistics, active
/// dropout) or inference semantics (running statistics, identity dropout).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Role of a trainable tensor, used by parameter accounting and traversal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
    GaUnit,
}

pub type ParamVisitor<'a, T> = dyn FnMut(&str, ParamKind, &Tensor<T>) + 'a;
pub type ParamVisitorMut<'a, T> = dyn FnMut(&str, ParamKind, &mut Tensor<T>) + 'a;
pub type BnVisitor<'a, T> = dyn FnMut(&str, &BatchNormParams<T>) + 'a;

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

/// Parameters of one convolution. The kernel is square with odd extent;
/// bias is present only on convolutions not followed by batch norm.
#[derive(Debug)]
pub struct Conv2dParams<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl<T: Scalar> Conv2dParams<T> {
    pub fn new(
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Self> {
        let ws = weight.shape();
        if ws.h != ws.w {
            return Err(Error::InvalidConfig(format!(
                "conv kernel must be square, got {ws}"
            )));
        }
        if ws.h % 2 == 0 {
            return Err(Error::EvenKernel { k: ws.h });
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::InvalidConfig(
                "conv stride and dilation must be positive".into(),
            ));
        }
        if let Some(b) = &bias {
            let bs = b.shape();
            if bs.c != ws.n || bs.n != 1 || bs.h != 1 || bs.w != 1 {
                return Err(Error::InvalidConfig(format!(
                    "conv bias {bs} does not match {} output channels",
                    ws.n
                )));
            }
        }
        Ok(Conv2dParams {
            weight,
            bias,
            stride,
            padding,
            dilation,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }

    pub fn for_each_param(&self, path: &str, f: &mut ParamVisitor<T>) {
        f(&format!("{path}.weight"), ParamKind::ConvWeight, &self.weight);
        if let Some(b) = &self.bias {
            f(&format!("{path}.bias"), ParamKind::ConvBias, b);
        }
    }

    pub fn for_each_param_mut(&mut self, path: &str, f: &mut ParamVisitorMut<T>) {
        f(&format!("{path}.weight"), ParamKind::ConvWeight, &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{path}.bias"), ParamKind::ConvBias, b);
        }
    }
}

/// Direct 2-D convolution with zero padding.
///
/// Output extent per axis is `floor((in + 2p - d(k-1) - 1)/s) + 1`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, p: &Conv2dParams<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = p.weight.shape();
    if xs.c != ws.c {
        return Err(Error::ConvChannelMismatch {
            input: xs,
            weight: ws,
        });
    }
    let k = ws.h;
    let out_h = ConvGeom::out_extent(xs.h, k, p.stride, p.padding, p.dilation);
    let out_w = ConvGeom::out_extent(xs.w, k, p.stride, p.padding, p.dilation);
    let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
        return Err(Error::EmptyConvOutput {
            h: xs.h,
            w: xs.w,
            k,
            stride: p.stride,
            pad: p.padding,
            dilation: p.dilation,
        });
    };
    let geom = ConvGeom {
        n: xs.n,
        c_in: xs.c,
        h: xs.h,
        w: xs.w,
        c_out: ws.n,
        k,
        stride: p.stride,
        pad: p.padding,
        dilation: p.dilation,
        out_h,
        out_w,
    };
    let mut data = vec![T::zero(); xs.n * ws.n * out_h * out_w];
    kernels::conv2d_auto(x.data(), p.weight.data(), &geom, &mut data);
    if let Some(b) = &p.bias {
        let plane = out_h * out_w;
        for ni in 0..xs.n {
            for (co, &bv) in b.data().iter().enumerate() {
                let base = (ni * ws.n + co) * plane;
                for v in &mut data[base..base + plane] {
                    *v += bv;
                }
            }
        }
    }
    let mut inputs = vec![x, &p.weight];
    if let Some(b) = &p.bias {
        inputs.push(b);
    }
    let node = (grad_enabled() && inputs.iter().any(|t| t.tracks_grad())).then(|| Node::Conv2d {
        x: x.clone(),
        weight: p.weight.clone(),
        bias: p.bias.clone(),
        geom,
    });
    Tensor::op_output(
        "conv2d",
        Shape::new(xs.n, ws.n, out_h, out_w),
        data,
        node,
    )
}

// ---------------------------------------------------------------------------
// maxpool2
// ---------------------------------------------------------------------------

/// 2x2 max pooling with stride 2. Requires even spatial dims; the gradient
/// routes to the first maximal element in row-major window order.
pub fn maxpool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::OddSpatial {
            op: "maxpool2",
            h: s.h,
            w: s.w,
        });
    }
    let (oh, ow) = (s.h / 2, s.w / 2);
    let plane_in = s.hw();
    let plane_out = oh * ow;
    let track = grad_enabled() && x.tracks_grad();
    let mut data = vec![T::zero(); s.n * s.c * plane_out];
    let mut argmax = if track {
        vec![0u32; data.len()]
    } else {
        Vec::new()
    };
    for p in 0..s.n * s.c {
        let xp = &x.data()[p * plane_in..(p + 1) * plane_in];
        for i in 0..oh {
            for j in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_idx = 0usize;
                for di in 0..2 {
                    for dj in 0..2 {
                        let idx = (2 * i + di) * s.w + (2 * j + dj);
                        if xp[idx] > best {
                            best = xp[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = p * plane_out + i * ow + j;
                data[o] = best;
                if track {
                    argmax[o] = (p * plane_in + best_idx) as u32;
                }
            }
        }
    }
    let node = track.then(|| Node::MaxPool2 {
        x: x.clone(),
        argmax,
    });
    Tensor::op_output("maxpool2", Shape::new(s.n, s.c, oh, ow), data, node)
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

struct RunningStats<T> {
    mean: Vec<T>,
    var: Vec<T>,
}

/// Per-channel batch normalization state. The affine pair is trainable; the
/// running statistics sit behind a lock so inference can share a model
/// immutably while training updates them in place.
pub struct BatchNormParams<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    running: RwLock<RunningStats<T>>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Scalar> BatchNormParams<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::full(Shape::new(1, channels, 1, 1), T::one()).requires_grad(),
            beta: Tensor::zeros(Shape::new(1, channels, 1, 1)).requires_grad(),
            running: RwLock::new(RunningStats {
                mean: vec![T::zero(); channels],
                var: vec![T::one(); channels],
            }),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape().c
    }

    pub fn running_mean(&self) -> Vec<T> {
        self.running.read().unwrap().mean.clone()
    }

    pub fn running_var(&self) -> Vec<T> {
        self.running.read().unwrap().var.clone()
    }

    pub fn set_running(&self, mean: Vec<T>, var: Vec<T>) {
        assert_eq!(mean.len(), self.channels());
        assert_eq!(var.len(), self.channels());
        let mut r = self.running.write().unwrap();
        r.mean = mean;
        r.var = var;
    }

    pub fn for_each_param(&self, path: &str, f: &mut ParamVisitor<T>) {
        f(&format!("{path}.gamma"), ParamKind::BnGamma, &self.gamma);
        f(&format!("{path}.beta"), ParamKind::BnBeta, &self.beta);
    }

    pub fn for_each_param_mut(&mut self, path: &str, f: &mut ParamVisitorMut<T>) {
        f(&format!("{path}.gamma"), ParamKind::BnGamma, &mut self.gamma);
        f(&format!("{path}.beta"), ParamKind::BnBeta, &mut self.beta);
    }
}

/// Batch normalization. Train mode normalizes with batch statistics and
/// updates the running estimates with the stored momentum; infer mode uses
/// the running estimates unchanged.
pub fn batchnorm<T: Scalar>(x: &Tensor<T>, p: &BatchNormParams<T>, mode: Mode) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.c != p.channels() {
        return Err(Error::ShapeMismatch {
            op: "batchnorm",
            lhs: s,
            rhs: p.gamma.shape(),
        });
    }
    let hw = s.hw();
    let m = s.n * hw;
    let eps = T::from_f64(p.eps);

    let (mean, var): (Vec<T>, Vec<T>) = match mode {
        Mode::Train => {
            let inv_m = T::one() / T::from_f64(m as f64);
            let mut mean = vec![T::zero(); s.c];
            let mut var = vec![T::zero(); s.c];
            for ci in 0..s.c {
                let mut acc = T::zero();
                for ni in 0..s.n {
                    let base = (ni * s.c + ci) * hw;
                    for &v in &x.data()[base..base + hw] {
                        acc += v;
                    }
                }
                mean[ci] = acc * inv_m;
                let mut acc2 = T::zero();
                for ni in 0..s.n {
                    let base = (ni * s.c + ci) * hw;
                    for &v in &x.data()[base..base + hw] {
                        let d = v - mean[ci];
                        acc2 += d * d;
                    }
                }
                var[ci] = acc2 * inv_m;
            }
            // Running update: biased mean, unbiased variance when possible.
            {
                let mom = T::from_f64(p.momentum);
                let keep = T::one() - mom;
                let correction = if m > 1 {
                    T::from_f64(m as f64 / (m as f64 - 1.0))
                } else {
                    T::one()
                };
                let mut r = p.running.write().unwrap();
                for ci in 0..s.c {
                    r.mean[ci] = keep * r.mean[ci] + mom * mean[ci];
                    r.var[ci] = keep * r.var[ci] + mom * var[ci] * correction;
                }
            }
            (mean, var)
        }
        Mode::Infer => {
            let r = p.running.read().unwrap();
            (r.mean.clone(), r.var.clone())
        }
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let track = grad_enabled()
        && (x.tracks_grad() || p.gamma.tracks_grad() || p.beta.tracks_grad());

    let mut data = vec![T::zero(); x.numel()];
    let mut xhat = if track { vec![T::zero(); x.numel()] } else { Vec::new() };
    for ni in 0..s.n {
        for ci in 0..s.c {
            let base = (ni * s.c + ci) * hw;
            let (mu, is) = (mean[ci], inv_std[ci]);
            let (g, b) = (p.gamma.data()[ci], p.beta.data()[ci]);
            if track {
                for i in base..base + hw {
                    let xh = (x.data()[i] - mu) * is;
                    xhat[i] = xh;
                    data[i] = g * xh + b;
                }
            } else {
                let scale = g * is;
                let shift = b - mu * scale;
                for i in base..base + hw {
                    data[i] = x.data()[i] * scale + shift;
                }
            }
        }
    }

    let node = track.then(|| Node::BatchNorm {
        x: x.clone(),
        gamma: p.gamma.clone(),
        beta: p.beta.clone(),
        xhat,
        inv_std,
        train: mode == Mode::Train,
    });
    Tensor::op_output("batchnorm", s, data, node)
}

// ---------------------------------------------------------------------------
// dropout
// ---------------------------------------------------------------------------

/// Zeroes each element with probability `rate` and scales survivors by
/// `1/(1-rate)`; identity in infer mode and at rate 0. Deterministic for a
/// given seed.
pub fn dropout<T: Scalar>(x: &Tensor<T>, rate: f64, mode: Mode, seed: u64) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidDropoutRate { rate });
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok(x.clone());
    }
    let mut rng = rng::rng_from(seed);
    let keep_scale = T::from_f64(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..x.numel())
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep_scale
            }
        })
        .collect();
    let data = x
        .data()
        .iter()
        .zip(mask.iter())
        .map(|(&v, &m)| v * m)
        .collect();
    let node = (grad_enabled() && x.tracks_grad()).then(|| Node::Dropout {
        x: x.clone(),
        mask,
    });
    Tensor::op_output("dropout", x.shape(), data, node)
}

// ---------------------------------------------------------------------------
// conv-BN-ReLU unit and initialization
// ---------------------------------------------------------------------------

/// The conv -> batch norm -> ReLU unit used throughout both branches. The
/// convolution carries no bias (it would be absorbed by the normalization).
pub struct ConvBnRelu<T: Scalar> {
    pub conv: Conv2dParams<T>,
    pub bn: BatchNormParams<T>,
}

impl<T: Scalar> ConvBnRelu<T> {
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        batchnorm(&conv2d(x, &self.conv)?, &self.bn, mode)?.relu()
    }

    pub fn for_each_param(&self, path: &str, f: &mut ParamVisitor<T>) {
        self.conv.for_each_param(path, f);
        self.bn.for_each_param(&format!("{path}.bn"), f);
    }

    pub fn for_each_param_mut(&mut self, path: &str, f: &mut ParamVisitorMut<T>) {
        self.conv.for_each_param_mut(path, f);
        self.bn.for_each_param_mut(&format!("{path}.bn"), f);
    }

    pub fn for_each_bn(&self, path: &str, f: &mut BnVisitor<T>) {
        f(&format!("{path}.bn"), &self.bn);
    }
}

/// Deterministic parameter initializer. Every tensor derives its own ChaCha
/// stream from the master seed and its dotted path, so two configurations
/// that share a submodule initialize it identically.
pub struct Init {
    pub seed: u64,
}

impl Init {
    pub fn new(seed: u64) -> Init {
        Init { seed }
    }

    /// Trainable tensor with N(0, std^2) entries, sampled in f64.
    pub fn normal<T: Scalar>(&self, path: &str, shape: Shape, std: f64) -> Tensor<T> {
        let mut rng = rng::rng_from(rng::derive_seed_str(self.seed, path));
        let dist = Normal::new(0.0f64, std).expect("valid std");
        let data: Vec<T> = (0..shape.numel())
            .map(|_| T::from_f64(dist.sample(&mut rng)))
            .collect();
        Tensor::from_vec(shape, data).expect("shape matches").requires_grad()
    }

    /// Kaiming fan-in normal initialization for a conv weight.
    pub fn kaiming_conv<T: Scalar>(&self, path: &str, c_out: usize, c_in: usize, k: usize) -> Tensor<T> {
        let fan_in = (c_in * k * k) as f64;
        self.normal(path, Shape::new(c_out, c_in, k, k), (2.0 / fan_in).sqrt())
    }

    /// conv-BN-ReLU unit with a 3x3 kernel by default.
    pub fn conv_bn_relu<T: Scalar>(
        &self,
        path: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> ConvBnRelu<T> {
        let weight = self.kaiming_conv(&format!("{path}.conv"), c_out, c_in, k);
        ConvBnRelu {
            conv: Conv2dParams::new(weight, None, stride, padding, dilation)
                .expect("valid conv geometry"),
            bn: BatchNormParams::new(c_out),
        }
    }

    /// Plain conv with a zero bias (used where no batch norm follows).
    pub fn conv_with_bias<T: Scalar>(
        &self,
        path: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Conv2dParams<T> {
        let weight = self.kaiming_conv(&format!("{path}.conv"), c_out, c_in, k);
        let bias = Tensor::zeros(Shape::new(1, c_out, 1, 1)).requires_grad();
        Conv2dParams::new(weight, Some(bias), stride, padding, 1).expect("valid conv geometry")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::SeedableRng;

    fn t4(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(Shape::new(n, c, h, w), data).unwrap()
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut kernel = vec![0.0; 9];
        kernel[4] = 1.0;
        let p = Conv2dParams::new(t4(1, 1, 3, 3, kernel), None, 1, 1, 1).unwrap();
        let x = t4(1, 1, 3, 4, (0..12).map(f64::from).collect());
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_ones_kernel_counts_window_overlap() {
        // all-ones 3x3 input, all-ones 3x3 kernel, pad 1:
        // corners see 4 inputs, edges 6, center 9.
        let p = Conv2dParams::new(t4(1, 1, 3, 3, vec![1.0; 9]), None, 1, 1, 1).unwrap();
        let x = t4(1, 1, 3, 3, vec![1.0; 9]);
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(
            y.data(),
            &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
        );
    }

    #[test]
    fn conv_output_shape_formula() {
        // stride 1 pad 1 preserves; stride 2 pad 1 halves even sizes.
        let p1 = Conv2dParams::new(t4(2, 3, 3, 3, vec![0.1; 54]), None, 1, 1, 1).unwrap();
        let y1 = conv2d(&t4(1, 3, 8, 6, vec![0.0; 144]), &p1).unwrap();
        assert_eq!(y1.shape(), Shape::new(1, 2, 8, 6));

        let p2 = Conv2dParams::new(t4(2, 3, 3, 3, vec![0.1; 54]), None, 2, 1, 1).unwrap();
        let y2 = conv2d(&t4(1, 3, 8, 6, vec![0.0; 144]), &p2).unwrap();
        assert_eq!(y2.shape(), Shape::new(1, 2, 4, 3));

        // dilation 2, pad 2 preserves size with a 3x3 kernel
        let p3 = Conv2dParams::new(t4(1, 3, 3, 3, vec![0.1; 27]), None, 1, 2, 2).unwrap();
        let y3 = conv2d(&t4(1, 3, 5, 5, vec![0.0; 75]), &p3).unwrap();
        assert_eq!(y3.shape(), Shape::new(1, 1, 5, 5));
    }

    #[test]
    fn conv_channel_mismatch_is_error() {
        let p = Conv2dParams::new(t4(1, 2, 3, 3, vec![0.0; 18]), None, 1, 1, 1).unwrap();
        assert!(matches!(
            conv2d(&t4(1, 3, 4, 4, vec![0.0; 48]), &p).unwrap_err(),
            Error::ConvChannelMismatch { .. }
        ));
    }

    #[test]
    fn conv_empty_output_is_error() {
        // 5x5 effective kernel (k=3, dilation=2) over a 3x3 unpadded input
        let p = Conv2dParams::new(t4(1, 1, 3, 3, vec![0.0; 9]), None, 1, 0, 2).unwrap();
        assert!(matches!(
            conv2d(&t4(1, 1, 3, 3, vec![0.0; 9]), &p).unwrap_err(),
            Error::EmptyConvOutput { .. }
        ));
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(matches!(
            Conv2dParams::new(t4(1, 1, 2, 2, vec![0.0; 4]), None, 1, 0, 1).unwrap_err(),
            Error::EvenKernel { k: 2 }
        ));
    }

    #[test]
    fn maxpool_basic_and_window_scan_oracle() {
        let y = maxpool2(&t4(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(y.data(), &[4.0]);

        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let data: Vec<f64> = (0..64).map(|_| rng.random_range(-5.0..5.0)).collect();
        let x = t4(1, 1, 8, 8, data.clone());
        let y = maxpool2(&x).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let window = [
                    data[(2 * i) * 8 + 2 * j],
                    data[(2 * i) * 8 + 2 * j + 1],
                    data[(2 * i + 1) * 8 + 2 * j],
                    data[(2 * i + 1) * 8 + 2 * j + 1],
                ];
                let want = window.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(y.data()[i * 4 + j], want);
            }
        }
    }

    #[test]
    fn maxpool_tie_routes_gradient_to_first_in_scan_order() {
        let x = t4(1, 1, 2, 2, vec![7.0; 4]).requires_grad();
        let y = maxpool2(&x).unwrap();
        assert_eq!(y.data(), &[7.0]);
        y.sum_all().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_rejects_odd_spatial() {
        assert!(matches!(
            maxpool2(&t4(1, 1, 3, 4, vec![0.0; 12])).unwrap_err(),
            Error::OddSpatial { .. }
        ));
    }

    #[test]
    fn upsample_constant_stays_constant_and_range_is_preserved() {
        let y = t4(1, 2, 2, 2, vec![3.5; 8]).upsample_bilinear2().unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 4, 4));
        assert!(y.data().iter().all(|&v| v == 3.5));

        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let data: Vec<f64> = (0..36).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (lo, hi) = data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
                (l.min(v), h.max(v))
            });
        let y = t4(1, 1, 6, 6, data).upsample_bilinear2().unwrap();
        assert!(y.data().iter().all(|&v| v >= lo && v <= hi));
    }

    #[test]
    fn downsampling_upsampled_constant_recovers_it() {
        let y = t4(1, 1, 2, 2, vec![1.25; 4]).upsample_bilinear2().unwrap();
        // stride-2 sampling
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(y.data()[(2 * i) * 4 + 2 * j], 1.25);
            }
        }
    }

    #[test]
    fn maxpool_then_upsample_never_raises_global_max() {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(37);
        let data: Vec<f64> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
        let max_in = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let y = maxpool2(&t4(1, 1, 8, 8, data)).unwrap().upsample_bilinear2().unwrap();
        let max_out = y.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(max_out <= max_in + 1e-12);
    }

    #[test]
    fn batchnorm_identity_parameters_in_infer_mode() {
        let p = BatchNormParams::<f64>::new(2);
        // fresh params: gamma=1, beta=0, mean=0, var=1
        let x = t4(1, 2, 2, 2, (0..8).map(|i| i as f64 / 4.0 - 1.0).collect());
        let y = batchnorm(&x, &p, Mode::Infer).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn batchnorm_train_normalizes_to_affine_params() {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        let mut p = BatchNormParams::<f64>::new(3);
        p.gamma = Tensor::from_vec(Shape::new(1, 3, 1, 1), vec![2.0, 0.5, 1.5])
            .unwrap()
            .requires_grad();
        p.beta = Tensor::from_vec(Shape::new(1, 3, 1, 1), vec![-1.0, 0.25, 3.0])
            .unwrap()
            .requires_grad();
        let data: Vec<f64> = (0..2 * 3 * 16).map(|_| rng.random_range(-4.0..4.0)).collect();
        let y = batchnorm(&t4(2, 3, 4, 4, data), &p, Mode::Train).unwrap();
        for c in 0..3 {
            let mut vals = Vec::new();
            for n in 0..2 {
                vals.extend_from_slice(&y.data()[(n * 3 + c) * 16..(n * 3 + c + 1) * 16]);
            }
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!((mean - p.beta.data()[c]).abs() < 1e-4);
            assert!((var.sqrt() - p.gamma.data()[c].abs()).abs() < 1e-4);
        }
        // running stats moved and stayed positive
        assert!(p.running_var().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn dropout_rate_zero_and_infer_are_identity() {
        let x = t4(1, 1, 2, 2, vec![1.0, -2.0, 3.0, -4.0]);
        assert_eq!(dropout(&x, 0.0, Mode::Train, 1).unwrap().data(), x.data());
        assert_eq!(dropout(&x, 0.5, Mode::Infer, 1).unwrap().data(), x.data());
    }

    #[test]
    fn dropout_rejects_rate_one() {
        let x = t4(1, 1, 1, 1, vec![1.0]);
        assert!(matches!(
            dropout(&x, 1.0, Mode::Train, 1).unwrap_err(),
            Error::InvalidDropoutRate { .. }
        ));
    }

    #[test]
    fn dropout_survivor_fraction_near_rate() {
        let n = 100_000;
        let x = Tensor::<f64>::full(Shape::new(1, 1, 100, 1000), 1.0);
        let y = dropout(&x, 0.5, Mode::Train, 99).unwrap();
        let survivors = y.data().iter().filter(|&&v| v != 0.0).count();
        let frac = survivors as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.01, "survivor fraction {frac}");
        // survivors are scaled by 1/(1-rate)
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
        // deterministic under the same seed
        let y2 = dropout(&x, 0.5, Mode::Train, 99).unwrap();
        assert_eq!(y.data(), y2.data());
    }

    #[test]
    fn init_is_deterministic_per_path() {
        let a = Init::new(5).normal::<f64>("w.a", Shape::new(1, 1, 2, 2), 0.02);
        let b = Init::new(5).normal::<f64>("w.a", Shape::new(1, 1, 2, 2), 0.02);
        let c = Init::new(5).normal::<f64>("w.b", Shape::new(1, 1, 2, 2), 0.02);
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }
}
