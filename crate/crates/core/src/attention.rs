//! Guided attention and the dual-guided fusion block.
//!
//! A guided-attention (GA) unit scores every pixel against a small set of
//! external learnable nodes, double-normalizes the score matrix, and mixes
//! the external value unit by the resulting row-stochastic map:
//!
//! ```text
//! A     = double_norm(F_in . M_k^T)      (N x S)
//! F_mid = A . M_v                        (N x d_out)
//! F_out = dropout(F_mid)
//! ```
//!
//! Cost is linear in the pixel count N, unlike pairwise self-attention.
//! Double normalization is a column-wise softmax (each of the S columns sums
//! to 1 over the N pixels) followed by a row-wise L1 normalization (each
//! pixel's weights sum to 1).
//!
//! The dual-guided fusion block runs one GA unit at each branch resolution
//! over cross-concatenated features and adds the result back residually.

use crate::error::{Error, Result};
use crate::nn::{self, ConvBnRelu, Init, Mode};
use crate::rng;
use crate::tensor::autodiff::Node;
use crate::tensor::{concat_batch, concat_channels, Scalar, Shape, Tensor};

/// External learnable units of one GA head.
///
/// `m_k` is `S x d` (keys against the incoming feature dimension `d`),
/// `m_v` is `S x d_out` (values; its width sets the output channel count).
pub struct GaParams<T: Scalar> {
    pub m_k: Tensor<T>,
    pub m_v: Tensor<T>,
    pub s: usize,
    pub dropout_rate: f64,
}

pub const DEFAULT_NODES: usize = 64;
pub const DEFAULT_DROPOUT: f64 = 0.1;
/// Initialization scale for the external units.
pub const GA_INIT_STD: f64 = 0.02;

impl<T: Scalar> GaParams<T> {
    pub fn new(m_k: Tensor<T>, m_v: Tensor<T>, dropout_rate: f64) -> Result<Self> {
        let ks = m_k.shape();
        let vs = m_v.shape();
        if ks.n != 1 || ks.c != 1 || vs.n != 1 || vs.c != 1 {
            return Err(Error::InvalidConfig(
                "GA units must be matrices (1, 1, S, d)".into(),
            ));
        }
        if ks.h != vs.h {
            return Err(Error::InvalidConfig(format!(
                "GA units disagree on node count: m_k has {} rows, m_v has {}",
                ks.h, vs.h
            )));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::InvalidDropoutRate { rate: dropout_rate });
        }
        Ok(GaParams {
            s: ks.h,
            m_k,
            m_v,
            dropout_rate,
        })
    }

    pub fn init(init: &Init, path: &str, s: usize, d: usize, d_out: usize) -> GaParams<T> {
        GaParams {
            m_k: init.normal(&format!("{path}.m_k"), Shape::matrix(s, d), GA_INIT_STD),
            m_v: init.normal(&format!("{path}.m_v"), Shape::matrix(s, d_out), GA_INIT_STD),
            s,
            dropout_rate: DEFAULT_DROPOUT,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.m_k.shape().w
    }

    pub fn out_dim(&self) -> usize {
        self.m_v.shape().w
    }

    pub fn for_each_param(&self, path: &str, f: &mut nn::ParamVisitor<T>) {
        f(&format!("{path}.m_k"), nn::ParamKind::GaUnit, &self.m_k);
        f(&format!("{path}.m_v"), nn::ParamKind::GaUnit, &self.m_v);
    }

    pub fn for_each_param_mut(&mut self, path: &str, f: &mut nn::ParamVisitorMut<T>) {
        f(&format!("{path}.m_k"), nn::ParamKind::GaUnit, &mut self.m_k);
        f(&format!("{path}.m_v"), nn::ParamKind::GaUnit, &mut self.m_v);
    }
}

/// A row-stochastic `N x S` attention map: entries in `[0, 1]`, rows summing
/// to 1 (within 1e-5).
pub struct AttentionMap<T: Scalar>(Tensor<T>);

impl<T: Scalar> AttentionMap<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    /// Checks the row-stochasticity invariant; used by tests and `check`.
    pub fn validate(&self) -> Result<()> {
        let s = self.0.shape();
        let data = self.0.data();
        for i in 0..s.h {
            let mut sum = 0.0f64;
            for j in 0..s.w {
                let v = data[i * s.w + j].as_f64();
                if !(0.0..=1.0 + 1e-6).contains(&v) {
                    return Err(Error::InvalidConfig(format!(
                        "attention entry ({i}, {j}) = {v} outside [0, 1]"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-5 {
                return Err(Error::InvalidConfig(format!(
                    "attention row {i} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(())
    }
}

/// Double normalization of raw attention scores: column-wise softmax
/// (normalizing over the N pixels within each node column), then row-wise
/// L1 normalization. The result is row-stochastic.
///
/// Computed in log space as `softmax_row(x - columnwise_logsumexp(x))`,
/// which is algebraically identical to the softmax/L1 composition but
/// cannot underflow a whole row to zero, so the row-sum invariant holds for
/// every finite input at 32-bit.
pub fn double_norm<T: Scalar>(a_tilde: &Tensor<T>) -> Result<AttentionMap<T>> {
    let shape = a_tilde.shape();
    if shape.n != 1 || shape.c != 1 {
        return Err(Error::NotAMatrix {
            op: "double_norm",
            shape,
        });
    }
    let (n, s) = (shape.h, shape.w);
    let x = a_tilde.data();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "double_norm" });
    }

    let track = crate::tensor::autodiff::grad_enabled() && a_tilde.tracks_grad();
    let mut col_softmax = if track { vec![T::zero(); n * s] } else { Vec::new() };
    // Per column: the max (subtracted first, so adding a per-column constant
    // cancels exactly) and the log of the shifted exponential mass.
    let mut col_max = vec![T::zero(); s];
    let mut col_log_denom = vec![T::zero(); s];
    for j in 0..s {
        let mut max = x[j];
        for i in 1..n {
            if x[i * s + j] > max {
                max = x[i * s + j];
            }
        }
        let mut denom = T::zero();
        for i in 0..n {
            denom += (x[i * s + j] - max).exp();
        }
        col_max[j] = max;
        col_log_denom[j] = denom.ln();
        if track {
            for i in 0..n {
                col_softmax[i * s + j] = (x[i * s + j] - max).exp() / denom;
            }
        }
    }

    let mut out = vec![T::zero(); n * s];
    for i in 0..n {
        let row_in = &x[i * s..(i + 1) * s];
        let mut max = T::neg_infinity();
        for j in 0..s {
            let t = (row_in[j] - col_max[j]) - col_log_denom[j];
            out[i * s + j] = t;
            if t > max {
                max = t;
            }
        }
        let row = &mut out[i * s..(i + 1) * s];
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }

    let node = track.then(|| Node::DoubleNorm {
        x: a_tilde.clone(),
        col_softmax,
    });
    Ok(AttentionMap(Tensor::op_output(
        "double_norm",
        shape,
        out,
        node,
    )?))
}

/// One GA head over a pixel matrix `f_in` of shape `N x d`.
pub fn ga_forward<T: Scalar>(
    f_in: &Tensor<T>,
    p: &GaParams<T>,
    mode: Mode,
    seed: u64,
) -> Result<Tensor<T>> {
    let fs = f_in.shape();
    if fs.w != p.feature_dim() {
        return Err(Error::ShapeMismatch {
            op: "ga_forward",
            lhs: fs,
            rhs: p.m_k.shape(),
        });
    }
    let scores = f_in.matmul(&p.m_k.transpose2d()?)?;
    let attn = double_norm(&scores)?;
    let mid = attn.into_tensor().matmul(&p.m_v)?;
    nn::dropout(&mid, p.dropout_rate, mode, seed)
}

/// Flattens `(1, c, h, w)` into the `(h*w) x c` pixel matrix, row-major over
/// `(h, w)`; [`from_pixel_matrix`] inverts it exactly.
pub fn to_pixel_matrix<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.n != 1 {
        return Err(Error::InvalidConfig(format!(
            "to_pixel_matrix expects a single sample, got {s}"
        )));
    }
    x.reshape(Shape::matrix(s.c, s.hw()))?.transpose2d()
}

pub fn from_pixel_matrix<T: Scalar>(m: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = m.shape();
    if s.h != h * w {
        return Err(Error::ShapeMismatch {
            op: "from_pixel_matrix",
            lhs: s,
            rhs: Shape::matrix(h * w, s.w),
        });
    }
    m.transpose2d()?.reshape(Shape::new(1, s.w, h, w))
}

/// Applies a GA head to an NCHW tensor, per batch item, returning
/// `(n, d_out, h, w)`.
pub fn ga_apply_nchw<T: Scalar>(
    x: &Tensor<T>,
    p: &GaParams<T>,
    mode: Mode,
    seed: u64,
) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.n == 1 {
        let out = ga_forward(&to_pixel_matrix(x)?, p, mode, seed)?;
        return from_pixel_matrix(&out, s.h, s.w);
    }
    let mut per_sample = Vec::with_capacity(s.n);
    for ni in 0..s.n {
        let item = x.slice_batch(ni)?;
        let out = ga_forward(&to_pixel_matrix(&item)?, p, mode, rng::derive_seed(seed, ni as u64))?;
        per_sample.push(from_pixel_matrix(&out, s.h, s.w)?);
    }
    let refs: Vec<&Tensor<T>> = per_sample.iter().collect();
    concat_batch(&refs)
}

/// Parameters of the dual-guided fusion block: one GA head per resolution
/// plus the stride-2 conv that carries the high-resolution map down.
pub struct DgaParams<T: Scalar> {
    pub ga_high: GaParams<T>,
    pub ga_low: GaParams<T>,
    pub down: ConvBnRelu<T>,
}

impl<T: Scalar> DgaParams<T> {
    pub fn init(init: &Init, path: &str, c_h: usize, c_l: usize, s: usize) -> DgaParams<T> {
        let d = c_h + c_l;
        DgaParams {
            ga_high: GaParams::init(init, &format!("{path}.ga_high"), s, d, c_h),
            ga_low: GaParams::init(init, &format!("{path}.ga_low"), s, d, c_l),
            down: init.conv_bn_relu(&format!("{path}.down"), c_h, c_h, 3, 2, 1, 1),
        }
    }

    pub fn for_each_param(&self, path: &str, f: &mut nn::ParamVisitor<T>) {
        self.ga_high.for_each_param(&format!("{path}.ga_high"), f);
        self.ga_low.for_each_param(&format!("{path}.ga_low"), f);
        self.down.for_each_param(&format!("{path}.down"), f);
    }

    pub fn for_each_param_mut(&mut self, path: &str, f: &mut nn::ParamVisitorMut<T>) {
        self.ga_high.for_each_param_mut(&format!("{path}.ga_high"), f);
        self.ga_low.for_each_param_mut(&format!("{path}.ga_low"), f);
        self.down.for_each_param_mut(&format!("{path}.down"), f);
    }

    pub fn for_each_bn(&self, path: &str, f: &mut nn::BnVisitor<T>) {
        self.down.for_each_bn(&format!("{path}.down"), f);
    }
}

/// Dual-guided fusion of the 1/8 high-resolution map `f_h` (C_h channels)
/// and the 1/16 low-resolution map `f_l` (C_l channels):
///
/// * downsample `f_h` by a stride-2 3x3 conv, upsample `f_l` bilinearly;
/// * cross-concatenate so both scales carry C_h + C_l channels;
/// * run one GA head per scale and add its output back to that branch;
/// * return `concat(r_h, upsample(r_l))` at 1/8 with C_h + C_l channels.
pub fn dga_fuse<T: Scalar>(
    f_h: &Tensor<T>,
    f_l: &Tensor<T>,
    p: &DgaParams<T>,
    mode: Mode,
    seed: u64,
) -> Result<Tensor<T>> {
    let hs = f_h.shape();
    let ls = f_l.shape();
    if hs.h != 2 * ls.h || hs.w != 2 * ls.w || hs.n != ls.n {
        return Err(Error::ShapeMismatch {
            op: "dga_fuse",
            lhs: hs,
            rhs: ls,
        });
    }
    let down = p.down.forward(f_h, mode)?;
    let up = f_l.upsample_bilinear2()?;
    let cat_hi = concat_channels(&[f_h, &up])?;
    let cat_lo = concat_channels(&[&down, f_l])?;
    let ga_hi = ga_apply_nchw(&cat_hi, &p.ga_high, mode, rng::derive_seed(seed, 0x6a_01))?;
    let ga_lo = ga_apply_nchw(&cat_lo, &p.ga_low, mode, rng::derive_seed(seed, 0x6a_02))?;
    let r_h = f_h.add(&ga_hi)?;
    let r_l = f_l.add(&ga_lo)?;
    concat_channels(&[&r_h, &r_l.upsample_bilinear2()?])
}

/// Naive pairwise self-attention over an `n x d` pixel matrix:
/// `softmax_rows(F . F^T) . F`, streamed row by row so memory stays O(n).
/// This is the bundled quadratic-cost comparator for the linear-complexity
/// evidence; it is not differentiable and not part of the network.
pub fn naive_self_attention<T: Scalar>(f: &[T], n: usize, d: usize, out: &mut [T]) {
    assert_eq!(f.len(), n * d);
    assert_eq!(out.len(), n * d);
    let mut scores = vec![T::zero(); n];
    for i in 0..n {
        let fi = &f[i * d..(i + 1) * d];
        let mut max = T::neg_infinity();
        for (j, s) in scores.iter_mut().enumerate() {
            let fj = &f[j * d..(j + 1) * d];
            let mut dot = T::zero();
            for (a, b) in fi.iter().zip(fj.iter()) {
                dot += *a * *b;
            }
            *s = dot;
            if dot > max {
                max = dot;
            }
        }
        let mut sum = T::zero();
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        let inv = T::one() / sum;
        let out_row = &mut out[i * d..(i + 1) * d];
        for v in out_row.iter_mut() {
            *v = T::zero();
        }
        for (j, &s) in scores.iter().enumerate() {
            let w = s * inv;
            let fj = &f[j * d..(j + 1) * d];
            for (o, &v) in out_row.iter_mut().zip(fj.iter()) {
                *o += w * v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn matrix(r: usize, c: usize, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(Shape::matrix(r, c), data).unwrap()
    }

    #[test]
    fn double_norm_all_zero_is_uniform() {
        let map = double_norm(&matrix(2, 2, vec![0.0; 4])).unwrap();
        assert_eq!(map.tensor().data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn double_norm_hand_values() {
        // column softmax gives [[0.5, 2/3], [0.5, 1/3]];
        // row L1 then yields [[3/7, 4/7], [0.6, 0.4]].
        let ln2 = 2.0f64.ln();
        let map = double_norm(&matrix(2, 2, vec![0.0, ln2, 0.0, 0.0])).unwrap();
        let want = [3.0 / 7.0, 4.0 / 7.0, 0.6, 0.4];
        for (g, w) in map.tensor().data().iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
        map.validate().unwrap();
    }

    #[test]
    fn double_norm_single_row_constant_is_uniform() {
        let s = 5;
        let map = double_norm(&matrix(1, s, vec![1.7; s])).unwrap();
        for &v in map.tensor().data() {
            assert!((v - 1.0 / s as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn double_norm_rows_are_stochastic_over_random_inputs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(101);
        for _ in 0..100 {
            let n = rng.random_range(1..=16);
            let s = rng.random_range(1..=8);
            let data: Vec<f64> = (0..n * s).map(|_| rng.random_range(-30.0..30.0)).collect();
            let map = double_norm(&matrix(n, s, data)).unwrap();
            map.validate().unwrap();
        }
    }

    #[test]
    fn double_norm_is_exactly_invariant_to_dyadic_column_shifts() {
        // dyadic inputs and shifts make the max-subtraction cancel exactly
        let base = vec![0.0, 0.5, -1.0, 0.25, 1.0, -0.75];
        let x = matrix(3, 2, base.clone());
        let shifted = matrix(
            3,
            2,
            base.iter()
                .enumerate()
                .map(|(i, v)| v + if i % 2 == 0 { 8.0 } else { -16.0 })
                .collect(),
        );
        let a = double_norm(&x).unwrap();
        let b = double_norm(&shifted).unwrap();
        assert_eq!(a.tensor().data(), b.tensor().data());
    }

    #[test]
    fn double_norm_equals_softmax_then_l1_composition() {
        use crate::tensor::NormAxis;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(71);
        for _ in 0..50 {
            let n = rng.random_range(1..=12);
            let s = rng.random_range(1..=6);
            let data: Vec<f64> = (0..n * s).map(|_| rng.random_range(-8.0..8.0)).collect();
            let x = matrix(n, s, data);
            let fused = double_norm(&x).unwrap();
            let composed = x
                .softmax_axis(NormAxis::Columns)
                .unwrap()
                .l1_normalize_axis(NormAxis::Rows)
                .unwrap();
            for (a, b) in fused.tensor().data().iter().zip(composed.data()) {
                assert!((a - b).abs() < 1e-13, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn double_norm_survives_saturated_scores_in_f32() {
        // spreads this extreme underflow whole rows in the literal two-step
        // composition; the log-space form must stay row-stochastic
        let data: Vec<f32> = vec![0.0, 0.0, 500.0, -500.0, -400.0, 300.0, 10.0, -10.0];
        let x = Tensor::<f32>::from_vec(Shape::matrix(4, 2), data).unwrap();
        let map = double_norm(&x).unwrap();
        map.validate().unwrap();
    }

    #[test]
    fn ga_zero_value_unit_gives_zero_output() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let p = GaParams::new(
            matrix(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()),
            Tensor::zeros(Shape::matrix(3, 5)),
            0.0,
        )
        .unwrap();
        let f = matrix(6, 4, (0..24).map(|_| rng.random_range(-1.0..1.0)).collect());
        let out = ga_forward(&f, &p, Mode::Train, 3).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ga_matches_direct_formula_on_toy() {
        let f = matrix(3, 2, vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5]);
        let m_k = matrix(2, 2, vec![1.0, 0.5, -0.5, 0.25]);
        let m_v = matrix(2, 2, vec![2.0, -1.0, 0.5, 3.0]);
        let p = GaParams::new(m_k.clone(), m_v.clone(), 0.0).unwrap();
        let got = ga_forward(&f, &p, Mode::Infer, 0).unwrap();
        let want = crate::selfcheck::ga_oracle(f.data(), m_k.data(), m_v.data(), 3, 2, 2, 2);
        for (g, w) in got.data().iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-10, "{g} vs {w}");
        }
    }

    #[test]
    fn ga_outputs_are_convex_combinations_of_value_rows() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let (n, d, s, d_out) = (10, 3, 4, 3);
        let m_k = matrix(s, d, (0..s * d).map(|_| rng.random_range(-1.0..1.0)).collect());
        let m_v = matrix(s, d_out, (0..s * d_out).map(|_| rng.random_range(-2.0..2.0)).collect());
        let p = GaParams::new(m_k, m_v.clone(), 0.0).unwrap();
        let f = matrix(n, d, (0..n * d).map(|_| rng.random_range(-3.0..3.0)).collect());
        let out = ga_forward(&f, &p, Mode::Infer, 0).unwrap();
        for col in 0..d_out {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for row in 0..s {
                let v = m_v.data()[row * d_out + col];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            for row in 0..n {
                let v = out.data()[row * d_out + col];
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn dga_zeroed_value_units_reduce_to_concat() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(19);
        let init = Init::new(3);
        let (c_h, c_l) = (4, 6);
        let mut p = DgaParams::<f64>::init(&init, "t.dga", c_h, c_l, 5);
        p.ga_high.m_v = Tensor::zeros(p.ga_high.m_v.shape());
        p.ga_low.m_v = Tensor::zeros(p.ga_low.m_v.shape());
        let f_h = Tensor::from_vec(
            Shape::new(2, c_h, 8, 8),
            (0..2 * c_h * 64).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let f_l = Tensor::from_vec(
            Shape::new(2, c_l, 4, 4),
            (0..2 * c_l * 16).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let fused = dga_fuse(&f_h, &f_l, &p, Mode::Infer, 5).unwrap();
        let plain = concat_channels(&[&f_h, &f_l.upsample_bilinear2().unwrap()]).unwrap();
        assert_eq!(fused.shape(), plain.shape());
        assert_eq!(fused.data(), plain.data());
    }

    #[test]
    fn dga_rejects_wrong_spatial_ratio() {
        let init = Init::new(3);
        let p = DgaParams::<f64>::init(&init, "t.dga2", 2, 2, 4);
        let f_h = Tensor::<f64>::zeros(Shape::new(1, 2, 8, 8));
        let f_l = Tensor::<f64>::zeros(Shape::new(1, 2, 8, 8));
        assert!(dga_fuse(&f_h, &f_l, &p, Mode::Infer, 0).is_err());
    }

    #[test]
    fn naive_self_attention_outputs_convex_row_mixes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(29);
        let (n, d) = (8, 3);
        let f: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut out = vec![0.0; n * d];
        naive_self_attention(&f, n, d, &mut out);
        for col in 0..d {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for row in 0..n {
                lo = lo.min(f[row * d + col]);
                hi = hi.max(f[row * d + col]);
            }
            for row in 0..n {
                let v = out[row * d + col];
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}
