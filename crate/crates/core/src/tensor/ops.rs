//! Differentiable tensor operations.
//!
//! Every op validates its preconditions, computes the forward value, and —
//! when gradient recording is enabled and an input participates in a graph —
//! attaches the backward rule. Matrix ops treat a tensor shaped
//! `(1, 1, r, c)` as an `r x c` row-major matrix.

use super::autodiff::{grad_enabled, upsample_weights, Node};
use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};
use crate::kernels;

/// Which slices of a matrix a normalization runs over.
///
/// `Columns` normalizes each column (the sum over the row index of any
/// column becomes 1); `Rows` normalizes each row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormAxis {
    Columns,
    Rows,
}

impl NormAxis {
    fn name(self) -> &'static str {
        match self {
            NormAxis::Columns => "column",
            NormAxis::Rows => "row",
        }
    }
}

fn matrix_dims<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::NotAMatrix { op, shape: s });
    }
    Ok((s.h, s.w))
}

fn record<T: Scalar>(inputs: &[&Tensor<T>]) -> bool {
    grad_enabled() && inputs.iter().any(|t| t.tracks_grad())
}

impl<T: Scalar> Tensor<T> {
    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a + b)
            .collect();
        let node = record(&[self, other]).then(|| Node::Add(self.clone(), other.clone()));
        Tensor::op_output("add", self.shape(), data, node)
    }

    /// `self + bias` where `bias` is `(n, c, 1, 1)`, broadcast over `(h, w)`.
    pub fn add_broadcast_spatial(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.shape();
        let b = bias.shape();
        if b.n != s.n || b.c != s.c || b.h != 1 || b.w != 1 {
            return Err(Error::ShapeMismatch {
                op: "add_broadcast_spatial",
                lhs: s,
                rhs: b,
            });
        }
        let hw = s.hw();
        let mut data = self.data().to_vec();
        for (i, &bv) in bias.data().iter().enumerate() {
            for v in &mut data[i * hw..(i + 1) * hw] {
                *v += bv;
            }
        }
        let node =
            record(&[self, bias]).then(|| Node::AddBroadcastSpatial(self.clone(), bias.clone()));
        Tensor::op_output("add_broadcast_spatial", s, data, node)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a * b)
            .collect();
        let node = record(&[self, other]).then(|| Node::Mul(self.clone(), other.clone()));
        Tensor::op_output("mul", self.shape(), data, node)
    }

    pub fn scale(&self, k: T) -> Result<Tensor<T>> {
        let data = self.data().iter().map(|&v| v * k).collect();
        let node = record(&[self]).then(|| Node::Scale(self.clone(), k));
        Tensor::op_output("scale", self.shape(), data, node)
    }

    pub fn relu(&self) -> Result<Tensor<T>> {
        let data = self
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let node = record(&[self]).then(|| Node::Relu(self.clone()));
        Tensor::op_output("relu", self.shape(), data, node)
    }

    /// Matrix product of two tensors viewed as matrices.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, k) = matrix_dims(self, "matmul")?;
        let (k2, m) = matrix_dims(other, "matmul")?;
        if k != k2 {
            return Err(Error::MatmulDims {
                a_rows: n,
                a_cols: k,
                b_rows: k2,
                b_cols: m,
            });
        }
        let mut data = vec![T::zero(); n * m];
        kernels::matmul_auto(self.data(), other.data(), n, k, m, &mut data);
        let node = record(&[self, other]).then(|| Node::Matmul(self.clone(), other.clone()));
        Tensor::op_output("matmul", Shape::matrix(n, m), data, node)
    }

    pub fn transpose2d(&self) -> Result<Tensor<T>> {
        let (r, c) = matrix_dims(self, "transpose2d")?;
        let mut data = vec![T::zero(); r * c];
        kernels::transpose(self.data(), r, c, &mut data);
        let node = record(&[self]).then(|| Node::Transpose2d(self.clone()));
        Tensor::op_output("transpose2d", Shape::matrix(c, r), data, node)
    }

    /// Reinterprets the same row-major data under a new shape.
    pub fn reshape(&self, shape: Shape) -> Result<Tensor<T>> {
        if shape.numel() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(),
                rhs: shape,
            });
        }
        let node = record(&[self]).then(|| Node::Reshape(self.clone()));
        Tensor::op_output("reshape", shape, self.data().to_vec(), node)
    }

    /// Numerically stable softmax along the given axis of a matrix: the
    /// maximum of each slice is subtracted before exponentiation. Slices sum
    /// to 1 in the output. Non-finite input is rejected.
    pub fn softmax_axis(&self, axis: NormAxis) -> Result<Tensor<T>> {
        let (r, c) = matrix_dims(self, "softmax_axis")?;
        let x = self.data();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "softmax_axis" });
        }
        let mut data = vec![T::zero(); r * c];
        match axis {
            NormAxis::Rows => {
                for i in 0..r {
                    softmax_slice(&x[i * c..(i + 1) * c], 1, &mut data[i * c..(i + 1) * c]);
                }
            }
            NormAxis::Columns => {
                for j in 0..c {
                    softmax_slice(&x[j..], c, &mut data[j..]);
                }
            }
        }
        let node = record(&[self]).then(|| Node::SoftmaxAxis(self.clone(), axis));
        Tensor::op_output("softmax_axis", self.shape(), data, node)
    }

    /// Divides each slice along the axis by its sum. Entries must be
    /// nonnegative; a zero-sum slice is an error naming the slice index.
    pub fn l1_normalize_axis(&self, axis: NormAxis) -> Result<Tensor<T>> {
        let (r, c) = matrix_dims(self, "l1_normalize_axis")?;
        let x = self.data();
        debug_assert!(
            x.iter().all(|v| *v >= T::zero()),
            "l1_normalize_axis expects nonnegative entries"
        );
        let (slices, len, stride, step) = match axis {
            NormAxis::Rows => (r, c, c, 1),
            NormAxis::Columns => (c, r, 1, c),
        };
        let mut sums = vec![T::zero(); slices];
        for (si, sum) in sums.iter_mut().enumerate() {
            let base = si * stride;
            for i in 0..len {
                *sum += x[base + i * step];
            }
            if !(*sum > T::zero()) {
                return Err(Error::ZeroSumSlice {
                    axis: axis.name(),
                    index: si,
                });
            }
        }
        let mut data = vec![T::zero(); r * c];
        for (si, &sum) in sums.iter().enumerate() {
            let base = si * stride;
            for i in 0..len {
                data[base + i * step] = x[base + i * step] / sum;
            }
        }
        let node = record(&[self]).then(|| Node::L1NormalizeAxis {
            x: self.clone(),
            axis,
            sums,
        });
        Tensor::op_output("l1_normalize_axis", self.shape(), data, node)
    }

    /// Channels `range.start..range.end` of each sample, bit-preserved.
    pub fn slice_channels(&self, range: std::ops::Range<usize>) -> Result<Tensor<T>> {
        let s = self.shape();
        if range.start >= range.end || range.end > s.c {
            return Err(Error::InvalidConfig(format!(
                "slice_channels {range:?} out of bounds for {s}"
            )));
        }
        let hw = s.hw();
        let out_c = range.end - range.start;
        let mut data = Vec::with_capacity(s.n * out_c * hw);
        for ni in 0..s.n {
            let base = (ni * s.c + range.start) * hw;
            data.extend_from_slice(&self.data()[base..base + out_c * hw]);
        }
        let node = record(&[self]).then(|| Node::SliceChannels {
            x: self.clone(),
            start: range.start,
        });
        Tensor::op_output("slice_channels", Shape::new(s.n, out_c, s.h, s.w), data, node)
    }

    /// Sample `index` of the batch, shaped `(1, c, h, w)`.
    pub fn slice_batch(&self, index: usize) -> Result<Tensor<T>> {
        let s = self.shape();
        if index >= s.n {
            return Err(Error::InvalidConfig(format!(
                "slice_batch index {index} out of bounds for {s}"
            )));
        }
        let per = s.c * s.hw();
        let data = self.data()[index * per..(index + 1) * per].to_vec();
        let node = record(&[self]).then(|| Node::SliceBatch {
            x: self.clone(),
            index,
        });
        Tensor::op_output("slice_batch", Shape::new(1, s.c, s.h, s.w), data, node)
    }

    pub fn sum_all(&self) -> Result<Tensor<T>> {
        let mut acc = T::zero();
        for &v in self.data() {
            acc += v;
        }
        let node = record(&[self]).then(|| Node::SumAll(self.clone()));
        Tensor::op_output("sum_all", Shape::scalar(), vec![acc], node)
    }

    pub fn mean_all(&self) -> Result<Tensor<T>> {
        let mut acc = T::zero();
        for &v in self.data() {
            acc += v;
        }
        let mean = acc / T::from_f64(self.numel() as f64);
        let node = record(&[self]).then(|| Node::MeanAll(self.clone()));
        Tensor::op_output("mean_all", Shape::scalar(), vec![mean], node)
    }

    /// Mean over `(h, w)` per `(n, c)`, shaped `(n, c, 1, 1)`.
    pub fn global_avg_pool(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        let hw = s.hw();
        let inv = T::one() / T::from_f64(hw as f64);
        let mut data = Vec::with_capacity(s.n * s.c);
        for p in 0..s.n * s.c {
            let mut acc = T::zero();
            for &v in &self.data()[p * hw..(p + 1) * hw] {
                acc += v;
            }
            data.push(acc * inv);
        }
        let node = record(&[self]).then(|| Node::GlobalAvgPool(self.clone()));
        Tensor::op_output("global_avg_pool", Shape::new(s.n, s.c, 1, 1), data, node)
    }

    /// Doubles both spatial dims with half-pixel-center bilinear sampling:
    /// source coordinate `(d + 0.5)/2 - 0.5`, clamped to `[0, size-1]`.
    pub fn upsample_bilinear2(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        let (oh, ow) = (s.h * 2, s.w * 2);
        let wh = upsample_weights(s.h, oh);
        let ww = upsample_weights(s.w, ow);
        let plane_in = s.hw();
        let plane_out = oh * ow;
        let mut data = vec![T::zero(); s.n * s.c * plane_out];
        for p in 0..s.n * s.c {
            let xp = &self.data()[p * plane_in..(p + 1) * plane_in];
            let dst = &mut data[p * plane_out..(p + 1) * plane_out];
            for (di, &(i0h, i1h, f_h)) in wh.iter().enumerate() {
                let fh = T::from_f64(f_h);
                for (dj, &(i0w, i1w, f_w)) in ww.iter().enumerate() {
                    let fw = T::from_f64(f_w);
                    let one = T::one();
                    let v = xp[i0h * s.w + i0w] * (one - fh) * (one - fw)
                        + xp[i0h * s.w + i1w] * (one - fh) * fw
                        + xp[i1h * s.w + i0w] * fh * (one - fw)
                        + xp[i1h * s.w + i1w] * fh * fw;
                    dst[di * ow + dj] = v;
                }
            }
        }
        let node = record(&[self]).then(|| Node::Upsample2(self.clone()));
        Tensor::op_output("upsample_bilinear2", Shape::new(s.n, s.c, oh, ow), data, node)
    }
}

fn softmax_slice<T: Scalar>(x: &[T], step: usize, out: &mut [T]) {
    let len = (x.len() + step - 1) / step;
    let mut max = x[0];
    for i in 1..len {
        let v = x[i * step];
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for i in 0..len {
        let e = (x[i * step] - max).exp();
        out[i * step] = e;
        sum += e;
    }
    for i in 0..len {
        out[i * step] = out[i * step] / sum;
    }
}

/// Concatenates along the channel axis; all inputs must share `(n, h, w)`.
/// Channel blocks appear in argument order.
pub fn concat_channels<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    assert!(!xs.is_empty(), "concat_channels needs at least one input");
    let first = xs[0].shape();
    let mut total_c = 0;
    for x in xs {
        let s = x.shape();
        if s.n != first.n || s.h != first.h || s.w != first.w {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: first,
                rhs: s,
            });
        }
        total_c += s.c;
    }
    let hw = first.hw();
    let mut data = Vec::with_capacity(first.n * total_c * hw);
    for ni in 0..first.n {
        for x in xs {
            let c = x.shape().c;
            let base = ni * c * hw;
            data.extend_from_slice(&x.data()[base..base + c * hw]);
        }
    }
    let node = (grad_enabled() && xs.iter().any(|t| t.tracks_grad()))
        .then(|| Node::ConcatChannels(xs.iter().map(|t| (*t).clone()).collect()));
    Tensor::op_output(
        "concat_channels",
        Shape::new(first.n, total_c, first.h, first.w),
        data,
        node,
    )
}

/// Stacks single-sample tensors along the batch axis.
pub fn concat_batch<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    assert!(!xs.is_empty(), "concat_batch needs at least one input");
    let first = xs[0].shape();
    let mut total_n = 0;
    for x in xs {
        let s = x.shape();
        if s.c != first.c || s.h != first.h || s.w != first.w {
            return Err(Error::ShapeMismatch {
                op: "concat_batch",
                lhs: first,
                rhs: s,
            });
        }
        total_n += s.n;
    }
    let mut data = Vec::with_capacity(total_n * first.c * first.hw());
    for x in xs {
        data.extend_from_slice(x.data());
    }
    let node = (grad_enabled() && xs.iter().any(|t| t.tracks_grad()))
        .then(|| Node::ConcatBatch(xs.iter().map(|t| (*t).clone()).collect()));
    Tensor::op_output(
        "concat_batch",
        Shape::new(total_n, first.c, first.h, first.w),
        data,
        node,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};

    fn matrix(r: usize, c: usize, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(Shape::matrix(r, c), data).unwrap()
    }

    /// Independent triple-loop matrix product.
    fn matmul_oracle(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * m + j];
                }
                out[i * m + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_case() {
        let eye = matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let b = matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(eye.matmul(&b).unwrap().data(), b.data());
    }

    #[test]
    fn matmul_projector_row() {
        let p = matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]);
        let b = matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]);
        assert_eq!(p.matmul(&b).unwrap().data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let want = matmul_oracle(&a, &b, 3, 4, 2);
        let got = matrix(3, 4, a).matmul(&matrix(4, 2, b)).unwrap();
        for (g, w) in got.data().iter().zip(want.iter()) {
            assert!((g - w).abs() <= 1e-6 * w.abs().max(1.0));
        }
    }

    #[test]
    fn matmul_dimension_mismatch_names_both_shapes() {
        let a = matrix(2, 3, vec![0.0; 6]);
        let b = matrix(2, 2, vec![0.0; 4]);
        let err = a.matmul(&b).unwrap_err();
        assert!(matches!(err, Error::MatmulDims { a_cols: 3, b_rows: 2, .. }));
    }

    #[test]
    fn matmul_identity_association_bitwise() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let a: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eye = matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let a = matrix(3, 3, a);
        let b = matrix(3, 3, b);
        let left = a.matmul(&eye).unwrap().matmul(&b).unwrap();
        let right = a.matmul(&eye.matmul(&b).unwrap()).unwrap();
        assert_eq!(left.data(), right.data());
    }

    #[test]
    fn softmax_all_zero_columns() {
        let x = matrix(2, 2, vec![0.0; 4]);
        let y = x.softmax_axis(NormAxis::Columns).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn softmax_column_hand_value() {
        let ln2 = 2.0f64.ln();
        let x = matrix(2, 2, vec![0.0, ln2, 0.0, 0.0]);
        let y = x.softmax_axis(NormAxis::Columns).unwrap();
        let want = [0.5, 2.0 / 3.0, 0.5, 1.0 / 3.0];
        for (g, w) in y.data().iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn softmax_single_element() {
        let x = matrix(1, 1, vec![42.0]);
        assert_eq!(x.softmax_axis(NormAxis::Rows).unwrap().data(), &[1.0]);
    }

    #[test]
    fn softmax_rejects_nan() {
        let x = matrix(1, 2, vec![f64::NAN, 0.0]);
        assert!(matches!(
            x.softmax_axis(NormAxis::Columns).unwrap_err(),
            Error::NonFinite { .. }
        ));
    }

    #[test]
    fn softmax_stable_at_large_magnitudes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let r = rng.random_range(1..=6);
            let c = rng.random_range(1..=6);
            let data: Vec<f64> = (0..r * c).map(|_| rng.random_range(-1e4..1e4)).collect();
            let y = matrix(r, c, data).softmax_axis(NormAxis::Rows).unwrap();
            for i in 0..r {
                let sum: f64 = y.data()[i * c..(i + 1) * c].iter().sum();
                assert!((sum - 1.0).abs() <= 1e-6, "row sum {sum}");
            }
        }
    }

    #[test]
    fn l1_normalize_hand_values() {
        let y = matrix(1, 2, vec![0.5, 2.0 / 3.0])
            .l1_normalize_axis(NormAxis::Rows)
            .unwrap();
        assert!((y.data()[0] - 3.0 / 7.0).abs() < 1e-12);
        assert!((y.data()[1] - 4.0 / 7.0).abs() < 1e-12);

        let unchanged = matrix(1, 3, vec![1.0, 0.0, 0.0])
            .l1_normalize_axis(NormAxis::Rows)
            .unwrap();
        assert_eq!(unchanged.data(), &[1.0, 0.0, 0.0]);

        let halves = matrix(1, 2, vec![2.0, 2.0])
            .l1_normalize_axis(NormAxis::Rows)
            .unwrap();
        assert_eq!(halves.data(), &[0.5, 0.5]);
    }

    #[test]
    fn l1_normalize_zero_sum_slice_reports_index() {
        let x = matrix(3, 2, vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        match x.l1_normalize_axis(NormAxis::Rows).unwrap_err() {
            Error::ZeroSumSlice { index, .. } => assert_eq!(index, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn concat_channel_blocks_in_argument_order() {
        let a = Tensor::<f64>::from_vec(Shape::new(1, 2, 2, 2), (0..8).map(f64::from).collect())
            .unwrap();
        let b = Tensor::<f64>::from_vec(
            Shape::new(1, 3, 2, 2),
            (100..112).map(f64::from).collect(),
        )
        .unwrap();
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), Shape::new(1, 5, 2, 2));
        assert_eq!(&cat.data()[..8], a.data());
        assert_eq!(&cat.data()[8..], b.data());

        // channel-slice recovers each input bit-exactly
        assert_eq!(cat.slice_channels(0..2).unwrap().data(), a.data());
        assert_eq!(cat.slice_channels(2..5).unwrap().data(), b.data());
    }

    #[test]
    fn concat_single_input_is_identity() {
        let a = Tensor::<f64>::from_vec(Shape::new(2, 3, 1, 2), (0..12).map(f64::from).collect())
            .unwrap();
        let cat = concat_channels(&[&a]).unwrap();
        assert_eq!(cat.shape(), a.shape());
        assert_eq!(cat.data(), a.data());
    }

    #[test]
    fn concat_fig2_large_fusion_widths() {
        let f_h = Tensor::<f32>::zeros(Shape::new(1, 128, 128, 256));
        let f_l = Tensor::<f32>::zeros(Shape::new(1, 512, 128, 256));
        let cat = concat_channels(&[&f_h, &f_l]).unwrap();
        assert_eq!(cat.shape(), Shape::new(1, 640, 128, 256));
    }

    #[test]
    fn concat_spatial_mismatch_is_error() {
        let a = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2));
        let b = Tensor::<f64>::zeros(Shape::new(1, 1, 4, 4));
        assert!(matches!(
            concat_channels(&[&a, &b]).unwrap_err(),
            Error::ShapeMismatch { .. }
        ));
    }

    #[test]
    fn transpose_reshape_round_trip_is_bit_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::from_vec(
            Shape::new(1, 3, 4, 5),
            (0..60).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let m = crate::attention::to_pixel_matrix(&x).unwrap();
        let back = crate::attention::from_pixel_matrix(&m, 4, 5).unwrap();
        assert_eq!(back.shape(), x.shape());
        assert_eq!(back.data(), x.data());
    }
}
