//! Low-level compute kernels.
//!
//! Each hot kernel exists in a sequential form and, with the `parallel`
//! feature (default), a rayon form that splits work over disjoint output
//! regions. The two forms perform the same per-element operations in the
//! same order, so their results are bit-identical; the `*_auto` dispatchers
//! pick the parallel form when the feature is enabled. The criterion bench
//! suite compares both forms directly.

use crate::tensor::Scalar;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Geometry of one conv2d application, shared by forward and both backward
/// kernels.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Output extent along one axis: `floor((in + 2p - d(k-1) - 1)/s) + 1`,
    /// or `None` when no output position fits.
    pub fn out_extent(input: usize, k: usize, stride: usize, pad: usize, dilation: usize) -> Option<usize> {
        let padded = input + 2 * pad;
        let eff = dilation * (k - 1) + 1;
        if padded < eff {
            return None;
        }
        Some((padded - eff) / stride + 1)
    }
}

/// Valid `ow` range so that `iw = ow*stride + off` lands inside `[0, w)`.
#[inline]
fn ow_range(w: usize, stride: usize, off: i64, out_w: usize) -> (usize, usize) {
    let s = stride as i64;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let hi_num = w as i64 - off;
    if hi_num <= 0 {
        return (0, 0);
    }
    let hi = (hi_num + s - 1) / s;
    let lo = (lo.max(0) as usize).min(out_w);
    let hi = (hi.max(0) as usize).min(out_w);
    (lo, hi.max(lo))
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

#[inline]
fn matmul_row<T: Scalar>(a_row: &[T], b: &[T], k: usize, m: usize, out_row: &mut [T]) {
    for (kk, &av) in a_row.iter().enumerate().take(k) {
        let b_row = &b[kk * m..(kk + 1) * m];
        for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
            *o += av * bv;
        }
    }
}

/// `out[n x m] = a[n x k] . b[k x m]`, row-major, `out` pre-zeroed.
pub fn matmul_seq<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    for i in 0..n {
        matmul_row(&a[i * k..(i + 1) * k], b, k, m, &mut out[i * m..(i + 1) * m]);
    }
}

#[cfg(feature = "parallel")]
pub fn matmul_par<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    out.par_chunks_mut(m)
        .enumerate()
        .for_each(|(i, out_row)| matmul_row(&a[i * k..(i + 1) * k], b, k, m, out_row));
}

pub fn matmul_auto<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize, out: &mut [T]) {
    #[cfg(feature = "parallel")]
    matmul_par(a, b, n, k, m, out);
    #[cfg(not(feature = "parallel"))]
    matmul_seq(a, b, n, k, m, out);
}

/// `out[c x r]` = transpose of `x[r x c]`.
pub fn transpose<T: Scalar>(x: &[T], r: usize, c: usize, out: &mut [T]) {
    debug_assert_eq!(x.len(), r * c);
    debug_assert_eq!(out.len(), r * c);
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
}

// ---------------------------------------------------------------------------
// conv2d forward
// ---------------------------------------------------------------------------

/// Accumulates one `(sample, out-channel)` plane. `x` is the sample's input
/// (`c_in*h*w`), `wgt` the output channel's filters (`c_in*k*k`).
fn conv_plane<T: Scalar>(x: &[T], wgt: &[T], g: &ConvGeom, out_plane: &mut [T]) {
    let (h, w, k) = (g.h, g.w, g.k);
    for ci in 0..g.c_in {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        let wc = &wgt[ci * k * k..(ci + 1) * k * k];
        for kh in 0..k {
            for kw in 0..k {
                let wv = wc[kh * k + kw];
                let off_w = (kw * g.dilation) as i64 - g.pad as i64;
                let (ow_lo, ow_hi) = ow_range(w, g.stride, off_w, g.out_w);
                if ow_lo >= ow_hi {
                    continue;
                }
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + kh * g.dilation) as i64 - g.pad as i64;
                    if ih < 0 || ih >= h as i64 {
                        continue;
                    }
                    let x_row = &xc[ih as usize * w..(ih as usize + 1) * w];
                    let out_row = &mut out_plane[oh * g.out_w..(oh + 1) * g.out_w];
                    let mut iw = (ow_lo * g.stride) as i64 + off_w;
                    if g.stride == 1 {
                        let iw0 = iw as usize;
                        let len = ow_hi - ow_lo;
                        let src = &x_row[iw0..iw0 + len];
                        let dst = &mut out_row[ow_lo..ow_hi];
                        for (o, &v) in dst.iter_mut().zip(src.iter()) {
                            *o += wv * v;
                        }
                    } else {
                        for ow in ow_lo..ow_hi {
                            out_row[ow] += wv * x_row[iw as usize];
                            iw += g.stride as i64;
                        }
                    }
                }
            }
        }
    }
}

/// Direct convolution, `out` pre-zeroed, laid out `(n, c_out, out_h, out_w)`.
pub fn conv2d_seq<T: Scalar>(x: &[T], wgt: &[T], g: &ConvGeom, out: &mut [T]) {
    let in_stride = g.c_in * g.h * g.w;
    let out_plane = g.out_h * g.out_w;
    let w_stride = g.c_in * g.k * g.k;
    for ni in 0..g.n {
        let xs = &x[ni * in_stride..(ni + 1) * in_stride];
        for co in 0..g.c_out {
            let dst = &mut out[(ni * g.c_out + co) * out_plane..(ni * g.c_out + co + 1) * out_plane];
            conv_plane(xs, &wgt[co * w_stride..(co + 1) * w_stride], g, dst);
        }
    }
}

#[cfg(feature = "parallel")]
pub fn conv2d_par<T: Scalar>(x: &[T], wgt: &[T], g: &ConvGeom, out: &mut [T]) {
    let in_stride = g.c_in * g.h * g.w;
    let out_plane = g.out_h * g.out_w;
    let w_stride = g.c_in * g.k * g.k;
    out.par_chunks_mut(out_plane)
        .enumerate()
        .for_each(|(idx, dst)| {
            let (ni, co) = (idx / g.c_out, idx % g.c_out);
            let xs = &x[ni * in_stride..(ni + 1) * in_stride];
            conv_plane(xs, &wgt[co * w_stride..(co + 1) * w_stride], g, dst);
        });
}

pub fn conv2d_auto<T: Scalar>(x: &[T], wgt: &[T], g: &ConvGeom, out: &mut [T]) {
    #[cfg(feature = "parallel")]
    conv2d_par(x, wgt, g, out);
    #[cfg(not(feature = "parallel"))]
    conv2d_seq(x, wgt, g, out);
}

// ---------------------------------------------------------------------------
// conv2d backward
// ---------------------------------------------------------------------------

/// Scatters one sample's output gradient back onto its input gradient.
fn conv_input_grad_sample<T: Scalar>(gout: &[T], wgt: &[T], g: &ConvGeom, gin: &mut [T]) {
    let (h, w, k) = (g.h, g.w, g.k);
    let out_plane = g.out_h * g.out_w;
    for co in 0..g.c_out {
        let go = &gout[co * out_plane..(co + 1) * out_plane];
        let wco = &wgt[co * g.c_in * k * k..(co + 1) * g.c_in * k * k];
        for ci in 0..g.c_in {
            let gc = &mut gin[ci * h * w..(ci + 1) * h * w];
            let wc = &wco[ci * k * k..(ci + 1) * k * k];
            for kh in 0..k {
                for kw in 0..k {
                    let wv = wc[kh * k + kw];
                    let off_w = (kw * g.dilation) as i64 - g.pad as i64;
                    let (ow_lo, ow_hi) = ow_range(w, g.stride, off_w, g.out_w);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + kh * g.dilation) as i64 - g.pad as i64;
                        if ih < 0 || ih >= h as i64 {
                            continue;
                        }
                        let g_row = &go[oh * g.out_w..(oh + 1) * g.out_w];
                        let x_row = &mut gc[ih as usize * w..(ih as usize + 1) * w];
                        let mut iw = (ow_lo * g.stride) as i64 + off_w;
                        for ow in ow_lo..ow_hi {
                            x_row[iw as usize] += wv * g_row[ow];
                            iw += g.stride as i64;
                        }
                    }
                }
            }
        }
    }
}

/// Gradient w.r.t. the convolution input, `gin` pre-zeroed.
pub fn conv2d_input_grad_seq<T: Scalar>(gout: &[T], wgt: &[T], g: &ConvGeom, gin: &mut [T]) {
    let in_stride = g.c_in * g.h * g.w;
    let gout_stride = g.c_out * g.out_h * g.out_w;
    for ni in 0..g.n {
        conv_input_grad_sample(
            &gout[ni * gout_stride..(ni + 1) * gout_stride],
            wgt,
            g,
            &mut gin[ni * in_stride..(ni + 1) * in_stride],
        );
    }
}

#[cfg(feature = "parallel")]
pub fn conv2d_input_grad_par<T: Scalar>(gout: &[T], wgt: &[T], g: &ConvGeom, gin: &mut [T]) {
    let in_stride = g.c_in * g.h * g.w;
    let gout_stride = g.c_out * g.out_h * g.out_w;
    gin.par_chunks_mut(in_stride)
        .enumerate()
        .for_each(|(ni, gin_s)| {
            conv_input_grad_sample(&gout[ni * gout_stride..(ni + 1) * gout_stride], wgt, g, gin_s);
        });
}

pub fn conv2d_input_grad_auto<T: Scalar>(gout: &[T], wgt: &[T], g: &ConvGeom, gin: &mut [T]) {
    #[cfg(feature = "parallel")]
    conv2d_input_grad_par(gout, wgt, g, gin);
    #[cfg(not(feature = "parallel"))]
    conv2d_input_grad_seq(gout, wgt, g, gin);
}

/// Accumulates the weight gradient for one output channel (`c_in*k*k` values).
fn conv_weight_grad_channel<T: Scalar>(x: &[T], gout: &[T], g: &ConvGeom, co: usize, gw_c: &mut [T]) {
    let (h, w, k) = (g.h, g.w, g.k);
    let in_stride = g.c_in * h * w;
    let out_plane = g.out_h * g.out_w;
    let gout_stride = g.c_out * out_plane;
    for ni in 0..g.n {
        let xs = &x[ni * in_stride..(ni + 1) * in_stride];
        let go = &gout[ni * gout_stride + co * out_plane..ni * gout_stride + (co + 1) * out_plane];
        for ci in 0..g.c_in {
            let xc = &xs[ci * h * w..(ci + 1) * h * w];
            for kh in 0..k {
                for kw in 0..k {
                    let off_w = (kw * g.dilation) as i64 - g.pad as i64;
                    let (ow_lo, ow_hi) = ow_range(w, g.stride, off_w, g.out_w);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    let mut acc = T::zero();
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + kh * g.dilation) as i64 - g.pad as i64;
                        if ih < 0 || ih >= h as i64 {
                            continue;
                        }
                        let x_row = &xc[ih as usize * w..(ih as usize + 1) * w];
                        let g_row = &go[oh * g.out_w..(oh + 1) * g.out_w];
                        let mut iw = (ow_lo * g.stride) as i64 + off_w;
                        for ow in ow_lo..ow_hi {
                            acc += x_row[iw as usize] * g_row[ow];
                            iw += g.stride as i64;
                        }
                    }
                    gw_c[ci * k * k + kh * k + kw] += acc;
                }
            }
        }
    }
}

/// Gradient w.r.t. the convolution weights, `gw` pre-zeroed,
/// laid out `(c_out, c_in, k, k)`.
pub fn conv2d_weight_grad_seq<T: Scalar>(x: &[T], gout: &[T], g: &ConvGeom, gw: &mut [T]) {
    let w_stride = g.c_in * g.k * g.k;
    for co in 0..g.c_out {
        conv_weight_grad_channel(x, gout, g, co, &mut gw[co * w_stride..(co + 1) * w_stride]);
    }
}

#[cfg(feature = "parallel")]
pub fn conv2d_weight_grad_par<T: Scalar>(x: &[T], gout: &[T], g: &ConvGeom, gw: &mut [T]) {
    let w_stride = g.c_in * g.k * g.k;
    gw.par_chunks_mut(w_stride)
        .enumerate()
        .for_each(|(co, gw_c)| conv_weight_grad_channel(x, gout, g, co, gw_c));
}

pub fn conv2d_weight_grad_auto<T: Scalar>(x: &[T], gout: &[T], g: &ConvGeom, gw: &mut [T]) {
    #[cfg(feature = "parallel")]
    conv2d_weight_grad_par(x, gout, g, gw);
    #[cfg(not(feature = "parallel"))]
    conv2d_weight_grad_seq(x, gout, g, gw);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ow_range_covers_interior() {
        // w=5, stride=1, off=-1 (pad 1, kw 0): iw = ow - 1 valid for ow in [1, 6) -> capped at out_w
        assert_eq!(ow_range(5, 1, -1, 5), (1, 5));
        // off=0: full range
        assert_eq!(ow_range(5, 1, 0, 5), (0, 5));
        // off=1: iw = ow + 1 < 5 -> ow < 4
        assert_eq!(ow_range(5, 1, 1, 5), (0, 4));
        // stride 2, off=-1: iw = 2*ow - 1 in [0,5) -> ow in [1, 3)
        assert_eq!(ow_range(5, 2, -1, 3), (1, 3));
    }

    #[test]
    fn matmul_small() {
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut out = [0.0f64; 4];
        matmul_seq(&a, &b, 2, 2, 2, &mut out);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_matches_sequential_bitwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (n, k, m) = (17, 23, 13);
        let a: Vec<f32> = (0..n * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..k * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut s = vec![0.0f32; n * m];
        let mut p = vec![0.0f32; n * m];
        matmul_seq(&a, &b, n, k, m, &mut s);
        matmul_par(&a, &b, n, k, m, &mut p);
        assert_eq!(s, p);
    }
}
