//! Reverse-mode differentiation over the implicit op graph.
//!
//! Each recorded tensor keeps its parents and whatever forward-pass data its
//! backward rule needs (dropout masks, pooling argmaxes, saved batch-norm
//! statistics). `backward` walks the graph once in reverse topological order
//! and deposits gradients on every `requires_grad` leaf it reaches. The
//! graph is freed as soon as the loss tensor is dropped.

use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::ops::NormAxis;
use std::cell::Cell;
use std::collections::{HashMap, HashSet};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with gradient recording disabled on this thread. Ops executed
/// inside produce plain leaf tensors, so inference does not retain
/// intermediate activations.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) enum Node<T: Scalar> {
    Add(Tensor<T>, Tensor<T>),
    /// `x + bias` with `bias` shaped `(n, c, 1, 1)`, broadcast over `(h, w)`.
    AddBroadcastSpatial(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    Scale(Tensor<T>, T),
    Relu(Tensor<T>),
    Matmul(Tensor<T>, Tensor<T>),
    Transpose2d(Tensor<T>),
    Reshape(Tensor<T>),
    /// Stores the input; backward reads the op's own output.
    SoftmaxAxis(Tensor<T>, NormAxis),
    /// Fused double normalization `softmax_row(x - columnwise_logsumexp(x))`;
    /// `col_softmax` saves the column-stochastic matrix for the backward
    /// pass.
    DoubleNorm {
        x: Tensor<T>,
        col_softmax: Vec<T>,
    },
    /// `sums` holds the per-slice L1 mass of the input.
    L1NormalizeAxis {
        x: Tensor<T>,
        axis: NormAxis,
        sums: Vec<T>,
    },
    Conv2d {
        x: Tensor<T>,
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
        geom: ConvGeom,
    },
    MaxPool2 {
        x: Tensor<T>,
        /// Input-linear index of the winning element per output element.
        argmax: Vec<u32>,
    },
    Upsample2(Tensor<T>),
    BatchNorm {
        x: Tensor<T>,
        gamma: Tensor<T>,
        beta: Tensor<T>,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Dropout {
        x: Tensor<T>,
        /// Per-element multiplier: 0 or 1/(1-rate).
        mask: Vec<T>,
    },
    ConcatChannels(Vec<Tensor<T>>),
    SliceChannels {
        x: Tensor<T>,
        start: usize,
    },
    ConcatBatch(Vec<Tensor<T>>),
    SliceBatch {
        x: Tensor<T>,
        index: usize,
    },
    SumAll(Tensor<T>),
    MeanAll(Tensor<T>),
    GlobalAvgPool(Tensor<T>),
    /// Fused softmax cross-entropy; `grad_cache` is dLoss/dLogits for a unit
    /// upstream gradient, fixed at forward time (the kept-pixel selection is
    /// treated as constant).
    CrossEntropy {
        logits: Tensor<T>,
        grad_cache: Vec<T>,
    },
}

impl<T: Scalar> Node<T> {
    fn for_each_parent(&self, f: &mut dyn FnMut(&Tensor<T>)) {
        match self {
            Node::Add(a, b) | Node::AddBroadcastSpatial(a, b) | Node::Mul(a, b) | Node::Matmul(a, b) => {
                f(a);
                f(b);
            }
            Node::Scale(x, _)
            | Node::Relu(x)
            | Node::Transpose2d(x)
            | Node::Reshape(x)
            | Node::SoftmaxAxis(x, _)
            | Node::DoubleNorm { x, .. }
            | Node::L1NormalizeAxis { x, .. }
            | Node::MaxPool2 { x, .. }
            | Node::Upsample2(x)
            | Node::Dropout { x, .. }
            | Node::SliceChannels { x, .. }
            | Node::SliceBatch { x, .. }
            | Node::SumAll(x)
            | Node::MeanAll(x)
            | Node::GlobalAvgPool(x) => f(x),
            Node::Conv2d { x, weight, bias, .. } => {
                f(x);
                f(weight);
                if let Some(b) = bias {
                    f(b);
                }
            }
            Node::BatchNorm { x, gamma, beta, .. } => {
                f(x);
                f(gamma);
                f(beta);
            }
            Node::ConcatChannels(xs) | Node::ConcatBatch(xs) => {
                for x in xs {
                    f(x);
                }
            }
            Node::CrossEntropy { logits, .. } => f(logits),
        }
    }
}

struct GradSink<T: Scalar> {
    grads: HashMap<u64, Vec<T>>,
}

impl<T: Scalar> GradSink<T> {
    fn add(&mut self, t: &Tensor<T>, g: Vec<T>) {
        if !t.tracks_grad() {
            return;
        }
        debug_assert_eq!(g.len(), t.numel());
        self.grads
            .entry(t.id())
            .and_modify(|acc| {
                for (a, v) in acc.iter_mut().zip(g.iter()) {
                    *a += *v;
                }
            })
            .or_insert(g);
    }
}

impl<T: Scalar> Tensor<T> {
    /// Back-propagates from this scalar tensor, populating the gradient of
    /// every reachable `requires_grad` leaf. Fails on non-scalar tensors, on
    /// tensors with no recorded graph, and on repeated invocation for the
    /// same forward pass.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss { shape: self.shape() });
        }
        if self.node().is_none() {
            return Err(Error::DetachedGraph);
        }
        if self.mark_backward() {
            return Err(Error::BackwardTwice);
        }

        let order = topo_order(self);
        let mut sink = GradSink {
            grads: HashMap::new(),
        };
        sink.grads.insert(self.id(), vec![T::one()]);

        for t in order.iter().rev() {
            let Some(g) = sink.grads.remove(&t.id()) else {
                continue;
            };
            if let Some(node) = t.node() {
                node_backward(node, t.shape(), t.data(), &g, &mut sink);
            }
            if t.is_requires_grad() {
                t.set_grad(g);
            }
        }
        Ok(())
    }
}

/// Post-order DFS: every tensor appears after all of its parents, so the
/// reversed list visits consumers before producers.
fn topo_order<T: Scalar>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    // (tensor, parents, next parent index)
    let mut stack: Vec<(Tensor<T>, Vec<Tensor<T>>, usize)> = Vec::new();

    let parents_of = |t: &Tensor<T>| -> Vec<Tensor<T>> {
        let mut ps = Vec::new();
        if let Some(node) = t.node() {
            node.for_each_parent(&mut |p| {
                if p.tracks_grad() {
                    ps.push(p.clone());
                }
            });
        }
        ps
    };

    visited.insert(root.id());
    let ps = parents_of(root);
    stack.push((root.clone(), ps, 0));

    while let Some((t, ps, idx)) = stack.last_mut() {
        if *idx < ps.len() {
            let p = ps[*idx].clone();
            *idx += 1;
            if visited.insert(p.id()) {
                let pps = parents_of(&p);
                stack.push((p, pps, 0));
            }
        } else {
            order.push(t.clone());
            stack.pop();
        }
    }
    order
}

fn node_backward<T: Scalar>(
    node: &Node<T>,
    out_shape: Shape,
    out_data: &[T],
    g: &[T],
    sink: &mut GradSink<T>,
) {
    match node {
        Node::Add(a, b) => {
            sink.add(a, g.to_vec());
            sink.add(b, g.to_vec());
        }
        Node::AddBroadcastSpatial(x, bias) => {
            sink.add(x, g.to_vec());
            let hw = x.shape().hw();
            let mut gb = vec![T::zero(); bias.numel()];
            for (i, gb_i) in gb.iter_mut().enumerate() {
                let base = i * hw;
                let mut acc = T::zero();
                for v in &g[base..base + hw] {
                    acc += *v;
                }
                *gb_i = acc;
            }
            sink.add(bias, gb);
        }
        Node::Mul(a, b) => {
            let ga: Vec<T> = g.iter().zip(b.data()).map(|(&gv, &bv)| gv * bv).collect();
            let gb: Vec<T> = g.iter().zip(a.data()).map(|(&gv, &av)| gv * av).collect();
            sink.add(a, ga);
            sink.add(b, gb);
        }
        Node::Scale(x, k) => {
            sink.add(x, g.iter().map(|&gv| gv * *k).collect());
        }
        Node::Relu(x) => {
            let gx: Vec<T> = g
                .iter()
                .zip(x.data())
                .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                .collect();
            sink.add(x, gx);
        }
        Node::Matmul(a, b) => {
            let (n, k) = (a.shape().h, a.shape().w);
            let m = b.shape().w;
            if a.tracks_grad() {
                // ga = g . b^T
                let mut bt = vec![T::zero(); k * m];
                kernels::transpose(b.data(), k, m, &mut bt);
                let mut ga = vec![T::zero(); n * k];
                kernels::matmul_auto(g, &bt, n, m, k, &mut ga);
                sink.add(a, ga);
            }
            if b.tracks_grad() {
                // gb = a^T . g
                let mut at = vec![T::zero(); n * k];
                kernels::transpose(a.data(), n, k, &mut at);
                let mut gb = vec![T::zero(); k * m];
                kernels::matmul_auto(&at, g, k, n, m, &mut gb);
                sink.add(b, gb);
            }
        }
        Node::Transpose2d(x) => {
            let (r, c) = (out_shape.h, out_shape.w);
            let mut gx = vec![T::zero(); g.len()];
            kernels::transpose(g, r, c, &mut gx);
            sink.add(x, gx);
        }
        Node::Reshape(x) => {
            sink.add(x, g.to_vec());
        }
        Node::SoftmaxAxis(x, axis) => {
            // dx = y * (g - sum_slice(g * y))
            let (r, c) = (out_shape.h, out_shape.w);
            let y = out_data;
            let mut gx = vec![T::zero(); g.len()];
            match axis {
                NormAxis::Rows => {
                    for i in 0..r {
                        let y_row = &y[i * c..(i + 1) * c];
                        let g_row = &g[i * c..(i + 1) * c];
                        let mut dot = T::zero();
                        for (gv, yv) in g_row.iter().zip(y_row.iter()) {
                            dot += *gv * *yv;
                        }
                        for j in 0..c {
                            gx[i * c + j] = y_row[j] * (g_row[j] - dot);
                        }
                    }
                }
                NormAxis::Columns => {
                    for j in 0..c {
                        let mut dot = T::zero();
                        for i in 0..r {
                            dot += g[i * c + j] * y[i * c + j];
                        }
                        for i in 0..r {
                            gx[i * c + j] = y[i * c + j] * (g[i * c + j] - dot);
                        }
                    }
                }
            }
            sink.add(x, gx);
        }
        Node::DoubleNorm { x, col_softmax } => {
            // a = softmax_row(t), t_ij = x_ij - logsumexp_col_j(x):
            // g_t = a * (g - rowdot(g, a));  g_x = g_t - c * colsum(g_t)
            let (r, c) = (out_shape.h, out_shape.w);
            let a = out_data;
            let mut gt = vec![T::zero(); g.len()];
            for i in 0..r {
                let mut dot = T::zero();
                for j in 0..c {
                    dot += g[i * c + j] * a[i * c + j];
                }
                for j in 0..c {
                    gt[i * c + j] = a[i * c + j] * (g[i * c + j] - dot);
                }
            }
            let mut col_sums = vec![T::zero(); c];
            for i in 0..r {
                for j in 0..c {
                    col_sums[j] += gt[i * c + j];
                }
            }
            let mut gx = gt;
            for i in 0..r {
                for j in 0..c {
                    gx[i * c + j] = gx[i * c + j] - col_softmax[i * c + j] * col_sums[j];
                }
            }
            sink.add(x, gx);
        }
        Node::L1NormalizeAxis { x, axis, sums } => {
            // y_i = x_i / s  =>  dx_i = (g_i - sum_j g_j y_j) / s
            let (r, c) = (out_shape.h, out_shape.w);
            let y = out_data;
            let mut gx = vec![T::zero(); g.len()];
            match axis {
                NormAxis::Rows => {
                    for i in 0..r {
                        let s = sums[i];
                        let mut dot = T::zero();
                        for j in 0..c {
                            dot += g[i * c + j] * y[i * c + j];
                        }
                        for j in 0..c {
                            gx[i * c + j] = (g[i * c + j] - dot) / s;
                        }
                    }
                }
                NormAxis::Columns => {
                    for j in 0..c {
                        let s = sums[j];
                        let mut dot = T::zero();
                        for i in 0..r {
                            dot += g[i * c + j] * y[i * c + j];
                        }
                        for i in 0..r {
                            gx[i * c + j] = (g[i * c + j] - dot) / s;
                        }
                    }
                }
            }
            sink.add(x, gx);
        }
        Node::Conv2d {
            x,
            weight,
            bias,
            geom,
        } => {
            if x.tracks_grad() {
                let mut gx = vec![T::zero(); x.numel()];
                kernels::conv2d_input_grad_auto(g, weight.data(), geom, &mut gx);
                sink.add(x, gx);
            }
            if weight.tracks_grad() {
                let mut gw = vec![T::zero(); weight.numel()];
                kernels::conv2d_weight_grad_auto(x.data(), g, geom, &mut gw);
                sink.add(weight, gw);
            }
            if let Some(b) = bias {
                if b.tracks_grad() {
                    let out_plane = geom.out_h * geom.out_w;
                    let mut gb = vec![T::zero(); geom.c_out];
                    for ni in 0..geom.n {
                        for co in 0..geom.c_out {
                            let base = (ni * geom.c_out + co) * out_plane;
                            let mut acc = T::zero();
                            for v in &g[base..base + out_plane] {
                                acc += *v;
                            }
                            gb[co] += acc;
                        }
                    }
                    sink.add(b, gb);
                }
            }
        }
        Node::MaxPool2 { x, argmax } => {
            let mut gx = vec![T::zero(); x.numel()];
            for (o, &src) in argmax.iter().enumerate() {
                gx[src as usize] += g[o];
            }
            sink.add(x, gx);
        }
        Node::Upsample2(x) => {
            let s = x.shape();
            let mut gx = vec![T::zero(); x.numel()];
            let (wh, ww) = (
                upsample_weights(s.h, out_shape.h),
                upsample_weights(s.w, out_shape.w),
            );
            let plane_in = s.h * s.w;
            let plane_out = out_shape.h * out_shape.w;
            for p in 0..s.n * s.c {
                let gp = &g[p * plane_out..(p + 1) * plane_out];
                let xp = &mut gx[p * plane_in..(p + 1) * plane_in];
                for (oh, &(i0h, i1h, f_h)) in wh.iter().enumerate() {
                    let fh = T::from_f64(f_h);
                    for (ow, &(i0w, i1w, f_w)) in ww.iter().enumerate() {
                        let fw = T::from_f64(f_w);
                        let gv = gp[oh * out_shape.w + ow];
                        let one = T::one();
                        xp[i0h * s.w + i0w] += gv * (one - fh) * (one - fw);
                        xp[i0h * s.w + i1w] += gv * (one - fh) * fw;
                        xp[i1h * s.w + i0w] += gv * fh * (one - fw);
                        xp[i1h * s.w + i1w] += gv * fh * fw;
                    }
                }
            }
            sink.add(x, gx);
        }
        Node::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let s = x.shape();
            let hw = s.hw();
            let m = T::from_f64((s.n * hw) as f64);
            let c = s.c;
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for ni in 0..s.n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    for i in base..base + hw {
                        dgamma[ci] += g[i] * xhat[i];
                        dbeta[ci] += g[i];
                    }
                }
            }
            if x.tracks_grad() {
                let mut gx = vec![T::zero(); x.numel()];
                if *train {
                    // dx = gamma*inv_std * (g - mean(g) - xhat * mean(g*xhat))
                    for ci in 0..c {
                        let mean_g = dbeta[ci] / m;
                        let mean_gx = dgamma[ci] / m;
                        let coef = gamma.data()[ci] * inv_std[ci];
                        for ni in 0..s.n {
                            let base = (ni * c + ci) * hw;
                            for i in base..base + hw {
                                gx[i] = coef * (g[i] - mean_g - xhat[i] * mean_gx);
                            }
                        }
                    }
                } else {
                    for ci in 0..c {
                        let coef = gamma.data()[ci] * inv_std[ci];
                        for ni in 0..s.n {
                            let base = (ni * c + ci) * hw;
                            for i in base..base + hw {
                                gx[i] = coef * g[i];
                            }
                        }
                    }
                }
                sink.add(x, gx);
            }
            sink.add(gamma, dgamma);
            sink.add(beta, dbeta);
        }
        Node::Dropout { x, mask } => {
            let gx: Vec<T> = g.iter().zip(mask.iter()).map(|(&gv, &mv)| gv * mv).collect();
            sink.add(x, gx);
        }
        Node::ConcatChannels(xs) => {
            let hw = out_shape.hw();
            let n = out_shape.n;
            let total_c = out_shape.c;
            let mut c_off = 0;
            for x in xs {
                let xc = x.shape().c;
                let mut gx = vec![T::zero(); x.numel()];
                for ni in 0..n {
                    let src = (ni * total_c + c_off) * hw;
                    let dst = ni * xc * hw;
                    gx[dst..dst + xc * hw].copy_from_slice(&g[src..src + xc * hw]);
                }
                sink.add(x, gx);
                c_off += xc;
            }
        }
        Node::SliceChannels { x, start } => {
            let s = x.shape();
            let hw = s.hw();
            let out_c = out_shape.c;
            let mut gx = vec![T::zero(); x.numel()];
            for ni in 0..s.n {
                let dst = (ni * s.c + start) * hw;
                let src = ni * out_c * hw;
                gx[dst..dst + out_c * hw].copy_from_slice(&g[src..src + out_c * hw]);
            }
            sink.add(x, gx);
        }
        Node::ConcatBatch(xs) => {
            let mut off = 0;
            for x in xs {
                let len = x.numel();
                sink.add(x, g[off..off + len].to_vec());
                off += len;
            }
        }
        Node::SliceBatch { x, index } => {
            let per = x.shape().c * x.shape().hw();
            let mut gx = vec![T::zero(); x.numel()];
            gx[index * per..(index + 1) * per].copy_from_slice(g);
            sink.add(x, gx);
        }
        Node::SumAll(x) => {
            sink.add(x, vec![g[0]; x.numel()]);
        }
        Node::MeanAll(x) => {
            let scale = g[0] / T::from_f64(x.numel() as f64);
            sink.add(x, vec![scale; x.numel()]);
        }
        Node::GlobalAvgPool(x) => {
            let s = x.shape();
            let hw = s.hw();
            let inv = T::one() / T::from_f64(hw as f64);
            let mut gx = vec![T::zero(); x.numel()];
            for p in 0..s.n * s.c {
                let gv = g[p] * inv;
                for v in &mut gx[p * hw..(p + 1) * hw] {
                    *v = gv;
                }
            }
            sink.add(x, gx);
        }
        Node::CrossEntropy { logits, grad_cache } => {
            let gv = g[0];
            sink.add(logits, grad_cache.iter().map(|&c| c * gv).collect());
        }
    }
}

/// Half-pixel-center source weights for a x2 bilinear resize along one axis:
/// for each output index, the two source indices and the fractional weight of
/// the second one. Shared by the forward op and the backward scatter.
pub(crate) fn upsample_weights(in_size: usize, out_size: usize) -> Vec<(usize, usize, f64)> {
    (0..out_size)
        .map(|d| {
            let src = (d as f64 + 0.5) / 2.0 - 0.5;
            let src = src.clamp(0.0, (in_size - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_size - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::<f64>::from_vec(
            Shape::new(1, 2, 2, 2),
            vec![3.0, -1.0, 2.0, 0.5, 4.0, 4.0, -2.0, 1.0],
        )
        .unwrap()
        .requires_grad();
        let loss = x.sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 8]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, 2.0, 3.0])
            .unwrap()
            .requires_grad();
        let loss = x.mul(&x).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_twice_is_error() {
        let x = Tensor::<f64>::scalar(2.0).requires_grad();
        let loss = x.scale(3.0).unwrap();
        loss.backward().unwrap();
        assert!(matches!(loss.backward().unwrap_err(), Error::BackwardTwice));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2)).requires_grad();
        let y = x.scale(1.0).unwrap();
        assert!(matches!(
            y.backward().unwrap_err(),
            Error::NonScalarLoss { .. }
        ));
    }

    #[test]
    fn backward_rejects_detached_graph() {
        let x = Tensor::<f64>::scalar(1.0);
        assert!(matches!(x.backward().unwrap_err(), Error::DetachedGraph));
        // built entirely under no_grad: also detached
        let y = no_grad(|| {
            let x = Tensor::<f64>::scalar(1.0).requires_grad();
            x.scale(2.0).unwrap()
        });
        assert!(matches!(y.backward().unwrap_err(), Error::DetachedGraph));
    }

    #[test]
    fn no_grad_suppresses_recording() {
        let x = Tensor::<f64>::scalar(1.0).requires_grad();
        let y = no_grad(|| x.scale(2.0).unwrap());
        assert!(y.is_leaf());
        let z = x.scale(2.0).unwrap();
        assert!(!z.is_leaf());
    }

    #[test]
    fn shared_parent_accumulates_once_per_use() {
        // loss = sum(x + x) => grad = 2 everywhere
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, 5.0])
            .unwrap()
            .requires_grad();
        let loss = x.add(&x).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn upsample_weights_match_half_pixel_formula() {
        // input [1, 3] doubles to [1, 1.5, 2.5, 3]
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, 3.0]).unwrap();
        let y = x.upsample_bilinear2().unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 4));
        let row = &y.data()[..4];
        assert_eq!(row, &[1.0, 1.5, 2.5, 3.0]);
    }
}
