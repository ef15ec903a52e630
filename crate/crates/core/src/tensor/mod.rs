//! Dense 4-D tensors with reverse-mode automatic differentiation.
//!
//! Every value in the engine is a [`Tensor`]: a contiguous row-major
//! `(n, c, h, w)` array of `f32` or `f64`. Tensors are immutable once
//! constructed; operations return new tensors and, when gradient recording
//! is enabled, remember their parents so that [`Tensor::backward`] can
//! replay the graph in reverse. `f32` is the training/inference dtype,
//! `f64` exists for oracle and finite-difference verification.

pub(crate) mod autodiff;
mod ops;
mod serial;

pub use autodiff::no_grad;
pub use ops::{concat_batch, concat_channels, NormAxis};

use crate::error::{Error, Result};
use autodiff::Node;
use num_traits::{Float, NumAssignOps, NumCast};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

/// Element type of a tensor, as stored on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Dtype> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Scalar element trait implemented by `f32` and `f64`.
pub trait Scalar:
    Float + NumAssignOps + NumCast + Send + Sync + Default + fmt::Debug + fmt::Display + 'static
{
    const DTYPE: Dtype;
    const BYTES: usize;

    fn from_f64(v: f64) -> Self {
        NumCast::from(v).expect("f64 -> scalar cast")
    }

    fn as_f64(self) -> f64 {
        NumCast::from(self).expect("scalar -> f64 cast")
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Tensor shape `(n, c, h, w)`; every component is at least 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Shape {
        assert!(
            n >= 1 && c >= 1 && h >= 1 && w >= 1,
            "shape components must be >= 1, got ({n}, {c}, {h}, {w})"
        );
        Shape { n, c, h, w }
    }

    /// Shape of an `rows x cols` matrix, stored as `(1, 1, rows, cols)`.
    pub fn matrix(rows: usize, cols: usize) -> Shape {
        Shape::new(1, 1, rows, cols)
    }

    pub fn scalar() -> Shape {
        Shape::new(1, 1, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Spatial slice length `h * w`.
    pub fn hw(&self) -> usize {
        self.h * self.w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(n={}, c={}, h={}, w={})", self.n, self.c, self.h, self.w)
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

pub(crate) struct Inner<T: Scalar> {
    id: u64,
    shape: Shape,
    data: Vec<T>,
    node: Option<Node<T>>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    backward_done: AtomicBool,
}

/// Cheaply cloneable handle to an immutable 4-D array.
///
/// Cloning shares the underlying storage. Gradient recording keeps parent
/// handles alive inside the result, forming the tape that `backward` walks.
pub struct Tensor<T: Scalar> {
    inner: Arc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.inner.requires_grad)
            .field("recorded", &self.inner.node.is_some())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    fn from_inner(inner: Inner<T>) -> Tensor<T> {
        Tensor {
            inner: Arc::new(inner),
        }
    }

    fn leaf_inner(shape: Shape, data: Vec<T>, requires_grad: bool) -> Inner<T> {
        Inner {
            id: next_id(),
            shape,
            data,
            node: None,
            requires_grad,
            grad: Mutex::new(None),
            backward_done: AtomicBool::new(false),
        }
    }

    /// Leaf tensor from raw row-major data.
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Tensor<T>> {
        if data.len() != shape.numel() {
            return Err(Error::InvalidConfig(format!(
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.numel()
            )));
        }
        Ok(Tensor::from_inner(Tensor::leaf_inner(shape, data, false)))
    }

    pub fn zeros(shape: Shape) -> Tensor<T> {
        Tensor::from_inner(Tensor::leaf_inner(shape, vec![T::zero(); shape.numel()], false))
    }

    pub fn full(shape: Shape, value: T) -> Tensor<T> {
        Tensor::from_inner(Tensor::leaf_inner(shape, vec![value; shape.numel()], false))
    }

    pub fn scalar(value: T) -> Tensor<T> {
        Tensor::full(Shape::scalar(), value)
    }

    /// Marks this leaf as a trainable parameter. Consumes and re-wraps so the
    /// flag is fixed at construction time.
    pub fn requires_grad(self) -> Tensor<T> {
        assert!(
            self.inner.node.is_none(),
            "requires_grad can only be set on leaf tensors"
        );
        match Arc::try_unwrap(self.inner) {
            Ok(mut inner) => {
                inner.requires_grad = true;
                Tensor::from_inner(inner)
            }
            Err(inner) => Tensor::from_inner(Tensor::leaf_inner(
                inner.shape,
                inner.data.clone(),
                true,
            )),
        }
    }

    /// Output of a recorded operation. `node` is `Some` only when gradient
    /// recording applies. In debug builds every op output is scanned for
    /// non-finite values so divergence is caught at the op boundary.
    pub(crate) fn op_output(
        op: &'static str,
        shape: Shape,
        data: Vec<T>,
        node: Option<Node<T>>,
    ) -> Result<Tensor<T>> {
        debug_assert_eq!(data.len(), shape.numel());
        #[cfg(debug_assertions)]
        {
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op });
            }
        }
        #[cfg(not(debug_assertions))]
        let _ = op;
        Ok(Tensor::from_inner(Inner {
            id: next_id(),
            shape,
            data,
            node,
            requires_grad: false,
            grad: Mutex::new(None),
            backward_done: AtomicBool::new(false),
        }))
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> Shape {
        self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.numel()
    }

    pub fn dtype(&self) -> Dtype {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() requires a single-element tensor");
        self.inner.data[0]
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    pub fn is_requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn tracks_grad(&self) -> bool {
        self.inner.requires_grad || self.inner.node.is_some()
    }

    pub(crate) fn node(&self) -> Option<&Node<T>> {
        self.inner.node.as_ref()
    }

    pub(crate) fn set_grad(&self, grad: Vec<T>) {
        *self.inner.grad.lock().unwrap() = Some(grad);
    }

    pub(crate) fn mark_backward(&self) -> bool {
        self.inner.backward_done.swap(true, Ordering::SeqCst)
    }

    /// Gradient populated by the latest `backward`, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.lock().unwrap().clone()
    }

    /// Removes and returns the stored gradient.
    pub fn take_grad(&self) -> Option<Vec<T>> {
        self.inner.grad.lock().unwrap().take()
    }

    /// Mutable access to a leaf tensor's storage (used by the optimizer and
    /// by tests that poke parameters). Copies on write if the storage is
    /// still shared with a live graph.
    pub fn data_mut(&mut self) -> &mut [T] {
        assert!(
            self.inner.node.is_none(),
            "in-place mutation is only valid on leaf tensors"
        );
        if Arc::get_mut(&mut self.inner).is_none() {
            let fresh = Tensor::leaf_inner(
                self.inner.shape,
                self.inner.data.clone(),
                self.inner.requires_grad,
            );
            self.inner = Arc::new(fresh);
        }
        &mut Arc::get_mut(&mut self.inner)
            .expect("unique after copy-on-write")
            .data
    }

    /// A leaf copy of this tensor's values, detached from any graph.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::from_inner(Tensor::leaf_inner(
            self.inner.shape,
            self.inner.data.clone(),
            false,
        ))
    }

    /// Converts elements to another scalar type (used to move between the
    /// f32 production path and the f64 verification path).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self
            .inner
            .data
            .iter()
            .map(|v| U::from_f64(v.as_f64()))
            .collect();
        let mut t = Tensor::from_vec(self.shape(), data).expect("same shape");
        if self.inner.requires_grad {
            t = t.requires_grad();
        }
        t
    }
}
