//! Crate-wide error type.
//!
//! Shape and dimension problems are reported with enough context to find the
//! offending call site; numeric failures (NaN at an op boundary, divergent
//! loss) are kept distinct so callers can map them to a dedicated exit code.

use crate::tensor::Shape;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },

    #[error("matmul dimension mismatch: {a_rows}x{a_cols} . {b_rows}x{b_cols}")]
    MatmulDims {
        a_rows: usize,
        a_cols: usize,
        b_rows: usize,
        b_cols: usize,
    },

    #[error("{op}: tensor {shape} cannot be viewed as a matrix (need n=1, c=1)")]
    NotAMatrix { op: &'static str, shape: Shape },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("l1_normalize_axis: slice {index} along {axis} has zero sum")]
    ZeroSumSlice { axis: &'static str, index: usize },

    #[error("{op}: spatial dims ({h}, {w}) must be even")]
    OddSpatial { op: &'static str, h: usize, w: usize },

    #[error("conv2d: kernel size {k} must be odd")]
    EvenKernel { k: usize },

    #[error("conv2d: input {input} incompatible with weight {weight}")]
    ConvChannelMismatch { input: Shape, weight: Shape },

    #[error("conv2d: empty output for input {h}x{w}, kernel {k}, stride {stride}, pad {pad}, dilation {dilation}")]
    EmptyConvOutput {
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
    },

    #[error("{context}: spatial dims ({h}, {w}) not divisible by {required}")]
    Divisibility {
        context: String,
        h: usize,
        w: usize,
        required: usize,
    },

    #[error("backward: loss must be scalar, got {shape}")]
    NonScalarLoss { shape: Shape },

    #[error("backward: called twice on the same forward pass")]
    BackwardTwice,

    #[error("backward: tensor is detached from any recorded graph")]
    DetachedGraph,

    #[error("dropout rate {rate} must lie in [0, 1)")]
    InvalidDropoutRate { rate: f64 },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u8, classes: usize },

    #[error("training aborted: non-finite loss at iteration {iter}")]
    NumericAbort { iter: usize },

    #[error("lr_at: iteration {iter} outside [0, {total}]")]
    IterOutOfRange { iter: usize, total: usize },

    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    #[error("{path}: {reason}")]
    Format { path: String, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
