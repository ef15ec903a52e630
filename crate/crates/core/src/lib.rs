//! BiDGANet: a two-branch real-time semantic segmentation network built on
//! a self-contained tensor/autodiff engine.
//!
//! The crate provides the full stack needed to construct, train at toy
//! scale, evaluate, and latency-benchmark the network: dense 4-D tensors
//! with reverse-mode differentiation ([`tensor`]), the neural primitives
//! ([`nn`]), the guided-attention fusion blocks ([`attention`]), residual
//! U-blocks ([`rsu`]), network assembly and checkpoints ([`net`]), the
//! SGD/poly/OHEM training engine ([`train`]), dataset ingestion and metrics
//! ([`data`], [`metrics`]), and the timing harness ([`bench`]).

pub mod bench;
pub mod error;
pub mod kernels;
pub mod nn;
pub mod rng;
pub mod tensor;

pub mod attention;
pub mod data;
pub mod metrics;
pub mod net;
pub mod rsu;
pub mod selfcheck;
pub mod train;

pub use error::{Error, Result};
pub use nn::Mode;
pub use tensor::{concat_batch, concat_channels, no_grad, Dtype, NormAxis, Scalar, Shape, Tensor};
