//! Residual U-blocks.
//!
//! An RSU-L block wraps an L-stage U-shaped encoder/decoder between an entry
//! convolution and a residual sum, preserving spatial size end-to-end:
//!
//! * entry conv `c_in -> c_out` (3x3, pad 1, BN + ReLU);
//! * encoder stage 1 conv `c_out -> m`; stages 2..L-1 are maxpool then conv
//!   `m -> m`; the bottom stage L is a dilated conv (dilation 2, pad 2,
//!   no pooling);
//! * the decoder mirrors the encoder: each stage concatenates the upsampled
//!   deeper output with the matching encoder skip and convolves `2m -> m`
//!   (`2m -> c_out` at the final stage);
//! * output = entry + decoder result.
//!
//! Pooling saturates once a spatial dim reaches 1: the pool/upsample pair of
//! that depth is skipped so small inputs (e.g. a 2x2 map inside an RSU-4)
//! remain usable; otherwise the input must be divisible by `2^(L-2)`.

use crate::error::{Error, Result};
use crate::nn::{maxpool2, BnVisitor, ConvBnRelu, Init, Mode, ParamVisitor, ParamVisitorMut};
use crate::tensor::{concat_channels, Scalar, Tensor};

/// Block parameters: height `l` in 4..=7, input / internal / output channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RsuConfig {
    pub l: usize,
    pub c_in: usize,
    pub m: usize,
    pub c_out: usize,
}

impl RsuConfig {
    pub fn new(l: usize, c_in: usize, m: usize, c_out: usize) -> Result<RsuConfig> {
        let cfg = RsuConfig { l, c_in, m, c_out };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(4..=7).contains(&self.l) {
            return Err(Error::InvalidConfig(format!(
                "RSU height {} outside the supported 4..=7",
                self.l
            )));
        }
        if self.c_in < 1 || self.m < 1 || self.c_out < 1 {
            return Err(Error::InvalidConfig(format!(
                "RSU channels must be >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Number of internal pooling sites, `l - 2`.
    pub fn pool_sites(&self) -> usize {
        self.l - 2
    }

    /// Spatial divisor for a fully unfolded block, `2^(l-2)`.
    pub fn divisor(&self) -> usize {
        1 << (self.l - 2)
    }
}

pub struct RsuBlock<T: Scalar> {
    pub cfg: RsuConfig,
    pub entry: ConvBnRelu<T>,
    /// Encoder convs for stages 1..l-1; stage 1 maps `c_out -> m`.
    pub enc: Vec<ConvBnRelu<T>>,
    /// Dilated bottom stage.
    pub bottom: ConvBnRelu<T>,
    /// Decoder convs from stage l-1 down to stage 1 (the last maps to c_out).
    pub dec: Vec<ConvBnRelu<T>>,
}

/// Builds the parameter containers for an RSU block.
pub fn build_rsu<T: Scalar>(cfg: RsuConfig, init: &Init, path: &str) -> Result<RsuBlock<T>> {
    cfg.validate()?;
    let entry = init.conv_bn_relu(&format!("{path}.entry"), cfg.c_in, cfg.c_out, 3, 1, 1, 1);
    let mut enc = Vec::with_capacity(cfg.l - 1);
    enc.push(init.conv_bn_relu(&format!("{path}.enc1"), cfg.c_out, cfg.m, 3, 1, 1, 1));
    for stage in 2..cfg.l {
        enc.push(init.conv_bn_relu(&format!("{path}.enc{stage}"), cfg.m, cfg.m, 3, 1, 1, 1));
    }
    let bottom = init.conv_bn_relu(&format!("{path}.bottom"), cfg.m, cfg.m, 3, 1, 2, 2);
    let mut dec = Vec::with_capacity(cfg.l - 1);
    for stage in (2..cfg.l).rev() {
        dec.push(init.conv_bn_relu(&format!("{path}.dec{stage}"), 2 * cfg.m, cfg.m, 3, 1, 1, 1));
    }
    dec.push(init.conv_bn_relu(&format!("{path}.dec1"), 2 * cfg.m, cfg.c_out, 3, 1, 1, 1));
    Ok(RsuBlock {
        cfg,
        entry,
        enc,
        bottom,
        dec,
    })
}

impl<T: Scalar> RsuBlock<T> {
    /// Pools when both dims are even; skips once either dim has saturated at
    /// 1 (the matching decoder upsample is skipped too). Any other odd size
    /// is a divisibility violation.
    fn try_pool(&self, x: &Tensor<T>, context: &str) -> Result<(Tensor<T>, bool)> {
        let s = x.shape();
        if s.h % 2 == 0 && s.w % 2 == 0 {
            Ok((maxpool2(x)?, true))
        } else if s.h == 1 || s.w == 1 {
            Ok((x.clone(), false))
        } else {
            Err(Error::Divisibility {
                context: context.to_string(),
                h: s.h,
                w: s.w,
                required: self.cfg.divisor(),
            })
        }
    }

    /// Forward pass; output spatial size equals input spatial size exactly.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.c != self.cfg.c_in {
            return Err(Error::ShapeMismatch {
                op: "rsu_forward",
                lhs: s,
                rhs: self.entry.conv.weight.shape(),
            });
        }
        let entry_out = self.entry.forward(x, mode)?;

        // Encoder: skips[k] is the stage-(k+1) output.
        let mut skips = Vec::with_capacity(self.cfg.l - 1);
        skips.push(self.enc[0].forward(&entry_out, mode)?);
        let mut pooled = Vec::with_capacity(self.cfg.l - 2);
        for stage_idx in 1..self.cfg.l - 1 {
            let ctx = format!("RSU-{} encoder stage {}", self.cfg.l, stage_idx + 1);
            let (down, did_pool) = self.try_pool(skips.last().unwrap(), &ctx)?;
            pooled.push(did_pool);
            skips.push(self.enc[stage_idx].forward(&down, mode)?);
        }

        let mut d = self.bottom.forward(skips.last().unwrap(), mode)?;

        // Decoder mirrors the encoder; dec[0] fuses the bottom with the
        // deepest skip at the same scale.
        for (i, dec) in self.dec.iter().enumerate() {
            let skip = &skips[self.cfg.l - 2 - i];
            if i > 0 && pooled[self.cfg.l - 2 - i] {
                d = d.upsample_bilinear2()?;
            }
            d = dec.forward(&concat_channels(&[&d, skip])?, mode)?;
        }

        entry_out.add(&d)
    }

    /// Conv weights plus batch-norm affine pairs, per the block-level
    /// accounting formula `sum(c_out*c_in*9) + sum(2c)`.
    pub fn param_count(&self) -> usize {
        let mut count = 0;
        self.for_each_param("rsu", &mut |_, _, t: &Tensor<T>| count += t.numel());
        count
    }

    pub fn for_each_param(&self, path: &str, f: &mut ParamVisitor<T>) {
        self.entry.for_each_param(&format!("{path}.entry"), f);
        for (i, e) in self.enc.iter().enumerate() {
            e.for_each_param(&format!("{path}.enc{}", i + 1), f);
        }
        self.bottom.for_each_param(&format!("{path}.bottom"), f);
        for (i, d) in self.dec.iter().enumerate() {
            d.for_each_param(&format!("{path}.dec{}", self.cfg.l - 1 - i), f);
        }
    }

    pub fn for_each_param_mut(&mut self, path: &str, f: &mut ParamVisitorMut<T>) {
        self.entry.for_each_param_mut(&format!("{path}.entry"), f);
        for (i, e) in self.enc.iter_mut().enumerate() {
            e.for_each_param_mut(&format!("{path}.enc{}", i + 1), f);
        }
        self.bottom.for_each_param_mut(&format!("{path}.bottom"), f);
        let l = self.cfg.l;
        for (i, d) in self.dec.iter_mut().enumerate() {
            d.for_each_param_mut(&format!("{path}.dec{}", l - 1 - i), f);
        }
    }

    pub fn for_each_bn(&self, path: &str, f: &mut BnVisitor<T>) {
        self.entry.for_each_bn(&format!("{path}.entry"), f);
        for (i, e) in self.enc.iter().enumerate() {
            e.for_each_bn(&format!("{path}.enc{}", i + 1), f);
        }
        self.bottom.for_each_bn(&format!("{path}.bottom"), f);
        for (i, d) in self.dec.iter().enumerate() {
            d.for_each_bn(&format!("{path}.dec{}", self.cfg.l - 1 - i), f);
        }
    }
}
