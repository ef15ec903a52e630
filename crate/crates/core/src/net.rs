//! Full network assembly: high-resolution branch, RSU low-resolution branch
//! with context embedding, fusion (dual-guided attention or one of the
//! ablation wirings), segmentation head, and the checkpoint container.

use crate::attention::{dga_fuse, ga_apply_nchw, DgaParams, GaParams};
use crate::error::{Error, Result};
use crate::nn::{
    batchnorm, conv2d, maxpool2, BatchNormParams, BnVisitor, Conv2dParams, ConvBnRelu, Init, Mode,
    ParamKind, ParamVisitor, ParamVisitorMut,
};
use crate::rng;
use crate::rsu::{build_rsu, RsuBlock, RsuConfig};
use crate::tensor::{concat_channels, Scalar, Shape, Tensor};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

/// Capacity presets; they differ only in low-resolution branch widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Version {
    Light,
    Base,
    Large,
}

/// How the two branch outputs are combined before the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    HighOnly,
    LowOnly,
    ConcatOnly,
    SingleEa,
    Dga,
}

pub const HIGH_RES_STAGES: [(usize, usize); 3] = [(3, 64), (64, 64), (64, 128)];

const LIGHT_BLOCKS: [(usize, usize, usize, usize); 6] = [
    (7, 3, 16, 32),
    (6, 32, 16, 64),
    (5, 64, 16, 64),
    (4, 64, 16, 64),
    (4, 64, 16, 64),
    (4, 64, 32, 64),
];
const BASE_BLOCKS: [(usize, usize, usize, usize); 6] = [
    (7, 3, 16, 32),
    (6, 32, 16, 64),
    (5, 64, 32, 128),
    (4, 128, 64, 256),
    (4, 256, 128, 256),
    (4, 256, 128, 256),
];
const LARGE_BLOCKS: [(usize, usize, usize, usize); 6] = [
    (7, 3, 32, 64),
    (6, 64, 32, 128),
    (5, 128, 64, 256),
    (4, 256, 128, 512),
    (4, 512, 256, 512),
    (4, 512, 256, 512),
];

fn blocks_of(version: Version) -> [RsuConfig; 6] {
    let raw = match version {
        Version::Light => LIGHT_BLOCKS,
        Version::Base => BASE_BLOCKS,
        Version::Large => LARGE_BLOCKS,
    };
    raw.map(|(l, c_in, m, c_out)| RsuConfig { l, c_in, m, c_out })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub version: Version,
    pub num_classes: usize,
    #[serde(default = "default_fusion")]
    pub fusion_mode: FusionMode,
    #[serde(default)]
    pub ohem: bool,
    #[serde(default = "default_ga_s")]
    pub ga_s: usize,
    #[serde(default = "default_high_res")]
    pub high_res_stage_channels: [(usize, usize); 3],
    #[serde(default)]
    pub low_res_blocks: Option<[RsuConfig; 6]>,
}

fn default_fusion() -> FusionMode {
    FusionMode::Dga
}

fn default_ga_s() -> usize {
    crate::attention::DEFAULT_NODES
}

fn default_high_res() -> [(usize, usize); 3] {
    HIGH_RES_STAGES
}

impl NetworkConfig {
    pub fn preset(version: Version, num_classes: usize) -> NetworkConfig {
        NetworkConfig {
            version,
            num_classes,
            fusion_mode: FusionMode::Dga,
            ohem: false,
            ga_s: default_ga_s(),
            high_res_stage_channels: HIGH_RES_STAGES,
            low_res_blocks: Some(blocks_of(version)),
        }
    }

    /// Concrete low-res stage table, falling back to the version preset.
    pub fn blocks(&self) -> [RsuConfig; 6] {
        self.low_res_blocks.unwrap_or_else(|| blocks_of(self.version))
    }

    /// Fills defaults so the serialized form is fully explicit.
    pub fn resolved(&self) -> NetworkConfig {
        let mut cfg = self.clone();
        cfg.low_res_blocks = Some(self.blocks());
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 1 {
            return Err(Error::InvalidConfig("num_classes must be >= 1".into()));
        }
        if self.ga_s < 1 {
            return Err(Error::InvalidConfig("ga_s must be >= 1".into()));
        }
        if self.high_res_stage_channels[0].0 != 3 {
            return Err(Error::InvalidConfig(
                "high-res stage 1 must take 3 input channels".into(),
            ));
        }
        for i in 0..2 {
            if self.high_res_stage_channels[i].1 != self.high_res_stage_channels[i + 1].0 {
                return Err(Error::InvalidConfig(format!(
                    "high-res stages {} -> {} disagree on channels",
                    i + 1,
                    i + 2
                )));
            }
        }
        let blocks = self.blocks();
        if blocks[0].c_in != 3 {
            return Err(Error::InvalidConfig(
                "low-res stage 1 must take 3 input channels".into(),
            ));
        }
        for (i, b) in blocks.iter().enumerate() {
            b.validate()?;
            if i > 0 && blocks[i - 1].c_out != b.c_in {
                return Err(Error::InvalidConfig(format!(
                    "low-res stages {} -> {} disagree on channels",
                    i,
                    i + 1
                )));
            }
        }
        if blocks[4].c_out != blocks[5].c_out {
            return Err(Error::InvalidConfig(
                "stage-5 and stage-6 output channels must match for the context-embed residual"
                    .into(),
            ));
        }
        Ok(())
    }

    /// High-res branch output channels (C_h).
    pub fn high_channels(&self) -> usize {
        self.high_res_stage_channels[2].1
    }

    /// Low-res branch output channels (C_l).
    pub fn low_channels(&self) -> usize {
        self.blocks()[4].c_out
    }

    /// Channel width entering the segmentation head for this fusion mode.
    pub fn fused_channels(&self) -> usize {
        match self.fusion_mode {
            FusionMode::HighOnly => self.high_channels(),
            FusionMode::LowOnly => self.low_channels(),
            FusionMode::ConcatOnly | FusionMode::SingleEa | FusionMode::Dga => {
                self.high_channels() + self.low_channels()
            }
        }
    }
}

/// Global-context injection after the deepest stage: a 1x1 conv + BN over
/// the pooled descriptor, broadcast back and mixed by a plain 3x3 conv.
pub struct ContextEmbed<T: Scalar> {
    pub squeeze: Conv2dParams<T>,
    pub squeeze_bn: BatchNormParams<T>,
    pub out_conv: Conv2dParams<T>,
}

impl<T: Scalar> ContextEmbed<T> {
    fn init(init: &Init, path: &str, channels: usize) -> ContextEmbed<T> {
        let squeeze = Conv2dParams::new(
            init.kaiming_conv(&format!("{path}.squeeze.conv"), channels, channels, 1),
            None,
            1,
            0,
            1,
        )
        .expect("1x1 conv");
        ContextEmbed {
            squeeze,
            squeeze_bn: BatchNormParams::new(channels),
            out_conv: init.conv_with_bias(&format!("{path}.out"), channels, channels, 3, 1, 1),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let g = x.global_avg_pool()?;
        let y = batchnorm(&conv2d(&g, &self.squeeze)?, &self.squeeze_bn, mode)?;
        conv2d(&x.add_broadcast_spatial(&y)?, &self.out_conv)
    }

    pub fn for_each_param(&self, path: &str, f: &mut ParamVisitor<T>) {
        self.squeeze.for_each_param(&format!("{path}.squeeze"), f);
        self.squeeze_bn
            .for_each_param(&format!("{path}.squeeze.bn"), f);
        self.out_conv.for_each_param(&format!("{path}.out"), f);
    }

    pub fn for_each_param_mut(&mut self, path: &str, f: &mut ParamVisitorMut<T>) {
        self.squeeze.for_each_param_mut(&format!("{path}.squeeze"), f);
        self.squeeze_bn
            .for_each_param_mut(&format!("{path}.squeeze.bn"), f);
        self.out_conv.for_each_param_mut(&format!("{path}.out"), f);
    }

    pub fn for_each_bn(&self, path: &str, f: &mut BnVisitor<T>) {
        f(&format!("{path}.squeeze.bn"), &self.squeeze_bn);
    }
}

/// Segmentation head: 3x3 conv-BN-ReLU down to 64 channels, a 1x1 classifier,
/// then three chained x2 bilinear upsamples back to input resolution.
pub struct Head<T: Scalar> {
    pub reduce: ConvBnRelu<T>,
    pub classify: Conv2dParams<T>,
}

pub const HEAD_WIDTH: usize = 64;

impl<T: Scalar> Head<T> {
    fn init(init: &Init, path: &str, in_channels: usize, num_classes: usize) -> Head<T> {
        Head {
            reduce: init.conv_bn_relu(&format!("{path}.reduce"), in_channels, HEAD_WIDTH, 3, 1, 1, 1),
            classify: init.conv_with_bias(&format!("{path}.classify"), HEAD_WIDTH, num_classes, 1, 1, 0),
        }
    }

    pub fn forward(&self, fused: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut out = conv2d(&self.reduce.forward(fused, mode)?, &self.classify)?;
        for _ in 0..3 {
            out = out.upsample_bilinear2()?;
        }
        Ok(out)
    }

    pub fn for_each_param(&self, path: &str, f: &mut ParamVisitor<T>) {
        self.reduce.for_each_param(&format!("{path}.reduce"), f);
        self.classify.for_each_param(&format!("{path}.classify"), f);
    }

    pub fn for_each_param_mut(&mut self, path: &str, f: &mut ParamVisitorMut<T>) {
        self.reduce.for_each_param_mut(&format!("{path}.reduce"), f);
        self.classify
            .for_each_param_mut(&format!("{path}.classify"), f);
    }

    pub fn for_each_bn(&self, path: &str, f: &mut BnVisitor<T>) {
        self.reduce.for_each_bn(&format!("{path}.reduce"), f);
    }
}

pub enum Fusion<T: Scalar> {
    HighOnly,
    LowOnly,
    ConcatOnly,
    SingleEa(GaParams<T>),
    Dga(DgaParams<T>),
}

pub struct SegModel<T: Scalar> {
    pub config: NetworkConfig,
    pub high_res: Vec<ConvBnRelu<T>>,
    pub low_res: Vec<RsuBlock<T>>,
    pub context: ContextEmbed<T>,
    pub fusion: Fusion<T>,
    pub head: Head<T>,
}

impl<T: Scalar> SegModel<T> {
    /// Builds and initializes the network deterministically from a seed.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<SegModel<T>> {
        config.validate()?;
        let config = config.resolved();
        let init = Init::new(seed);

        let high_res = config
            .high_res_stage_channels
            .iter()
            .enumerate()
            .map(|(i, &(c_in, c_out))| {
                init.conv_bn_relu(&format!("high_res.stage{}", i + 1), c_in, c_out, 3, 1, 1, 1)
            })
            .collect();

        let mut low_res = Vec::with_capacity(6);
        for (i, cfg) in config.blocks().iter().enumerate() {
            low_res.push(build_rsu(*cfg, &init, &format!("low_res.stage{}", i + 1))?);
        }

        let context = ContextEmbed::init(&init, "context", config.blocks()[5].c_out);

        let (c_h, c_l) = (config.high_channels(), config.low_channels());
        let fusion = match config.fusion_mode {
            FusionMode::HighOnly => Fusion::HighOnly,
            FusionMode::LowOnly => Fusion::LowOnly,
            FusionMode::ConcatOnly => Fusion::ConcatOnly,
            FusionMode::SingleEa => Fusion::SingleEa(GaParams::init(
                &init,
                "fusion.single_ea",
                config.ga_s,
                c_h + c_l,
                c_h + c_l,
            )),
            FusionMode::Dga => {
                Fusion::Dga(DgaParams::init(&init, "fusion.dga", c_h, c_l, config.ga_s))
            }
        };

        let head = Head::init(&init, "head", config.fused_channels(), config.num_classes);

        Ok(SegModel {
            config,
            high_res,
            low_res,
            context,
            fusion,
            head,
        })
    }

    fn check_divisible(shape: Shape, by: usize, context: &str) -> Result<()> {
        if shape.h % by != 0 || shape.w % by != 0 {
            return Err(Error::Divisibility {
                context: context.to_string(),
                h: shape.h,
                w: shape.w,
                required: by,
            });
        }
        Ok(())
    }

    /// Three conv-BN-ReLU + maxpool stages: `(3, H, W) -> (C_h, H/8, W/8)`.
    pub fn high_res_forward(&self, image: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Self::check_divisible(image.shape(), 8, "high-res branch")?;
        let mut x = image.clone();
        for stage in &self.high_res {
            x = maxpool2(&stage.forward(&x, mode)?)?;
        }
        Ok(x)
    }

    /// Six RSU stages at falling scales with a context-embedded residual on
    /// top: `(3, H, W) -> (C_l, H/16, W/16)`.
    pub fn low_res_forward(&self, image: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Self::check_divisible(image.shape(), 32, "low-res branch")?;
        let mut x = image.clone();
        let mut stage5 = None;
        for (i, block) in self.low_res.iter().enumerate() {
            x = block.forward(&x, mode).map_err(|e| match e {
                Error::Divisibility {
                    context,
                    h,
                    w,
                    required,
                } => Error::Divisibility {
                    context: format!("low-res stage {}: {context}", i + 1),
                    h,
                    w,
                    required,
                },
                other => other,
            })?;
            if i == 4 {
                stage5 = Some(x.clone());
            }
            if i < 5 {
                x = maxpool2(&x)?;
            }
        }
        let embedded = self.context.forward(&x, mode)?;
        embedded.upsample_bilinear2()?.add(&stage5.expect("six stages"))
    }

    /// Full forward pass to per-class logits at input resolution.
    pub fn forward(&self, image: &Tensor<T>, mode: Mode, seed: u64) -> Result<Tensor<T>> {
        Self::check_divisible(image.shape(), 32, "network input")?;
        let f_h = self.high_res_forward(image, mode)?;
        let f_l = self.low_res_forward(image, mode)?;
        let fused = match &self.fusion {
            Fusion::HighOnly => f_h,
            Fusion::LowOnly => f_l.upsample_bilinear2()?,
            Fusion::ConcatOnly => concat_channels(&[&f_h, &f_l.upsample_bilinear2()?])?,
            Fusion::SingleEa(ga) => {
                let cat = concat_channels(&[&f_h, &f_l.upsample_bilinear2()?])?;
                let attended = ga_apply_nchw(&cat, ga, mode, rng::derive_seed(seed, 0xea))?;
                cat.add(&attended)?
            }
            Fusion::Dga(p) => dga_fuse(&f_h, &f_l, p, mode, rng::derive_seed(seed, 0xd6a))?,
        };
        self.head.forward(&fused, mode)
    }

    /// Scalar parameter count: conv weights and biases plus GA units.
    /// Batch-norm tensors are excluded from this accounting.
    pub fn count_params(&self) -> usize {
        let mut count = 0;
        self.for_each_param(&mut |_, kind, t| {
            if matches!(kind, ParamKind::ConvWeight | ParamKind::ConvBias | ParamKind::GaUnit) {
                count += t.numel();
            }
        });
        count
    }

    /// Same accounting as [`count_params`], split by top-level submodule.
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        let mut groups: Vec<(String, usize)> = Vec::new();
        self.for_each_param(&mut |path, kind, t| {
            if !matches!(kind, ParamKind::ConvWeight | ParamKind::ConvBias | ParamKind::GaUnit) {
                return;
            }
            let top = path.split('.').next().unwrap_or(path).to_string();
            match groups.iter_mut().find(|(name, _)| *name == top) {
                Some((_, n)) => *n += t.numel(),
                None => groups.push((top, t.numel())),
            }
        });
        groups
    }

    pub fn for_each_param(&self, f: &mut ParamVisitor<T>) {
        for (i, stage) in self.high_res.iter().enumerate() {
            stage.for_each_param(&format!("high_res.stage{}", i + 1), f);
        }
        for (i, block) in self.low_res.iter().enumerate() {
            block.for_each_param(&format!("low_res.stage{}", i + 1), f);
        }
        self.context.for_each_param("context", f);
        match &self.fusion {
            Fusion::SingleEa(ga) => ga.for_each_param("fusion.single_ea", f),
            Fusion::Dga(p) => p.for_each_param("fusion.dga", f),
            _ => {}
        }
        self.head.for_each_param("head", f);
    }

    pub fn for_each_param_mut(&mut self, f: &mut ParamVisitorMut<T>) {
        for (i, stage) in self.high_res.iter_mut().enumerate() {
            stage.for_each_param_mut(&format!("high_res.stage{}", i + 1), f);
        }
        for (i, block) in self.low_res.iter_mut().enumerate() {
            block.for_each_param_mut(&format!("low_res.stage{}", i + 1), f);
        }
        self.context.for_each_param_mut("context", f);
        match &mut self.fusion {
            Fusion::SingleEa(ga) => ga.for_each_param_mut("fusion.single_ea", f),
            Fusion::Dga(p) => p.for_each_param_mut("fusion.dga", f),
            _ => {}
        }
        self.head.for_each_param_mut("head", f);
    }

    pub fn for_each_bn(&self, f: &mut BnVisitor<T>) {
        for (i, stage) in self.high_res.iter().enumerate() {
            stage.for_each_bn(&format!("high_res.stage{}", i + 1), f);
        }
        for (i, block) in self.low_res.iter().enumerate() {
            block.for_each_bn(&format!("low_res.stage{}", i + 1), f);
        }
        self.context.for_each_bn("context", f);
        if let Fusion::Dga(p) = &self.fusion {
            p.for_each_bn("fusion.dga", f);
        }
        self.head.for_each_bn("head", f);
    }
}

// ---------------------------------------------------------------------------
// checkpoint container
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BDGN";
pub const CHECKPOINT_VERSION: u16 = 1;

impl<T: Scalar> SegModel<T> {
    /// Writes magic `BDGN`, a u16 format version, the length-prefixed config
    /// JSON, then every parameter tensor followed by every batch-norm
    /// running statistic, in deterministic traversal order.
    pub fn save_checkpoint(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)
            .map_err(|e| Error::io("<checkpoint>", e))?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())
            .map_err(|e| Error::io("<checkpoint>", e))?;
        let config_json = serde_json::to_vec(&self.config)
            .map_err(|e| Error::Checkpoint(format!("config serialization: {e}")))?;
        out.write_all(&(config_json.len() as u32).to_le_bytes())
            .map_err(|e| Error::io("<checkpoint>", e))?;
        out.write_all(&config_json)
            .map_err(|e| Error::io("<checkpoint>", e))?;

        let mut write_err = None;
        self.for_each_param(&mut |_, _, t| {
            if write_err.is_none() {
                if let Err(e) = t.write_record(out) {
                    write_err = Some(e);
                }
            }
        });
        if let Some(e) = write_err {
            return Err(e);
        }
        let mut write_err = None;
        self.for_each_bn(&mut |_, bn| {
            if write_err.is_some() {
                return;
            }
            let c = bn.channels();
            let mean = Tensor::from_vec(Shape::new(1, c, 1, 1), bn.running_mean()).unwrap();
            let var = Tensor::from_vec(Shape::new(1, c, 1, 1), bn.running_var()).unwrap();
            if let Err(e) = mean.write_record(out).and_then(|_| var.write_record(out)) {
                write_err = Some(e);
            }
        });
        match write_err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Reads a checkpoint, validating the embedded config against `expected`
    /// when one is supplied.
    pub fn load_checkpoint(
        input: &mut impl Read,
        expected: Option<&NetworkConfig>,
    ) -> Result<SegModel<T>> {
        let mut head = [0u8; 10];
        input
            .read_exact(&mut head)
            .map_err(|e| Error::io("<checkpoint>", e))?;
        if &head[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic, expected BDGN".into()));
        }
        let version = u16::from_le_bytes(head[4..6].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let json_len = u32::from_le_bytes(head[6..10].try_into().unwrap()) as usize;
        let mut json = vec![0u8; json_len];
        input
            .read_exact(&mut json)
            .map_err(|e| Error::io("<checkpoint>", e))?;
        let config: NetworkConfig = serde_json::from_slice(&json)
            .map_err(|e| Error::Checkpoint(format!("config parse: {e}")))?;
        if let Some(expected) = expected {
            if expected.resolved() != config {
                return Err(Error::Checkpoint(
                    "embedded config does not match the requested build".into(),
                ));
            }
        }

        let mut model = SegModel::<T>::build(config, 0)?;
        let mut read_err = None;
        model.for_each_param_mut(&mut |path, _, t| {
            if read_err.is_some() {
                return;
            }
            match Tensor::<T>::read_record(input) {
                Ok(loaded) => {
                    if loaded.shape() != t.shape() {
                        read_err = Some(Error::Checkpoint(format!(
                            "{path}: stored shape {} does not match built shape {}",
                            loaded.shape(),
                            t.shape()
                        )));
                    } else {
                        *t = loaded.requires_grad();
                    }
                }
                Err(e) => read_err = Some(e),
            }
        });
        if let Some(e) = read_err {
            return Err(e);
        }
        let mut read_err = None;
        model.for_each_bn(&mut |path, bn| {
            if read_err.is_some() {
                return;
            }
            let mean = Tensor::<T>::read_record(input);
            let var = mean.as_ref().ok().map(|_| Tensor::<T>::read_record(input));
            match (mean, var) {
                (Ok(mean), Some(Ok(var))) => {
                    if mean.numel() != bn.channels() || var.numel() != bn.channels() {
                        read_err = Some(Error::Checkpoint(format!(
                            "{path}: running stats have wrong channel count"
                        )));
                    } else {
                        bn.set_running(mean.data().to_vec(), var.data().to_vec());
                    }
                }
                (Err(e), _) | (_, Some(Err(e))) => read_err = Some(e),
                (Ok(_), None) => unreachable!(),
            }
        });
        match read_err {
            Some(e) => Err(e),
            None => Ok(model),
        }
    }
}
