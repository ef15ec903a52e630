//! Training engine: SGD with momentum, warmup + poly learning-rate schedule,
//! (OHEM) cross-entropy over label maps, random-crop augmentation, and the
//! deterministic training loop with JSONL reporting and checkpoints.

use crate::data::{LabelMap, SegSample};
use crate::error::{Error, Result};
use crate::net::SegModel;
use crate::nn::Mode;
use crate::rng;
use crate::tensor::autodiff::Node;
use crate::tensor::{Scalar, Shape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub total_iters: usize,
    /// Defaults to `total_iters / 100` when omitted.
    #[serde(default)]
    pub warmup_iters: Option<usize>,
    #[serde(default = "default_poly_power")]
    pub poly_power: f64,
    pub crop: (usize, usize),
    pub batch_size: usize,
    #[serde(default)]
    pub ohem: bool,
    #[serde(default = "default_ohem_thresh")]
    pub ohem_thresh: f64,
    #[serde(default = "default_ohem_min_kept")]
    pub ohem_min_kept: f64,
    #[serde(default = "default_ignore_index")]
    pub ignore_index: u8,
    pub seed: u64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Checkpoint interval in iterations; 0 saves only the final state.
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_poly_power() -> f64 {
    0.9
}
fn default_ohem_thresh() -> f64 {
    0.7
}
fn default_ohem_min_kept() -> f64 {
    1.0 / 16.0
}
fn default_ignore_index() -> u8 {
    crate::data::IGNORE_INDEX
}
fn default_log_every() -> usize {
    10
}

impl TrainConfig {
    pub fn effective_warmup(&self) -> usize {
        self.warmup_iters.unwrap_or(self.total_iters / 100)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 {
            return Err(Error::InvalidConfig("base_lr must be positive".into()));
        }
        if self.total_iters > 0 && self.effective_warmup() >= self.total_iters {
            return Err(Error::InvalidConfig(format!(
                "warmup_iters {} must be below total_iters {}",
                self.effective_warmup(),
                self.total_iters
            )));
        }
        if self.crop.0 % 32 != 0 || self.crop.1 % 32 != 0 {
            return Err(Error::InvalidConfig(format!(
                "crop {:?} must be divisible by 32",
                self.crop
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(0.0 < self.ohem_thresh && self.ohem_thresh < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "ohem_thresh {} must lie in (0, 1)",
                self.ohem_thresh
            )));
        }
        if !(0.0 < self.ohem_min_kept && self.ohem_min_kept <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "ohem_min_kept {} must lie in (0, 1]",
                self.ohem_min_kept
            )));
        }
        Ok(())
    }

    pub fn ohem_spec(&self) -> OhemSpec {
        OhemSpec {
            enabled: self.ohem,
            thresh: self.ohem_thresh,
            min_kept_fraction: self.ohem_min_kept,
            ignore_index: self.ignore_index,
        }
    }
}

// ---------------------------------------------------------------------------
// learning-rate schedule
// ---------------------------------------------------------------------------

/// Linear warmup from near zero, then poly decay:
/// `base * (iter+1)/warmup` before `warmup`, afterwards
/// `base * (1 - (iter-warmup)/(total-warmup))^power`.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> Result<f64> {
    if iter > cfg.total_iters {
        return Err(Error::IterOutOfRange {
            iter,
            total: cfg.total_iters,
        });
    }
    let warmup = cfg.effective_warmup();
    if iter < warmup {
        return Ok(cfg.base_lr * (iter + 1) as f64 / warmup as f64);
    }
    if cfg.total_iters == warmup {
        return Ok(0.0);
    }
    let progress = (iter - warmup) as f64 / (cfg.total_iters - warmup) as f64;
    Ok(cfg.base_lr * (1.0 - progress).powf(cfg.poly_power))
}

// ---------------------------------------------------------------------------
// SGD with momentum
// ---------------------------------------------------------------------------

/// One momentum-SGD update on raw slices:
/// `v <- momentum*v + grad + weight_decay*param; param <- param - lr*v`.
pub fn sgd_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::InvalidConfig(format!(
            "sgd_update length mismatch: param {}, grad {}, velocity {}",
            param.len(),
            grad.len(),
            velocity.len()
        )));
    }
    let lr = T::from_f64(lr);
    let mom = T::from_f64(momentum);
    let wd = T::from_f64(weight_decay);
    for ((p, &g), v) in param.iter_mut().zip(grad.iter()).zip(velocity.iter_mut()) {
        *v = mom * *v + g + wd * *p;
        *p = *p - lr * *v;
    }
    Ok(())
}

/// Model-level optimizer; velocity buffers are keyed by parameter traversal
/// order. Parameters that received no gradient this step are left untouched.
pub struct SgdOptimizer<T: Scalar> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> SgdOptimizer<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> SgdOptimizer<T> {
        SgdOptimizer {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut SegModel<T>, lr: f64) -> Result<()> {
        let (momentum, weight_decay) = (self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        let mut idx = 0usize;
        let mut step_err = None;
        model.for_each_param_mut(&mut |_, _, t| {
            if velocity.len() == idx {
                velocity.push(vec![T::zero(); t.numel()]);
            }
            if let Some(grad) = t.take_grad() {
                if step_err.is_none() {
                    if let Err(e) = sgd_update(
                        t.data_mut(),
                        &grad,
                        &mut velocity[idx],
                        lr,
                        momentum,
                        weight_decay,
                    ) {
                        step_err = Some(e);
                    }
                }
            }
            idx += 1;
        });
        match step_err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

// ---------------------------------------------------------------------------
// (OHEM) cross-entropy
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct OhemSpec {
    pub enabled: bool,
    /// Pixels whose true-class probability falls below this are kept.
    pub thresh: f64,
    /// Minimum kept quota as a fraction of the valid pixels; top-loss pixels
    /// fill the quota when too few fall under the threshold.
    pub min_kept_fraction: f64,
    pub ignore_index: u8,
}

impl OhemSpec {
    pub fn plain(ignore_index: u8) -> OhemSpec {
        OhemSpec {
            enabled: false,
            thresh: 0.7,
            min_kept_fraction: 1.0,
            ignore_index,
        }
    }
}

/// Softmax cross-entropy over `(n, C, H, W)` logits and `n` label maps,
/// averaged over the kept pixels. With OHEM disabled every valid pixel is
/// kept. Differentiable w.r.t. the logits (the kept set is treated as
/// constant).
pub fn ohem_ce<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[LabelMap],
    spec: &OhemSpec,
) -> Result<Tensor<T>> {
    let s = logits.shape();
    if labels.len() != s.n {
        return Err(Error::InvalidConfig(format!(
            "{} label maps for a batch of {}",
            labels.len(),
            s.n
        )));
    }
    for l in labels {
        if l.h != s.h || l.w != s.w {
            return Err(Error::ShapeMismatch {
                op: "ohem_ce",
                lhs: s,
                rhs: Shape::new(1, 1, l.h, l.w),
            });
        }
    }
    let classes = s.c;
    let hw = s.hw();
    let x = logits.data();

    // Per valid pixel: flat pixel index within the batch, CE loss, p_true.
    struct PixelLoss<T> {
        pixel: usize,
        sample: usize,
        label: usize,
        loss: T,
        p_true: T,
    }
    let mut valid: Vec<PixelLoss<T>> = Vec::with_capacity(s.n * hw);
    for (ni, lm) in labels.iter().enumerate() {
        for p in 0..hw {
            let raw = lm.data[p];
            if raw == spec.ignore_index {
                continue;
            }
            if raw as usize >= classes {
                return Err(Error::LabelOutOfRange {
                    label: raw,
                    classes,
                });
            }
            let label = raw as usize;
            let base = ni * classes * hw + p;
            let mut max = x[base];
            for k in 1..classes {
                let v = x[base + k * hw];
                if v > max {
                    max = v;
                }
            }
            let mut sum = T::zero();
            for k in 0..classes {
                sum += (x[base + k * hw] - max).exp();
            }
            let lse = max + sum.ln();
            let logp = x[base + label * hw] - lse;
            valid.push(PixelLoss {
                pixel: ni * hw + p,
                sample: ni,
                label,
                loss: -logp,
                p_true: logp.exp(),
            });
        }
    }

    if valid.is_empty() {
        // Every pixel ignored: zero loss, zero gradient.
        let node = (crate::tensor::autodiff::grad_enabled() && logits.tracks_grad()).then(|| {
            Node::CrossEntropy {
                logits: logits.clone(),
                grad_cache: vec![T::zero(); logits.numel()],
            }
        });
        return Tensor::op_output("ohem_ce", Shape::scalar(), vec![T::zero()], node);
    }

    let kept_indices: Vec<usize> = if spec.enabled {
        let thresh = T::from_f64(spec.thresh);
        let quota = ((spec.min_kept_fraction * valid.len() as f64).ceil() as usize)
            .clamp(1, valid.len());
        let mut hard: Vec<usize> = (0..valid.len())
            .filter(|&i| valid[i].p_true < thresh)
            .collect();
        if hard.len() < quota {
            let mut rest: Vec<usize> = (0..valid.len())
                .filter(|&i| !(valid[i].p_true < thresh))
                .collect();
            rest.sort_by(|&a, &b| {
                valid[b]
                    .loss
                    .partial_cmp(&valid[a].loss)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(valid[a].pixel.cmp(&valid[b].pixel))
            });
            hard.extend(rest.into_iter().take(quota - hard.len()));
        }
        hard
    } else {
        (0..valid.len()).collect()
    };

    let mut loss_sum = T::zero();
    for &i in &kept_indices {
        loss_sum += valid[i].loss;
    }
    let count = T::from_f64(kept_indices.len() as f64);
    let loss = loss_sum / count;

    let node = (crate::tensor::autodiff::grad_enabled() && logits.tracks_grad()).then(|| {
        // d loss / d logit_k = (softmax_k - [k == label]) / kept, kept pixels only.
        let mut cache = vec![T::zero(); logits.numel()];
        let inv = T::one() / count;
        for &i in &kept_indices {
            let v = &valid[i];
            let p = v.pixel - v.sample * hw;
            let base = v.sample * classes * hw + p;
            let mut max = x[base];
            for k in 1..classes {
                let vk = x[base + k * hw];
                if vk > max {
                    max = vk;
                }
            }
            let mut sum = T::zero();
            for k in 0..classes {
                sum += (x[base + k * hw] - max).exp();
            }
            for k in 0..classes {
                let p_k = (x[base + k * hw] - max).exp() / sum;
                let indicator = if k == v.label { T::one() } else { T::zero() };
                cache[base + k * hw] = (p_k - indicator) * inv;
            }
        }
        Node::CrossEntropy {
            logits: logits.clone(),
            grad_cache: cache,
        }
    });
    Tensor::op_output("ohem_ce", Shape::scalar(), vec![loss], node)
}

/// Plain mean cross-entropy over the valid pixels.
pub fn plain_ce<T: Scalar>(logits: &Tensor<T>, labels: &[LabelMap], ignore: u8) -> Result<Tensor<T>> {
    ohem_ce(logits, labels, &OhemSpec::plain(ignore))
}

// ---------------------------------------------------------------------------
// random crop
// ---------------------------------------------------------------------------

/// Crops image and label map at the same uniformly drawn offset;
/// deterministic for a given seed, identity when the crop equals the image.
pub fn random_crop<T: Scalar>(
    sample: &SegSample<T>,
    crop: (usize, usize),
    seed: u64,
) -> Result<SegSample<T>> {
    let s = sample.image.shape();
    let (ch, cw) = crop;
    if ch > s.h || cw > s.w {
        return Err(Error::InvalidConfig(format!(
            "crop {ch}x{cw} larger than image {}x{}",
            s.h, s.w
        )));
    }
    if ch == s.h && cw == s.w {
        return Ok(SegSample {
            image: sample.image.clone(),
            label: sample.label.clone(),
            id: sample.id.clone(),
        });
    }
    let mut rng = rng::rng_from(seed);
    let oy = rng.random_range(0..=s.h - ch);
    let ox = rng.random_range(0..=s.w - cw);

    let mut image = vec![T::zero(); s.c * ch * cw];
    for c in 0..s.c {
        for y in 0..ch {
            let src = (c * s.h + oy + y) * s.w + ox;
            let dst = (c * ch + y) * cw;
            image[dst..dst + cw].copy_from_slice(&sample.image.data()[src..src + cw]);
        }
    }
    let mut label = vec![0u8; ch * cw];
    for y in 0..ch {
        let src = (oy + y) * s.w + ox;
        label[y * cw..(y + 1) * cw].copy_from_slice(&sample.label.data[src..src + cw]);
    }
    Ok(SegSample {
        image: Tensor::from_vec(Shape::new(1, s.c, ch, cw), image)?,
        label: LabelMap {
            h: ch,
            w: cw,
            data: label,
        },
        id: sample.id.clone(),
    })
}

/// Stacks single-sample images into one `(B, 3, h, w)` leaf tensor.
pub fn assemble_batch<T: Scalar>(samples: &[SegSample<T>]) -> Result<(Tensor<T>, Vec<LabelMap>)> {
    assert!(!samples.is_empty());
    let s = samples[0].image.shape();
    let mut data = Vec::with_capacity(samples.len() * s.c * s.hw());
    let mut labels = Vec::with_capacity(samples.len());
    for sample in samples {
        if sample.image.shape() != s {
            return Err(Error::ShapeMismatch {
                op: "assemble_batch",
                lhs: s,
                rhs: sample.image.shape(),
            });
        }
        data.extend_from_slice(sample.image.data());
        labels.push(sample.label.clone());
    }
    Ok((
        Tensor::from_vec(Shape::new(samples.len(), s.c, s.h, s.w), data)?,
        labels,
    ))
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub records: Vec<IterRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub total_wall_ms: f64,
    pub final_loss: f64,
}

/// Runs `total_iters` steps of sample -> crop -> forward -> loss -> backward
/// -> SGD. Fully deterministic for a fixed seed. A non-finite loss (or a
/// non-finite op output in debug builds) aborts with the iteration index.
pub fn train_loop<T: Scalar>(
    model: &mut SegModel<T>,
    dataset: &[SegSample<T>],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    mut on_record: impl FnMut(&IterRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("dataset is empty".into()));
    }
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }

    let start = Instant::now();
    let mut sampler = rng::rng_from(rng::derive_seed(cfg.seed, 0xba7c));
    let mut optimizer = SgdOptimizer::new(cfg.momentum, cfg.weight_decay);
    let ohem = cfg.ohem_spec();
    let mut records = Vec::new();
    let mut checkpoints = Vec::new();
    let mut final_loss = f64::NAN;

    for iter in 0..cfg.total_iters {
        let iter_seed = rng::derive_seed(cfg.seed, iter as u64);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for b in 0..cfg.batch_size {
            let idx = sampler.random_range(0..dataset.len());
            batch.push(random_crop(
                &dataset[idx],
                cfg.crop,
                rng::derive_seed(iter_seed, 0xc0_0000 + b as u64),
            )?);
        }
        let (images, labels) = assemble_batch(&batch)?;

        let numeric_abort = |e: Error| match e {
            Error::NonFinite { .. } => Error::NumericAbort { iter },
            other => other,
        };
        let logits = model
            .forward(&images, Mode::Train, rng::derive_seed(iter_seed, 0xd0))
            .map_err(numeric_abort)?;
        let loss = ohem_ce(&logits, &labels, &ohem).map_err(numeric_abort)?;
        let loss_value = loss.item().as_f64();
        if !loss_value.is_finite() {
            return Err(Error::NumericAbort { iter });
        }
        loss.backward()?;
        drop(loss);
        drop(logits);

        let lr = lr_at(iter, cfg)?;
        optimizer.step(model, lr)?;
        final_loss = loss_value;

        if iter % cfg.log_every == 0 || iter + 1 == cfg.total_iters {
            let record = IterRecord {
                iter,
                lr,
                loss: loss_value,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            };
            on_record(&record);
            records.push(record);
        }
        if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 {
            if let Some(dir) = checkpoint_dir {
                checkpoints.push(save_checkpoint_file(model, dir, &format!("ckpt_{:06}", iter + 1))?);
            }
        }
    }

    if let Some(dir) = checkpoint_dir {
        checkpoints.push(save_checkpoint_file(model, dir, "ckpt_final")?);
    }

    Ok(TrainReport {
        records,
        checkpoints,
        total_wall_ms: start.elapsed().as_secs_f64() * 1e3,
        final_loss,
    })
}

fn save_checkpoint_file<T: Scalar>(
    model: &SegModel<T>,
    dir: &Path,
    name: &str,
) -> Result<PathBuf> {
    let path = dir.join(format!("{name}.bdgn"));
    let mut file = std::fs::File::create(&path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    model.save_checkpoint(&mut file)?;
    Ok(path)
}
