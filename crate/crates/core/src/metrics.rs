//! Evaluation: confusion-matrix accumulation, per-class IoU / mIoU, logits
//! argmax, and colorized prediction rendering.

use crate::data::{LabelMap, RgbImage, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Rows index ground truth, columns index prediction. Ignored pixels are
/// never counted; accumulation is order-independent and matrices merge by
/// elementwise addition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> ConfusionMatrix {
        assert_eq!(counts.len(), classes * classes);
        ConfusionMatrix { classes, counts }
    }

    /// Scores one prediction against ground truth; `ignore` pixels in the
    /// truth map contribute nothing.
    pub fn record(&mut self, pred: &LabelMap, truth: &LabelMap, ignore: u8) -> Result<()> {
        if pred.h != truth.h || pred.w != truth.w {
            return Err(Error::InvalidConfig(format!(
                "prediction {}x{} and truth {}x{} disagree",
                pred.h, pred.w, truth.h, truth.w
            )));
        }
        for (&p, &t) in pred.data.iter().zip(truth.data.iter()) {
            if t == ignore {
                continue;
            }
            if t as usize >= self.classes {
                return Err(Error::LabelOutOfRange {
                    label: t,
                    classes: self.classes,
                });
            }
            if p as usize >= self.classes {
                return Err(Error::LabelOutOfRange {
                    label: p,
                    classes: self.classes,
                });
            }
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(other.counts.iter()) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Per-class IoU `tp / (tp + fp + fn)`; classes that never occur (no
    /// true, false-positive, or false-negative pixels) are absent and
    /// excluded from the mean.
    pub fn miou(&self) -> MiouReport {
        let c = self.classes;
        let mut per_class = vec![None; c];
        let mut sum = 0.0;
        let mut present = 0usize;
        for k in 0..c {
            let tp = self.counts[k * c + k];
            let row: u64 = (0..c).map(|j| self.counts[k * c + j]).sum();
            let col: u64 = (0..c).map(|i| self.counts[i * c + k]).sum();
            let denom = row + col - tp;
            if denom == 0 {
                continue;
            }
            let iou = tp as f64 / denom as f64;
            per_class[k] = Some(iou);
            sum += iou;
            present += 1;
        }
        MiouReport {
            per_class,
            mean: if present == 0 { 0.0 } else { sum / present as f64 },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// Argmax over the class axis of `(n, C, H, W)` logits, one label map per
/// batch item. Ties resolve to the lowest class index.
pub fn argmax_logits<T: Scalar>(logits: &Tensor<T>) -> Vec<LabelMap> {
    let s = logits.shape();
    let hw = s.hw();
    let mut maps = Vec::with_capacity(s.n);
    for ni in 0..s.n {
        let mut data = vec![0u8; hw];
        for p in 0..hw {
            let mut best = logits.data()[(ni * s.c) * hw + p];
            let mut best_k = 0usize;
            for k in 1..s.c {
                let v = logits.data()[(ni * s.c + k) * hw + p];
                if v > best {
                    best = v;
                    best_k = k;
                }
            }
            data[p] = best_k as u8;
        }
        maps.push(LabelMap { h: s.h, w: s.w, data });
    }
    maps
}

// ---------------------------------------------------------------------------
// palettes and colorization
// ---------------------------------------------------------------------------

/// Official Cityscapes train-ID colors.
pub const CITYSCAPES_PALETTE: [(u8, u8, u8); 19] = [
    (128, 64, 128),  // road
    (244, 35, 232),  // sidewalk
    (70, 70, 70),    // building
    (102, 102, 156), // wall
    (190, 153, 153), // fence
    (153, 153, 153), // pole
    (250, 170, 30),  // traffic light
    (220, 220, 0),   // traffic sign
    (107, 142, 35),  // vegetation
    (152, 251, 152), // terrain
    (70, 130, 180),  // sky
    (220, 20, 60),   // person
    (255, 0, 0),     // rider
    (0, 0, 142),     // car
    (0, 0, 70),      // truck
    (0, 60, 100),    // bus
    (0, 80, 100),    // train
    (0, 0, 230),     // motorcycle
    (119, 11, 32),   // bicycle
];

/// The conventional 11-class CamVid palette.
pub const CAMVID_PALETTE: [(u8, u8, u8); 11] = [
    (128, 128, 128), // sky
    (128, 0, 0),     // building
    (192, 192, 128), // pole
    (128, 64, 128),  // road
    (0, 0, 192),     // pavement
    (128, 128, 0),   // tree
    (192, 128, 128), // sign symbol
    (64, 64, 128),   // fence
    (64, 0, 128),    // car
    (64, 64, 0),     // pedestrian
    (0, 128, 192),   // bicyclist
];

/// Distinct non-black colors for ad-hoc class counts (synthetic data).
pub fn auto_palette(classes: usize) -> Vec<(u8, u8, u8)> {
    let colors = crate::data::synth_class_colors(classes);
    colors
        .into_iter()
        .map(|(r, g, b)| {
            (
                (r * 255.0).round().max(1.0) as u8,
                (g * 255.0).round().max(1.0) as u8,
                (b * 255.0).round().max(1.0) as u8,
            )
        })
        .collect()
}

/// Renders a label map through a palette; ignore-index pixels become black.
/// Any other label outside the palette is an error.
pub fn colorize(map: &LabelMap, palette: &[(u8, u8, u8)], ignore: u8) -> Result<RgbImage> {
    let mut data = vec![0u8; map.data.len() * 3];
    for (p, &v) in map.data.iter().enumerate() {
        let (r, g, b) = if v == ignore {
            (0, 0, 0)
        } else {
            *palette
                .get(v as usize)
                .ok_or(Error::LabelOutOfRange {
                    label: v,
                    classes: palette.len(),
                })?
        };
        data[3 * p] = r;
        data[3 * p + 1] = g;
        data[3 * p + 2] = b;
    }
    Ok(RgbImage {
        h: map.h,
        w: map.w,
        data,
    })
}

/// Inverse of [`colorize`] for injective palettes: black maps back to the
/// ignore index, unknown colors are an error.
pub fn palette_inverse(img: &RgbImage, palette: &[(u8, u8, u8)], ignore: u8) -> Result<LabelMap> {
    let mut data = vec![0u8; img.h * img.w];
    for p in 0..img.h * img.w {
        let rgb = (img.data[3 * p], img.data[3 * p + 1], img.data[3 * p + 2]);
        if rgb == (0, 0, 0) {
            data[p] = ignore;
            continue;
        }
        let label = palette
            .iter()
            .position(|&c| c == rgb)
            .ok_or_else(|| Error::InvalidConfig(format!("color {rgb:?} not in palette")))?;
        data[p] = label as u8;
    }
    Ok(LabelMap {
        h: img.h,
        w: img.w,
        data,
    })
}

/// Convenience: score a batch of predictions against samples.
pub fn score_samples(
    cm: &mut ConfusionMatrix,
    preds: &[LabelMap],
    truths: &[&LabelMap],
) -> Result<()> {
    for (p, t) in preds.iter().zip(truths.iter()) {
        cm.record(p, t, IGNORE_INDEX)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix_is_perfect() {
        let cm = ConfusionMatrix::from_counts(3, vec![5, 0, 0, 0, 7, 0, 0, 0, 2]);
        let report = cm.miou();
        assert_eq!(report.mean, 1.0);
        assert!(report.per_class.iter().all(|c| *c == Some(1.0)));
    }

    #[test]
    fn fully_swapped_two_class_prediction_scores_zero() {
        let cm = ConfusionMatrix::from_counts(2, vec![0, 4, 6, 0]);
        assert_eq!(cm.miou().mean, 0.0);
    }

    #[test]
    fn hand_confusion_matrix_value() {
        // [[3, 1], [2, 4]]: IoU_0 = 3/6, IoU_1 = 4/7
        let cm = ConfusionMatrix::from_counts(2, vec![3, 1, 2, 4]);
        let report = cm.miou();
        assert!((report.per_class[0].unwrap() - 0.5).abs() < 1e-12);
        assert!((report.per_class[1].unwrap() - 4.0 / 7.0).abs() < 1e-12);
        assert!((report.mean - 0.5357142857142857).abs() < 1e-4);
    }

    #[test]
    fn absent_classes_are_excluded_from_the_mean() {
        let cm = ConfusionMatrix::from_counts(3, vec![4, 0, 0, 0, 0, 0, 0, 0, 0]);
        let report = cm.miou();
        assert_eq!(report.per_class[1], None);
        assert_eq!(report.per_class[2], None);
        assert_eq!(report.mean, 1.0);
    }

    #[test]
    fn ignore_pixels_contribute_to_no_cell() {
        let pred = LabelMap {
            h: 1,
            w: 3,
            data: vec![0, 1, 1],
        };
        let truth = LabelMap {
            h: 1,
            w: 3,
            data: vec![0, IGNORE_INDEX, 1],
        };
        let mut cm = ConfusionMatrix::new(2);
        cm.record(&pred, &truth, IGNORE_INDEX).unwrap();
        assert_eq!(cm.total(), 2);
    }

    #[test]
    fn merge_equals_summed_accumulation() {
        let a = LabelMap {
            h: 1,
            w: 4,
            data: vec![0, 1, 0, 1],
        };
        let b = LabelMap {
            h: 1,
            w: 4,
            data: vec![1, 1, 0, 0],
        };
        let mut separate = (ConfusionMatrix::new(2), ConfusionMatrix::new(2));
        separate.0.record(&a, &b, IGNORE_INDEX).unwrap();
        separate.1.record(&b, &a, IGNORE_INDEX).unwrap();
        let mut merged = separate.0.clone();
        merged.merge(&separate.1);

        let mut together = ConfusionMatrix::new(2);
        together.record(&a, &b, IGNORE_INDEX).unwrap();
        together.record(&b, &a, IGNORE_INDEX).unwrap();
        assert_eq!(merged, together);
        assert_eq!(merged.miou(), together.miou());
    }

    #[test]
    fn colorize_ignore_goes_black_and_inverse_recovers_labels() {
        let map = LabelMap {
            h: 2,
            w: 2,
            data: vec![0, 5, 18, IGNORE_INDEX],
        };
        let img = colorize(&map, &CITYSCAPES_PALETTE, IGNORE_INDEX).unwrap();
        assert_eq!(&img.data[9..12], &[0, 0, 0]);
        let back = palette_inverse(&img, &CITYSCAPES_PALETTE, IGNORE_INDEX).unwrap();
        assert_eq!(back.data, map.data);
    }

    #[test]
    fn colorize_single_class_is_flat() {
        let map = LabelMap {
            h: 2,
            w: 2,
            data: vec![3; 4],
        };
        let img = colorize(&map, &CAMVID_PALETTE, IGNORE_INDEX).unwrap();
        let first = &img.data[..3];
        for p in 1..4 {
            assert_eq!(&img.data[3 * p..3 * p + 3], first);
        }
    }

    #[test]
    fn colorize_rejects_label_outside_palette() {
        let map = LabelMap {
            h: 1,
            w: 1,
            data: vec![19],
        };
        assert!(colorize(&map, &CITYSCAPES_PALETTE, IGNORE_INDEX).is_err());
    }

    #[test]
    fn all_ignore_map_renders_black() {
        let map = LabelMap {
            h: 2,
            w: 2,
            data: vec![IGNORE_INDEX; 4],
        };
        let img = colorize(&map, &CITYSCAPES_PALETTE, IGNORE_INDEX).unwrap();
        assert!(img.data.iter().all(|&v| v == 0));
    }

    #[test]
    fn palettes_are_injective_and_black_free() {
        for palette in [&CITYSCAPES_PALETTE[..], &CAMVID_PALETTE[..]] {
            let mut seen = std::collections::BTreeSet::new();
            for &c in palette {
                assert_ne!(c, (0, 0, 0));
                assert!(seen.insert(c));
            }
        }
        let auto = auto_palette(6);
        let mut seen = std::collections::BTreeSet::new();
        for c in auto {
            assert_ne!(c, (0, 0, 0));
            assert!(seen.insert(c));
        }
    }

    #[test]
    fn argmax_ties_resolve_to_lowest_class() {
        use crate::tensor::{Shape, Tensor};
        let logits =
            Tensor::<f32>::from_vec(Shape::new(1, 2, 1, 2), vec![1.0, 0.0, 1.0, 2.0]).unwrap();
        let maps = argmax_logits(&logits);
        assert_eq!(maps[0].data, vec![0, 1]);
    }
}
