//! Dataset ingestion: binary PPM/PGM rasters, Cityscapes/CamVid label-ID
//! mapping and directory layouts, image normalization, and a deterministic
//! synthetic shape dataset for desk-scale training.
//!
//! Only lossless 8-bit PPM (P6) and PGM (P5) are decoded natively; PNG-based
//! datasets are converted with any standard tool first (see the README).

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Scalar, Shape, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// raster formats
// ---------------------------------------------------------------------------

/// Interleaved 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

/// Single-channel label map with `u8` class IDs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn filled(h: usize, w: usize, value: u8) -> LabelMap {
        LabelMap {
            h,
            w,
            data: vec![value; h * w],
        }
    }
}

struct PnmHeader {
    w: usize,
    h: usize,
    payload_at: usize,
}

/// Parses a P5/P6 header: magic, whitespace-separated width/height/maxval
/// (with `#` comments allowed), then a single whitespace before the payload.
fn parse_pnm_header(bytes: &[u8], magic: &[u8], path: &str) -> Result<PnmHeader> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(
            path,
            format!("wrong magic, expected {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::format(path, "bad header field"))?;
    }
    if fields[2] != 255 {
        return Err(Error::format(
            path,
            format!("maxval {} unsupported, expected 255", fields[2]),
        ));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format(path, "missing separator before payload"));
    }
    Ok(PnmHeader {
        w: fields[0],
        h: fields[1],
        payload_at: pos + 1,
    })
}

pub fn decode_ppm(bytes: &[u8], path: &str) -> Result<RgbImage> {
    let header = parse_pnm_header(bytes, b"P6", path)?;
    let need = header.w * header.h * 3;
    let payload = &bytes[header.payload_at..];
    if payload.len() < need {
        return Err(Error::format(
            path,
            format!("truncated payload: need {need} bytes, have {}", payload.len()),
        ));
    }
    Ok(RgbImage {
        h: header.h,
        w: header.w,
        data: payload[..need].to_vec(),
    })
}

pub fn decode_pgm(bytes: &[u8], path: &str) -> Result<LabelMap> {
    let header = parse_pnm_header(bytes, b"P5", path)?;
    let need = header.w * header.h;
    let payload = &bytes[header.payload_at..];
    if payload.len() < need {
        return Err(Error::format(
            path,
            format!("truncated payload: need {need} bytes, have {}", payload.len()),
        ));
    }
    Ok(LabelMap {
        h: header.h,
        w: header.w,
        data: payload[..need].to_vec(),
    })
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_ppm(&bytes, &path.display().to_string())
}

pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_pgm(&bytes, &path.display().to_string())
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(img.data.len() + 32);
    write!(out, "P6\n{} {}\n255\n", img.w, img.h).unwrap();
    out.extend_from_slice(&img.data);
    out
}

pub fn encode_pgm(map: &LabelMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(map.data.len() + 32);
    write!(out, "P5\n{} {}\n255\n", map.w, map.h).unwrap();
    out.extend_from_slice(&map.data);
    out
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_pgm(path: &Path, map: &LabelMap) -> Result<()> {
    fs::write(path, encode_pgm(map)).map_err(|e| Error::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// label schemes
// ---------------------------------------------------------------------------

pub const IGNORE_INDEX: u8 = 255;

/// Label-ID remapping applied on load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelScheme {
    /// The standard 34-class to 19-train-ID Cityscapes table; unmapped IDs
    /// become the ignore index.
    Cityscapes19,
    /// The 11-class CamVid subset: IDs 0..=10 kept, everything else ignored.
    Camvid11,
    /// Labels pass through unchanged.
    Identity,
}

/// `(raw label ID, train ID)` pairs of the Cityscapes 34->19 convention.
pub const CITYSCAPES_34_TO_19: [(u8, u8); 19] = [
    (7, 0),   // road
    (8, 1),   // sidewalk
    (11, 2),  // building
    (12, 3),  // wall
    (13, 4),  // fence
    (17, 5),  // pole
    (19, 6),  // traffic light
    (20, 7),  // traffic sign
    (21, 8),  // vegetation
    (22, 9),  // terrain
    (23, 10), // sky
    (24, 11), // person
    (25, 12), // rider
    (26, 13), // car
    (27, 14), // truck
    (28, 15), // bus
    (31, 16), // train
    (32, 17), // motorcycle
    (33, 18), // bicycle
];

pub fn map_labels(raw: &LabelMap, scheme: LabelScheme) -> LabelMap {
    match scheme {
        LabelScheme::Identity => raw.clone(),
        LabelScheme::Cityscapes19 => {
            let mut table = [IGNORE_INDEX; 256];
            for (raw_id, train_id) in CITYSCAPES_34_TO_19 {
                table[raw_id as usize] = train_id;
            }
            LabelMap {
                h: raw.h,
                w: raw.w,
                data: raw.data.iter().map(|&v| table[v as usize]).collect(),
            }
        }
        LabelScheme::Camvid11 => LabelMap {
            h: raw.h,
            w: raw.w,
            data: raw
                .data
                .iter()
                .map(|&v| if v <= 10 { v } else { IGNORE_INDEX })
                .collect(),
        },
    }
}

// ---------------------------------------------------------------------------
// samples and normalization
// ---------------------------------------------------------------------------

/// Per-channel normalization constants applied after scaling to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

/// One image/label pair. The image is a `(1, 3, H, W)` tensor, scaled to
/// [0, 1] and normalized; label values lie in `[0, classes)` or are the
/// ignore index.
pub struct SegSample<T: Scalar> {
    pub image: Tensor<T>,
    pub label: LabelMap,
    pub id: String,
}

/// Converts an interleaved RGB image to a normalized `(1, 3, H, W)` tensor.
pub fn image_to_tensor<T: Scalar>(img: &RgbImage, norm: &Normalization) -> Tensor<T> {
    let hw = img.h * img.w;
    let mut data = vec![T::zero(); 3 * hw];
    for c in 0..3 {
        let (mean, std) = (norm.mean[c], norm.std[c]);
        for p in 0..hw {
            let v = img.data[p * 3 + c] as f64 / 255.0;
            data[c * hw + p] = T::from_f64((v - mean) / std);
        }
    }
    Tensor::from_vec(Shape::new(1, 3, img.h, img.w), data).expect("size matches")
}

fn validate_labels(map: &LabelMap, classes: usize, path: &str) -> Result<()> {
    for &v in &map.data {
        if v != IGNORE_INDEX && v as usize >= classes {
            return Err(Error::format(
                path,
                format!("label {v} out of range for {classes} classes"),
            ));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// manifests and directory conventions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub label: PathBuf,
    pub id: String,
}

/// A JSON index of image/label pairs. Paths are resolved relative to the
/// manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<(Manifest, PathBuf)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let manifest: Manifest = serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok((manifest, base))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Scans a Cityscapes-style tree: `<root>/leftImg8bit/<split>/<city>/
/// <id>_leftImg8bit.ppm` paired with `<root>/gtFine/<split>/<city>/
/// <id>_gtFine_labelIds.pgm`. Entries are sorted by ID.
pub fn discover_cityscapes(root: &Path, split: &str) -> Result<Manifest> {
    let image_root = root.join("leftImg8bit").join(split);
    let mut entries = Vec::new();
    for entry in walkdir::WalkDir::new(&image_root).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            Error::format(image_root.display().to_string(), e.to_string())
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().to_string();
        let Some(stem) = name.strip_suffix("_leftImg8bit.ppm") else {
            continue;
        };
        let rel = entry
            .path()
            .strip_prefix(root)
            .expect("under root")
            .to_path_buf();
        let label_rel = PathBuf::from(
            rel.display()
                .to_string()
                .replacen("leftImg8bit", "gtFine", 1)
                .replace("_leftImg8bit.ppm", "_gtFine_labelIds.pgm"),
        );
        entries.push(ManifestEntry {
            image: rel,
            label: label_rel,
            id: stem.to_string(),
        });
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(Manifest { entries })
}

/// Loads every manifest entry, applying the label scheme and normalization.
pub fn load_samples<T: Scalar>(
    manifest: &Manifest,
    base: &Path,
    norm: &Normalization,
    scheme: LabelScheme,
    classes: usize,
) -> Result<Vec<SegSample<T>>> {
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let img = read_ppm(&base.join(&e.image))?;
        let raw = read_pgm(&base.join(&e.label))?;
        if img.h != raw.h || img.w != raw.w {
            return Err(Error::format(
                e.id.clone(),
                format!(
                    "image {}x{} and label {}x{} disagree",
                    img.h, img.w, raw.h, raw.w
                ),
            ));
        }
        let label = map_labels(&raw, scheme);
        validate_labels(&label, classes, &e.id)?;
        samples.push(SegSample {
            image: image_to_tensor(&img, norm),
            label,
            id: e.id.clone(),
        });
    }
    Ok(samples)
}

// ---------------------------------------------------------------------------
// synthetic dataset
// ---------------------------------------------------------------------------

/// Generator settings for the synthetic shape dataset.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub size: (usize, usize),
    pub classes: usize,
    pub seed: u64,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
}

fn default_noise() -> f64 {
    0.05
}

const SYNTH_BACKGROUND: (f64, f64, f64) = (0.16, 0.16, 0.2);

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i64).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Flat color of each class in [0, 1] RGB; index 0 is the background.
pub fn synth_class_colors(classes: usize) -> Vec<(f64, f64, f64)> {
    let mut colors = vec![SYNTH_BACKGROUND];
    for k in 1..classes {
        let hue = 0.83 * (k - 1) as f64 / (classes - 1).max(1) as f64;
        colors.push(hsv_to_rgb(hue, 0.78, 0.88));
    }
    colors
}

/// Generates sample `index` of the synthetic dataset: a flat background plus
/// one randomly placed rectangle or disc per non-background class, each in
/// its fixed class color, with additive Gaussian pixel noise. Deterministic
/// per `(spec.seed, index)`.
pub fn synth_sample<T: Scalar>(
    spec: &SynthSpec,
    index: usize,
    norm: &Normalization,
) -> Result<SegSample<T>> {
    let (h, w) = spec.size;
    if spec.classes < 2 {
        return Err(Error::InvalidConfig("synthetic dataset needs >= 2 classes".into()));
    }
    if h < 8 || w < 8 {
        return Err(Error::InvalidConfig(format!(
            "synthetic size {h}x{w} too small to place shapes"
        )));
    }
    let mut rng = rng::rng_from(rng::derive_seed(spec.seed, index as u64));
    let colors = synth_class_colors(spec.classes);

    let mut label = LabelMap::filled(h, w, 0);
    let mut rgb = vec![0.0f64; 3 * h * w];
    for p in 0..h * w {
        rgb[3 * p] = colors[0].0;
        rgb[3 * p + 1] = colors[0].1;
        rgb[3 * p + 2] = colors[0].2;
    }

    let min_extent = (h.min(w) / 6).max(2);
    let max_extent = (h.min(w) / 2).max(3);
    for class in 1..spec.classes {
        let color = colors[class];
        let circle: bool = rng.random();
        if circle {
            let r_max = (max_extent / 2 + 1).min(h.min(w) / 2 - 1);
            let r = rng.random_range((min_extent / 2 + 1).min(r_max)..=r_max);
            let cy = rng.random_range(r..h - r);
            let cx = rng.random_range(r..w - r);
            for y in cy - r..=cy + r {
                for x in cx - r..=cx + r {
                    let dy = y as i64 - cy as i64;
                    let dx = x as i64 - cx as i64;
                    if dy * dy + dx * dx <= (r * r) as i64 {
                        paint(&mut rgb, &mut label, y, x, w, class as u8, color);
                    }
                }
            }
        } else {
            let rh = rng.random_range(min_extent..=max_extent);
            let rw = rng.random_range(min_extent..=max_extent);
            let y0 = rng.random_range(0..h - rh);
            let x0 = rng.random_range(0..w - rw);
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    paint(&mut rgb, &mut label, y, x, w, class as u8, color);
                }
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("valid sigma");
        for v in rgb.iter_mut() {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }

    let hw = h * w;
    let mut data = vec![T::zero(); 3 * hw];
    for c in 0..3 {
        let (mean, std) = (norm.mean[c], norm.std[c]);
        for p in 0..hw {
            data[c * hw + p] = T::from_f64((rgb[3 * p + c] - mean) / std);
        }
    }
    Ok(SegSample {
        image: Tensor::from_vec(Shape::new(1, 3, h, w), data)?,
        label,
        id: format!("synth-{:08x}-{index:04}", spec.seed),
    })
}

fn paint(
    rgb: &mut [f64],
    label: &mut LabelMap,
    y: usize,
    x: usize,
    w: usize,
    class: u8,
    color: (f64, f64, f64),
) {
    let p = y * w + x;
    label.data[p] = class;
    rgb[3 * p] = color.0;
    rgb[3 * p + 1] = color.1;
    rgb[3 * p + 2] = color.2;
}

pub fn synth_dataset<T: Scalar>(
    count: usize,
    spec: &SynthSpec,
    norm: &Normalization,
) -> Result<Vec<SegSample<T>>> {
    (0..count).map(|i| synth_sample(spec, i, norm)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_p6_decodes_dimensions_and_payload() {
        let bytes = b"P6\n2 1\n255\n\x01\x02\x03\x04\x05\x06";
        let img = decode_ppm(bytes, "t").unwrap();
        assert_eq!((img.h, img.w), (1, 2));
        assert_eq!(img.data, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn pgm_p5_decodes_single_label() {
        let bytes = b"P5\n1 1\n255\n\x07";
        let map = decode_pgm(bytes, "t").unwrap();
        assert_eq!((map.h, map.w), (1, 1));
        assert_eq!(map.data, vec![7]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P5\n# a comment\n2 2\n255\n\x00\x01\x02\x03";
        let map = decode_pgm(bytes, "t").unwrap();
        assert_eq!(map.data, vec![0, 1, 2, 3]);
    }

    #[test]
    fn raster_round_trip_is_bit_exact() {
        let img = RgbImage {
            h: 3,
            w: 2,
            data: (0..18).collect(),
        };
        assert_eq!(decode_ppm(&encode_ppm(&img), "t").unwrap(), img);
        let map = LabelMap {
            h: 2,
            w: 3,
            data: vec![0, 255, 7, 9, 1, 2],
        };
        assert_eq!(decode_pgm(&encode_pgm(&map), "t").unwrap(), map);
    }

    #[test]
    fn raster_errors() {
        assert!(decode_ppm(b"P5\n1 1\n255\n\x00", "t").is_err()); // wrong magic
        assert!(decode_ppm(b"P6\n2 2\n255\n\x00\x01", "t").is_err()); // truncated
        assert!(decode_pgm(b"P5\n1 1\n65535\n\x00\x00", "t").is_err()); // maxval
    }

    #[test]
    fn cityscapes_mapping_road_and_unlabeled() {
        let raw = LabelMap {
            h: 1,
            w: 3,
            data: vec![7, 0, 26],
        };
        let mapped = map_labels(&raw, LabelScheme::Cityscapes19);
        assert_eq!(mapped.data, vec![0, IGNORE_INDEX, 13]);
    }

    #[test]
    fn identity_scheme_leaves_mapped_labels_unchanged() {
        let raw = LabelMap {
            h: 1,
            w: 4,
            data: vec![0, 18, 5, IGNORE_INDEX],
        };
        assert_eq!(map_labels(&raw, LabelScheme::Identity).data, raw.data);
    }

    #[test]
    fn camvid_mapping_keeps_subset() {
        let raw = LabelMap {
            h: 1,
            w: 4,
            data: vec![0, 10, 11, 30],
        };
        let mapped = map_labels(&raw, LabelScheme::Camvid11);
        assert_eq!(mapped.data, vec![0, 10, IGNORE_INDEX, IGNORE_INDEX]);
    }

    #[test]
    fn synth_samples_are_deterministic() {
        let spec = SynthSpec {
            size: (32, 32),
            classes: 3,
            seed: 5,
            noise_sigma: 0.05,
        };
        let norm = Normalization::default();
        let a = synth_sample::<f32>(&spec, 2, &norm).unwrap();
        let b = synth_sample::<f32>(&spec, 2, &norm).unwrap();
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.label.data, b.label.data);
        let c = synth_sample::<f32>(&spec, 3, &norm).unwrap();
        assert_ne!(a.label.data, c.label.data);
    }

    #[test]
    fn synth_zero_noise_two_classes_has_exactly_two_colors() {
        let spec = SynthSpec {
            size: (32, 32),
            classes: 2,
            seed: 9,
            noise_sigma: 0.0,
        };
        let s = synth_sample::<f64>(&spec, 0, &Normalization::default()).unwrap();
        let hw = 32 * 32;
        let mut colors = std::collections::BTreeSet::new();
        for p in 0..hw {
            let px = (
                s.image.data()[p].to_bits(),
                s.image.data()[hw + p].to_bits(),
                s.image.data()[2 * hw + p].to_bits(),
            );
            colors.insert(px);
        }
        assert_eq!(colors.len(), 2);
        // pixels of equal label share a color
        for p in 1..hw {
            if s.label.data[p] == s.label.data[0] {
                assert_eq!(s.image.data()[p], s.image.data()[0]);
            }
        }
    }

    #[test]
    fn synth_every_class_appears_across_the_dataset() {
        let spec = SynthSpec {
            size: (32, 32),
            classes: 4,
            seed: 11,
            noise_sigma: 0.05,
        };
        let ds = synth_dataset::<f32>(100, &spec, &Normalization::default()).unwrap();
        let mut histogram = [0usize; 4];
        for s in &ds {
            for &v in &s.label.data {
                histogram[v as usize] += 1;
            }
        }
        assert!(histogram.iter().all(|&c| c > 0), "{histogram:?}");
    }

    #[test]
    fn synth_too_small_is_error() {
        let spec = SynthSpec {
            size: (4, 4),
            classes: 3,
            seed: 1,
            noise_sigma: 0.0,
        };
        assert!(synth_sample::<f32>(&spec, 0, &Normalization::default()).is_err());
    }

    #[test]
    fn manifest_round_trip_and_cityscapes_discovery() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let img_dir = root.join("leftImg8bit/val/cityA");
        let gt_dir = root.join("gtFine/val/cityA");
        std::fs::create_dir_all(&img_dir).unwrap();
        std::fs::create_dir_all(&gt_dir).unwrap();
        let img = RgbImage {
            h: 2,
            w: 2,
            data: vec![10; 12],
        };
        let map = LabelMap {
            h: 2,
            w: 2,
            data: vec![7, 7, 0, 26],
        };
        write_ppm(&img_dir.join("a_000_leftImg8bit.ppm"), &img).unwrap();
        write_pgm(&gt_dir.join("a_000_gtFine_labelIds.pgm"), &map).unwrap();

        let manifest = discover_cityscapes(root, "val").unwrap();
        assert_eq!(manifest.entries.len(), 1);
        assert_eq!(manifest.entries[0].id, "a_000");

        let mpath = root.join("index.json");
        manifest.save(&mpath).unwrap();
        let (loaded, base) = Manifest::load(&mpath).unwrap();
        assert_eq!(loaded.entries.len(), 1);

        let samples = load_samples::<f32>(
            &loaded,
            &base,
            &Normalization::default(),
            LabelScheme::Cityscapes19,
            19,
        )
        .unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].label.data, vec![0, 0, IGNORE_INDEX, 13]);
        assert_eq!(samples[0].image.shape(), crate::tensor::Shape::new(1, 3, 2, 2));
    }
}
