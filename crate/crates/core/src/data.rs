//! Dataset ingestion, deterministic synthetic shape data, and the plain-text
//! run configuration (`key=value` lines, `#` comments, line-precise errors).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::contrast::LossConfig;
use crate::error::{Error, Result};
use crate::imops::{write_png, AugmentConfig, Image, Interpolation};
use crate::ndgrad::rng::{mix_seed, splitmix64, stream_rng};
use crate::net::{ModelVariant, NetConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// Ordered list of `(image_id, path)`; ordering is lexicographic by path and
/// therefore reproducible.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    entries: Vec<(String, PathBuf)>,
    pub split: Split,
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn scan_images(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !root.is_dir() {
        return Err(Error::Data(format!(
            "{} is not a readable directory",
            root.display()
        )));
    }
    let mut entries = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if !path.is_file() {
            continue;
        }
        let Some(ext) = path.extension().and_then(|e| e.to_str()) else {
            continue;
        };
        if IMAGE_EXTENSIONS.contains(&ext.to_ascii_lowercase().as_str()) {
            let id = path
                .file_name()
                .expect("file has a name")
                .to_string_lossy()
                .into_owned();
            entries.push((id, path));
        }
    }
    entries.sort_by(|a, b| a.1.cmp(&b.1));
    Ok(entries)
}

impl Dataset {
    /// All images under `root` (non-recursive), lexicographic order.
    pub fn from_dir(root: &Path, split: Split) -> Result<Self> {
        let entries = scan_images(root)?;
        if entries.is_empty() {
            return Err(Error::Data(format!(
                "no decodable images (png/jpg) in {}",
                root.display()
            )));
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            entries,
            split,
        })
    }

    pub fn entries(&self) -> &[(String, PathBuf)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn path_of(&self, image_id: &str) -> Option<&PathBuf> {
        self.entries
            .iter()
            .find(|(id, _)| id == image_id)
            .map(|(_, p)| p)
    }
}

/// Splits the images under `root` into train/eval. The partition is chosen
/// by ranking indices under a seeded hash, so it is deterministic for a
/// given `(root contents, seed)` and the split sizes are exact:
/// `round(n * split_fraction)` train entries.
pub fn load_dataset(root: &Path, split_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..=1.0).contains(&split_fraction) {
        return Err(Error::Data(format!(
            "split_fraction {split_fraction} outside [0, 1]"
        )));
    }
    let entries = scan_images(root)?;
    if entries.len() < 2 {
        return Err(Error::Data(format!(
            "{} must contain at least 2 images, found {}",
            root.display(),
            entries.len()
        )));
    }
    let n = entries.len();
    let n_train = ((n as f64) * split_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| splitmix64(mix_seed(seed, &[0x7370_6c69, i as u64])));
    let mut train_mask = vec![false; n];
    for &i in order.iter().take(n_train) {
        train_mask[i] = true;
    }
    let pick = |want: bool, split: Split| Dataset {
        root: root.to_path_buf(),
        entries: entries
            .iter()
            .enumerate()
            .filter(|(i, _)| train_mask[*i] == want)
            .map(|(_, e)| e.clone())
            .collect(),
        split,
    };
    Ok((pick(true, Split::Train), pick(false, Split::Eval)))
}

// ---------------------------------------------------------------------------
// Synthetic shape dataset
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeSpec {
    /// `size` is the radius.
    Circle { center: [f64; 2], size: f64, rgb: [f32; 3] },
    /// Axis-aligned; `size` is the side length.
    Square { center: [f64; 2], size: f64, rgb: [f32; 3] },
    /// Equilateral, vertex up; `size` is the side length.
    Triangle { center: [f64; 2], size: f64, rgb: [f32; 3] },
}

impl ShapeSpec {
    pub fn area(&self) -> f64 {
        match self {
            ShapeSpec::Circle { size, .. } => std::f64::consts::PI * size * size,
            ShapeSpec::Square { size, .. } => size * size,
            ShapeSpec::Triangle { size, .. } => 3f64.sqrt() / 4.0 * size * size,
        }
    }

    pub fn rgb(&self) -> [f32; 3] {
        match self {
            ShapeSpec::Circle { rgb, .. }
            | ShapeSpec::Square { rgb, .. }
            | ShapeSpec::Triangle { rgb, .. } => *rgb,
        }
    }

    fn bounding_radius(&self) -> f64 {
        match self {
            ShapeSpec::Circle { size, .. } => *size,
            ShapeSpec::Square { size, .. } => size * std::f64::consts::SQRT_2 / 2.0,
            ShapeSpec::Triangle { size, .. } => size / 3f64.sqrt(),
        }
    }

    fn center(&self) -> [f64; 2] {
        match self {
            ShapeSpec::Circle { center, .. }
            | ShapeSpec::Square { center, .. }
            | ShapeSpec::Triangle { center, .. } => *center,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            ShapeSpec::Circle { center, size, .. } => {
                (x - center[0]).powi(2) + (y - center[1]).powi(2) <= size * size
            }
            ShapeSpec::Square { center, size, .. } => {
                (x - center[0]).abs() <= size / 2.0 && (y - center[1]).abs() <= size / 2.0
            }
            ShapeSpec::Triangle { center, size, .. } => {
                let h = size * 3f64.sqrt() / 2.0;
                let top = (center[0], center[1] - 2.0 * h / 3.0);
                let left = (center[0] - size / 2.0, center[1] + h / 3.0);
                let right = (center[0] + size / 2.0, center[1] + h / 3.0);
                let sign = |a: (f64, f64), b: (f64, f64)| {
                    (x - b.0) * (a.1 - b.1) - (a.0 - b.0) * (y - b.1)
                };
                let d1 = sign(top, left);
                let d2 = sign(left, right);
                let d3 = sign(right, top);
                let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(has_neg && has_pos)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub shapes: Vec<ShapeSpec>,
}

fn hue_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

fn saturated_rgb(rng: &mut ChaCha8Rng, taken_hues: &[f64], bg_hue: f64) -> ([f32; 3], f64) {
    let mut hue = rng.gen::<f64>();
    for _ in 0..32 {
        let clear = hue_distance(hue, bg_hue) >= 0.08
            && taken_hues.iter().all(|&t| hue_distance(hue, t) >= 0.15);
        if clear {
            break;
        }
        hue = rng.gen::<f64>();
    }
    let s = rng.gen_range(0.85..1.0);
    let v = rng.gen_range(0.85..1.0);
    let (r, g, b) = crate::imops::hsv_to_rgb(hue, s, v);
    ([r as f32, g as f32, b as f32], hue)
}

fn render_synthetic(size: usize, rng: &mut ChaCha8Rng) -> (Image, Vec<ShapeSpec>) {
    let s = size as f64;
    // Muted textured background.
    let bg_hue = rng.gen::<f64>();
    let bg_sat = rng.gen_range(0.05..0.25);
    let bg_val = rng.gen_range(0.35..0.65);
    let (fx, fy) = (rng.gen_range(1.0..3.0), rng.gen_range(1.0..3.0));
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let (bg_r, bg_g, bg_b) = crate::imops::hsv_to_rgb(bg_hue, bg_sat, bg_val);

    // Non-overlapping shapes, up to three; rejection-sampled placement.
    let want = rng.gen_range(1..=3usize);
    let mut shapes: Vec<ShapeSpec> = Vec::new();
    let mut hues: Vec<f64> = Vec::new();
    for _ in 0..want {
        let mut placed = false;
        for _attempt in 0..40 {
            let kind = rng.gen_range(0..3);
            let area_frac = match kind {
                2 => rng.gen_range(0.10..0.28), // triangle cannot reach 0.4 inside the frame
                _ => rng.gen_range(0.10..0.40),
            };
            let area = area_frac * s * s;
            let (rgb, hue) = saturated_rgb(rng, &hues, bg_hue);
            let proto = match kind {
                0 => ShapeSpec::Circle {
                    center: [0.0, 0.0],
                    size: (area / std::f64::consts::PI).sqrt(),
                    rgb,
                },
                1 => ShapeSpec::Square {
                    center: [0.0, 0.0],
                    size: area.sqrt(),
                    rgb,
                },
                _ => ShapeSpec::Triangle {
                    center: [0.0, 0.0],
                    size: (4.0 * area / 3f64.sqrt()).sqrt(),
                    rgb,
                },
            };
            let br = proto.bounding_radius();
            if 2.0 * (br + 1.0) >= s {
                continue;
            }
            let cx = rng.gen_range(br + 1.0..s - br - 1.0);
            let cy = rng.gen_range(br + 1.0..s - br - 1.0);
            let candidate = match proto {
                ShapeSpec::Circle { size, rgb, .. } => ShapeSpec::Circle {
                    center: [cx, cy],
                    size,
                    rgb,
                },
                ShapeSpec::Square { size, rgb, .. } => ShapeSpec::Square {
                    center: [cx, cy],
                    size,
                    rgb,
                },
                ShapeSpec::Triangle { size, rgb, .. } => ShapeSpec::Triangle {
                    center: [cx, cy],
                    size,
                    rgb,
                },
            };
            let clear = shapes.iter().all(|other| {
                let oc = other.center();
                let d = ((cx - oc[0]).powi(2) + (cy - oc[1]).powi(2)).sqrt();
                d >= br + other.bounding_radius() + 2.0
            });
            if clear {
                hues.push(hue);
                shapes.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            break; // keep however many fit
        }
    }

    // Per-pixel noise values drawn row-major regardless of shape coverage.
    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            // Noise is drawn for every pixel so the stream does not depend
            // on shape coverage.
            let noise = rng.gen_range(-0.02..0.02);
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if let Some(shape) = shapes.iter().find(|sh| sh.contains(px, py)) {
                pixels.extend_from_slice(&shape.rgb());
            } else {
                let wave = 0.035
                    * (std::f64::consts::TAU * (fx * px / s + fy * py / s) + phase).sin();
                let d = (wave + noise) as f32;
                pixels.push((bg_r as f32 + d).clamp(0.0, 1.0));
                pixels.push((bg_g as f32 + d).clamp(0.0, 1.0));
                pixels.push((bg_b as f32 + d).clamp(0.0, 1.0));
            }
        }
    }
    (
        Image::new(size, size, pixels).expect("synthetic pixels in range"),
        shapes,
    )
}

/// Deterministic synthetic dataset: textured backgrounds with 1-3
/// non-overlapping saturated shapes each. Writes PNGs plus `manifest.json`
/// (shape geometry, consumed only by tests).
pub fn gen_synthetic(n_images: usize, size: usize, seed: u64, out_dir: &Path) -> Result<Dataset> {
    if n_images < 2 {
        return Err(Error::Data(format!(
            "need at least 2 synthetic images, got {n_images}"
        )));
    }
    if size < 32 {
        return Err(Error::Data(format!("size {size} too small (minimum 32)")));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut manifest = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let mut rng = stream_rng(seed, i as u64);
        let (img, shapes) = render_synthetic(size, &mut rng);
        let image_id = format!("synth_{i:05}.png");
        write_png(&img, &out_dir.join(&image_id))?;
        manifest.push(ManifestEntry { image_id, shapes });
    }
    let manifest_path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&serde_json::json!({ "images": manifest }))
        .expect("manifest serializes");
    std::fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;

    Dataset::from_dir(out_dir, Split::Train)
}

// ---------------------------------------------------------------------------
// Training configuration
// ---------------------------------------------------------------------------

/// Full run configuration. Parsed from `key=value` text; a `variant` key
/// applies that model's preset before the remaining keys override fields.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub variant: ModelVariant,
    pub epochs: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub image_size: usize,
    pub crop_size: usize,
    pub embedding_dim: usize,
    pub repr_dim: usize,
    pub pyramid_dim: usize,
    /// Anchor cap M per sample and level; 0 disables the cap.
    pub anchors_per_sample: usize,
    pub split_fraction: f64,
    pub augment: AugmentConfig,
}

/// M1 redraws its jitter ranges each epoch from these bounds.
pub const M1_HUE_MAX: f64 = 0.5;
pub const M1_SCALE_BOUNDS: (f64, f64) = (0.2, 1.8);

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::preset(ModelVariant::M4)
    }
}

impl TrainConfig {
    /// Per-variant defaults: M1/M2 restrict crop interpolation to bilinear
    /// and use mild blur; M3/M4 add strong blur and random interpolation;
    /// M1 trains 80 epochs (early stopping), everything else 100.
    pub fn preset(variant: ModelVariant) -> Self {
        let (blur, interps) = match variant {
            ModelVariant::M1 | ModelVariant::M2 => {
                ((0.0, 0.5), vec![Interpolation::Bilinear])
            }
            ModelVariant::M3 | ModelVariant::M4 => (
                (0.5, 2.0),
                vec![
                    Interpolation::Nearest,
                    Interpolation::Bilinear,
                    Interpolation::Bicubic,
                ],
            ),
        };
        let epochs = if variant == ModelVariant::M1 { 80 } else { 100 };
        let seed = 42;
        let image_size = 64;
        TrainConfig {
            variant,
            epochs,
            batch_size: 8,
            tau: 0.1,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed,
            image_size,
            crop_size: 32,
            embedding_dim: 32,
            repr_dim: 128,
            pyramid_dim: 64,
            anchors_per_sample: 64,
            split_fraction: 0.9,
            augment: AugmentConfig {
                blur_sigma_range: blur,
                interpolations: interps,
                out_size: image_size,
                seed,
                ..AugmentConfig::default()
            },
        }
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            image_size: self.image_size,
            crop_size: self.crop_size,
            repr_dim: self.repr_dim,
            embed_dim: self.embedding_dim,
            pyramid_dim: self.pyramid_dim,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            batch_size: self.batch_size,
            anchors_per_sample: if self.anchors_per_sample == 0 {
                None
            } else {
                Some(self.anchors_per_sample)
            },
        }
    }

    /// Seed for evaluation crops, disjoint from training streams.
    pub fn eval_seed(&self) -> u64 {
        mix_seed(self.seed, &[0x6576_616c])
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Data("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Data("batch_size must be at least 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Data(format!("tau {} must be positive", self.tau)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Data("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Data("adam betas must be in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Data("adam_eps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.split_fraction) {
            return Err(Error::Data(format!(
                "split_fraction {} outside [0, 1]",
                self.split_fraction
            )));
        }
        self.net_config().validate()?;
        self.augment.validate()?;
        Ok(())
    }
}

/// Augmentation settings used for a given epoch: M1 re-draws its jitter
/// ranges per epoch from broad bounds; all other variants use the
/// configuration as-is.
pub fn epoch_augment(cfg: &TrainConfig, epoch: usize) -> AugmentConfig {
    let mut aug = cfg.augment.clone();
    // Each epoch sees fresh augmentation draws.
    aug.seed = mix_seed(cfg.seed, &[0x6175_67, epoch as u64]);
    if cfg.variant == ModelVariant::M1 {
        let mut rng = stream_rng(cfg.seed, mix_seed(0x6a69_74, &[epoch as u64]));
        aug.hue_delta = rng.gen_range(0.0..=M1_HUE_MAX);
        let lo = rng.gen_range(M1_SCALE_BOUNDS.0..1.0);
        let hi = rng.gen_range(1.0..=M1_SCALE_BOUNDS.1);
        aug.sat_range = (lo, hi);
        let lo = rng.gen_range(M1_SCALE_BOUNDS.0..1.0);
        let hi = rng.gen_range(1.0..=M1_SCALE_BOUNDS.1);
        aug.val_range = (lo, hi);
    }
    aug
}

const CONFIG_KEYS: [&str; 30] = [
    "variant",
    "epochs",
    "batch_size",
    "tau",
    "learning_rate",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "seed",
    "image_size",
    "crop_size",
    "embedding_dim",
    "repr_dim",
    "pyramid_dim",
    "anchors_per_sample",
    "split_fraction",
    "p_crop_zoom",
    "p_flip_h",
    "p_flip_v",
    "p_jpeg",
    "hue_delta",
    "sat_lo",
    "sat_hi",
    "val_lo",
    "val_hi",
    "blur_lo",
    "blur_hi",
    "jpeg_q_lo",
    "jpeg_q_hi",
    "interpolations",
];

pub fn parse_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<TrainConfig> {
    let cerr = |line: usize, detail: String| Error::Config { line, detail };

    let mut pairs: Vec<(usize, &str, &str)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(cerr(line_no, format!("expected key=value, got {line:?}")));
        };
        let (key, value) = (key.trim(), value.trim());
        if !CONFIG_KEYS.contains(&key) {
            return Err(cerr(line_no, format!("unknown key {key:?}")));
        }
        pairs.push((line_no, key, value));
    }

    // The variant selects the preset; remaining keys override it in order.
    let mut variant = ModelVariant::M4;
    for &(line_no, key, value) in &pairs {
        if key == "variant" {
            variant = value
                .parse::<ModelVariant>()
                .map_err(|e| cerr(line_no, e))?;
        }
    }
    let epochs_overridden = pairs.iter().any(|(_, k, _)| *k == "epochs");
    let mut cfg = TrainConfig::preset(variant);

    fn parse_num<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        value.parse::<T>().map_err(|e| Error::Config {
            line,
            detail: format!("{key}: cannot parse {value:?}: {e}"),
        })
    }

    for &(line_no, key, value) in &pairs {
        match key {
            "variant" => {}
            "epochs" => cfg.epochs = parse_num(line_no, key, value)?,
            "batch_size" => cfg.batch_size = parse_num(line_no, key, value)?,
            "tau" => cfg.tau = parse_num(line_no, key, value)?,
            "learning_rate" => cfg.learning_rate = parse_num(line_no, key, value)?,
            "adam_beta1" => cfg.adam_beta1 = parse_num(line_no, key, value)?,
            "adam_beta2" => cfg.adam_beta2 = parse_num(line_no, key, value)?,
            "adam_eps" => cfg.adam_eps = parse_num(line_no, key, value)?,
            "seed" => cfg.seed = parse_num(line_no, key, value)?,
            "image_size" => cfg.image_size = parse_num(line_no, key, value)?,
            "crop_size" => cfg.crop_size = parse_num(line_no, key, value)?,
            "embedding_dim" => cfg.embedding_dim = parse_num(line_no, key, value)?,
            "repr_dim" => cfg.repr_dim = parse_num(line_no, key, value)?,
            "pyramid_dim" => cfg.pyramid_dim = parse_num(line_no, key, value)?,
            "anchors_per_sample" => cfg.anchors_per_sample = parse_num(line_no, key, value)?,
            "split_fraction" => cfg.split_fraction = parse_num(line_no, key, value)?,
            "p_crop_zoom" => cfg.augment.p_crop_zoom = parse_num(line_no, key, value)?,
            "p_flip_h" => cfg.augment.p_flip_h = parse_num(line_no, key, value)?,
            "p_flip_v" => cfg.augment.p_flip_v = parse_num(line_no, key, value)?,
            "p_jpeg" => cfg.augment.p_jpeg = parse_num(line_no, key, value)?,
            "hue_delta" => cfg.augment.hue_delta = parse_num(line_no, key, value)?,
            "sat_lo" => cfg.augment.sat_range.0 = parse_num(line_no, key, value)?,
            "sat_hi" => cfg.augment.sat_range.1 = parse_num(line_no, key, value)?,
            "val_lo" => cfg.augment.val_range.0 = parse_num(line_no, key, value)?,
            "val_hi" => cfg.augment.val_range.1 = parse_num(line_no, key, value)?,
            "blur_lo" => cfg.augment.blur_sigma_range.0 = parse_num(line_no, key, value)?,
            "blur_hi" => cfg.augment.blur_sigma_range.1 = parse_num(line_no, key, value)?,
            "jpeg_q_lo" => cfg.augment.jpeg_quality_range.0 = parse_num(line_no, key, value)?,
            "jpeg_q_hi" => cfg.augment.jpeg_quality_range.1 = parse_num(line_no, key, value)?,
            "interpolations" => {
                let mut modes = Vec::new();
                for part in value.split(',') {
                    let mode = part
                        .trim()
                        .parse::<Interpolation>()
                        .map_err(|e| cerr(line_no, e))?;
                    if !modes.contains(&mode) {
                        modes.push(mode);
                    }
                }
                if modes.is_empty() {
                    return Err(cerr(line_no, "interpolations: empty list".into()));
                }
                cfg.augment.interpolations = modes;
            }
            _ => unreachable!("key membership checked above"),
        }
    }

    if !epochs_overridden {
        cfg.epochs = if variant == ModelVariant::M1 { 80 } else { 100 };
    }
    cfg.augment.seed = cfg.seed;
    cfg.augment.out_size = cfg.image_size;
    cfg.validate().map_err(|e| Error::Config {
        line: 0,
        detail: e.to_string(),
    })?;
    Ok(cfg)
}

/// Canonical text form; `parse_config_str(serialize_config(c)) == c`.
pub fn serialize_config(cfg: &TrainConfig) -> String {
    let mut out = String::new();
    let mut kv: BTreeMap<&str, String> = BTreeMap::new();
    kv.insert("variant", cfg.variant.to_string());
    kv.insert("epochs", cfg.epochs.to_string());
    kv.insert("batch_size", cfg.batch_size.to_string());
    kv.insert("tau", cfg.tau.to_string());
    kv.insert("learning_rate", cfg.learning_rate.to_string());
    kv.insert("adam_beta1", cfg.adam_beta1.to_string());
    kv.insert("adam_beta2", cfg.adam_beta2.to_string());
    kv.insert("adam_eps", cfg.adam_eps.to_string());
    kv.insert("seed", cfg.seed.to_string());
    kv.insert("image_size", cfg.image_size.to_string());
    kv.insert("crop_size", cfg.crop_size.to_string());
    kv.insert("embedding_dim", cfg.embedding_dim.to_string());
    kv.insert("repr_dim", cfg.repr_dim.to_string());
    kv.insert("pyramid_dim", cfg.pyramid_dim.to_string());
    kv.insert("anchors_per_sample", cfg.anchors_per_sample.to_string());
    kv.insert("split_fraction", cfg.split_fraction.to_string());
    kv.insert("p_crop_zoom", cfg.augment.p_crop_zoom.to_string());
    kv.insert("p_flip_h", cfg.augment.p_flip_h.to_string());
    kv.insert("p_flip_v", cfg.augment.p_flip_v.to_string());
    kv.insert("p_jpeg", cfg.augment.p_jpeg.to_string());
    kv.insert("hue_delta", cfg.augment.hue_delta.to_string());
    kv.insert("sat_lo", cfg.augment.sat_range.0.to_string());
    kv.insert("sat_hi", cfg.augment.sat_range.1.to_string());
    kv.insert("val_lo", cfg.augment.val_range.0.to_string());
    kv.insert("val_hi", cfg.augment.val_range.1.to_string());
    kv.insert("blur_lo", cfg.augment.blur_sigma_range.0.to_string());
    kv.insert("blur_hi", cfg.augment.blur_sigma_range.1.to_string());
    kv.insert("jpeg_q_lo", cfg.augment.jpeg_quality_range.0.to_string());
    kv.insert("jpeg_q_hi", cfg.augment.jpeg_quality_range.1.to_string());
    kv.insert(
        "interpolations",
        cfg.augment
            .interpolations
            .iter()
            .map(|m| m.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    for key in CONFIG_KEYS {
        let _ = writeln!(out, "{key}={}", kv[key]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let cfg = parse_config_str("").unwrap();
        assert_eq!(cfg, TrainConfig::preset(ModelVariant::M4));
        assert_eq!(cfg.variant, ModelVariant::M4);
        assert_eq!(cfg.epochs, 100);
    }

    #[test]
    fn variant_one_preset_with_epoch_override() {
        let cfg = parse_config_str("epochs=80\nvariant=1\n").unwrap();
        assert_eq!(cfg.variant, ModelVariant::M1);
        assert_eq!(cfg.epochs, 80);
        assert_eq!(cfg.augment.interpolations, vec![Interpolation::Bilinear]);
        // Without an override, M1 defaults to 80 epochs anyway.
        let cfg = parse_config_str("variant=1\n").unwrap();
        assert_eq!(cfg.epochs, 80);
        let cfg = parse_config_str("variant=1\nepochs=33\n").unwrap();
        assert_eq!(cfg.epochs, 33);
    }

    #[test]
    fn round_trip_is_stable() {
        let cfg = parse_config_str("variant=3\ntau=0.07\nseed=9\nblur_hi=1.75\n").unwrap();
        let text = serialize_config(&cfg);
        let back = parse_config_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = parse_config_str("epochs=10\nbogus_key=1\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, .. }), "{err}");

        let err = parse_config_str("epochs\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 1, .. }));

        let err = parse_config_str("\n\ntau=frogs\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 3, .. }));

        // Out-of-range value caught by final validation.
        assert!(parse_config_str("tau=-0.5\n").is_err());
        assert!(parse_config_str("p_jpeg=1.5\n").is_err());
        assert!(parse_config_str("jpeg_q_lo=0\n").is_err());
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = parse_config_str("# a comment\n\n  seed=7\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.augment.seed, 7);
    }

    #[test]
    fn presets_differ_only_in_documented_fields() {
        let serialize = |v| serialize_config(&TrainConfig::preset(v));
        let m1: Vec<String> = serialize(ModelVariant::M1).lines().map(String::from).collect();
        let m2: Vec<String> = serialize(ModelVariant::M2).lines().map(String::from).collect();
        let m3: Vec<String> = serialize(ModelVariant::M3).lines().map(String::from).collect();
        let m4: Vec<String> = serialize(ModelVariant::M4).lines().map(String::from).collect();

        let diff_keys = |a: &[String], b: &[String]| -> Vec<String> {
            a.iter()
                .zip(b)
                .filter(|(x, y)| x != y)
                .map(|(x, _)| x.split('=').next().unwrap().to_string())
                .collect()
        };
        // M1 vs M2: epochs and the variant tag only (per-epoch jitter redraw
        // is behavioural, not a config field).
        assert_eq!(diff_keys(&m1, &m2), vec!["variant", "epochs"]);
        // M2 vs M3: blur strength and interpolation set.
        assert_eq!(
            diff_keys(&m2, &m3),
            vec!["variant", "blur_lo", "blur_hi", "interpolations"]
        );
        // M3 vs M4: the projection head lives in the model, not the config.
        assert_eq!(diff_keys(&m3, &m4), vec!["variant"]);
    }

    #[test]
    fn m1_epoch_augment_redraws_jitter() {
        let cfg = TrainConfig::preset(ModelVariant::M1);
        let a = epoch_augment(&cfg, 0);
        let b = epoch_augment(&cfg, 1);
        let a2 = epoch_augment(&cfg, 0);
        assert_eq!(a, a2);
        assert!(a.hue_delta != b.hue_delta || a.sat_range != b.sat_range);
        assert!(a.hue_delta <= M1_HUE_MAX);
        assert!(a.sat_range.0 >= M1_SCALE_BOUNDS.0 && a.sat_range.1 <= M1_SCALE_BOUNDS.1);

        let cfg2 = TrainConfig::preset(ModelVariant::M2);
        let fixed0 = epoch_augment(&cfg2, 0);
        let fixed1 = epoch_augment(&cfg2, 1);
        assert_eq!(fixed0.hue_delta, fixed1.hue_delta);
        assert_eq!(fixed0.sat_range, fixed1.sat_range);
        // but the stream seed still rotates per epoch
        assert_ne!(fixed0.seed, fixed1.seed);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..10 {
            std::fs::write(dir.path().join(format!("img_{i:02}.png")), b"stub").unwrap();
        }
        let (train, eval) = load_dataset(dir.path(), 0.8, 5).unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(eval.len(), 2);
        let train_ids: Vec<&String> = train.entries().iter().map(|(id, _)| id).collect();
        let eval_ids: Vec<&String> = eval.entries().iter().map(|(id, _)| id).collect();
        assert!(train_ids.iter().all(|id| !eval_ids.contains(id)));

        let (train2, eval2) = load_dataset(dir.path(), 0.8, 5).unwrap();
        assert_eq!(train.entries(), train2.entries());
        assert_eq!(eval.entries(), eval2.entries());

        let (train3, _) = load_dataset(dir.path(), 0.8, 6).unwrap();
        assert!(train.entries() != train3.entries() || true); // seeds may coincide; just exercise
    }

    #[test]
    fn split_proportion_over_many_files() {
        let dir = tempfile::tempdir().unwrap();
        let n = 10_000;
        for i in 0..n {
            std::fs::write(dir.path().join(format!("f_{i:05}.png")), b"s").unwrap();
        }
        let fraction = 0.73;
        let (train, eval) = load_dataset(dir.path(), fraction, 11).unwrap();
        let got = train.len() as f64 / n as f64;
        assert!((got - fraction).abs() <= 0.01, "fraction {got}");
        assert_eq!(train.len() + eval.len(), n);
    }

    #[test]
    fn dataset_order_is_lexicographic() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["c.png", "a.png", "b.jpg"] {
            std::fs::write(dir.path().join(name), b"s").unwrap();
        }
        let ds = Dataset::from_dir(dir.path(), Split::Train).unwrap();
        let ids: Vec<&String> = ds.entries().iter().map(|(id, _)| id).collect();
        assert_eq!(ids, ["a.png", "b.jpg", "c.png"]);
    }

    #[test]
    fn synthetic_generation_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let d1 = dir.path().join("one");
        let d2 = dir.path().join("two");
        gen_synthetic(3, 64, 17, &d1).unwrap();
        gen_synthetic(3, 64, 17, &d2).unwrap();
        for i in 0..3 {
            let name = format!("synth_{i:05}.png");
            let a = std::fs::read(d1.join(&name)).unwrap();
            let b = std::fs::read(d2.join(&name)).unwrap();
            assert_eq!(a, b, "{name}");
        }
        assert_eq!(
            std::fs::read(d1.join("manifest.json")).unwrap(),
            std::fs::read(d2.join("manifest.json")).unwrap()
        );
    }

    #[test]
    fn synthetic_images_pass_invariants_and_match_manifest_mass() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("synth");
        gen_synthetic(4, 512, 23, &out).unwrap();

        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap())
                .unwrap();
        for entry in manifest["images"].as_array().unwrap() {
            let id = entry["image_id"].as_str().unwrap();
            let img = crate::imops::decode_image(&out.join(id)).unwrap();
            assert!(img.pixels().iter().all(|v| (0.0..=1.0).contains(v)));

            for shape in entry["shapes"].as_array().unwrap() {
                let rgb: Vec<f64> = shape["rgb"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|v| v.as_f64().unwrap())
                    .collect();
                let mut count = 0usize;
                for y in 0..img.height() {
                    for x in 0..img.width() {
                        let p = img.px(x, y);
                        // PNG quantizes to u8; match within one step.
                        if (0..3).all(|c| (p[c] as f64 - rgb[c]).abs() <= 1.5 / 255.0) {
                            count += 1;
                        }
                    }
                }
                let size = shape["size"].as_f64().unwrap();
                let area = match shape["kind"].as_str().unwrap() {
                    "circle" => std::f64::consts::PI * size * size,
                    "square" => size * size,
                    "triangle" => 3f64.sqrt() / 4.0 * size * size,
                    other => panic!("unknown kind {other}"),
                };
                let rel = (count as f64 - area).abs() / area;
                assert!(
                    rel <= 0.02,
                    "{id}: rendered {count} px vs analytic {area:.1} ({rel:.3})"
                );
            }
        }
    }
}
