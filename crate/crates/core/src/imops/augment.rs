use rand::Rng;
use serde::{Deserialize, Serialize};

use super::blur::gaussian_blur;
use super::codec::jpeg_roundtrip;
use super::color::hsv_jitter;
use super::resize::{crop, flip_h, flip_v, resize, Interpolation};
use super::{CropSpec, Image, RectPx};
use crate::error::{Error, Result};
use crate::ndgrad::rng::stream_rng;

/// Smallest image side accepted by [`sample_crop`].
pub const MIN_CROP_SIDE: usize = 16;
/// Crop side lengths are drawn uniformly from this fraction of each image
/// dimension.
pub const CROP_SCALE_RANGE: (f64, f64) = (0.25, 0.60);
/// Aspect-ratio distortion applied together with crop/zoom: independent
/// width/height scale factors.
const ASPECT_RANGE: (f64, f64) = (0.8, 1.25);

/// Stochastic augmentation pipeline configuration. Application order is
/// fixed: crop/zoom (with aspect distortion), resize to `out_size`, flips,
/// JPEG round-trip, HSV jitter, blur.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub p_crop_zoom: f64,
    pub p_flip_h: f64,
    pub p_flip_v: f64,
    pub p_jpeg: f64,
    /// Hue shift is drawn from `[-hue_delta, hue_delta]` (hue wraps mod 1).
    pub hue_delta: f64,
    /// Saturation scale drawn uniformly from this range.
    pub sat_range: (f64, f64),
    /// Value scale drawn uniformly from this range.
    pub val_range: (f64, f64),
    /// Blur sigma drawn uniformly from this range; `(0, 0)` disables blur.
    pub blur_sigma_range: (f64, f64),
    /// Candidate interpolation modes for crop/zoom resampling.
    pub interpolations: Vec<Interpolation>,
    pub jpeg_quality_range: (u8, u8),
    /// Model input size; every augmented image comes out `out_size x out_size`.
    pub out_size: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_crop_zoom: 0.65,
            p_flip_h: 0.5,
            p_flip_v: 0.5,
            p_jpeg: 0.7,
            hue_delta: 0.1,
            sat_range: (0.7, 1.3),
            val_range: (0.7, 1.3),
            blur_sigma_range: (0.5, 2.0),
            interpolations: vec![
                Interpolation::Nearest,
                Interpolation::Bilinear,
                Interpolation::Bicubic,
            ],
            jpeg_quality_range: (30, 90),
            out_size: 64,
            seed: 42,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidImage(msg));
        for (name, p) in [
            ("p_crop_zoom", self.p_crop_zoom),
            ("p_flip_h", self.p_flip_h),
            ("p_flip_v", self.p_flip_v),
            ("p_jpeg", self.p_jpeg),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if self.hue_delta < 0.0 {
            return bad(format!("hue_delta = {} negative", self.hue_delta));
        }
        for (name, (lo, hi)) in [("sat_range", self.sat_range), ("val_range", self.val_range)] {
            if lo <= 0.0 || hi < lo {
                return bad(format!("{name} = ({lo}, {hi}) must be positive and ordered"));
            }
        }
        let (blo, bhi) = self.blur_sigma_range;
        if blo < 0.0 || bhi < blo {
            return bad(format!("blur_sigma_range = ({blo}, {bhi}) invalid"));
        }
        let (qlo, qhi) = self.jpeg_quality_range;
        if qlo < 1 || qhi > 100 || qlo > qhi {
            return bad(format!("jpeg_quality_range = ({qlo}, {qhi}) outside [1, 100]"));
        }
        if self.interpolations.is_empty() {
            return bad("interpolations must not be empty".to_string());
        }
        if self.out_size == 0 {
            return bad("out_size must be positive".to_string());
        }
        Ok(())
    }
}

/// One applied transform with its drawn parameters, in application order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugmentStep {
    CropZoom {
        x0: usize,
        y0: usize,
        w: usize,
        h: usize,
        out_w: usize,
        out_h: usize,
        interp: Interpolation,
    },
    Resize {
        out_w: usize,
        out_h: usize,
        interp: Interpolation,
    },
    FlipH,
    FlipV,
    Jpeg {
        quality: u8,
    },
    HsvJitter {
        hue: f64,
        sat: f64,
        val: f64,
    },
    Blur {
        sigma: f64,
    },
}

/// Full record of one augmentation; replaying it reproduces the output
/// bit-exactly and its geometric steps map source coordinates into the
/// augmented frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentLog {
    pub sample_index: u64,
    pub steps: Vec<AugmentStep>,
}

impl AugmentLog {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Data(format!("augment log: {e}")))
    }

    /// Source-image rectangle the augmented frame depicts: the crop/zoom
    /// viewport if one was applied, else the full image.
    pub fn viewport(&self, src_w: usize, src_h: usize) -> (usize, usize, usize, usize) {
        match self.steps.first() {
            Some(AugmentStep::CropZoom { x0, y0, w, h, .. }) => (*x0, *y0, *w, *h),
            _ => (0, 0, src_w, src_h),
        }
    }

    /// Maps a rectangle in source pixel coordinates through every geometric
    /// step, returning its image in the final frame plus that frame's size.
    pub fn map_rect(&self, rect: RectPx, src_w: usize, src_h: usize) -> (RectPx, (usize, usize)) {
        let mut r = rect;
        let (mut cw, mut ch) = (src_w as f64, src_h as f64);
        for step in &self.steps {
            match *step {
                AugmentStep::CropZoom {
                    x0,
                    y0,
                    w,
                    h,
                    out_w,
                    out_h,
                    ..
                } => {
                    let sx = out_w as f64 / w as f64;
                    let sy = out_h as f64 / h as f64;
                    r = RectPx {
                        x0: (r.x0 - x0 as f64) * sx,
                        y0: (r.y0 - y0 as f64) * sy,
                        x1: (r.x1 - x0 as f64) * sx,
                        y1: (r.y1 - y0 as f64) * sy,
                    };
                    cw = out_w as f64;
                    ch = out_h as f64;
                }
                AugmentStep::Resize { out_w, out_h, .. } => {
                    let sx = out_w as f64 / cw;
                    let sy = out_h as f64 / ch;
                    r = RectPx {
                        x0: r.x0 * sx,
                        y0: r.y0 * sy,
                        x1: r.x1 * sx,
                        y1: r.y1 * sy,
                    };
                    cw = out_w as f64;
                    ch = out_h as f64;
                }
                AugmentStep::FlipH => {
                    r = RectPx {
                        x0: cw - r.x1,
                        y0: r.y0,
                        x1: cw - r.x0,
                        y1: r.y1,
                    };
                }
                AugmentStep::FlipV => {
                    r = RectPx {
                        x0: r.x0,
                        y0: ch - r.y1,
                        x1: r.x1,
                        y1: ch - r.y0,
                    };
                }
                AugmentStep::Jpeg { .. } | AugmentStep::HsvJitter { .. } | AugmentStep::Blur { .. } => {}
            }
        }
        (r, (cw as usize, ch as usize))
    }
}

fn draw_range(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Uniform random crop: side lengths uniform in [`CROP_SCALE_RANGE`] of the
/// corresponding image dimension, position uniform over valid placements.
pub fn sample_crop(img: &Image, source_id: &str, rng: &mut impl Rng) -> Result<CropSpec> {
    sample_crop_within(
        img,
        (0, 0, img.width(), img.height()),
        source_id,
        rng,
    )
}

/// Like [`sample_crop`] but confined to a viewport (used during training so
/// the crop stays visible in the augmented frame). Side lengths are relative
/// to the viewport dimensions.
pub fn sample_crop_within(
    img: &Image,
    viewport: (usize, usize, usize, usize),
    source_id: &str,
    rng: &mut impl Rng,
) -> Result<CropSpec> {
    let (vx, vy, vw, vh) = viewport;
    if vx + vw > img.width() || vy + vh > img.height() {
        return Err(Error::InvalidImage(format!(
            "viewport {vx}+{vw}x{vy}+{vh} exceeds image {}x{}",
            img.width(),
            img.height()
        )));
    }
    let full = vw == img.width() && vh == img.height();
    let min_side = if full { MIN_CROP_SIDE } else { 4 };
    if vw < min_side || vh < min_side {
        return Err(Error::InvalidImage(format!(
            "region {vw}x{vh} smaller than minimum side {min_side}"
        )));
    }
    let uw = rng.gen_range(CROP_SCALE_RANGE.0..=CROP_SCALE_RANGE.1);
    let uh = rng.gen_range(CROP_SCALE_RANGE.0..=CROP_SCALE_RANGE.1);
    let w = ((uw * vw as f64).round() as usize).clamp(1, vw);
    let h = ((uh * vh as f64).round() as usize).clamp(1, vh);
    let x0 = vx + rng.gen_range(0..=vw - w);
    let y0 = vy + rng.gen_range(0..=vh - h);
    Ok(CropSpec {
        x0,
        y0,
        w,
        h,
        source_id: source_id.to_string(),
    })
}

/// Applies the full augmentation pipeline. A pure function of
/// `(img, cfg, sample_index)`: the same arguments always produce bit-identical
/// output and log.
pub fn augment(img: &Image, cfg: &AugmentConfig, sample_index: u64) -> Result<(Image, AugmentLog)> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, sample_index);
    let s = cfg.out_size;
    let mut steps = Vec::new();

    let mut cur = if rng.gen::<f64>() < cfg.p_crop_zoom {
        let base = sample_crop(img, "", &mut rng)?;
        // Aspect-ratio distortion: per-axis scale folded into the viewport,
        // so a single resample does crop, stretch and zoom.
        let ax = draw_range(&mut rng, ASPECT_RANGE);
        let ay = draw_range(&mut rng, ASPECT_RANGE);
        let w = ((base.w as f64 * ax).round() as usize).clamp(1, img.width());
        let h = ((base.h as f64 * ay).round() as usize).clamp(1, img.height());
        let x0 = base.x0.min(img.width() - w);
        let y0 = base.y0.min(img.height() - h);
        let interp = cfg.interpolations[rng.gen_range(0..cfg.interpolations.len())];
        let region = CropSpec {
            x0,
            y0,
            w,
            h,
            source_id: String::new(),
        };
        steps.push(AugmentStep::CropZoom {
            x0,
            y0,
            w,
            h,
            out_w: s,
            out_h: s,
            interp,
        });
        resize(&crop(img, &region)?, s, s, interp)?
    } else {
        steps.push(AugmentStep::Resize {
            out_w: s,
            out_h: s,
            interp: Interpolation::Bilinear,
        });
        resize(img, s, s, Interpolation::Bilinear)?
    };

    if rng.gen::<f64>() < cfg.p_flip_h {
        cur = flip_h(&cur);
        steps.push(AugmentStep::FlipH);
    }
    if rng.gen::<f64>() < cfg.p_flip_v {
        cur = flip_v(&cur);
        steps.push(AugmentStep::FlipV);
    }
    if rng.gen::<f64>() < cfg.p_jpeg {
        let (qlo, qhi) = cfg.jpeg_quality_range;
        let quality = rng.gen_range(qlo..=qhi);
        cur = jpeg_roundtrip(&cur, quality)?;
        steps.push(AugmentStep::Jpeg { quality });
    }

    let hue = if cfg.hue_delta > 0.0 {
        rng.gen_range(-cfg.hue_delta..=cfg.hue_delta)
    } else {
        0.0
    };
    let sat = draw_range(&mut rng, cfg.sat_range);
    let val = draw_range(&mut rng, cfg.val_range);
    if hue != 0.0 || sat != 1.0 || val != 1.0 {
        cur = hsv_jitter(&cur, hue, sat, val);
        steps.push(AugmentStep::HsvJitter { hue, sat, val });
    }

    if cfg.blur_sigma_range.1 > 0.0 {
        let sigma = draw_range(&mut rng, cfg.blur_sigma_range);
        if sigma > 0.0 {
            cur = gaussian_blur(&cur, sigma);
            steps.push(AugmentStep::Blur { sigma });
        }
    }

    Ok((cur, AugmentLog { sample_index, steps }))
}

/// Re-applies a logged transform sequence to the same input; reproduces the
/// augmented image bit-exactly.
pub fn replay(img: &Image, log: &AugmentLog) -> Result<Image> {
    let mut cur = img.clone();
    for step in &log.steps {
        cur = match *step {
            AugmentStep::CropZoom {
                x0,
                y0,
                w,
                h,
                out_w,
                out_h,
                interp,
            } => {
                let region = CropSpec {
                    x0,
                    y0,
                    w,
                    h,
                    source_id: String::new(),
                };
                resize(&crop(&cur, &region)?, out_w, out_h, interp)?
            }
            AugmentStep::Resize { out_w, out_h, interp } => resize(&cur, out_w, out_h, interp)?,
            AugmentStep::FlipH => flip_h(&cur),
            AugmentStep::FlipV => flip_v(&cur),
            AugmentStep::Jpeg { quality } => jpeg_roundtrip(&cur, quality)?,
            AugmentStep::HsvJitter { hue, sat, val } => hsv_jitter(&cur, hue, sat, val),
            AugmentStep::Blur { sigma } => gaussian_blur(&cur, sigma),
        };
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::rng::stream_rng;

    fn test_image(n: usize) -> Image {
        Image::from_fn(n, n, |x, y| {
            [
                (x as f32 * 0.031) % 1.0,
                (y as f32 * 0.017) % 1.0,
                ((x * y) as f32 * 0.003) % 1.0,
            ]
        })
    }

    fn disabled_cfg() -> AugmentConfig {
        AugmentConfig {
            p_crop_zoom: 0.0,
            p_flip_h: 0.0,
            p_flip_v: 0.0,
            p_jpeg: 0.0,
            hue_delta: 0.0,
            sat_range: (1.0, 1.0),
            val_range: (1.0, 1.0),
            blur_sigma_range: (0.0, 0.0),
            out_size: 32,
            ..AugmentConfig::default()
        }
    }

    #[test]
    fn disabled_pipeline_is_plain_resize() {
        let img = test_image(48);
        let (out, log) = augment(&img, &disabled_cfg(), 5).unwrap();
        let expect = resize(&img, 32, 32, Interpolation::Bilinear).unwrap();
        assert_eq!(out, expect);
        assert_eq!(log.steps.len(), 1);
    }

    #[test]
    fn augment_is_deterministic_per_key() {
        let img = test_image(40);
        let cfg = AugmentConfig {
            out_size: 32,
            ..AugmentConfig::default()
        };
        let (a, la) = augment(&img, &cfg, 9).unwrap();
        let (b, lb) = augment(&img, &cfg, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let (c, _) = augment(&img, &cfg, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn replay_reproduces_output_bit_exactly() {
        let img = test_image(40);
        let cfg = AugmentConfig {
            out_size: 32,
            ..AugmentConfig::default()
        };
        for idx in 0..8 {
            let (out, log) = augment(&img, &cfg, idx).unwrap();
            let replayed = replay(&img, &log).unwrap();
            assert_eq!(out, replayed, "sample {idx}");
        }
    }

    #[test]
    fn log_round_trips_through_json() {
        let img = test_image(40);
        let cfg = AugmentConfig {
            out_size: 32,
            ..AugmentConfig::default()
        };
        let (_, log) = augment(&img, &cfg, 3).unwrap();
        let back = AugmentLog::from_json(&log.to_json()).unwrap();
        assert_eq!(log, back);
    }

    #[test]
    fn application_frequencies_match_configured_probabilities() {
        let img = test_image(24);
        let cfg = AugmentConfig {
            out_size: 16,
            blur_sigma_range: (0.0, 0.0), // keep the loop cheap
            ..AugmentConfig::default()
        };
        let n = 10_000u64;
        let (mut cz, mut fh, mut fv, mut jp) = (0u32, 0u32, 0u32, 0u32);
        for i in 0..n {
            let (_, log) = augment(&img, &cfg, i).unwrap();
            for step in &log.steps {
                match step {
                    AugmentStep::CropZoom { .. } => cz += 1,
                    AugmentStep::FlipH => fh += 1,
                    AugmentStep::FlipV => fv += 1,
                    AugmentStep::Jpeg { .. } => jp += 1,
                    _ => {}
                }
            }
        }
        let f = |c: u32| c as f64 / n as f64;
        assert!((f(cz) - 0.65).abs() < 0.03, "crop/zoom {}", f(cz));
        assert!((f(fh) - 0.5).abs() < 0.03, "flip_h {}", f(fh));
        assert!((f(fv) - 0.5).abs() < 0.03, "flip_v {}", f(fv));
        assert!((f(jp) - 0.7).abs() < 0.03, "jpeg {}", f(jp));
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        // Image construction enforces the invariant; this exercises the
        // extreme jitter path end to end.
        let img = test_image(32);
        let cfg = AugmentConfig {
            hue_delta: 0.5,
            sat_range: (0.2, 1.8),
            val_range: (0.2, 1.8),
            out_size: 24,
            ..AugmentConfig::default()
        };
        for i in 0..32 {
            let (out, _) = augment(&img, &cfg, i).unwrap();
            assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn sample_crop_is_deterministic_and_in_bounds() {
        let img = test_image(64);
        let a = sample_crop(&img, "x", &mut stream_rng(1, 2)).unwrap();
        let b = sample_crop(&img, "x", &mut stream_rng(1, 2)).unwrap();
        assert_eq!(a, b);

        let mut rng = stream_rng(3, 0);
        for _ in 0..10_000 {
            let spec = sample_crop(&img, "x", &mut rng).unwrap();
            assert!(spec.validate_against(&img).is_ok());
            assert!(spec.w >= 1 && spec.h >= 1);
        }
    }

    #[test]
    fn sample_crop_area_ratio_mean() {
        // Uniform-side model: E[area ratio] = E[u]^2 = 0.425^2 ~ 0.18.
        let img = test_image(64);
        let mut rng = stream_rng(7, 0);
        let mut acc = 0.0;
        let n = 10_000;
        for _ in 0..n {
            let spec = sample_crop(&img, "x", &mut rng).unwrap();
            acc += (spec.w * spec.h) as f64 / (64.0 * 64.0);
        }
        let mean = acc / n as f64;
        assert!((mean - 0.18).abs() < 0.02, "mean area ratio {mean}");
    }

    #[test]
    fn sample_crop_rejects_small_images() {
        let img = test_image(12);
        assert!(sample_crop(&img, "x", &mut stream_rng(0, 0)).is_err());
    }

    #[test]
    fn map_rect_through_crop_and_flip() {
        let log = AugmentLog {
            sample_index: 0,
            steps: vec![
                AugmentStep::CropZoom {
                    x0: 10,
                    y0: 20,
                    w: 40,
                    h: 40,
                    out_w: 80,
                    out_h: 80,
                    interp: Interpolation::Bilinear,
                },
                AugmentStep::FlipH,
            ],
        };
        let rect = RectPx {
            x0: 10.0,
            y0: 20.0,
            x1: 30.0,
            y1: 40.0,
        };
        // Crop maps to [0,40]x[0,40], flip_h to [40,80]x[0,40].
        let (mapped, (fw, fh)) = log.map_rect(rect, 100, 100);
        assert_eq!((fw, fh), (80, 80));
        assert_eq!(mapped.x0, 40.0);
        assert_eq!(mapped.x1, 80.0);
        assert_eq!(mapped.y0, 0.0);
        assert_eq!(mapped.y1, 40.0);
    }
}
