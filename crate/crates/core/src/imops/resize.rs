use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{CropSpec, Image};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Nearest,
    Bilinear,
    Bicubic,
}

impl fmt::Display for Interpolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Interpolation::Nearest => "nearest",
            Interpolation::Bilinear => "bilinear",
            Interpolation::Bicubic => "bicubic",
        };
        f.write_str(s)
    }
}

impl FromStr for Interpolation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "nearest" => Ok(Interpolation::Nearest),
            "bilinear" => Ok(Interpolation::Bilinear),
            "bicubic" => Ok(Interpolation::Bicubic),
            other => Err(format!(
                "unknown interpolation {other:?} (expected nearest|bilinear|bicubic)"
            )),
        }
    }
}

#[inline]
fn sample(img: &Image, x: isize, y: isize) -> [f64; 3] {
    // Edge clamp.
    let x = x.clamp(0, img.width() as isize - 1) as usize;
    let y = y.clamp(0, img.height() as isize - 1) as usize;
    let p = img.px(x, y);
    [p[0] as f64, p[1] as f64, p[2] as f64]
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Catmull-Rom cubic kernel (a = -0.5).
#[inline]
fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

/// Resamples to `new_w x new_h`. Source positions use half-pixel centers:
/// `src = (dst + 0.5) * scale - 0.5`, edge-clamped. Output is clamped to
/// `[0, 1]`.
pub fn resize(img: &Image, new_w: usize, new_h: usize, mode: Interpolation) -> Result<Image> {
    if new_w == 0 || new_h == 0 {
        return Err(Error::InvalidImage(
            "resize target must be at least 1x1".to_string(),
        ));
    }
    let sx = img.width() as f64 / new_w as f64;
    let sy = img.height() as f64 / new_h as f64;

    let mut out = Vec::with_capacity(new_w * new_h * 3);
    for dy in 0..new_h {
        let src_y = (dy as f64 + 0.5) * sy - 0.5;
        for dx in 0..new_w {
            let src_x = (dx as f64 + 0.5) * sx - 0.5;
            let rgb = match mode {
                Interpolation::Nearest => {
                    sample(img, (src_x + 0.5).floor() as isize, (src_y + 0.5).floor() as isize)
                }
                Interpolation::Bilinear => {
                    let x0 = src_x.floor();
                    let y0 = src_y.floor();
                    let fx = src_x - x0;
                    let fy = src_y - y0;
                    let (x0, y0) = (x0 as isize, y0 as isize);
                    let p00 = sample(img, x0, y0);
                    let p10 = sample(img, x0 + 1, y0);
                    let p01 = sample(img, x0, y0 + 1);
                    let p11 = sample(img, x0 + 1, y0 + 1);
                    let mut rgb = [0.0; 3];
                    for c in 0..3 {
                        let top = lerp(p00[c], p10[c], fx);
                        let bot = lerp(p01[c], p11[c], fx);
                        rgb[c] = lerp(top, bot, fy);
                    }
                    rgb
                }
                Interpolation::Bicubic => {
                    let x0 = src_x.floor();
                    let y0 = src_y.floor();
                    let fx = src_x - x0;
                    let fy = src_y - y0;
                    let (x0, y0) = (x0 as isize, y0 as isize);
                    let mut rgb = [0.0; 3];
                    for j in -1..=2isize {
                        let wy = cubic_weight(j as f64 - fy);
                        if wy == 0.0 {
                            continue;
                        }
                        for i in -1..=2isize {
                            let wx = cubic_weight(i as f64 - fx);
                            if wx == 0.0 {
                                continue;
                            }
                            let p = sample(img, x0 + i, y0 + j);
                            let w = wx * wy;
                            for c in 0..3 {
                                rgb[c] += w * p[c];
                            }
                        }
                    }
                    rgb
                }
            };
            out.extend(rgb.iter().map(|&v| v as f32));
        }
    }
    Ok(Image::from_raw_clamped(new_w, new_h, out))
}

pub fn flip_h(img: &Image) -> Image {
    Image::from_fn(img.width(), img.height(), |x, y| {
        img.px(img.width() - 1 - x, y)
    })
}

pub fn flip_v(img: &Image) -> Image {
    Image::from_fn(img.width(), img.height(), |x, y| {
        img.px(x, img.height() - 1 - y)
    })
}

/// Exact pixel extraction of `spec` from `img`.
pub fn crop(img: &Image, spec: &CropSpec) -> Result<Image> {
    spec.validate_against(img)?;
    Ok(Image::from_fn(spec.w, spec.h, |x, y| {
        img.px(spec.x0 + x, spec.y0 + y)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |x, y| {
            [
                x as f32 / w as f32,
                y as f32 / h as f32,
                (x + y) as f32 / (w + h) as f32,
            ]
        })
    }

    #[test]
    fn identity_resize_all_modes() {
        let img = gradient(5, 7);
        for mode in [
            Interpolation::Nearest,
            Interpolation::Bilinear,
            Interpolation::Bicubic,
        ] {
            let out = resize(&img, 5, 7, mode).unwrap();
            assert_eq!(out, img, "mode {mode}");
        }
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Image::filled(2, 2, [0.3, 0.6, 0.9]);
        for mode in [
            Interpolation::Nearest,
            Interpolation::Bilinear,
            Interpolation::Bicubic,
        ] {
            for (w, h) in [(1, 1), (3, 5), (8, 2)] {
                let out = resize(&img, w, h, mode).unwrap();
                for y in 0..h {
                    for x in 0..w {
                        assert_eq!(out.px(x, y), [0.3, 0.6, 0.9], "mode {mode} at {x},{y}");
                    }
                }
            }
        }
    }

    #[test]
    fn bilinear_matches_closed_form_reference() {
        // Independent per-pixel reference for the 2x upscale of a 4x4 gradient.
        let img = gradient(4, 4);
        let out = resize(&img, 8, 8, Interpolation::Bilinear).unwrap();
        for dy in 0..8 {
            for dx in 0..8 {
                let sx = ((dx as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 3.0);
                let sy = ((dy as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 3.0);
                let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(3), (y0 + 1).min(3));
                let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                for c in 0..3 {
                    let v00 = img.px(x0, y0)[c] as f64;
                    let v10 = img.px(x1, y0)[c] as f64;
                    let v01 = img.px(x0, y1)[c] as f64;
                    let v11 = img.px(x1, y1)[c] as f64;
                    let expect = v00 * (1.0 - fx) * (1.0 - fy)
                        + v10 * fx * (1.0 - fy)
                        + v01 * (1.0 - fx) * fy
                        + v11 * fx * fy;
                    let got = out.px(dx, dy)[c] as f64;
                    assert!(
                        (got - expect).abs() < 1e-6,
                        "({dx},{dy})[{c}]: {got} vs {expect}"
                    );
                }
            }
        }
    }

    #[test]
    fn flips_are_involutions() {
        let img = gradient(5, 4);
        assert_eq!(flip_h(&flip_h(&img)), img);
        assert_eq!(flip_v(&flip_v(&img)), img);
    }

    #[test]
    fn full_extent_crop_is_identity() {
        let img = gradient(6, 3);
        let spec = CropSpec {
            x0: 0,
            y0: 0,
            w: 6,
            h: 3,
            source_id: String::new(),
        };
        assert_eq!(crop(&img, &spec).unwrap(), img);
    }

    #[test]
    fn crop_extracts_exact_submatrix() {
        let img = Image::from_fn(4, 4, |x, y| {
            let v = (y * 4 + x) as f32 / 16.0;
            [v, v, v]
        });
        let spec = CropSpec {
            x0: 1,
            y0: 1,
            w: 2,
            h: 2,
            source_id: String::new(),
        };
        let out = crop(&img, &spec).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                assert_eq!(out.px(x, y), img.px(x + 1, y + 1));
            }
        }
    }

    #[test]
    fn out_of_bounds_crop_fails() {
        let img = gradient(4, 4);
        let spec = CropSpec {
            x0: 3,
            y0: 0,
            w: 2,
            h: 2,
            source_id: String::new(),
        };
        assert!(crop(&img, &spec).is_err());
    }
}
