//! Image representation and the stochastic augmentation pipeline.
//!
//! Pixels are RGB floats in `[0, 1]`, interleaved row-major. Every operation
//! in this module is a pure function of its inputs; augmentation randomness
//! is keyed by `(seed, sample_index)` so batches can be produced on any
//! number of workers and replayed exactly.

mod augment;
mod blur;
mod codec;
mod color;
mod resize;

pub use augment::{
    augment, replay, sample_crop, sample_crop_within, AugmentConfig, AugmentLog, AugmentStep,
    CROP_SCALE_RANGE, MIN_CROP_SIDE,
};
pub use blur::gaussian_blur;
pub use codec::{decode_image, encode_png, jpeg_roundtrip, psnr, write_png, write_ppm};
pub use color::{hsv_jitter, hsv_to_rgb, rgb_to_hsv};
pub use resize::{crop, flip_h, flip_v, resize, Interpolation};

use crate::error::{Error, Result};

/// RGB raster with unit-interval float channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl Image {
    /// Validates dimensions and channel range.
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::InvalidImage(format!(
                "{width}x{height} needs {} channel values, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidImage(
                "channel value outside [0, 1]".to_string(),
            ));
        }
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    /// Builds an image by evaluating `f(x, y) -> [r, g, b]`; values are
    /// clamped into range.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                let px = f(x, y);
                pixels.extend(px.iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Image {
            width,
            height,
            pixels,
        }
    }

    pub(crate) fn from_raw_clamped(width: usize, height: usize, mut pixels: Vec<f32>) -> Self {
        for v in &mut pixels {
            *v = v.clamp(0.0, 1.0);
        }
        Image {
            width,
            height,
            pixels,
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        Self::from_fn(width, height, |_, _| rgb)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn px(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Axis-aligned sub-rectangle of a source image, in integer pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CropSpec {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    pub source_id: String,
}

impl CropSpec {
    pub fn validate_against(&self, img: &Image) -> Result<()> {
        if self.w == 0 || self.h == 0 {
            return Err(Error::InvalidImage("crop with zero side".to_string()));
        }
        if self.x0 + self.w > img.width || self.y0 + self.h > img.height {
            return Err(Error::InvalidImage(format!(
                "crop {}+{}x{}+{} exceeds image {}x{}",
                self.x0, self.w, self.y0, self.h, img.width, img.height
            )));
        }
        Ok(())
    }

    /// Continuous pixel-space rectangle.
    pub fn rect(&self) -> RectPx {
        RectPx {
            x0: self.x0 as f64,
            y0: self.y0 as f64,
            x1: (self.x0 + self.w) as f64,
            y1: (self.y0 + self.h) as f64,
        }
    }

    /// Rectangle in normalized `[0, 1]` coordinates of the source image.
    pub fn normalized(&self, src_w: usize, src_h: usize) -> RectN {
        RectN {
            x0: self.x0 as f64 / src_w as f64,
            y0: self.y0 as f64 / src_h as f64,
            x1: (self.x0 + self.w) as f64 / src_w as f64,
            y1: (self.y0 + self.h) as f64 / src_h as f64,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (
            self.x0 as f64 + self.w as f64 / 2.0,
            self.y0 as f64 + self.h as f64 / 2.0,
        )
    }
}

/// Rectangle in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RectPx {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl RectPx {
    /// Normalize by a frame size, clipping to `[0, 1]`.
    pub fn normalized_in(&self, frame_w: f64, frame_h: f64) -> RectN {
        RectN {
            x0: (self.x0 / frame_w).clamp(0.0, 1.0),
            y0: (self.y0 / frame_h).clamp(0.0, 1.0),
            x1: (self.x1 / frame_w).clamp(0.0, 1.0),
            y1: (self.y1 / frame_h).clamp(0.0, 1.0),
        }
    }
}

/// Rectangle in normalized image coordinates; the common frame for crop
/// geometry and pyramid cell centers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RectN {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl RectN {
    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    /// Closed-interval containment; used both for anchor exclusion and for
    /// the similarity-grid correctness rule.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}
