use super::Image;

/// RGB in `[0,1]` to HSV with hue in `[0,1)`.
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;

    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

/// HSV (hue in `[0,1)`) back to RGB in `[0,1]`.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

/// Shifts hue by `hue_delta` (wrapping mod 1) and scales saturation/value,
/// clamping S and V to `[0, 1]`.
pub fn hsv_jitter(img: &Image, hue_delta: f64, sat_scale: f64, val_scale: f64) -> Image {
    let mut out = Vec::with_capacity(img.pixels().len());
    for px in img.pixels().chunks_exact(3) {
        let (h, s, v) = rgb_to_hsv(px[0] as f64, px[1] as f64, px[2] as f64);
        let h = (h + hue_delta).rem_euclid(1.0);
        let s = (s * sat_scale).clamp(0.0, 1.0);
        let v = (v * val_scale).clamp(0.0, 1.0);
        let (r, g, b) = hsv_to_rgb(h, s, v);
        out.push(r as f32);
        out.push(g as f32);
        out.push(b as f32);
    }
    Image::from_raw_clamped(img.width(), img.height(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn identity_jitter_within_codec_tolerance() {
        let img = Image::from_fn(8, 8, |x, y| {
            [
                (x as f32 * 0.13) % 1.0,
                (y as f32 * 0.29) % 1.0,
                ((x + 2 * y) as f32 * 0.07) % 1.0,
            ]
        });
        let out = hsv_jitter(&img, 0.0, 1.0, 1.0);
        for (a, b) in img.pixels().iter().zip(out.pixels()) {
            assert!((a - b).abs() <= 1.0 / 255.0, "{a} vs {b}");
        }
    }

    #[test]
    fn hue_shift_leaves_gray_unchanged() {
        let img = Image::filled(3, 3, [0.42, 0.42, 0.42]);
        let out = hsv_jitter(&img, 0.37, 1.0, 1.0);
        for (a, b) in img.pixels().iter().zip(out.pixels()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn round_trip_matches_scalar_reference() {
        // Independent reference conversion written against the piecewise
        // sector definition rather than the rem_euclid form above.
        fn reference_rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
            let max = r.max(g).max(b);
            let min = r.min(g).min(b);
            let d = max - min;
            let mut h = if d == 0.0 {
                0.0
            } else if max == r && g >= b {
                (g - b) / d
            } else if max == r {
                (g - b) / d + 6.0
            } else if max == g {
                (b - r) / d + 2.0
            } else {
                (r - g) / d + 4.0
            };
            h /= 6.0;
            let s = if max == 0.0 { 0.0 } else { d / max };
            (h, s, max)
        }

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let (r, g, b) = (rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
            let (h1, s1, v1) = rgb_to_hsv(r, g, b);
            let (h2, s2, v2) = reference_rgb_to_hsv(r, g, b);
            assert!((h1 - h2).abs() < 1e-9, "hue {h1} vs {h2}");
            assert!((s1 - s2).abs() < 1e-12);
            assert!((v1 - v2).abs() < 1e-12);

            // And back: hsv_to_rgb inverts rgb_to_hsv.
            let (r2, g2, b2) = hsv_to_rgb(h1, s1, v1);
            assert!((r - r2).abs() < 1e-6);
            assert!((g - g2).abs() < 1e-6);
            assert!((b - b2).abs() < 1e-6);
        }
    }
}
