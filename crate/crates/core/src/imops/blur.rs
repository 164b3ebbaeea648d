use super::Image;

/// Separable Gaussian blur with kernel radius `ceil(3*sigma)` and edge
/// clamping. `sigma == 0` is the identity.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    assert!(sigma >= 0.0, "sigma must be non-negative");
    if sigma == 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    for i in -radius..=radius {
        kernel.push((-(i * i) as f64 * inv2s2).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }

    let (w, h) = (img.width(), img.height());
    let clamp_x = |x: isize| x.clamp(0, w as isize - 1) as usize;
    let clamp_y = |y: isize| y.clamp(0, h as isize - 1) as usize;

    // Horizontal pass into an f64 buffer, then vertical pass.
    let mut mid = vec![0.0f64; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for (ki, kv) in kernel.iter().enumerate() {
                let sx = clamp_x(x as isize + ki as isize - radius);
                let p = img.px(sx, y);
                for c in 0..3 {
                    acc[c] += kv * p[c] as f64;
                }
            }
            let base = (y * w + x) * 3;
            mid[base..base + 3].copy_from_slice(&acc);
        }
    }
    let mut out = vec![0.0f32; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for (ki, kv) in kernel.iter().enumerate() {
                let sy = clamp_y(y as isize + ki as isize - radius);
                let base = (sy * w + x) * 3;
                for c in 0..3 {
                    acc[c] += kv * mid[base + c];
                }
            }
            let base = (y * w + x) * 3;
            for c in 0..3 {
                out[base + c] = acc[c] as f32;
            }
        }
    }
    Image::from_raw_clamped(w, h, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_zero_is_identity() {
        let img = Image::from_fn(5, 5, |x, y| [(x as f32) / 5.0, (y as f32) / 5.0, 0.5]);
        assert_eq!(gaussian_blur(&img, 0.0), img);
    }

    #[test]
    fn constant_image_unchanged() {
        let img = Image::filled(7, 7, [0.2, 0.5, 0.8]);
        let out = gaussian_blur(&img, 1.3);
        for (a, b) in img.pixels().iter().zip(out.pixels()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn impulse_response_matches_sampled_gaussian() {
        let sigma = 1.0f64;
        let radius = 3isize; // ceil(3 * 1.0)
        let n = 15usize;
        let center = 7usize;
        let img = Image::from_fn(n, n, |x, y| {
            if x == center && y == center {
                [1.0, 1.0, 1.0]
            } else {
                [0.0, 0.0, 0.0]
            }
        });
        let out = gaussian_blur(&img, sigma);

        // Closed-form separable response: normalized sampled Gaussian.
        let mut k = Vec::new();
        for i in -radius..=radius {
            k.push((-(i * i) as f64 / (2.0 * sigma * sigma)).exp());
        }
        let s: f64 = k.iter().sum();
        let k: Vec<f64> = k.iter().map(|v| v / s).collect();

        for y in 0..n {
            for x in 0..n {
                let dx = x as isize - center as isize;
                let dy = y as isize - center as isize;
                let expect = if dx.abs() <= radius && dy.abs() <= radius {
                    k[(dx + radius) as usize] * k[(dy + radius) as usize]
                } else {
                    0.0
                };
                let got = out.px(x, y)[0] as f64;
                assert!(
                    (got - expect).abs() < 1e-6,
                    "({x},{y}): {got} vs {expect}"
                );
            }
        }
    }
}
