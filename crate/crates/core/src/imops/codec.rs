use std::fs::File;
use std::io::{BufWriter, Cursor, Write};
use std::path::Path;

use image::codecs::jpeg::JpegEncoder;
use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder, ImageFormat, ImageReader};

use super::Image;
use crate::error::{Error, Result};

fn to_u8(img: &Image) -> Vec<u8> {
    img.pixels()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Image {
    let pixels = bytes.iter().map(|&b| b as f32 / 255.0).collect();
    Image::from_raw_clamped(width, height, pixels)
}

/// Decodes a PNG or baseline JPEG file into unit-interval RGB.
pub fn decode_image(path: &Path) -> Result<Image> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let decoded = reader
        .decode()
        .map_err(|e| Error::Codec(format!("{}: {e}", path.display())))?;
    let rgb = decoded.to_rgb8();
    Ok(from_u8(rgb.width() as usize, rgb.height() as usize, rgb.as_raw()))
}

/// PNG bytes in memory (used for checkpointable outputs and report thumbnails).
pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    PngEncoder::new(Cursor::new(&mut buf))
        .write_image(
            &to_u8(img),
            img.width() as u32,
            img.height() as u32,
            ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::Codec(format!("png encode: {e}")))?;
    Ok(buf)
}

pub fn write_png(img: &Image, path: &Path) -> Result<()> {
    let bytes = encode_png(img)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Binary PPM (P6), 8 bits per channel.
pub fn write_ppm(img: &Image, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let werr = |e| Error::io(path, e);
    write!(w, "P6\n{} {}\n255\n", img.width(), img.height()).map_err(werr)?;
    w.write_all(&to_u8(img)).map_err(werr)?;
    w.flush().map_err(werr)
}

/// Encodes to baseline JPEG at the given quality and decodes back.
/// Dimensions are always preserved.
pub fn jpeg_roundtrip(img: &Image, quality: u8) -> Result<Image> {
    assert!((1..=100).contains(&quality), "quality must be in [1, 100]");
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(Cursor::new(&mut buf), quality)
        .encode(
            &to_u8(img),
            img.width() as u32,
            img.height() as u32,
            ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::Codec(format!("jpeg encode: {e}")))?;
    let decoded = image::load_from_memory_with_format(&buf, ImageFormat::Jpeg)
        .map_err(|e| Error::Codec(format!("jpeg decode: {e}")))?
        .to_rgb8();
    if decoded.width() as usize != img.width() || decoded.height() as usize != img.height() {
        return Err(Error::Codec(format!(
            "jpeg round-trip changed dimensions: {}x{} -> {}x{}",
            img.width(),
            img.height(),
            decoded.width(),
            decoded.height()
        )));
    }
    Ok(from_u8(
        decoded.width() as usize,
        decoded.height() as usize,
        decoded.as_raw(),
    ))
}

/// Peak signal-to-noise ratio in dB between two same-size images.
pub fn psnr(a: &Image, b: &Image) -> f64 {
    assert_eq!(a.width(), b.width());
    assert_eq!(a.height(), b.height());
    let mse: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.pixels().len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smooth_gradient(n: usize) -> Image {
        Image::from_fn(n, n, |x, y| {
            [
                x as f32 / n as f32,
                y as f32 / n as f32,
                (x + y) as f32 / (2 * n) as f32,
            ]
        })
    }

    #[test]
    fn jpeg_quality_100_high_psnr_on_gradient() {
        let img = smooth_gradient(64);
        let rt = jpeg_roundtrip(&img, 100).unwrap();
        let db = psnr(&img, &rt);
        assert!(db > 40.0, "psnr {db}");
    }

    #[test]
    fn jpeg_constant_image_high_psnr_at_any_quality() {
        // Mid-gray has zero DC offset and zero chroma, so it survives the
        // quantizer at every quality level.
        let img = Image::filled(48, 48, [128.0 / 255.0; 3]);
        for quality in [1, 10, 50, 90, 100] {
            let rt = jpeg_roundtrip(&img, quality).unwrap();
            let db = psnr(&img, &rt);
            assert!(db > 35.0, "quality {quality}: psnr {db}");
        }
        // A saturated constant color is still near-exact at ordinary
        // qualities (only DC terms, mildly quantized).
        let img = Image::filled(48, 48, [0.31, 0.62, 0.17]);
        for quality in [30, 60, 90, 100] {
            let rt = jpeg_roundtrip(&img, quality).unwrap();
            let db = psnr(&img, &rt);
            assert!(db > 35.0, "quality {quality}: psnr {db}");
        }
    }

    #[test]
    fn jpeg_preserves_dimensions() {
        let img = smooth_gradient(37); // deliberately not a multiple of 8
        let rt = jpeg_roundtrip(&img, 60).unwrap();
        assert_eq!((rt.width(), rt.height()), (37, 37));
    }

    #[test]
    fn png_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = smooth_gradient(16);
        write_png(&img, &path).unwrap();
        let back = decode_image(&path).unwrap();
        // PNG is lossless up to the u8 quantization done at write time.
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn ppm_header_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let img = smooth_gradient(8);
        write_ppm(&img, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n8 8\n255\n"));
        assert_eq!(bytes.len(), b"P6\n8 8\n255\n".len() + 8 * 8 * 3);
    }
}
