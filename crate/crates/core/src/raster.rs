//! Conversions between `image` buffers and `ndarray` tensors, plus the
//! pixel-level primitives shared by augmentation, synthesis and artifact
//! output.
//!
//! Patches and maps use CHW / HW `f32` arrays with values in [0, 1].

use std::io::Cursor;
use std::path::Path;

use image::codecs::jpeg::JpegEncoder;
use image::codecs::png::PngEncoder;
use image::{
    DynamicImage, ExtendedColorType, ImageBuffer, ImageEncoder, ImageFormat, Luma, Rgb, RgbImage,
};
use ndarray::{Array2, Array3};

use crate::error::Error;
use crate::Result;

pub type RgbF32 = ImageBuffer<Rgb<f32>, Vec<f32>>;

/// Crops a `size`x`size` patch with top-left (x, y) into a (3, size, size)
/// array of [0, 1] floats. Caller guarantees the crop stays in bounds.
pub fn crop_chw(img: &RgbImage, x: u32, y: u32, size: u32) -> Array3<f32> {
    let mut out = Array3::zeros((3, size as usize, size as usize));
    for dy in 0..size {
        for dx in 0..size {
            let p = img.get_pixel(x + dx, y + dy);
            for c in 0..3 {
                out[[c, dy as usize, dx as usize]] = p.0[c] as f32 / 255.0;
            }
        }
    }
    out
}

/// Full-image conversion to (3, H, W) floats in [0, 1].
pub fn rgb8_to_chw(img: &RgbImage) -> Array3<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((3, h, w));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = p.0[c] as f32 / 255.0;
        }
    }
    out
}

/// (3, H, W) floats in [0, 1] -> 8-bit RGB image (rounded).
pub fn chw_to_rgb8(arr: &Array3<f32>) -> RgbImage {
    let (_, h, w) = arr.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            (arr[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        Rgb([px(0), px(1), px(2)])
    })
}

fn chw_to_rgbf(arr: &Array3<f32>) -> RgbF32 {
    let (_, h, w) = arr.dim();
    RgbF32::from_fn(w as u32, h as u32, |x, y| {
        Rgb([
            arr[[0, y as usize, x as usize]],
            arr[[1, y as usize, x as usize]],
            arr[[2, y as usize, x as usize]],
        ])
    })
}

fn rgbf_to_chw(img: &RgbF32) -> Array3<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((3, h, w));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = p.0[c];
        }
    }
    out
}

/// In-place clamp to [0, 1].
pub fn clamp_unit(arr: &mut Array3<f32>) {
    arr.mapv_inplace(|v| v.clamp(0.0, 1.0));
}

/// JPEG encode/decode round trip at the given quality.
pub fn jpeg_roundtrip_chw(arr: &Array3<f32>, quality: u8) -> Result<Array3<f32>> {
    let rgb = chw_to_rgb8(arr);
    let decoded = jpeg_roundtrip_rgb8(&rgb, quality)?;
    let mut out = rgb8_to_chw(&decoded);
    debug_assert_eq!(out.dim(), arr.dim());
    clamp_unit(&mut out);
    Ok(out)
}

pub fn jpeg_roundtrip_rgb8(img: &RgbImage, quality: u8) -> Result<RgbImage> {
    let bytes = encode_jpeg(img, quality)?;
    let decoded = image::load_from_memory_with_format(&bytes, ImageFormat::Jpeg)?;
    Ok(decoded.to_rgb8())
}

pub fn encode_jpeg(img: &RgbImage, quality: u8) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    let encoder = JpegEncoder::new_with_quality(Cursor::new(&mut bytes), quality);
    encoder.write_image(
        img.as_raw(),
        img.width(),
        img.height(),
        ExtendedColorType::Rgb8,
    )?;
    Ok(bytes)
}

/// Separable Gaussian blur with clamp-to-edge padding.
pub fn gaussian_blur_chw(arr: &Array3<f32>, sigma: f32) -> Array3<f32> {
    if sigma <= 0.0 {
        return arr.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let denom = 2.0 * sigma * sigma;
    for i in -radius..=radius {
        kernel.push((-(i * i) as f32 / denom).exp());
    }
    let sum: f32 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= sum;
    }

    let (ch, h, w) = arr.dim();
    let clamp = |v: isize, max: usize| v.clamp(0, max as isize - 1) as usize;
    let mut horiz = Array3::zeros((ch, h, w));
    for c in 0..ch {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = clamp(x as isize + ki as isize - radius, w);
                    acc += kv * arr[[c, y, sx]];
                }
                horiz[[c, y, x]] = acc;
            }
        }
    }
    let mut out = Array3::zeros((ch, h, w));
    for c in 0..ch {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = clamp(y as isize + ki as isize - radius, h);
                    acc += kv * horiz[[c, sy, x]];
                }
                out[[c, y, x]] = acc;
            }
        }
    }
    out
}

/// Resizes by `factor` (bilinear with antialiasing) and resamples back to
/// the original size.
pub fn resize_roundtrip_chw(arr: &Array3<f32>, factor: f32) -> Array3<f32> {
    let (_, h, w) = arr.dim();
    let nw = ((w as f32 * factor).round() as u32).max(1);
    let nh = ((h as f32 * factor).round() as u32).max(1);
    let img = chw_to_rgbf(arr);
    let shrunk = image::imageops::resize(&img, nw, nh, image::imageops::FilterType::Triangle);
    let restored = image::imageops::resize(
        &shrunk,
        w as u32,
        h as u32,
        image::imageops::FilterType::Triangle,
    );
    let mut out = rgbf_to_chw(&restored);
    clamp_unit(&mut out);
    out
}

/// Writes a consistency map as 16-bit grayscale PNG
/// (pixel = round(65535 * value)).
pub fn write_map_png(path: &Path, map: &Array2<f32>) -> Result<()> {
    let (h, w) = map.dim();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            Luma([(map[[y as usize, x as usize]].clamp(0.0, 1.0) * 65535.0).round() as u16])
        });
    DynamicImage::ImageLuma16(buf)
        .save_with_format(path, ImageFormat::Png)
        .map_err(Error::Image)
}

/// Reads a prediction map PNG back to [0, 1] doubles (any grayscale depth).
pub fn read_map_png(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })?;
    let gray = img.to_luma16();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let mut out = Array2::zeros((h, w));
    for (x, y, p) in gray.enumerate_pixels() {
        out[[y as usize, x as usize]] = p.0[0] as f64 / 65535.0;
    }
    Ok(out)
}

/// Writes a binary mask as a 1-bit grayscale PNG.
pub fn write_mask_png(path: &Path, mask: &Array2<bool>) -> Result<()> {
    let (h, w) = mask.dim();
    let row_bytes = w.div_ceil(8);
    let mut packed = vec![0u8; row_bytes * h];
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] {
                packed[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let encoder = PngEncoder::new(std::io::BufWriter::new(file));
    encoder
        .write_image(&packed, w as u32, h as u32, ExtendedColorType::L1)
        .map_err(Error::Image)
}

/// Reads a mask PNG; any nonzero pixel is true. Accepts 1-bit or 8-bit.
pub fn read_mask_png(path: &Path) -> Result<Array2<bool>> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })?;
    let gray = img.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let mut out = Array2::default((h, w));
    for (x, y, p) in gray.enumerate_pixels() {
        out[[y as usize, x as usize]] = p.0[0] != 0;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_and_convert_roundtrip() {
        let img = RgbImage::from_fn(8, 8, |x, y| Rgb([x as u8 * 30, y as u8 * 30, 7]));
        let arr = crop_chw(&img, 2, 1, 4);
        assert_eq!(arr.dim(), (3, 4, 4));
        assert!((arr[[0, 0, 0]] - 60.0 / 255.0).abs() < 1e-6);
        let back = chw_to_rgb8(&arr);
        assert_eq!(back.get_pixel(0, 0).0, [60, 30, 7]);
    }

    #[test]
    fn blur_preserves_constant_images() {
        let arr = Array3::from_elem((3, 16, 16), 0.25f32);
        let blurred = gaussian_blur_chw(&arr, 1.5);
        for v in blurred.iter() {
            assert!((v - 0.25).abs() < 1e-5);
        }
    }

    #[test]
    fn resize_roundtrip_keeps_shape_and_range() {
        let mut arr = Array3::zeros((3, 16, 16));
        arr[[0, 3, 3]] = 1.0;
        for factor in [0.5f32, 0.75, 1.25, 1.5] {
            let out = resize_roundtrip_chw(&arr, factor);
            assert_eq!(out.dim(), (3, 16, 16));
            assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn map_png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.png");
        let mut map = Array2::zeros((4, 6));
        map[[1, 2]] = 0.5;
        map[[3, 5]] = 1.0;
        write_map_png(&path, &map).unwrap();
        let back = read_map_png(&path).unwrap();
        assert_eq!(back.dim(), (4, 6));
        assert!((back[[1, 2]] - 0.5).abs() < 1e-4);
        assert!((back[[3, 5]] - 1.0).abs() < 1e-9);
        assert!(back[[0, 0]].abs() < 1e-9);
    }

    #[test]
    fn mask_png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.png");
        let mut mask = Array2::default((5, 9));
        mask[[0, 0]] = true;
        mask[[4, 8]] = true;
        mask[[2, 3]] = true;
        write_mask_png(&path, &mask).unwrap();
        let back = read_mask_png(&path).unwrap();
        assert_eq!(back, mask);
    }

    #[test]
    fn jpeg_roundtrip_keeps_shape() {
        let arr = Array3::from_shape_fn((3, 16, 16), |(c, y, x)| {
            ((c + y + x) % 7) as f32 / 7.0
        });
        let out = jpeg_roundtrip_chw(&arr, 70).unwrap();
        assert_eq!(out.dim(), (3, 16, 16));
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
