//! Channels-first image tensors with values in `[0, 1]`, plus PNG I/O.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A `channels × height × width` image.
pub type Image<F> = Array3<F>;

pub fn dims<F>(img: &Image<F>) -> (usize, usize, usize) {
    img.dim()
}

pub fn check_unit_range<F: Scalar>(img: &Image<F>, what: &str) -> Result<()> {
    if img.iter().all(|&v| v >= F::zero() && v <= F::one()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "{what}: pixel values must lie in [0, 1]"
        )))
    }
}

pub fn clip_unit<F: Scalar>(img: &Image<F>) -> Image<F> {
    img.mapv(|v| v.max(F::zero()).min(F::one()))
}

pub fn cast<A: Scalar, B: Scalar>(img: &Image<A>) -> Image<B> {
    img.mapv(|v| B::from_f64_lossy(v.as_f64()))
}

/// Decodes a raster file into `channels` planes (1 = luma, 3 = RGB).
pub fn load_image(path: &Path, channels: usize) -> Result<Image<f32>> {
    let decoded = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    from_dynamic(&decoded, channels)
}

pub fn from_dynamic(img: &DynamicImage, channels: usize) -> Result<Image<f32>> {
    match channels {
        1 => {
            let gray = img.to_luma32f();
            let (w, h) = gray.dimensions();
            Ok(Array3::from_shape_fn((1, h as usize, w as usize), |(_, y, x)| {
                gray.get_pixel(x as u32, y as u32).0[0].clamp(0.0, 1.0)
            }))
        }
        3 => {
            let rgb = img.to_rgb32f();
            let (w, h) = rgb.dimensions();
            Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
                rgb.get_pixel(x as u32, y as u32).0[c].clamp(0.0, 1.0)
            }))
        }
        n => Err(Error::InvalidInput(format!(
            "unsupported channel count {n}; expected 1 or 3"
        ))),
    }
}

/// Writes a 16-bit PNG so that round-trips lose at most 1/65535 per pixel.
pub fn save_image<F: Scalar>(img: &Image<F>, path: &Path) -> Result<()> {
    let (c, h, w) = img.dim();
    let q = |v: F| (v.as_f64().clamp(0.0, 1.0) * 65535.0).round() as u16;
    let dynamic = match c {
        1 => DynamicImage::ImageLuma16(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            Luma([q(img[[0, y as usize, x as usize]])])
        })),
        3 => DynamicImage::ImageRgb16(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([q(img[[0, y, x]]), q(img[[1, y, x]]), q(img[[2, y, x]])])
        })),
        n => {
            return Err(Error::InvalidInput(format!(
                "cannot encode {n}-channel image"
            )))
        }
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    dynamic.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = Array3::from_shape_fn((1, 5, 7), |(_, y, x)| (y * 7 + x) as f32 / 34.0);
        save_image(&img, &path).unwrap();
        let back = load_image(&path, 1).unwrap();
        assert_eq!(back.dim(), img.dim());
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 1.0 / 65535.0);
        }
    }

    #[test]
    fn rejects_out_of_range() {
        let img = Array3::from_elem((1, 2, 2), 1.5f32);
        assert!(check_unit_range(&img, "x").is_err());
    }
}
