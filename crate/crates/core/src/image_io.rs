//! 8-bit PNG and PPM/PGM I/O. Tensors hold values in `[0, 1]`.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{CabmError, Result};
use crate::tensor::Tensor;

fn img_err(e: image::ImageError) -> CabmError {
    CabmError::Image(e.to_string())
}

/// Loads an image as a `(1, 3, H, W)` tensor; grayscale is replicated.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let img = image::open(path.as_ref()).map_err(img_err)?.to_rgb8();
    Ok(from_rgb8(&img))
}

pub fn from_rgb8(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    Tensor::from_fn([1, 3, h as usize, w as usize], |[_, c, y, x]| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    })
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Converts a one-image tensor with 1 or 3 channels to 8 bits.
pub fn to_dynamic(t: &Tensor<f32>) -> Result<DynamicImage> {
    let [n, c, h, w] = t.shape();
    if n != 1 {
        return Err(CabmError::shape("save_image", format!("expected one image, got {n}")));
    }
    match c {
        3 => Ok(DynamicImage::ImageRgb8(RgbImage::from_fn(w as u32, h as u32, |x, y| {
            image::Rgb([0, 1, 2].map(|ch| to_u8(t.at(0, ch, y as usize, x as usize))))
        }))),
        1 => Ok(DynamicImage::ImageLuma8(GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([to_u8(t.at(0, 0, y as usize, x as usize))])
        }))),
        _ => Err(CabmError::shape("save_image", format!("expected 1 or 3 channels, got {c}"))),
    }
}

/// Saves as PNG, or as binary PPM/PGM for `.ppm`/`.pgm`/`.pnm`.
pub fn save(t: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let img = to_dynamic(t)?;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let format = match ext.as_str() {
        "png" => ImageFormat::Png,
        "ppm" | "pgm" | "pnm" => ImageFormat::Pnm,
        other => return Err(CabmError::Image(format!("unsupported extension {other:?}"))),
    };
    img.save_with_format(path, format).map_err(img_err)
}

/// Rounds a tensor to the 8-bit grid, as a save/load cycle would.
pub fn quantize_8bit(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| to_u8(v) as f32 / 255.0)
}
