//! 8-bit PNG encoding of images and class masks.

use std::path::Path;

use ftvp_core::raster::{ClassMask, RgbImage};
use image::codecs::png::PngEncoder;
use image::{ColorType, ImageEncoder, ImageFormat};

use crate::error::{AppError, IoContext, Result};

fn encode(data: &[u8], w: usize, h: usize, color: ColorType) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(data, w as u32, h as u32, color.into())
        .map_err(|e| AppError::data(format!("png encode: {e}")))?;
    Ok(out)
}

pub fn encode_rgb(img: &RgbImage) -> Result<Vec<u8>> {
    encode(img.data(), img.width(), img.height(), ColorType::Rgb8)
}

/// Single-channel PNG holding the class ids.
pub fn encode_mask(mask: &ClassMask) -> Result<Vec<u8>> {
    encode(mask.data(), mask.width(), mask.height(), ColorType::L8)
}

fn decode(bytes: &[u8]) -> Result<image::DynamicImage> {
    image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| AppError::data(format!("png decode: {e}")))
}

pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage> {
    match decode(bytes)? {
        image::DynamicImage::ImageRgb8(img) => {
            let (w, h) = img.dimensions();
            Ok(RgbImage::new(w as usize, h as usize, img.into_raw())?)
        }
        other => Err(AppError::data(format!("expected 8-bit RGB, found {:?}", other.color()))),
    }
}

pub fn decode_mask(bytes: &[u8]) -> Result<ClassMask> {
    match decode(bytes)? {
        image::DynamicImage::ImageLuma8(img) => {
            let (w, h) = img.dimensions();
            Ok(ClassMask::new(w as usize, h as usize, img.into_raw())?)
        }
        other => Err(AppError::data(format!("expected 8-bit single channel mask, found {:?}", other.color()))),
    }
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).at(path)?;
    decode_rgb(&bytes).map_err(|e| AppError::data(format!("{}: {e}", path.display())))
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    std::fs::write(path, encode_rgb(img)?).at(path)
}

pub fn write_mask(path: &Path, mask: &ClassMask) -> Result<()> {
    std::fs::write(path, encode_mask(mask)?).at(path)
}
