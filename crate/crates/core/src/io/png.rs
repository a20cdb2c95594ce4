//! 8-bit PNG read/write with fixed encoder settings, so identical rasters
//! always produce identical bytes.

use std::path::Path;

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ExtendedColorType, ImageEncoder};

use crate::error::{Error, Result};
use crate::grid::{Grid, Image, Mask};

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(width: usize, height: usize, data: &[u8], color: ExtendedColorType) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let enc = PngEncoder::new_with_quality(&mut out, CompressionType::Default, FilterType::NoFilter);
    enc.write_image(data, width as u32, height as u32, color)?;
    Ok(out)
}

pub fn encode_rgb(img: &Image) -> Result<Vec<u8>> {
    let data: Vec<u8> = img.iter().flat_map(|c| c.map(quantize)).collect();
    encode(img.width(), img.height(), &data, ExtendedColorType::Rgb8)
}

/// Single channel values in `[0, 1]`, written as 8-bit grey.
pub fn encode_gray(values: &Grid<f64>) -> Result<Vec<u8>> {
    let data: Vec<u8> = values.iter().map(|&v| quantize(v)).collect();
    encode(values.width(), values.height(), &data, ExtendedColorType::L8)
}

/// `true` is written as 255.
pub fn encode_mask(mask: &Mask) -> Result<Vec<u8>> {
    encode_gray(&mask.map(|&m| if m { 1.0 } else { 0.0 }))
}

pub fn save_rgb(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, encode_rgb(img)?)?;
    Ok(())
}

pub fn save_gray(path: &Path, values: &Grid<f64>) -> Result<()> {
    std::fs::write(path, encode_gray(values)?)?;
    Ok(())
}

pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    std::fs::write(path, encode_mask(mask)?)?;
    Ok(())
}

pub fn decode_rgb(bytes: &[u8]) -> Result<Image> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::invalid("png has zero size"));
    }
    let data = img.pixels().map(|p| p.0.map(|c| c as f64 / 255.0)).collect();
    Grid::from_vec(w as usize, h as usize, data)
}

pub fn load_rgb(path: &Path) -> Result<Image> {
    decode_rgb(&std::fs::read(path)?)
}

/// Grey levels mapped to `[0, 1]`.
pub fn load_gray(path: &Path) -> Result<Grid<f64>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Grid::from_vec(
        w as usize,
        h as usize,
        img.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
    )
}

/// Any non-zero grey level reads as `true`.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Grid::from_vec(w as usize, h as usize, img.pixels().map(|p| p.0[0] > 0).collect())
}
