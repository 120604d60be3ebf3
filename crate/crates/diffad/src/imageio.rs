use std::path::Path;

use diffad_core::numerics::Tensor;
use image::imageops::FilterType;
use image::{GrayImage, ImageFormat};

use crate::error::{CliError, Result};
use crate::fsutil::{create_dir, write_atomic};

/// Reads any supported image as luma in `[0, 1]`, bilinearly resized to
/// `h x w` when its size differs.
pub fn load_gray(path: &Path, h: usize, w: usize) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| CliError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let mut gray = img.to_luma8();
    if gray.dimensions() != (w as u32, h as u32) {
        gray = image::imageops::resize(&gray, w as u32, h as u32, FilterType::Triangle);
    }
    let data = gray.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Ok(Tensor::new(&[h, w], data)?)
}

/// Quantizes a `[H, W]` tensor in `[0, 1]` to 8 bits.
pub fn to_gray8(t: &Tensor) -> Vec<u8> {
    t.data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn save_gray8(path: &Path, pixels: Vec<u8>, h: usize, w: usize) -> Result<()> {
    let img = GrayImage::from_raw(w as u32, h as u32, pixels)
        .ok_or_else(|| CliError::format(path, format!("pixel buffer does not match {h}x{w}")))?;
    let mut bytes = std::io::Cursor::new(Vec::new());
    img.write_to(&mut bytes, ImageFormat::Png)
        .map_err(|source| CliError::Image {
            path: path.to_path_buf(),
            source,
        })?;
    write_atomic(path, &bytes.into_inner())
}

/// Raw little-endian `f32` values, row-major, no header.
pub fn save_f32_raw(path: &Path, t: &Tensor) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    write_atomic(path, &bytes)
}
