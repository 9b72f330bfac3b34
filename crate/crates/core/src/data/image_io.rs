//! Grayscale PNG I/O. Slices are stored as 16-bit PNGs with pixel values in
//! `[0, 1]` mapped linearly onto `[0, 65535]`.

use std::path::Path;

use image::{ImageBuffer, Luma};

use crate::error::{Error, Result};

/// Row-major single-channel image.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Contract(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }
}

pub fn write_png16(path: &Path, img: &GrayImage) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let data: Vec<u16> = img
        .pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(img.width as u32, img.height as u32, data)
            .ok_or_else(|| Error::format(path, "pixel buffer does not match dimensions"))?;
    buf.save(path).map_err(|e| Error::format(path, e))
}

/// Read any grayscale (or colour, converted to luma) PNG into `[0, 1]`.
pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other),
    })?;
    let luma = img.to_luma16();
    let (w, h) = luma.dimensions();
    let pixels = luma.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect();
    GrayImage::new(w as usize, h as usize, pixels)
}
