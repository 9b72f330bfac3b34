//! Slice-level preprocessing: medial axial slice extraction, bilinear resize
//! and per-slice min-max normalisation.
//!
//! Volumes are expected to arrive already registered, bias-corrected and
//! skull-stripped; only the slice-level steps happen here.

use std::path::Path;

use nifti::{NiftiObject, ReaderOptions};

use super::image_io::GrayImage;
use crate::error::{Error, Result};

pub const DEFAULT_SLICE_SIZE: usize = 128;

/// A 3D intensity volume in NIfTI voxel order (first axis fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub data: Vec<f32>,
    /// Voxel axis (0, 1 or 2) that runs inferior-superior.
    pub axial_axis: usize,
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f32>, axial_axis: usize) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::Contract(format!(
                "{} voxels for dims {dims:?}",
                data.len()
            )));
        }
        if axial_axis > 2 {
            return Err(Error::Contract(format!("axial axis {axial_axis} out of range")));
        }
        Ok(Self { dims, data, axial_axis })
    }

    fn at(&self, idx: [usize; 3]) -> f32 {
        self.data[idx[0] + self.dims[0] * (idx[1] + self.dims[1] * idx[2])]
    }

    pub fn depth(&self) -> usize {
        self.dims[self.axial_axis]
    }

    /// The plane at `index` along the axial axis. Columns follow the lower of
    /// the two remaining voxel axes, rows the higher.
    pub fn slice(&self, index: usize) -> Result<GrayImage> {
        if index >= self.depth() {
            return Err(Error::Contract(format!(
                "slice {index} outside axial extent {}",
                self.depth()
            )));
        }
        let (col_axis, row_axis) = match self.axial_axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let (w, h) = (self.dims[col_axis], self.dims[row_axis]);
        let mut pixels = Vec::with_capacity(w * h);
        for r in 0..h {
            for c in 0..w {
                let mut idx = [0; 3];
                idx[self.axial_axis] = index;
                idx[col_axis] = c;
                idx[row_axis] = r;
                pixels.push(self.at(idx));
            }
        }
        GrayImage::new(w, h, pixels)
    }
}

pub fn medial_index(depth: usize) -> Result<usize> {
    if depth < 1 {
        return Err(Error::Validation("volume has no extent along the axial axis".into()));
    }
    Ok(depth / 2)
}

/// `k` consecutive indices centred on the medial slice, clipped to the volume.
pub fn medial_indices(depth: usize, k: usize) -> Result<Vec<usize>> {
    let mid = medial_index(depth)?;
    let k = k.clamp(1, depth);
    let start = mid.saturating_sub((k - 1) / 2).min(depth - k);
    Ok((start..start + k).collect())
}

/// The slice at `floor(depth / 2)` along the axial axis.
pub fn extract_medial_slice(volume: &Volume) -> Result<GrayImage> {
    volume.slice(medial_index(volume.depth())?)
}

/// Bilinear resampling with half-pixel centres (edge pixels clamp).
pub fn resize_bilinear(img: &GrayImage, width: usize, height: usize) -> GrayImage {
    let sx = img.width as f64 / width as f64;
    let sy = img.height as f64 / height as f64;
    let mut out = Vec::with_capacity(width * height);
    for r in 0..height {
        let y = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let fy = y - y0 as f64;
        for c in 0..width {
            let x = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let fx = x - x0 as f64;
            let top = img.get(y0, x0) as f64 * (1.0 - fx) + img.get(y0, x1) as f64 * fx;
            let bottom = img.get(y1, x0) as f64 * (1.0 - fx) + img.get(y1, x1) as f64 * fx;
            out.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    GrayImage {
        width,
        height,
        pixels: out,
    }
}

/// A preprocessed slice with pixels in `[0, 1]` at the target size.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceImage {
    pub image: GrayImage,
    /// Set when the input was constant and the output is all zeros.
    pub constant_input: bool,
}

/// Resize to `size x size`, then min-max scale to `[0, 1]`.
///
/// A constant slice has no range to scale; it maps to all zeros and the
/// result is flagged with a logged warning.
pub fn normalize_and_resize(slice: &GrayImage, size: usize) -> Result<SliceImage> {
    if slice.width == 0 || slice.height == 0 || size == 0 {
        return Err(Error::Contract("empty slice or target size".into()));
    }
    if slice.pixels.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("slice contains non-finite values".into()));
    }
    let mut img = resize_bilinear(slice, size, size);
    let (lo, hi) = img
        .pixels
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let constant_input = hi <= lo;
    if constant_input {
        log::warn!("constant slice: min-max normalisation is degenerate, emitting zeros");
        img.pixels.iter_mut().for_each(|v| *v = 0.0);
    } else {
        let range = hi - lo;
        img.pixels
            .iter_mut()
            .for_each(|v| *v = ((*v - lo) / range).clamp(0.0, 1.0));
    }
    Ok(SliceImage {
        image: img,
        constant_input,
    })
}

/// Voxel axis most aligned with the scanner's inferior-superior direction,
/// read from the sform if present, else the qform, else axis 2.
fn axial_axis(header: &nifti::NiftiHeader) -> usize {
    let z_row: [f64; 3] = if header.sform_code > 0 {
        let r = header.srow_z;
        [r[0] as f64, r[1] as f64, r[2] as f64]
    } else if header.qform_code > 0 {
        let (b, c, d) = (
            header.quatern_b as f64,
            header.quatern_c as f64,
            header.quatern_d as f64,
        );
        let a = (1.0 - b * b - c * c - d * d).max(0.0).sqrt();
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - b * b - c * c]
    } else {
        return 2;
    };
    (0..3)
        .max_by(|&i, &j| z_row[i].abs().total_cmp(&z_row[j].abs()))
        .unwrap_or(2)
}

/// Read a `.nii` or `.nii.gz` volume (first frame of 4D data).
pub fn load_volume(path: &Path) -> Result<Volume> {
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| Error::format(path, e))?;
    let header = obj.header().clone();
    let dim = header.dim().map_err(|e| Error::format(path, e))?;
    if dim.len() < 3 {
        return Err(Error::format(path, format!("expected a 3D volume, found rank {}", dim.len())));
    }
    let dims = [dim[0] as usize, dim[1] as usize, dim[2] as usize];
    let n: usize = dims.iter().product();
    let mut data: Vec<f32> = obj
        .into_volume()
        .into_nifti_typed_data::<f32>()
        .map_err(|e| Error::format(path, e))?;
    data.truncate(n);
    if data.len() != n {
        return Err(Error::format(path, "voxel data shorter than header dims"));
    }
    let (slope, inter) = (header.scl_slope, header.scl_inter);
    if slope != 0.0 && (slope != 1.0 || inter != 0.0) {
        data.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    Volume::new(dims, data, axial_axis(&header))
}

/// Minimal NIfTI-1 single-file writer for float volumes (RAS sform).
pub fn write_nifti_f32(path: &Path, dims: [usize; 3], data: &[f32]) -> Result<()> {
    if dims.iter().product::<usize>() != data.len() {
        return Err(Error::Contract("voxel count does not match dims".into()));
    }
    let mut hdr = vec![0u8; 352];
    let put_i16 = |buf: &mut [u8], off: usize, v: i16| buf[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |buf: &mut [u8], off: usize, v: f32| buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
    hdr[0..4].copy_from_slice(&348i32.to_le_bytes());
    put_i16(&mut hdr, 40, 3);
    for (i, d) in dims.iter().enumerate() {
        put_i16(&mut hdr, 42 + 2 * i, *d as i16);
    }
    for i in 3..7 {
        put_i16(&mut hdr, 42 + 2 * i, 1);
    }
    put_i16(&mut hdr, 70, 16); // FLOAT32
    put_i16(&mut hdr, 72, 32);
    for i in 0..4 {
        put_f32(&mut hdr, 76 + 4 * i, 1.0);
    }
    put_f32(&mut hdr, 108, 352.0);
    put_f32(&mut hdr, 112, 1.0);
    put_i16(&mut hdr, 254, 1); // sform_code
    put_f32(&mut hdr, 280, 1.0);
    put_f32(&mut hdr, 296 + 4, 1.0);
    put_f32(&mut hdr, 312 + 8, 1.0);
    hdr[344..348].copy_from_slice(b"n+1\0");
    for v in data {
        hdr.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, hdr).map_err(|e| Error::io(path, e))
}
