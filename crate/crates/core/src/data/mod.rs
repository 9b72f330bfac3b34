//! Manifests, slice preprocessing, PNG I/O and synthetic phantoms.

mod image_io;
mod manifest;
pub mod preprocess;
pub mod synth;

use candle_core::{DType, Device, Tensor};

pub use image_io::{read_gray, write_png16, GrayImage};
pub use manifest::{
    format_number, load_manifest, parse_manifest, write_manifest, Cohort, Manifest, SampleRecord, MANIFEST_HEADER,
};
pub use preprocess::{extract_medial_slice, load_volume, normalize_and_resize, SliceImage, Volume};
pub use synth::{synth_generate, write_synth_dataset, SynthConfig};

use crate::error::{Error, Result};

/// Images of a set of records, all of one square size.
#[derive(Debug, Clone)]
pub struct ImageSet {
    pub ids: Vec<String>,
    pub ages: Vec<Option<f64>>,
    pub survival: Vec<Option<f64>>,
    pub size: usize,
    /// Row-major pixels, `size * size` per record.
    pub pixels: Vec<f32>,
}

impl ImageSet {
    /// Read the PNG for each record. Every image must be `size x size` with
    /// values in `[0, 1]`.
    pub fn load(records: &[&SampleRecord], size: usize) -> Result<Self> {
        let mut set = ImageSet {
            ids: Vec::with_capacity(records.len()),
            ages: Vec::with_capacity(records.len()),
            survival: Vec::with_capacity(records.len()),
            size,
            pixels: Vec::with_capacity(records.len() * size * size),
        };
        for r in records {
            let img = read_gray(&r.image_path)?;
            set.push(&r.id, r.age_years, r.survival_months, &img)?;
        }
        Ok(set)
    }

    pub fn from_images(ids: Vec<String>, ages: Vec<Option<f64>>, images: &[GrayImage], size: usize) -> Result<Self> {
        if ids.len() != images.len() || ages.len() != images.len() {
            return Err(Error::Contract("ids, ages and images differ in length".into()));
        }
        let mut set = ImageSet {
            ids: Vec::new(),
            ages: Vec::new(),
            survival: Vec::new(),
            size,
            pixels: Vec::new(),
        };
        for ((id, age), img) in ids.iter().zip(ages).zip(images) {
            set.push(id, age, None, img)?;
        }
        Ok(set)
    }

    fn push(&mut self, id: &str, age: Option<f64>, survival: Option<f64>, img: &GrayImage) -> Result<()> {
        if img.width != self.size || img.height != self.size {
            return Err(Error::Validation(format!(
                "image `{id}` is {}x{}, model expects {}x{}",
                img.width, img.height, self.size, self.size
            )));
        }
        self.ids.push(id.to_string());
        self.ages.push(age);
        self.survival.push(survival);
        self.pixels.extend_from_slice(&img.pixels);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn image(&self, i: usize) -> GrayImage {
        let n = self.size * self.size;
        GrayImage {
            width: self.size,
            height: self.size,
            pixels: self.pixels[i * n..(i + 1) * n].to_vec(),
        }
    }

    /// `(len(indices), 1, size, size)` batch of the selected records.
    pub fn batch(&self, indices: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let n = self.size * self.size;
        let mut buf = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            buf.extend_from_slice(&self.pixels[i * n..(i + 1) * n]);
        }
        let t = Tensor::from_vec(buf, (indices.len(), 1, self.size, self.size), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.ages[i].is_some()).collect()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.ages[i].is_none()).collect()
    }
}

/// Split an `(N, 1, H, W)` batch into images.
pub fn images_from_tensor(t: &Tensor) -> Result<Vec<GrayImage>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 1 {
        return Err(Error::Contract(format!("expected one channel, got {c}")));
    }
    let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok(flat
        .chunks(h * w)
        .take(n)
        .map(|p| GrayImage {
            width: w,
            height: h,
            pixels: p.to_vec(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_set_batches_and_rejects_wrong_size() {
        let imgs = vec![
            GrayImage::new(2, 2, vec![0.0, 0.1, 0.2, 0.3]).unwrap(),
            GrayImage::new(2, 2, vec![1.0, 0.9, 0.8, 0.7]).unwrap(),
        ];
        let set = ImageSet::from_images(vec!["a".into(), "b".into()], vec![Some(1.0), None], &imgs, 2).unwrap();
        let b = set.batch(&[1, 0], DType::F32, &Device::Cpu).unwrap();
        assert_eq!(b.dims(), &[2, 1, 2, 2]);
        let v: Vec<f32> = b.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(&v[..4], &[1.0, 0.9, 0.8, 0.7]);
        assert_eq!(set.labeled_indices(), vec![0]);
        assert_eq!(set.unlabeled_indices(), vec![1]);
        assert_eq!(set.image(0), imgs[0]);
        assert!(ImageSet::from_images(vec!["a".into()], vec![None], &imgs[..1], 3).is_err());
    }
}
