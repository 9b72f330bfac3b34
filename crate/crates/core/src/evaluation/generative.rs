//! Reconstruction and latent interpolation over a trained bundle.

use crate::data::{images_from_tensor, GrayImage, ImageSet};
use crate::diffusion::{encode_stochastic, interpolate_latents, reconstruct, sample, ReverseStepConfig};
use crate::error::{Error, Result};
use crate::networks::{ModelBundle, SemanticLatent};

use super::PREDICT_BATCH;

pub struct Reconstruction {
    pub images: Vec<GrayImage>,
    /// Mean absolute pixel error per image.
    pub errors: Vec<f64>,
}

impl Reconstruction {
    pub fn mean_error(&self) -> f64 {
        self.errors.iter().sum::<f64>() / self.errors.len().max(1) as f64
    }
}

/// Reconstruct the selected images in chunks of [`PREDICT_BATCH`]; chunk `k`
/// draws its encoding noise from `seed + k`.
pub fn reconstruct_set(
    model: &ModelBundle,
    set: &ImageSet,
    indices: &[usize],
    cfg: &ReverseStepConfig,
    seed: u64,
) -> Result<Reconstruction> {
    let mut images = Vec::with_capacity(indices.len());
    let mut errors = Vec::with_capacity(indices.len());
    for (k, chunk) in indices.chunks(PREDICT_BATCH).enumerate() {
        let x0 = set.batch(chunk, model.dtype(), model.device())?;
        let z = model.semantic_encode(&x0)?;
        let recon = reconstruct(&x0, &z, model, model.schedule(), cfg, seed.wrapping_add(k as u64))?;
        let per = (&recon - &x0)?.abs()?.flatten_from(1)?.mean(1)?;
        errors.extend(per.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?);
        images.extend(images_from_tensor(&recon)?);
    }
    Ok(Reconstruction { images, errors })
}

pub struct Interpolation {
    pub lambdas: Vec<f64>,
    pub images: Vec<GrayImage>,
    /// Age predicted from each interpolated latent.
    pub ages: Vec<f64>,
    /// Evaluation-mode predictions for the two endpoint images.
    pub endpoint_ages: [f64; 2],
}

/// `k` evenly spaced weights from 0 to 1 inclusive.
pub fn interpolation_weights(k: usize) -> Result<Vec<f64>> {
    if k < 2 {
        return Err(Error::Config(format!("interpolation needs at least 2 points, got {k}")));
    }
    Ok((0..k).map(|i| i as f64 / (k - 1) as f64).collect())
}

/// Decode `(1 - lam) z_a + lam z_b` for each weight, holding the start noise
/// fixed to the stochastic encoding of image `a`.
pub fn interpolate_pair(
    model: &ModelBundle,
    set: &ImageSet,
    a: usize,
    b: usize,
    lambdas: &[f64],
    cfg: &ReverseStepConfig,
    seed: u64,
) -> Result<Interpolation> {
    let x = set.batch(&[a, b], model.dtype(), model.device())?;
    let z = SemanticLatent::from_rows(&model.semantic_encode(&x)?)?;
    let latents: Vec<SemanticLatent> = lambdas
        .iter()
        .map(|&lam| interpolate_latents(&z[0], &z[1], lam))
        .collect::<Result<_>>()?;
    let zs = SemanticLatent::stack(&latents, model.dtype(), model.device())?;
    let x_a = x.narrow(0, 0, 1)?;
    let x_t = encode_stochastic(&x_a, model.schedule(), cfg, seed)?;
    let dims = x_t.dims().to_vec();
    let x_t = x_t.broadcast_as((lambdas.len(), dims[1], dims[2], dims[3]))?.contiguous()?;
    let decoded = sample(&x_t, &zs, model, model.schedule(), cfg, seed)?;
    let ages = latents.iter().map(|l| model.age_of(l)).collect::<Result<Vec<_>>>()?;
    let own = model.predict_ages(&x)?;
    Ok(Interpolation {
        lambdas: lambdas.to_vec(),
        images: images_from_tensor(&decoded)?,
        ages,
        endpoint_ages: [own[0], own[1]],
    })
}

/// Number of adjacent decreases in `ages`, and the largest such drop.
pub fn inversions(ages: &[f64]) -> (usize, f64) {
    ages.windows(2)
        .filter(|w| w[1] < w[0])
        .fold((0, 0.0), |(n, worst), w| (n + 1, f64::max(worst, w[0] - w[1])))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_and_inversions() {
        assert_eq!(interpolation_weights(5).unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!(interpolation_weights(1).is_err());
        assert_eq!(inversions(&[1.0, 2.0, 3.0]), (0, 0.0));
        assert_eq!(inversions(&[1.0, 3.0, 2.5, 4.0]), (1, 0.5));
    }
}
