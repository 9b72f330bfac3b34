//! Seeded random streams. Every stochastic operation takes its randomness
//! from here so that runs are reproducible from a single seed.

use candle_core::{DType, Device, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;

/// Independent ChaCha stream `stream` of `seed`.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Standard-normal tensor drawn in f64 and cast to `dtype`.
pub fn normal_tensor<R: Rng, S: Into<Shape>>(
    rng: &mut R,
    shape: S,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let shape = shape.into();
    let values = normal_vec(rng, shape.elem_count());
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}
