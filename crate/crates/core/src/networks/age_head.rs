use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{dropout_mask, softplus, BatchNorm1d, Linear, Scope};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeHeadConfig {
    /// Hidden layer widths between the latent and the scalar output.
    pub hidden: Vec<usize>,
    pub dropout: f64,
}

impl Default for AgeHeadConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 32],
            dropout: 0.5,
        }
    }
}

impl AgeHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("age head widths must be positive".into()));
        }
        Ok(())
    }
}

/// Ages are regressed in standardised units; this maps between the two.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgeNormalization {
    pub mean: f64,
    pub std: f64,
}

impl Default for AgeNormalization {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

impl AgeNormalization {
    /// Population mean and standard deviation of `ages`; a degenerate spread
    /// falls back to unit scale.
    pub fn fit(ages: &[f64]) -> Self {
        if ages.is_empty() {
            return Self::default();
        }
        let n = ages.len() as f64;
        let mean = ages.iter().sum::<f64>() / n;
        let var = ages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        let std = if var.sqrt() > 1e-8 { var.sqrt() } else { 1.0 };
        Self { mean, std }
    }

    pub fn standardize(&self, age: f64) -> f64 {
        (age - self.mean) / self.std
    }
}

/// MLP `latent -> hidden.. -> 1` with ReLU, batch norm and dropout between
/// layers; softplus keeps the de-standardised age positive.
#[derive(Debug, Clone)]
pub struct AgeHead {
    layers: Vec<Linear>,
    norms: Vec<BatchNorm1d>,
    widths: Vec<usize>,
    out: Linear,
    dropout: f64,
}

impl AgeHead {
    pub fn new(scope: &mut Scope<'_>, latent_dim: usize, cfg: &AgeHeadConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        let mut prev = latent_dim;
        for (i, &h) in cfg.hidden.iter().enumerate() {
            layers.push(Linear::new(&mut scope.pp(format!("fc{i}")), prev, h)?);
            norms.push(BatchNorm1d::new(&mut scope.pp(format!("bn{i}")), h)?);
            prev = h;
        }
        let out = Linear::new(&mut scope.pp("out"), prev, 1)?;
        Ok(Self {
            layers,
            norms,
            widths: cfg.hidden.clone(),
            out,
            dropout: cfg.dropout,
        })
    }

    fn forward_raw<R: Rng>(&self, z: &Tensor, mut rng: Option<&mut R>) -> Result<Tensor> {
        let train = rng.is_some();
        let mut h = z.clone();
        for ((fc, bn), &w) in self.layers.iter().zip(&self.norms).zip(&self.widths) {
            h = bn.forward(&fc.forward(&h)?.relu()?, train)?;
            if let Some(rng) = rng.as_deref_mut() {
                if self.dropout > 0.0 {
                    let n = h.dim(0)?;
                    h = (h * dropout_mask(rng, (n, w), self.dropout, z)?)?;
                }
            }
        }
        Ok(self.out.forward(&h)?.squeeze(1)?)
    }

    /// Re-estimate every batch-norm layer's running statistics from `z`
    /// with dropout off, layer by layer. Training-mode estimates carry the
    /// dropout variance of the preceding layer, which evaluation never sees.
    pub fn recalibrate(&self, z: &Tensor) -> Result<()> {
        let mut h = z.clone();
        for (fc, bn) in self.layers.iter().zip(&self.norms) {
            let a = fc.forward(&h)?.relu()?;
            bn.set_statistics(&a)?;
            h = bn.forward(&a, false)?;
        }
        Ok(())
    }

    /// Predicted ages in years, shape `(N,)`.
    ///
    /// Passing an RNG selects training mode (batch statistics, dropout);
    /// `None` is the deterministic evaluation mode.
    pub fn predict_years<R: Rng>(
        &self,
        z: &Tensor,
        norm: &AgeNormalization,
        rng: Option<&mut R>,
    ) -> Result<Tensor> {
        let raw = self.forward_raw(z, rng)?;
        softplus(&((raw * norm.std)? + norm.mean)?)
    }
}
