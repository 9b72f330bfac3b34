//! Noise-prediction loss and the latent-conditioned reverse process.
//!
//! Reverse steps use the DDIM-style update on a decreasing subsequence of
//! schedule steps. With `eta = 0` sampling is a pure function of the
//! starting noise, the latent and the model weights.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::networks::SemanticLatent;
use crate::rng;
use crate::schedule::{mix, NoiseSchedule};

/// Anything that predicts the noise in `x_t` given per-sample steps and latents.
pub trait NoisePredictor {
    fn predict_noise(&self, x_t: &Tensor, ts: &[usize], z_sem: &Tensor) -> Result<Tensor>;
}

/// Per-sample squared L2 norm of the residual, averaged over the batch.
pub fn diffusion_loss(eps_pred: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if eps_pred.shape() != eps.shape() {
        return Err(Error::Contract(format!(
            "noise shapes differ: {:?} vs {:?}",
            eps_pred.dims(),
            eps.dims()
        )));
    }
    let sq = (eps_pred - eps)?.sqr()?;
    let per_sample = if sq.rank() > 1 {
        sq.flatten_from(1)?.sum(1)?
    } else {
        sq
    };
    Ok(per_sample.mean_all()?)
}

/// Invert the closed-form marginal for `x0` without clamping.
pub fn predict_x0_unclamped(
    x_t: &Tensor,
    eps_pred: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let ab = sched.alpha_bar(t)?;
    if ab <= 0.0 {
        return Err(Error::DegenerateStep { t });
    }
    mix(x_t, eps_pred, 1.0 / ab.sqrt(), -(1.0 - ab).sqrt() / ab.sqrt())
}

/// [`predict_x0_unclamped`] clamped to the pixel range `[0, 1]`.
pub fn predict_x0(x_t: &Tensor, eps_pred: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    Ok(predict_x0_unclamped(x_t, eps_pred, t, sched)?.clamp(0.0, 1.0)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReverseStepConfig {
    /// 0 is deterministic; 1 matches ancestral sampling.
    pub eta: f64,
    /// Strictly decreasing schedule steps visited by the sampler.
    pub step_indices: Vec<usize>,
}

impl ReverseStepConfig {
    /// `k` steps evenly spaced from `T - 1` down to 0.
    pub fn evenly_spaced(num_steps: usize, k: usize, eta: f64) -> Result<Self> {
        if k == 0 || k > num_steps {
            return Err(Error::Config(format!(
                "num_inference_steps must lie in [1, {num_steps}], got {k}"
            )));
        }
        let last = (num_steps - 1) as f64;
        let step_indices = if k == 1 {
            vec![num_steps - 1]
        } else {
            (0..k)
                .map(|i| (last * (k - 1 - i) as f64 / (k - 1) as f64).round() as usize)
                .collect()
        };
        let cfg = Self { eta, step_indices };
        cfg.validate(num_steps)?;
        Ok(cfg)
    }

    pub fn num_inference_steps(&self) -> usize {
        self.step_indices.len()
    }

    pub fn validate(&self, num_steps: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta {} outside [0, 1]", self.eta)));
        }
        if self.step_indices.is_empty() {
            return Err(Error::Config("no inference steps".into()));
        }
        if self.step_indices.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::Config("inference steps must be strictly decreasing".into()));
        }
        if self.step_indices[0] >= num_steps {
            return Err(Error::Config(format!(
                "inference step {} outside schedule of {num_steps}",
                self.step_indices[0]
            )));
        }
        Ok(())
    }
}

/// One reverse update from step `t` to `t_next` (`None` means the clean image).
#[allow(clippy::too_many_arguments)]
pub fn reverse_step<M: NoisePredictor + ?Sized>(
    x_t: &Tensor,
    t: usize,
    t_next: Option<usize>,
    z_sem: &Tensor,
    model: &M,
    sched: &NoiseSchedule,
    eta: f64,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    if let Some(next) = t_next {
        if next >= t {
            return Err(Error::Contract(format!("reverse step from {t} to {next} is not decreasing")));
        }
    }
    let n = x_t.dim(0)?;
    let eps_pred = model.predict_noise(x_t, &vec![t; n], z_sem)?;
    let x0_hat = predict_x0(x_t, &eps_pred, t, sched)?;

    let ab_t = sched.alpha_bar(t)?;
    let ab_next = match t_next {
        Some(next) => sched.alpha_bar(next)?,
        None => 1.0,
    };
    let sigma = eta * ((1.0 - ab_next) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_next).max(0.0).sqrt();
    let direction = (1.0 - ab_next - sigma * sigma).max(0.0).sqrt();
    // Re-derive the noise from the clamped x0 so the two stay consistent;
    // otherwise clamping at large t leaks noise into the signal.
    let eps = if ab_t < 1.0 {
        mix(x_t, &x0_hat, 1.0 / (1.0 - ab_t).sqrt(), -ab_t.sqrt() / (1.0 - ab_t).sqrt())?
    } else {
        eps_pred
    };
    let mut out = mix(&x0_hat, &eps, ab_next.sqrt(), direction)?;
    if sigma > 0.0 {
        let noise = noise.ok_or_else(|| {
            Error::Contract("a stochastic reverse step (eta > 0) needs a noise tensor".into())
        })?;
        out = (out + (noise * sigma)?)?;
    }
    Ok(out)
}

/// Run the sampler from `x_start` (at `cfg.step_indices[0]`) to a clean image.
///
/// Noise for `eta > 0` is drawn from `seed`; with `eta = 0` nothing is drawn.
pub fn sample<M: NoisePredictor + ?Sized>(
    x_start: &Tensor,
    z_sem: &Tensor,
    model: &M,
    sched: &NoiseSchedule,
    cfg: &ReverseStepConfig,
    seed: u64,
) -> Result<Tensor> {
    cfg.validate(sched.num_steps())?;
    let mut rng = rng::stream(seed, 1);
    // Sampling is never differentiated; detaching keeps the autograd graph
    // from growing across steps.
    let z_sem = z_sem.detach();
    let mut x = x_start.detach();
    for (i, &t) in cfg.step_indices.iter().enumerate() {
        let next = cfg.step_indices.get(i + 1).copied();
        let noise = if cfg.eta > 0.0 && next.is_some() {
            Some(rng::normal_tensor(&mut rng, x.shape(), x.dtype(), x.device())?)
        } else {
            None
        };
        x = reverse_step(&x, t, next, &z_sem, model, sched, cfg.eta, noise.as_ref())?.detach();
    }
    Ok(x.clamp(0.0, 1.0)?)
}

/// The starting point of a reconstruction: `x0` pushed through the closed-form
/// marginal at the sampler's first step with noise drawn from `seed`.
pub fn encode_stochastic(x0: &Tensor, sched: &NoiseSchedule, cfg: &ReverseStepConfig, seed: u64) -> Result<Tensor> {
    cfg.validate(sched.num_steps())?;
    let mut rng = rng::stream(seed, 0);
    let eps = rng::normal_tensor(&mut rng, x0.shape(), x0.dtype(), x0.device())?;
    sched.q_sample(x0, cfg.step_indices[0], &eps)
}

/// Reconstruct `x0` from its latent: stochastic encode, then conditioned reverse steps.
pub fn reconstruct<M: NoisePredictor + ?Sized>(
    x0: &Tensor,
    z_sem: &Tensor,
    model: &M,
    sched: &NoiseSchedule,
    cfg: &ReverseStepConfig,
    seed: u64,
) -> Result<Tensor> {
    let x_t = encode_stochastic(x0, sched, cfg, seed)?;
    sample(&x_t, z_sem, model, sched, cfg, seed)
}

/// `(1 - lam) z_a + lam z_b`.
pub fn interpolate_latents(z_a: &SemanticLatent, z_b: &SemanticLatent, lam: f64) -> Result<SemanticLatent> {
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::Contract(format!("interpolation weight {lam} outside [0, 1]")));
    }
    if z_a.dim() != z_b.dim() {
        return Err(Error::Contract(format!(
            "latent dimensions differ: {} vs {}",
            z_a.dim(),
            z_b.dim()
        )));
    }
    SemanticLatent::new(
        z_a.values()
            .iter()
            .zip(z_b.values())
            .map(|(a, b)| (1.0 - lam) * a + lam * b)
            .collect(),
    )
}

/// Mean absolute per-pixel difference between two image batches.
pub fn mean_abs_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Contract("image shapes differ".into()));
    }
    Ok((a - b)?.abs()?.mean_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
