//! Forward-process variance schedule.
//!
//! Step indices are 0-based: index `t` here is step `t + 1` of the usual
//! 1-based notation, so `alpha_bars[0] = 1 - betas[0]`.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_NUM_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Parameters that fully determine a linear schedule; this is what gets
/// written into checkpoint metadata.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            num_steps: DEFAULT_NUM_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.num_steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Betas linearly spaced from `beta_start` to `beta_end` inclusive.
pub fn make_linear_schedule(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if num_steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "betas must satisfy 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let betas: Vec<f64> = if num_steps == 1 {
        vec![beta_start]
    } else {
        let span = (beta_end - beta_start) / (num_steps - 1) as f64;
        (0..num_steps).map(|i| beta_start + span * i as f64).collect()
    };
    let alpha_bars = betas
        .iter()
        .scan(1.0f64, |acc, b| {
            *acc *= 1.0 - b;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        spec: ScheduleSpec {
            num_steps,
            beta_start,
            beta_end,
        },
        betas,
        alpha_bars,
    })
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        ScheduleSpec::default().build().expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.betas[t])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.alpha_bars[t])
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.num_steps() {
            return Err(Error::Contract(format!(
                "step index {t} outside [0, {})",
                self.num_steps()
            )));
        }
        Ok(())
    }

    /// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
    pub fn q_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        let ab = self.alpha_bar(t)?;
        mix(x0, eps, ab.sqrt(), (1.0 - ab).sqrt())
    }

    /// [`Self::q_sample`] with one step index per leading-axis sample.
    pub fn q_sample_batch(&self, x0: &Tensor, ts: &[usize], eps: &Tensor) -> Result<Tensor> {
        same_shape(x0, eps)?;
        if x0.dim(0)? != ts.len() {
            return Err(Error::Contract(format!(
                "{} step indices for a batch of {}",
                ts.len(),
                x0.dim(0)?
            )));
        }
        let mut signal = Vec::with_capacity(ts.len());
        let mut noise = Vec::with_capacity(ts.len());
        for &t in ts {
            let ab = self.alpha_bar(t)?;
            signal.push(ab.sqrt());
            noise.push((1.0 - ab).sqrt());
        }
        let a = per_sample(&signal, x0)?;
        let b = per_sample(&noise, x0)?;
        Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&b)?)?)
    }

    /// One Markov transition `x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) noise`.
    pub fn forward_step(&self, x_prev: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        let beta = self.beta(t)?;
        mix(x_prev, noise, (1.0 - beta).sqrt(), beta.sqrt())
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!(
            "shape mismatch: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

pub(crate) fn mix(a: &Tensor, b: &Tensor, ca: f64, cb: f64) -> Result<Tensor> {
    same_shape(a, b)?;
    Ok(((a * ca)? + (b * cb)?)?)
}

/// Column of per-sample coefficients shaped to broadcast against `like`.
pub(crate) fn per_sample(values: &[f64], like: &Tensor) -> Result<Tensor> {
    let mut shape = vec![values.len()];
    shape.extend(std::iter::repeat(1).take(like.rank().saturating_sub(1)));
    let t = Tensor::from_slice(values, shape.as_slice(), like.device())?;
    Ok(t.to_dtype(like.dtype())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn scalar(v: f64) -> Tensor {
        Tensor::new(&[v], &Device::Cpu).unwrap()
    }

    fn value(t: &Tensor) -> f64 {
        t.to_vec1::<f64>().unwrap()[0]
    }

    #[test]
    fn single_step_schedule() {
        let s = make_linear_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.5]);
        assert_eq!(s.alpha_bars(), &[0.5]);
    }

    #[test]
    fn two_step_schedule() {
        let s = make_linear_schedule(2, 0.1, 0.3).unwrap();
        approx::assert_relative_eq!(s.alpha_bars()[0], 0.9, epsilon = 1e-15);
        approx::assert_relative_eq!(s.alpha_bars()[1], 0.63, epsilon = 1e-15);
    }

    #[test]
    fn default_schedule_matches_brute_force_product() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        // Independent route: rebuild each beta from its endpoints, multiply in log space.
        let log_sum: f64 = (0..1000)
            .map(|i| {
                let beta = 1e-4 + (0.02 - 1e-4) * (i as f64) / 999.0;
                (1.0 - beta).ln()
            })
            .sum();
        let oracle = log_sum.exp();
        approx::assert_relative_eq!(s.alpha_bars()[999], oracle, max_relative = 1e-12);
        assert!(s.alpha_bars()[999] > 0.0 && s.alpha_bars()[999] < 1e-4);
    }

    #[test]
    fn rejects_bad_configuration() {
        assert!(matches!(make_linear_schedule(0, 0.1, 0.2), Err(Error::Config(_))));
        assert!(make_linear_schedule(10, 0.0, 0.2).is_err());
        assert!(make_linear_schedule(10, 0.3, 0.2).is_err());
        assert!(make_linear_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn q_sample_closed_form() {
        // abar = 0.64 at t=0 when beta = 0.36.
        let s = make_linear_schedule(1, 0.36, 0.36).unwrap();
        let out = s.q_sample(&scalar(2.0), 0, &scalar(1.0)).unwrap();
        approx::assert_relative_eq!(value(&out), 2.2, epsilon = 1e-12);
    }

    #[test]
    fn q_sample_limits() {
        let x0 = scalar(0.3);
        let eps = scalar(-1.7);
        assert_eq!(value(&mix(&x0, &eps, 1.0, 0.0).unwrap()), 0.3);
        assert_eq!(value(&mix(&x0, &eps, 0.0, 1.0).unwrap()), -1.7);
        // Nearly-noiseless schedule.
        let s = make_linear_schedule(1, 1e-12, 1e-12).unwrap();
        approx::assert_relative_eq!(value(&s.q_sample(&x0, 0, &eps).unwrap()), 0.3, epsilon = 1e-5);
    }

    #[test]
    fn forward_step_limits() {
        let s = make_linear_schedule(1, 1e-14, 1e-14).unwrap();
        let x = s.forward_step(&scalar(0.42), 0, &scalar(5.0)).unwrap();
        approx::assert_relative_eq!(value(&x), 0.42, epsilon = 1e-6);

        let s = make_linear_schedule(1, 1.0 - 1e-12, 1.0 - 1e-12).unwrap();
        let x = s.forward_step(&scalar(0.0), 0, &scalar(1.3)).unwrap();
        approx::assert_relative_eq!(value(&x), 1.3, epsilon = 1e-9);
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let s = NoiseSchedule::default();
        let a = Tensor::zeros((2, 3), DType::F64, &Device::Cpu).unwrap();
        let b = Tensor::zeros((3, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(s.q_sample(&a, 0, &b), Err(Error::Contract(_))));
        assert!(matches!(s.q_sample(&a, 1000, &a), Err(Error::Contract(_))));
    }

    #[test]
    fn batch_matches_per_sample() {
        let s = NoiseSchedule::default();
        let x0 = Tensor::new(&[[0.1f64, 0.2], [0.7, 0.9]], &Device::Cpu).unwrap();
        let eps = Tensor::new(&[[1.0f64, -1.0], [0.5, 0.25]], &Device::Cpu).unwrap();
        let batch = s.q_sample_batch(&x0, &[3, 700], &eps).unwrap();
        for (i, t) in [3usize, 700].into_iter().enumerate() {
            let row = s.q_sample(&x0.get(i).unwrap(), t, &eps.get(i).unwrap()).unwrap();
            assert_eq!(batch.get(i).unwrap().to_vec1::<f64>().unwrap(), row.to_vec1::<f64>().unwrap());
        }
    }

    proptest::proptest! {
        #[test]
        fn invariants_hold(n in 1usize..400, lo in 1e-5f64..0.05, span in 0.0f64..0.5) {
            let hi = (lo + span).min(0.999);
            let s = make_linear_schedule(n, lo, hi).unwrap();
            let mut acc = 1.0f64;
            for (i, (&b, &ab)) in s.betas().iter().zip(s.alpha_bars()).enumerate() {
                proptest::prop_assert!(b > 0.0 && b < 1.0);
                acc *= 1.0 - b;
                proptest::prop_assert!(((ab - acc) / acc).abs() <= 1e-12);
                proptest::prop_assert!(ab > 0.0 && ab < 1.0);
                if i > 0 {
                    proptest::prop_assert!(ab < s.alpha_bars()[i - 1]);
                }
            }
        }

        #[test]
        fn q_sample_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, e1 in -3.0f64..3.0, e2 in -3.0f64..3.0, t in 0usize..1000) {
            let s = NoiseSchedule::default();
            let lhs = value(&s.q_sample(&scalar(a + b), t, &scalar(e1 + e2)).unwrap());
            let rhs = value(&s.q_sample(&scalar(a), t, &scalar(e1)).unwrap())
                + value(&s.q_sample(&scalar(b), t, &scalar(e2)).unwrap());
            proptest::prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
