//! Accuracy and association statistics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    /// Two-sided p-value of the t-test on `r` with `n - 2` degrees of freedom.
    pub p: f64,
    pub n: usize,
}

fn check_pair(x: &[f64], y: &[f64], min: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Contract(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < min {
        return Err(Error::Validation(format!(
            "insufficient n: need at least {min} pairs, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite value in metric input".into()));
    }
    Ok(())
}

pub(crate) fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population standard deviation.
pub fn population_std(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
}

pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<Correlation> {
    check_pair(x, y, 3)?;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Validation("undefined correlation: zero variance input".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let n = x.len();
    let df = (n - 2) as f64;
    let p = if r.abs() >= 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("positive dof");
        (2.0 * dist.sf(t.abs())).min(1.0)
    };
    Ok(Correlation { r, p, n })
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth, 1)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Coefficient of determination `1 - SS_res / SS_tot`; negative when the
/// predictor is worse than the truth's mean.
pub fn r_squared(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth, 1)?;
    let m = mean(truth);
    let ss_tot: f64 = truth.iter().map(|t| (t - m).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Validation("r_squared undefined: constant truth vector".into()));
    }
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (t - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Pearson correlation between brain-PADs and survival times.
pub fn survival_association(pads: &[f64], survival_months: &[f64]) -> Result<Correlation> {
    pearson_r(pads, survival_months)
}

/// Residualise PAD on chronological age by ordinary least squares.
pub fn bias_correct(chronological: &[f64], pads: &[f64]) -> Result<Vec<f64>> {
    check_pair(chronological, pads, 2)?;
    let (mx, my) = (mean(chronological), mean(pads));
    let sxx: f64 = chronological.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Validation("bias correction needs varying chronological ages".into()));
    }
    let sxy: f64 = chronological.iter().zip(pads).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    Ok(chronological
        .iter()
        .zip(pads)
        .map(|(x, y)| y - (intercept + slope * x))
        .collect())
}
