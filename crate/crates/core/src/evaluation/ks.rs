//! Two-sample Kolmogorov-Smirnov test.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exact lattice-path p-values are used when both samples are at most this large.
pub const EXACT_MAX_N: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KsMethod {
    Exact,
    Asymptotic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub method: KsMethod,
}

/// `sup |F_a - F_b|` over all breakpoints of the two empirical CDFs.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Validation("KS test needs two non-empty samples".into()));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::Validation("NaN in KS sample".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < na && j < nb {
        let v = a[i].min(b[j]);
        while i < na && a[i] <= v {
            i += 1;
        }
        while j < nb && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    // Once one sample is exhausted its CDF is 1 and the gap only shrinks.
    Ok(d)
}

/// Kolmogorov survival function `Q(lambda) = 2 sum (-1)^(k-1) exp(-2 k^2 lambda^2)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=200 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-18 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Asymptotic p-value with the effective-n correction
/// `lambda = (sqrt(ne) + 0.12 + 0.11 / sqrt(ne)) * D`.
pub fn ks_asymptotic_p(d: f64, na: usize, nb: usize) -> f64 {
    let en = ((na * nb) as f64 / (na + nb) as f64).sqrt();
    kolmogorov_sf((en + 0.12 + 0.11 / en) * d)
}

/// Exact `P(D >= d)` under the null for continuous data, by counting
/// monotone lattice paths that stay strictly inside the band `|i/na - j/nb| < d`.
pub fn ks_exact_p(d: f64, na: usize, nb: usize) -> f64 {
    // Work in integer units of 1 / (na * nb) to avoid rounding at the band edge.
    let h = (d * (na * nb) as f64).round() as i64;
    if h <= 0 {
        return 1.0;
    }
    let inside = |i: usize, j: usize| ((i * nb) as i64 - (j * na) as i64).abs() < h;
    let mut row = vec![0.0f64; nb + 1];
    for i in 0..=na {
        for j in 0..=nb {
            row[j] = if !inside(i, j) {
                0.0
            } else if i == 0 && j == 0 {
                1.0
            } else {
                let up = if i > 0 { row[j] } else { 0.0 };
                let left = if j > 0 { row[j - 1] } else { 0.0 };
                up + left
            };
        }
    }
    let total = binomial(na + nb, na);
    (1.0 - row[nb] / total).clamp(0.0, 1.0)
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64).round()
}

pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    let statistic = ks_statistic(a, b)?;
    let (na, nb) = (a.len(), b.len());
    let (p_value, method) = if na <= EXACT_MAX_N && nb <= EXACT_MAX_N {
        (ks_exact_p(statistic, na, nb), KsMethod::Exact)
    } else {
        (ks_asymptotic_p(statistic, na, nb), KsMethod::Asymptotic)
    };
    Ok(KsResult {
        statistic,
        p_value,
        method,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_statistic(a: &[f64], b: &[f64]) -> f64 {
        let cdf = |s: &[f64], x: f64| s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64;
        a.iter()
            .chain(b)
            .map(|&x| (cdf(a, x) - cdf(b, x)).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn fixtures() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(ks_statistic(&a, &a).unwrap(), 0.0);
        assert_eq!(ks_statistic(&[0.0, 1.0], &[10.0, 11.0]).unwrap(), 1.0);
        let b = [2.0, 3.0, 4.0];
        assert_eq!(ks_statistic(&a, &b).unwrap(), brute_statistic(&a, &b));
        assert!((ks_statistic(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(ks_two_sample(&[], &a).is_err());
    }

    #[test]
    fn exact_small_cases() {
        // Disjoint samples of 2 and 2: only 2 of the 6 orderings reach D = 1.
        assert!((ks_exact_p(1.0, 2, 2) - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(ks_exact_p(0.0, 3, 4), 1.0);
        // D = 1 with na = nb = 5: 2 / C(10, 5).
        assert!((ks_exact_p(1.0, 5, 5) - 2.0 / 252.0).abs() < 1e-15);
    }

    #[test]
    fn asymptotic_reference_values() {
        // Q(1.0) = 0.26999967, Q(1.36) ~ 0.0494.
        assert!((kolmogorov_sf(1.0) - 0.269_999_67).abs() < 1e-7);
        assert!((kolmogorov_sf(1.358) - 0.05).abs() < 1e-3);
        assert_eq!(kolmogorov_sf(0.0), 1.0);
        let r = ks_two_sample(&(0..40).map(f64::from).collect::<Vec<_>>(), &(20..60).map(f64::from).collect::<Vec<_>>()).unwrap();
        assert_eq!(r.method, KsMethod::Asymptotic);
        assert!((r.statistic - 0.5).abs() < 1e-15);
    }

    #[test]
    fn exact_and_asymptotic_agree_near_the_switch() {
        let a: Vec<f64> = (0..25).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..25).map(|i| i as f64 + 6.5).collect();
        let d = ks_statistic(&a, &b).unwrap();
        let exact = ks_exact_p(d, 25, 25);
        let asym = ks_asymptotic_p(d, 25, 25);
        assert!((exact - asym).abs() < 0.05, "exact {exact} asym {asym}");
    }

    proptest! {
        #[test]
        fn symmetric_and_rank_invariant(
            a in proptest::collection::vec(-50.0f64..50.0, 1..30),
            b in proptest::collection::vec(-50.0f64..50.0, 1..30),
        ) {
            let ab = ks_two_sample(&a, &b).unwrap();
            let ba = ks_two_sample(&b, &a).unwrap();
            prop_assert_eq!(ab.statistic, ba.statistic);
            prop_assert_eq!(ab.p_value, ba.p_value);
            let f = |v: &f64| (v / 10.0).exp() + v * 3.0;
            let ta: Vec<f64> = a.iter().map(f).collect();
            let tb: Vec<f64> = b.iter().map(f).collect();
            prop_assert_eq!(ks_statistic(&ta, &tb).unwrap(), ab.statistic);
            prop_assert!((ab.statistic - brute_statistic(&a, &b)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab.p_value));
        }
    }
}
