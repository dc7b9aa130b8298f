//! Summary statistics, least-squares fits and the two-sample KS test.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("empty sample")]
    EmptySample,
    #[error("need at least two distinct x values")]
    DegenerateX,
    #[error("non-finite value in sample")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    /// Sample standard deviation (n − 1 denominator; 0 for n = 1).
    pub std: f64,
}

pub fn summary(xs: &[f64]) -> Result<Summary, StatsError> {
    if xs.is_empty() {
        return Err(StatsError::EmptySample);
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    Ok(Summary {
        n,
        min: xs.iter().copied().fold(f64::INFINITY, f64::min),
        mean,
        max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        std: if n > 1 { (ss / (n - 1) as f64).sqrt() } else { 0.0 },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Residual sum of squares.
    pub residual: f64,
}

/// Ordinary least squares `y = slope·x + intercept`.
pub fn fit_linear(points: &[(f64, f64)]) -> Result<LinearFit, StatsError> {
    if points.is_empty() {
        return Err(StatsError::EmptySample);
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(StatsError::DegenerateX);
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = points.iter().map(|p| (p.1 - slope * p.0 - intercept).powi(2)).sum();
    Ok(LinearFit { slope, intercept, residual })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub reject: bool,
}

/// Survival function of the Kolmogorov distribution,
/// `Q(x) = 2 Σ_{k≥1} (−1)^{k−1} exp(−2k²x²)`.
pub fn kolmogorov_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < 1.0 {
        // theta-function form converges fast for small x
        let w = (2.0 * std::f64::consts::PI).sqrt() / x;
        let f = -std::f64::consts::PI * std::f64::consts::PI / (8.0 * x * x);
        let cdf: f64 = (1..=20).map(|k| (f * ((2 * k - 1) as f64).powi(2)).exp()).sum::<f64>() * w;
        return (1.0 - cdf).clamp(0.0, 1.0);
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * x * x).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-18 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov–Smirnov test with the asymptotic p-value
/// `Q(√(mn/(m+n))·D)`.
pub fn ks_test(a: &[f64], b: &[f64], alpha: f64) -> Result<KsResult, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::EmptySample);
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (m, n) = (a.len(), b.len());
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < m && j < n {
        let x = a[i].min(b[j]);
        while i < m && a[i] <= x {
            i += 1;
        }
        while j < n && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / m as f64 - j as f64 / n as f64).abs());
    }
    let en = (m * n) as f64 / (m + n) as f64;
    let p_value = kolmogorov_sf(en.sqrt() * d);
    Ok(KsResult { statistic: d, p_value, reject: p_value < alpha })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_line() {
        let pts: Vec<_> = (0..10).map(|x| (x as f64, 2.0 * x as f64 + 1.0)).collect();
        let f = fit_linear(&pts).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12 && f.residual < 1e-20);
    }

    #[test]
    fn constant_y_and_degenerate_x() {
        assert_eq!(fit_linear(&[(1.0, 3.0), (2.0, 3.0)]).unwrap().slope, 0.0);
        assert_eq!(fit_linear(&[(1.0, 3.0), (1.0, 4.0)]), Err(StatsError::DegenerateX));
    }

    #[test]
    fn identical_samples() {
        let a = [1.0, 2.0, 3.0, 3.0, 7.5];
        let r = ks_test(&a, &a, 0.05).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert!(!r.reject);
        assert_eq!(ks_test(&[], &a, 0.05), Err(StatsError::EmptySample));
    }

    #[test]
    fn kolmogorov_branches_agree() {
        // both series are valid near x = 1
        let x: f64 = 1.0;
        let tail: f64 = 2.0 * (1..=100).map(|k| if k % 2 == 1 { 1.0 } else { -1.0 } * (-2.0 * (k * k) as f64 * x * x).exp()).sum::<f64>();
        assert!((kolmogorov_sf(0.999_999_999) - tail).abs() < 1e-8);
    }

    // reference values from scipy.stats.kstwobign.sf and ks_2samp statistics
    #[test]
    fn matches_reference_kolmogorov_sf() {
        let table = [
            (0.2, 0.999999999999495),
            (0.5, 0.9639452436648751),
            (0.8, 0.5441424115741981),
            (1.0, 0.26999967167735456),
            (1.2, 0.11224966667072497),
            (1.5, 0.022217962616525127),
            (2.0, 0.0006709252557796953),
        ];
        for (x, p) in table {
            assert!((kolmogorov_sf(x) - p).abs() < 1e-10, "{x}");
        }
    }

    #[test]
    fn matches_reference_two_sample() {
        let frac = |x: f64| x - x.floor();
        let gen = |n: usize, step: f64, e: f64| (0..n).map(|i| frac(i as f64 * step).powf(e)).collect::<Vec<_>>();
        let cases = [
            (300, 400, 1.0, 1.1, 0.043333333333333335, 0.9043264498760472),
            (50, 80, 1.0, 1.6, 0.16999999999999998, 0.3361682859358139),
        ];
        for (m, n, ea, eb, d, p) in cases {
            let r = ks_test(&gen(m, 0.618033988749895, ea), &gen(n, 0.414213562373095, eb), 0.05).unwrap();
            assert!((r.statistic - d).abs() < 1e-12);
            assert!((r.p_value - p).abs() < 1e-9);
        }
    }

    #[test]
    fn summary_basics() {
        let s = summary(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.n, s.min, s.mean, s.max, s.std), (3, 1.0, 2.0, 3.0, 1.0));
    }
}
