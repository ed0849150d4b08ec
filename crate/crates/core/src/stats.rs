//! Batch statistics: moments, jackknife, Kolmogorov-Smirnov.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::{Error, Result};

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance.
pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

pub fn std_error(x: &[f64]) -> f64 {
    (variance(x) / x.len() as f64).sqrt()
}

/// Standard error of the unbiased sample variance, from the fourth moment.
pub fn variance_se(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = mean(x);
    let m2 = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    let m4 = x.iter().map(|v| (v - m).powi(4)).sum::<f64>() / n;
    ((m4 - (n - 3.0) / (n - 1.0) * m2 * m2) / n).max(0.0).sqrt()
}

pub fn covariance(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Standard error of the sample covariance (plug-in delta method).
pub fn covariance_se(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let p: Vec<f64> = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).collect();
    std_error(&p)
}

/// Sample skewness with its large-sample standard error `sqrt(6/n)`.
pub fn skewness(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = mean(x);
    let m2 = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    let m3 = x.iter().map(|v| (v - m).powi(3)).sum::<f64>() / n;
    (m3 / m2.powf(1.5), (6.0 / n).sqrt())
}

/// Sample excess kurtosis with standard error `sqrt(24/n)`.
pub fn excess_kurtosis(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = mean(x);
    let m2 = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    let m4 = x.iter().map(|v| (v - m).powi(4)).sum::<f64>() / n;
    (m4 / (m2 * m2) - 3.0, (24.0 / n).sqrt())
}

/// Leave-one-out jackknife: returns (full-sample estimate, standard error).
pub fn jackknife(x: &[f64], stat: impl Fn(&[f64]) -> f64) -> (f64, f64) {
    let n = x.len();
    let full = stat(x);
    if n < 2 {
        return (full, f64::NAN);
    }
    let mut buf = Vec::with_capacity(n - 1);
    let loo: Vec<f64> = (0..n)
        .map(|k| {
            buf.clear();
            buf.extend_from_slice(&x[..k]);
            buf.extend_from_slice(&x[k + 1..]);
            stat(&buf)
        })
        .collect();
    let m = mean(&loo);
    let var = loo.iter().map(|v| (v - m).powi(2)).sum::<f64>() * (n as f64 - 1.0) / n as f64;
    (full, var.sqrt())
}

pub fn normal_cdf(x: f64, mean: f64, variance: f64) -> f64 {
    Normal::new(mean, variance.sqrt()).map(|d| d.cdf(x)).unwrap_or(f64::NAN)
}

/// `sup |F_n - F|` for the empirical CDF of `x`.
pub fn ks_statistic(x: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = cdf(v);
            (f - i as f64 / n).max((i as f64 + 1.0) / n - f)
        })
        .fold(0.0, f64::max)
}

/// Kolmogorov tail `P(K > lambda) = 2 sum (-1)^{k-1} exp(-2 k^2 lambda^2)`.
pub fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let t = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        s += if k % 2 == 1 { t } else { -t };
        if t < 1e-17 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// Asymptotic KS p-value with Stephens' finite-n correction.
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let rn = (n as f64).sqrt();
    kolmogorov_tail((rn + 0.12 + 0.11 / rn) * d)
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct KsReport {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
    pub skewness: f64,
    pub skewness_se: f64,
    pub excess_kurtosis: f64,
    pub kurtosis_se: f64,
}

/// KS test of `x` against `Normal(mean, variance)` plus cumulant diagnostics.
pub fn ks_normal(x: &[f64], mean_: f64, variance_: f64) -> Result<KsReport> {
    if x.len() < 2 || variance(x) <= 0.0 || !(variance_ > 0.0) {
        return Err(Error::InvalidInput("degenerate batch or reference variance".into()));
    }
    let d = ks_statistic(x, |v| normal_cdf(v, mean_, variance_));
    let (sk, sk_se) = skewness(x);
    let (ku, ku_se) = excess_kurtosis(x);
    Ok(KsReport {
        statistic: d,
        p_value: ks_pvalue(d, x.len()),
        n: x.len(),
        skewness: sk,
        skewness_se: sk_se,
        excess_kurtosis: ku,
        kurtosis_se: ku_se,
    })
}

/// Integrated autocorrelation time `1 + 2 sum_k rho_k`, summed with Sokal's
/// automatic window (stop at the first `k >= 5 tau`). `1` for white noise.
pub fn integrated_autocorrelation(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return 1.0;
    }
    let m = mean(x);
    let c0: f64 = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
    if c0 <= 0.0 {
        return 1.0;
    }
    let mut tau = 1.0;
    for k in 1..n / 2 {
        let ck: f64 = (0..n - k).map(|i| (x[i] - m) * (x[i + k] - m)).sum::<f64>() / n as f64;
        tau += 2.0 * ck / c0;
        if k as f64 >= 5.0 * tau {
            break;
        }
    }
    tau.max(1e-3)
}
