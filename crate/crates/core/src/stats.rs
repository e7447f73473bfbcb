//! Small statistical helpers: binomial intervals, Kolmogorov–Smirnov
//! uniformity, histograms.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, Binomial, ContinuousCDF, DiscreteCDF};

use crate::error::{Error, Result};

/// Exact (Clopper–Pearson) central interval at confidence `1 − alpha` for a
/// binomial proportion with `successes` out of `trials`.
pub fn clopper_pearson(successes: u64, trials: u64, alpha: f64) -> Result<(f64, f64)> {
    if trials == 0 || successes > trials {
        return Err(Error::param("trials", "need 0 ≤ successes ≤ trials and trials ≥ 1"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::param("alpha", "must lie in (0, 1)"));
    }
    let (x, n) = (successes as f64, trials as f64);
    let lo = if successes == 0 {
        0.0
    } else {
        Beta::new(x, n - x + 1.0)
            .map_err(|e| Error::Parse(e.to_string()))?
            .inverse_cdf(alpha / 2.0)
    };
    let hi = if successes == trials {
        1.0
    } else {
        Beta::new(x + 1.0, n - x)
            .map_err(|e| Error::Parse(e.to_string()))?
            .inverse_cdf(1.0 - alpha / 2.0)
    };
    Ok((lo, hi))
}

/// Central 95% range of the rejection rate out of `trials` replications
/// when the true rate is `p`: binomial quantiles divided by `trials`.
pub fn binomial_band(p: f64, trials: u64) -> Result<(f64, f64)> {
    if trials == 0 || !(0.0..=1.0).contains(&p) {
        return Err(Error::param("p", "need p in [0, 1] and trials ≥ 1"));
    }
    if p == 0.0 || p == 1.0 {
        return Ok((p, p));
    }
    let b = Binomial::new(p, trials).map_err(|e| Error::Parse(e.to_string()))?;
    let n = trials as f64;
    Ok((b.inverse_cdf(0.025) as f64 / n, b.inverse_cdf(0.975) as f64 / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// One-sample Kolmogorov–Smirnov test against U(0, 1), with the
/// asymptotic distribution and Stephens' small-sample correction.
pub fn ks_uniform(values: &[f64]) -> Result<KsResult> {
    if values.is_empty() {
        return Err(Error::param("values", "empty sample"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let d = v
        .iter()
        .enumerate()
        .map(|(i, &x)| ((i + 1) as f64 / n - x).max(x - i as f64 / n))
        .fold(0.0, f64::max);
    let sn = n.sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_q(lambda),
    })
}

fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Counts of `values` in `bins` equal-width bins on `[lo, hi]`; the last
/// bin is closed.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut out = vec![0; bins];
    let width = (hi - lo) / bins as f64;
    for &x in values {
        if x < lo || x > hi {
            continue;
        }
        let b = (((x - lo) / width) as usize).min(bins - 1);
        out[b] += 1;
    }
    out
}
