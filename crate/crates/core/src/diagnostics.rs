//! Effective sample size, autocorrelation and split-chain R̂.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::samplers::ChainTrace;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiagnosticsError {
    #[error("series has zero variance")]
    ZeroVariance,
    #[error("series of length {len} is too short for lag {lag}")]
    TooShort { len: usize, lag: usize },
    #[error("need at least two chains, got {0}")]
    TooFewChains(usize),
    #[error("chains must have equal length of at least 4")]
    ChainLengths,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Biased autocovariance `(1/N) Σ (x_t − x̄)(x_{t+k} − x̄)` at lag `k`.
fn autocovariance_at(centered: &[f64], k: usize) -> f64 {
    let n = centered.len();
    centered[..n - k]
        .iter()
        .zip(&centered[k..])
        .map(|(a, b)| a * b)
        .sum::<f64>()
        / n as f64
}

fn centered(series: &[f64]) -> Vec<f64> {
    let m = mean(series);
    series.iter().map(|x| x - m).collect()
}

/// Sample autocorrelation at lag `k`, normalized by the lag-0 autocovariance.
pub fn autocorr(series: &[f64], k: usize) -> Result<f64, DiagnosticsError> {
    if series.len() <= k {
        return Err(DiagnosticsError::TooShort {
            len: series.len(),
            lag: k,
        });
    }
    let c = centered(series);
    let c0 = autocovariance_at(&c, 0);
    if c0 <= 0.0 {
        return Err(DiagnosticsError::ZeroVariance);
    }
    Ok(autocovariance_at(&c, k) / c0)
}

/// Biased autocovariances for lags `0..=max_lag` by direct summation.
pub fn autocovariance_direct(series: &[f64], max_lag: usize) -> Vec<f64> {
    let c = centered(series);
    let max_lag = max_lag.min(series.len().saturating_sub(1));
    (0..=max_lag).map(|k| autocovariance_at(&c, k)).collect()
}

/// Biased autocovariances for lags `0..=max_lag` via a zero-padded FFT.
pub fn autocovariance_fft(series: &[f64], max_lag: usize) -> Vec<f64> {
    let n = series.len();
    if n == 0 {
        return Vec::new();
    }
    let size = (2 * n).next_power_of_two();
    let m = mean(series);
    let mut buf: Vec<Complex<f64>> = series
        .iter()
        .map(|x| Complex::new(x - m, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(size).process(&mut buf);
    for v in buf.iter_mut() {
        *v = Complex::new(v.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(size).process(&mut buf);
    let max_lag = max_lag.min(n - 1);
    buf[..=max_lag]
        .iter()
        .map(|v| v.re / (size as f64 * n as f64))
        .collect()
}

/// Integrated autocorrelation time `1 + 2 Σ ρ(k)` with Geyer's initial
/// monotone sequence truncation.
///
/// Pairs `Γₘ = ρ(2m) + ρ(2m+1)` are summed up to the first non-positive
/// pair, each pair clipped to the running minimum.
pub fn integrated_autocorr_time(series: &[f64]) -> Result<f64, DiagnosticsError> {
    let n = series.len();
    if n < 2 {
        return Err(DiagnosticsError::TooShort { len: n, lag: 1 });
    }
    let c = centered(series);
    let c0 = autocovariance_at(&c, 0);
    if !(c0 > 0.0) {
        return Err(DiagnosticsError::ZeroVariance);
    }
    let max_lag = n / 2;
    let rho = |k: usize| autocovariance_at(&c, k) / c0;
    let mut sum = 0.0;
    let mut previous = f64::INFINITY;
    let mut m = 0;
    while 2 * m + 1 <= max_lag {
        let mut pair = rho(2 * m) + rho(2 * m + 1);
        if m > 0 && pair <= 0.0 {
            break;
        }
        pair = pair.min(previous);
        previous = pair;
        sum += pair;
        m += 1;
    }
    // Σ_{m} Γₘ = ρ(0) + ρ(1) + …, and τ = −ρ(0) + 2 Σ Γₘ.
    let tau = -1.0 + 2.0 * sum;
    // A strongly anticorrelated chain can drive τ towards zero; keep ESS
    // finite by bounding it at N·log10(N).
    let floor = 1.0 / (n as f64).log10().max(1.0);
    Ok(tau.max(floor))
}

/// Effective sample size `N / τ`.
pub fn ess(series: &[f64]) -> Result<f64, DiagnosticsError> {
    Ok(series.len() as f64 / integrated_autocorr_time(series)?)
}

/// Split-chain potential scale reduction factor.
pub fn split_rhat(chains: &[&[f64]]) -> Result<f64, DiagnosticsError> {
    if chains.len() < 2 {
        return Err(DiagnosticsError::TooFewChains(chains.len()));
    }
    let len = chains[0].len();
    if len < 4 || chains.iter().any(|c| c.len() != len) {
        return Err(DiagnosticsError::ChainLengths);
    }
    let half = len / 2;
    let halves: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| [&c[..half], &c[len - half..]])
        .collect();
    let n = half as f64;
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let vars: Vec<f64> = halves
        .iter()
        .zip(&means)
        .map(|(h, m)| h.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
        .collect();
    let grand = mean(&means);
    let m = halves.len() as f64;
    let b = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = mean(&vars);
    if w <= 0.0 {
        return Ok(if b <= 0.0 { 1.0 } else { f64::INFINITY });
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    Ok((var_plus / w).sqrt())
}

/// Efficiency summary of a chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EssReport {
    /// Per-coordinate ESS, capped at the number of samples.
    pub per_coordinate: Vec<f64>,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    /// Sampling-phase seconds per unit of minimum ESS; absent when the
    /// minimum ESS is zero.
    pub seconds_per_min_ess: Option<f64>,
    pub acceptance_rate: f64,
}

impl EssReport {
    /// Coordinates with zero variance (e.g. a chain that never moved) get
    /// ESS 0.
    pub fn from_columns(columns: &[Vec<f64>], sampling_seconds: f64, acceptance_rate: f64) -> Self {
        let per_coordinate: Vec<f64> = columns
            .iter()
            .map(|c| ess(c).map(|e| e.min(c.len() as f64)).unwrap_or(0.0))
            .collect();
        let mut sorted = per_coordinate.clone();
        sorted.sort_by(f64::total_cmp);
        let (min, median, max) = if sorted.is_empty() {
            (0.0, 0.0, 0.0)
        } else {
            let k = sorted.len();
            let median = if k % 2 == 1 {
                sorted[k / 2]
            } else {
                0.5 * (sorted[k / 2 - 1] + sorted[k / 2])
            };
            (sorted[0], median, sorted[k - 1])
        };
        let seconds_per_min_ess = (min > 0.0).then(|| sampling_seconds / min);
        Self {
            per_coordinate,
            min,
            median,
            max,
            seconds_per_min_ess,
            acceptance_rate,
        }
    }

    pub fn from_trace(trace: &ChainTrace) -> Self {
        let columns: Vec<Vec<f64>> = (0..trace.dim()).map(|k| trace.column(k)).collect();
        Self::from_columns(&columns, trace.sampling_seconds, trace.acceptance_rate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alternating_series() {
        let s: Vec<f64> = (0..100).map(|t| if t % 2 == 0 { 1.0 } else { -1.0 }).collect();
        // Biased normalization: the lag-1 sum has N − 1 terms over N.
        assert!((autocorr(&s, 1).unwrap() + 1.0).abs() <= 1.0 / 100.0 + 1e-12);
        assert_eq!(autocorr(&s, 0).unwrap(), 1.0);
        assert!(ess(&s).unwrap() > 0.0);
    }

    #[test]
    fn constant_series_is_degenerate() {
        assert_eq!(autocorr(&[2.0; 10], 1), Err(DiagnosticsError::ZeroVariance));
        assert_eq!(ess(&[2.0; 10]), Err(DiagnosticsError::ZeroVariance));
    }

    #[test]
    fn rhat_preconditions() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(split_rhat(&[&a]), Err(DiagnosticsError::TooFewChains(1)));
        assert_eq!(split_rhat(&[&a, &a[..3]]), Err(DiagnosticsError::ChainLengths));
    }

    #[test]
    fn disjoint_chains_have_large_rhat() {
        let a: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin() * 0.01).collect();
        let b: Vec<f64> = a.iter().map(|x| x + 5.0).collect();
        assert!(split_rhat(&[&a, &b]).unwrap() > 2.0);
    }
}
