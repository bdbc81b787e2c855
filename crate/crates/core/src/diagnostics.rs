//! Per-series screening: Ljung–Box portmanteau test and p-value histograms.

use ndarray::ArrayView1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_ur;

use crate::data::TimeSeriesMatrix;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LjungBoxResult {
    pub series_index: usize,
    pub q_stat: f64,
    pub lags_used: usize,
    pub p_value: f64,
}

/// `min(10, floor(n / 5))`, at least 1.
pub fn default_lags(n: usize) -> usize {
    (n / 5).clamp(1, 10)
}

/// Upper tail of the chi-squared distribution with `dof` degrees of freedom.
pub fn chi_squared_survival(x: f64, dof: usize) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    gamma_ur(dof as f64 / 2.0, x / 2.0).clamp(0.0, 1.0)
}

/// `Q = n(n+2) sum_{k=1}^{L} rho_k^2 / (n-k)`, referred to chi-squared with `L` dof.
pub fn ljung_box(series: ArrayView1<'_, f64>, lags: usize) -> Result<LjungBoxResult> {
    let n = series.len();
    if lags == 0 || lags >= n {
        return Err(Error::InvalidArgument(format!("need 1 <= lags < n, got lags = {lags}, n = {n}")));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let denom: f64 = centered.iter().map(|v| v * v).sum();
    if !(denom > 0.0) || centered.iter().all(|v| *v == 0.0) {
        return Err(Error::DegenerateSeries);
    }
    let nf = n as f64;
    let mut q = 0.0;
    for k in 1..=lags {
        let num: f64 = centered[..n - k].iter().zip(&centered[k..]).map(|(a, b)| a * b).sum();
        let rho = num / denom;
        q += rho * rho / (nf - k as f64);
    }
    q *= nf * (nf + 2.0);
    Ok(LjungBoxResult { series_index: 0, q_stat: q, lags_used: lags, p_value: chi_squared_survival(q, lags) })
}

/// Ljung–Box on every column; `lags = None` uses [`default_lags`].
pub fn screen_panel(data: &TimeSeriesMatrix, lags: Option<usize>) -> Vec<Result<LjungBoxResult>> {
    let lags = lags.unwrap_or_else(|| default_lags(data.n()));
    (0..data.p())
        .into_par_iter()
        .map(|j| {
            ljung_box(data.column(j), lags).map(|r| LjungBoxResult { series_index: j, ..r })
        })
        .collect()
}

/// Counts in `bins` equal-width bins on `[0, 1]`; the last bin is closed on the right.
pub fn pvalue_histogram(p_values: &[f64], bins: usize) -> Result<Vec<usize>> {
    if bins == 0 {
        return Err(Error::InvalidArgument("bins must be positive".into()));
    }
    let mut counts = vec![0usize; bins];
    for &p in p_values {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Domain(format!("p-value {p} outside [0, 1]")));
        }
        let b = ((p * bins as f64).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(counts)
}
