//! Difference-based componentwise long-run variance.
//!
//! For component `j` the order-`m`, lag-`h` differences
//! `D_i = sum_{s=0}^{m} d_s X_{i-sh}` (with `sum d_s = 0`, `sum d_s^2 = 1`)
//! remove the level of the series, so a mean shift only contaminates the
//! `m h` differences that straddle it. The long-run variance is then the
//! kernel-weighted sum of difference autocovariances
//!
//! ```text
//! sigma_j^2 = sum_{|k| < l} K(k / l) gamma^D_k,
//! gamma^D_k = (1/n) sum_{i=mh+|k|+1}^{n} D_i D_{i-|k|}.
//! ```
//!
//! The lag step defaults to the bandwidth `l`, which keeps every cross term
//! `d_s d_t gamma_{k + (s-t)h}` away from lag zero.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::VARIANCE_FLOOR;
use crate::data::TimeSeriesMatrix;
use crate::error::{Error, Result};

/// Lag-window kernel for the difference autocovariances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Kernel {
    #[default]
    Bartlett,
    QuadraticSpectral,
}

impl Kernel {
    pub fn weight(self, x: f64) -> f64 {
        match self {
            Kernel::Bartlett => (1.0 - x.abs()).max(0.0),
            Kernel::QuadraticSpectral => {
                if x == 0.0 {
                    return 1.0;
                }
                let z = 6.0 * PI * x / 5.0;
                25.0 / (12.0 * PI * PI * x * x) * (z.sin() / z - z.cos())
            }
        }
    }

    /// Order `q` of the kernel at the origin, `{K(t) - K(0)} / |t|^q -> B != 0`.
    pub fn characteristic_exponent(self) -> u32 {
        match self {
            Kernel::Bartlett => 1,
            Kernel::QuadraticSpectral => 2,
        }
    }

    /// `ceil(n^{1/(1+2q)})`.
    pub fn default_bandwidth(self, n: usize) -> usize {
        let q = self.characteristic_exponent() as f64;
        ((n as f64).powf(1.0 / (1.0 + 2.0 * q)).ceil() as usize).max(1)
    }
}

/// Difference coefficients `d_0..d_m`, normalized to zero sum and unit norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifferenceSequence(Vec<f64>);

impl DifferenceSequence {
    /// Optimal difference sequences of order 1 to 3, as tabulated to 4 decimals.
    #[allow(clippy::approx_constant)]
    pub fn optimal(order: usize) -> Result<Self> {
        let raw: &[f64] = match order {
            1 => &[0.7071, -0.7071],
            2 => &[0.8090, -0.5, -0.3090],
            3 => &[0.1942, 0.2809, 0.3832, -0.8582],
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "no tabulated difference sequence of order {order}; supply coefficients"
                )))
            }
        };
        Self::custom(raw.to_vec())
    }

    /// Accepts coefficients that are zero-sum and unit-norm to within 1e-3,
    /// then projects them exactly onto both constraints.
    pub fn custom(coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.len() < 2 {
            return Err(Error::InvalidArgument("need at least two coefficients".into()));
        }
        let sum: f64 = coefficients.iter().sum();
        let norm2: f64 = coefficients.iter().map(|d| d * d).sum();
        if sum.abs() > 1e-3 || (norm2 - 1.0).abs() > 1e-3 {
            return Err(Error::InvalidArgument(format!(
                "difference coefficients must sum to 0 and have unit norm (sum {sum}, norm^2 {norm2})"
            )));
        }
        let mean = sum / coefficients.len() as f64;
        let centered: Vec<f64> = coefficients.iter().map(|d| d - mean).collect();
        let norm = centered.iter().map(|d| d * d).sum::<f64>().sqrt();
        Ok(Self(centered.into_iter().map(|d| d / norm).collect()))
    }

    pub fn order(&self) -> usize {
        self.0.len() - 1
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.0
    }
}

impl Default for DifferenceSequence {
    fn default() -> Self {
        Self::optimal(3).expect("order 3 is tabulated")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LrvOptions {
    pub differences: DifferenceSequence,
    pub kernel: Kernel,
    /// Bandwidth `l`; `None` uses [`Kernel::default_bandwidth`].
    pub bandwidth: Option<usize>,
    /// Lag step `h`; `None` uses the bandwidth.
    pub lag_step: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrvEstimate {
    /// Long-run standard deviations, one per component.
    pub sigma: Vec<f64>,
    /// Components whose kernel sum was non-positive and floored.
    pub floored: Vec<usize>,
    pub bandwidth: usize,
    pub lag_step: usize,
}

pub fn estimate_sigma_componentwise(data: &TimeSeriesMatrix, opts: &LrvOptions) -> Result<LrvEstimate> {
    let n = data.n();
    let bandwidth = opts.bandwidth.unwrap_or_else(|| opts.kernel.default_bandwidth(n));
    let lag_step = opts.lag_step.unwrap_or(bandwidth);
    if bandwidth == 0 || lag_step == 0 {
        return Err(Error::InvalidArgument("bandwidth and lag step must be positive".into()));
    }
    let span = opts.differences.order() * lag_step;
    if n <= span + bandwidth {
        return Err(Error::WindowTooShort { lag: lag_step });
    }
    let weights: Vec<f64> = (0..bandwidth)
        .map(|k| opts.kernel.weight(k as f64 / bandwidth as f64))
        .collect();
    let d = opts.differences.coefficients();

    let per_component: Vec<(f64, bool)> = (0..data.p())
        .into_par_iter()
        .map(|j| {
            let x = data.column(j);
            // D_i for i = span+1..=n, stored at i - span - 1
            let diffs: Vec<f64> = (span..n)
                .map(|i| d.iter().enumerate().map(|(s, ds)| ds * x[i - s * lag_step]).sum())
                .collect();
            let mut var = 0.0;
            for (k, w) in weights.iter().enumerate() {
                let gamma: f64 = diffs[k..].iter().zip(&diffs).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                var += if k == 0 { gamma } else { 2.0 * w * gamma };
            }
            if var > VARIANCE_FLOOR {
                (var.sqrt(), false)
            } else {
                (VARIANCE_FLOOR.sqrt(), true)
            }
        })
        .collect();

    let floored = per_component
        .iter()
        .enumerate()
        .filter_map(|(j, (_, f))| f.then_some(j))
        .collect();
    Ok(LrvEstimate {
        sigma: per_component.into_iter().map(|(s, _)| s).collect(),
        floored,
        bandwidth,
        lag_step,
    })
}
