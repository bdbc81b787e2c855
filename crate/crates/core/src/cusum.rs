//! Partial sums, the quadratic CUSUM `W(k)` and the componentwise CUSUM
//! profiles `C_{gamma,j}(k)`.
//!
//! Break candidates `k` run over `1..=n-1`; profile vectors store candidate
//! `k` at index `k - 1`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesMatrix;
use crate::error::{Error, Result};

/// Pairwise summation; the split points depend only on the slice length.
pub(crate) fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if xs.len() <= BLOCK {
        xs.iter().sum()
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

fn check_break(n: usize, k: usize) -> Result<()> {
    if k == 0 || k >= n {
        return Err(Error::Index(format!("break index k = {k} outside 1..={}", n.saturating_sub(1))));
    }
    Ok(())
}

/// Contrast weights `a_{i,k}`: `1/k` for `i <= k`, `-1/(n-k)` afterwards.
pub fn contrast_weights(n: usize, k: usize) -> Result<Vec<f64>> {
    check_break(n, k)?;
    let pre = 1.0 / k as f64;
    let post = -1.0 / (n - k) as f64;
    Ok((1..=n).map(|i| if i <= k { pre } else { post }).collect())
}

/// Prefix sums `S[k][j] = sum_{i<=k} (X_{ij} - c_j)` with a zero first row.
///
/// Each column is shifted by its mean, anchored at the first observation so
/// constant columns become exactly zero. Bridges `S_k - (k/n) S_n` do not
/// depend on the shift.
#[derive(Clone, Debug)]
pub struct PartialSums {
    sums: Array2<f64>,
}

impl PartialSums {
    pub fn new(data: &TimeSeriesMatrix) -> Self {
        let (n, p) = (data.n(), data.p());
        let x = data.values();
        let centers: Vec<f64> = (0..p)
            .map(|j| {
                let anchor = x[[0, j]];
                let dev: Vec<f64> = x.column(j).iter().map(|v| v - anchor).collect();
                anchor + pairwise_sum(&dev) / n as f64
            })
            .collect();
        let mut sums = Array2::<f64>::zeros((n + 1, p));
        for i in 0..n {
            for j in 0..p {
                sums[[i + 1, j]] = sums[[i, j]] + (x[[i, j]] - centers[j]);
            }
        }
        Self { sums }
    }

    pub fn n(&self) -> usize {
        self.sums.nrows() - 1
    }

    pub fn p(&self) -> usize {
        self.sums.ncols()
    }

    pub fn get(&self, k: usize, j: usize) -> f64 {
        self.sums[[k, j]]
    }

    /// `S_{kj} - (k/n) S_{nj}`.
    #[inline]
    pub fn bridge(&self, k: usize, j: usize) -> f64 {
        let n = self.n();
        self.sums[[k, j]] - (k as f64 / n as f64) * self.sums[[n, j]]
    }

    /// `W(k) = ||S_k - (k/n) S_n||^2 / (n sqrt(p))`.
    pub fn w(&self, k: usize) -> Result<f64> {
        check_break(self.n(), k)?;
        Ok(self.w_unchecked(k, &mut Vec::with_capacity(self.p())))
    }

    fn w_unchecked(&self, k: usize, scratch: &mut Vec<f64>) -> f64 {
        let (n, p) = (self.n(), self.p());
        scratch.clear();
        scratch.extend((0..p).map(|j| {
            let b = self.bridge(k, j);
            b * b
        }));
        pairwise_sum(scratch) / (n as f64 * (p as f64).sqrt())
    }

    /// `W(k)` for every `k` in `1..=n-1`.
    pub fn w_profile(&self) -> Vec<f64> {
        let mut scratch = Vec::with_capacity(self.p());
        (1..self.n()).map(|k| self.w_unchecked(k, &mut scratch)).collect()
    }
}

/// Convenience wrapper computing a single `W(k)` from raw data.
pub fn compute_w(data: &TimeSeriesMatrix, k: usize) -> Result<f64> {
    PartialSums::new(data).w(k)
}

/// Boundary weighting exponent of the componentwise CUSUM.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Gamma {
    /// Unweighted, `gamma = 0`.
    Zero,
    /// Variance-standardized, `gamma = 0.5`.
    Half,
}

impl Gamma {
    pub fn value(self) -> f64 {
        match self {
            Gamma::Zero => 0.0,
            Gamma::Half => 0.5,
        }
    }
}

/// Matrix of `C_{gamma,j}(k)`; row `k - 1`, column `j`.
#[derive(Clone, Debug)]
pub struct CusumProfile {
    pub gamma: Gamma,
    pub values: Array2<f64>,
    pub sigma_hat: Vec<f64>,
}

impl CusumProfile {
    pub fn get(&self, k: usize, j: usize) -> f64 {
        self.values[[k - 1, j]]
    }
}

pub fn cusum_profile(
    data: &TimeSeriesMatrix,
    gamma: Gamma,
    sigma_hat: &[f64],
) -> Result<CusumProfile> {
    cusum_profile_from_sums(&PartialSums::new(data), gamma, sigma_hat)
}

/// `C_{gamma,j}(k) = {(k/n)(1-k/n)}^{-gamma} n^{-1/2} (S_kj - (k/n) S_nj) / sigma_j`.
pub fn cusum_profile_from_sums(
    sums: &PartialSums,
    gamma: Gamma,
    sigma_hat: &[f64],
) -> Result<CusumProfile> {
    let (n, p) = (sums.n(), sums.p());
    if sigma_hat.len() != p {
        return Err(Error::InvalidArgument(format!(
            "sigma_hat has length {}, expected {p}",
            sigma_hat.len()
        )));
    }
    if let Some(j) = sigma_hat.iter().position(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::DegenerateVariance(j));
    }
    let root_n = (n as f64).sqrt();
    let mut values = Array2::<f64>::zeros((n - 1, p));
    for k in 1..n {
        let t = k as f64 / n as f64;
        let weight = match gamma {
            Gamma::Zero => 1.0,
            Gamma::Half => 1.0 / (t * (1.0 - t)).sqrt(),
        } / root_n;
        for j in 0..p {
            values[[k - 1, j]] = weight * sums.bridge(k, j) / sigma_hat[j];
        }
    }
    Ok(CusumProfile {
        gamma,
        values,
        sigma_hat: sigma_hat.to_vec(),
    })
}
