//! Nuisance estimators for temporally dependent panels.
//!
//! All estimators are built from lagged differences
//! `X_f - X_{f+M+h+1}`, which remove the mean (and any single level shift
//! away from the boundary) before inner products are taken:
//!
//! ```text
//! cross(f,h,g,k)  = (X_f - X_{f+M+h+1})' (X_g - X_{g+M+k+1})
//! tr Gamma(h)     ~ (1/2n) sum_{t=1}^{n-M-2h-1} cross(t+h, h, t, h)
//! tr Gamma(h)Gamma(k)
//!                 ~ sum_{t,s} cross(t,h,s,k) cross(t+h,h,s+k,k)
//!                   / {4 (n - k - 1.5[n/2] - M/2) ([n/2] - M - 2k - 1)}
//! ```
//!
//! with `t <= [n/2]-M-2k-1` and `t+[n/2] <= s <= n-M-2k-1` in the split-sample
//! double sum. Time indices in this module are 1-based, as in the formulas.

mod lrv;

pub use lrv::{estimate_sigma_componentwise, DifferenceSequence, Kernel, LrvEstimate, LrvOptions};

use ndarray::{s, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesMatrix;
use crate::error::{Error, Result};

/// Floor applied to non-positive variance-type quantities.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// `(X_f - X_{f+M+h+1})' (X_g - X_{g+M+k+1})` with 1-based `f`, `g`.
pub fn cross_difference(
    data: &TimeSeriesMatrix,
    m: usize,
    f: usize,
    h: usize,
    g: usize,
    k: usize,
) -> Result<f64> {
    let n = data.n();
    let (f_end, g_end) = (f + m + h + 1, g + m + k + 1);
    if f == 0 || g == 0 || f_end > n || g_end > n {
        return Err(Error::Index(format!(
            "cross difference ({f},{h},{g},{k}) with M = {m} exceeds n = {n}"
        )));
    }
    let x = data.values();
    Ok((0..data.p())
        .map(|j| (x[[f - 1, j]] - x[[f_end - 1, j]]) * (x[[g - 1, j]] - x[[g_end - 1, j]]))
        .sum())
}

/// Rows `X_t - X_{t+M+h+1}` for `t = 1..=n-M-h-1`, stored at row `t - 1`.
fn lagged_differences(data: &TimeSeriesMatrix, m: usize, h: usize) -> Array2<f64> {
    let x = data.values();
    let gap = m + h + 1;
    let len = data.n().saturating_sub(gap);
    &x.slice(s![..len, ..]) - &x.slice(s![gap..gap + len, ..])
}

fn dot(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Moving-range estimate of `tr Gamma(h)`.
pub fn estimate_trace_gamma(data: &TimeSeriesMatrix, h: usize, m: usize) -> Result<f64> {
    trace_gamma_from(&lagged_differences(data, m, h), data.n(), h, m)
}

fn trace_gamma_from(diffs: &Array2<f64>, n: usize, h: usize, m: usize) -> Result<f64> {
    let upper = n as isize - m as isize - 2 * h as isize - 1;
    if upper < 1 {
        return Err(Error::WindowTooShort { lag: h });
    }
    let total: f64 = (1..=upper as usize)
        .map(|t| dot(diffs.row(t + h - 1), diffs.row(t - 1)))
        .sum();
    Ok(total / (2.0 * n as f64))
}

/// Ranges and normalizer of the split-sample product estimator.
struct ProductWindow {
    t_max: usize,
    s_max: usize,
    half: usize,
    denom: f64,
}

fn product_window(n: usize, h: usize, k: usize, m: usize) -> Result<ProductWindow> {
    let half = n / 2;
    let t_max = half as isize - m as isize - 2 * k as isize - 1;
    let s_max = n as isize - m as isize - 2 * k as isize - 1;
    if t_max < 1 || (1 + half) as isize > s_max {
        return Err(Error::WindowTooShort { lag: k });
    }
    let (t_max, s_max) = (t_max as usize, s_max as usize);
    if t_max + m + 2 * h + 1 > n {
        return Err(Error::Index(format!(
            "lag pair ({h},{k}) with M = {m} reaches past n = {n}"
        )));
    }
    let lead = n as f64 - k as f64 - 1.5 * half as f64 - m as f64 / 2.0;
    let denom = 4.0 * lead * t_max as f64;
    if !(denom > 0.0) {
        return Err(Error::WindowTooShort { lag: k });
    }
    Ok(ProductWindow {
        t_max,
        s_max,
        half,
        denom,
    })
}

/// Split-sample estimate of `tr{Gamma(h) Gamma(k)}`.
pub fn estimate_trace_product(data: &TimeSeriesMatrix, h: usize, k: usize, m: usize) -> Result<f64> {
    let dh = lagged_differences(data, m, h);
    let dk = if h == k { dh.clone() } else { lagged_differences(data, m, k) };
    trace_product_from(&dh, &dk, data.n(), h, k, m)
}

fn trace_product_from(
    dh: &Array2<f64>,
    dk: &Array2<f64>,
    n: usize,
    h: usize,
    k: usize,
    m: usize,
) -> Result<f64> {
    let w = product_window(n, h, k, m)?;
    // Gram block: rows t = 1..=t_max+h of D^h, columns s = half+1..=s_max+k of D^k.
    let s_lo = w.half + 1;
    let rows = dh.slice(s![..w.t_max + h, ..]);
    let cols = dk.slice(s![s_lo - 1..w.s_max + k, ..]);
    let gram = rows.dot(&cols.t());
    let mut total = 0.0;
    for t in 1..=w.t_max {
        let (near, far) = (gram.row(t - 1), gram.row(t + h - 1));
        let mut acc = 0.0;
        for s in (t + w.half)..=w.s_max {
            acc += near[s - s_lo] * far[s + k - s_lo];
        }
        total += acc;
    }
    Ok(total / w.denom)
}

/// Closed form of `sum_{i=1}^{n-h} a_{i,k} a_{i+h,k}`.
pub fn contrast_lag_sum(n: usize, k: usize, h: usize) -> f64 {
    if h >= n {
        return 0.0;
    }
    let both_pre = k.saturating_sub(h);
    let both_post = (n - k).saturating_sub(h);
    let straddle = n - h - both_pre - both_post;
    let (kf, rf) = (k as f64, (n - k) as f64);
    both_pre as f64 / (kf * kf) + both_post as f64 / (rf * rf) - straddle as f64 / (kf * rf)
}

/// Bias profile `mu_hat_{M,k}` for `k = 1..=n-1` given `tr Gamma(h)`, `h = 0..=M`.
pub fn mu_hat_from_traces(n: usize, p: usize, trace_gamma: &[f64]) -> Vec<f64> {
    let nf = n as f64;
    let scale = nf.powi(3) * (p as f64).sqrt();
    (1..n)
        .map(|k| {
            let kf = k as f64;
            let lead = (kf * (nf - kf)).powi(2) / scale;
            let inner: f64 = trace_gamma
                .iter()
                .enumerate()
                .map(|(h, tr)| {
                    let mult = if h == 0 { 1.0 } else { 2.0 };
                    mult * contrast_lag_sum(n, k, h) * tr
                })
                .sum();
            lead * inner
        })
        .collect()
}

pub fn estimate_mu_hat(data: &TimeSeriesMatrix, m: usize) -> Result<Vec<f64>> {
    let traces = (0..=m)
        .map(|h| estimate_trace_gamma(data, h, m))
        .collect::<Result<Vec<_>>>()?;
    Ok(mu_hat_from_traces(data.n(), data.p(), &traces))
}

/// `{(2/p) (P00 + 2 sum_h Ph0 + 2 sum_k P0k + 4 sum_{h,k} Phk)}^{1/2}` and
/// whether the bracket had to be floored.
pub fn omega_from_products(p: usize, products: &Array2<f64>) -> (f64, bool) {
    let m = products.nrows() - 1;
    let mut bracket = products[[0, 0]];
    for h in 1..=m {
        bracket += 2.0 * products[[h, 0]];
    }
    for k in 1..=m {
        bracket += 2.0 * products[[0, k]];
    }
    for h in 1..=m {
        for k in 1..=m {
            bracket += 4.0 * products[[h, k]];
        }
    }
    let degenerate = !(bracket > 0.0);
    let bracket = if degenerate { VARIANCE_FLOOR } else { bracket };
    ((2.0 / p as f64 * bracket).sqrt(), degenerate)
}

fn all_trace_products(data: &TimeSeriesMatrix, m: usize, diffs: &[Array2<f64>]) -> Result<Array2<f64>> {
    let n = data.n();
    let pairs: Vec<(usize, usize)> = (0..=m).flat_map(|h| (0..=m).map(move |k| (h, k))).collect();
    let values = pairs
        .par_iter()
        .map(|&(h, k)| trace_product_from(&diffs[h], &diffs[k], n, h, k, m))
        .collect::<Result<Vec<_>>>()?;
    Ok(Array2::from_shape_vec((m + 1, m + 1), values).expect("square product table"))
}

pub fn estimate_omega_hat(data: &TimeSeriesMatrix, m: usize) -> Result<f64> {
    let diffs: Vec<_> = (0..=m).map(|h| lagged_differences(data, m, h)).collect();
    let products = all_trace_products(data, m, &diffs)?;
    Ok(omega_from_products(data.p(), &products).0)
}

/// Nuisance quantities of the L2 statistic.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct L2Nuisance {
    pub m: usize,
    pub trace_gamma: Vec<f64>,
    /// `trace_products[h][k]` estimates `tr(Gamma_h Gamma_k)`.
    pub trace_products: Vec<Vec<f64>>,
    pub mu_hat: Vec<f64>,
    pub omega_hat: f64,
    /// The `omega` bracket was non-positive and floored.
    pub degenerate_scale: bool,
}

impl L2Nuisance {
    pub fn estimate(data: &TimeSeriesMatrix, m: usize) -> Result<Self> {
        let n = data.n();
        let diffs: Vec<_> = (0..=m).map(|h| lagged_differences(data, m, h)).collect();
        let trace_gamma = (0..=m)
            .map(|h| trace_gamma_from(&diffs[h], n, h, m))
            .collect::<Result<Vec<_>>>()?;
        let products = all_trace_products(data, m, &diffs)?;
        let mu_hat = mu_hat_from_traces(n, data.p(), &trace_gamma);
        let (omega_hat, degenerate_scale) = omega_from_products(data.p(), &products);
        Ok(Self {
            m,
            trace_gamma,
            trace_products: products.rows().into_iter().map(|r| r.to_vec()).collect(),
            mu_hat,
            omega_hat,
            degenerate_scale,
        })
    }
}

/// Every nuisance quantity the test battery needs, computed once per panel.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DependenceEstimates {
    pub l2: L2Nuisance,
    pub sigma_hat: Vec<f64>,
    /// Components whose long-run variance was floored.
    pub sigma_floored: Vec<usize>,
}

impl DependenceEstimates {
    pub fn estimate(data: &TimeSeriesMatrix, m: usize, lrv: &LrvOptions) -> Result<Self> {
        let (l2, sigma) = rayon::join(
            || L2Nuisance::estimate(data, m),
            || estimate_sigma_componentwise(data, lrv),
        );
        let sigma = sigma?;
        Ok(Self {
            l2: l2?,
            sigma_hat: sigma.sigma,
            sigma_floored: sigma.floored,
        })
    }
}
