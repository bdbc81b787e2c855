//! Null calibration of the test statistics.
//!
//! The L2 statistic, scaled by `omega_hat`, converges to the maximum over
//! `[0, 1]` of a centered Gaussian process `V` with covariance
//! `(1-t)^2 s^2` for `s <= t`. Its distribution has no closed form, so it is
//! simulated on the grid `{i / T_d}`, and the tail constant `c` of
//! `P(max V >= u) ~ (c/u) exp(-8u^2)` is fitted at a chosen level.
//!
//! The covariance has the form `u(min) v(max)` with `u(s) = s^2` and
//! `v(t) = (1-t)^2`, so `V(t) = v(t) B(r(t))` for a Brownian motion `B` and
//! `r = u / v`. The Cholesky factor of the grid covariance is therefore
//! `L[i][j] = v(t_i) sqrt(r(t_j) - r(t_{j-1}))` for `j <= i`, and one path
//! costs `O(T_d)`. A dense factorization is kept for cross-checking.
//!
//! The max-type statistics use closed-form Gumbel limits instead.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Version tag written into calibration artifacts.
pub const CALIBRATION_SCHEMA_VERSION: u32 = 1;

/// Number of interior probabilities `i / 1000` stored in artifacts.
pub const QUANTILE_TABLE_SIZE: usize = 999;

/// Minimum number of draws strictly above the fitted quantile.
const MIN_TAIL_DRAWS: usize = 5;

const JITTER: f64 = 1e-12;

/// `E{V(s) V(t)} = (1 - max)^2 min^2`.
pub fn gp_covariance(s: f64, t: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("grid times must lie in [0, 1], got ({s}, {t})")));
    }
    let (lo, hi) = if s <= t { (s, t) } else { (t, s) };
    Ok((1.0 - hi).powi(2) * lo * lo)
}

/// Grid `t_i = i / T_d`, `i = 1..=T_d`.
pub fn grid(grid_size: usize) -> Vec<f64> {
    (1..=grid_size).map(|i| i as f64 / grid_size as f64).collect()
}

/// Closed-form Cholesky factor of the grid covariance: row `i` is
/// `scale[i] * (step[0], ..., step[i], 0, ...)`. The last grid point (`t = 1`)
/// has zero variance and zero scale.
#[derive(Clone, Debug)]
pub struct PathFactor {
    scale: Vec<f64>,
    step: Vec<f64>,
}

impl PathFactor {
    pub fn new(grid_size: usize) -> Self {
        let mut scale = Vec::with_capacity(grid_size);
        let mut step = Vec::with_capacity(grid_size);
        let mut prev = 0.0;
        for t in grid(grid_size) {
            if t >= 1.0 {
                scale.push(0.0);
                step.push(0.0);
                continue;
            }
            let v = (1.0 - t).powi(2);
            let r = t * t / v;
            scale.push(v);
            step.push((r - prev).sqrt());
            prev = r;
        }
        Self { scale, step }
    }

    pub fn len(&self) -> usize {
        self.scale.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scale.is_empty()
    }

    /// Entry `L[i][j]` of the lower-triangular factor.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        if j > i {
            0.0
        } else {
            self.scale[i] * self.step[j]
        }
    }

    /// Writes `L z` into `path`.
    pub fn apply(&self, z: &[f64], path: &mut Vec<f64>) {
        path.clear();
        let mut walk = 0.0;
        for ((s, d), zi) in self.scale.iter().zip(&self.step).zip(z) {
            walk += d * zi;
            path.push(s * walk);
        }
    }
}

/// Dense `T_d x T_d` grid covariance.
pub fn covariance_matrix(grid_size: usize) -> DMatrix<f64> {
    let g = grid(grid_size);
    DMatrix::from_fn(grid_size, grid_size, |i, j| {
        gp_covariance(g[i], g[j]).expect("grid points lie in [0, 1]")
    })
}

/// Cholesky factor of the dense covariance, retrying with diagonal jitter
/// when the matrix is numerically singular.
pub fn dense_factor(grid_size: usize) -> Result<DMatrix<f64>> {
    let k = covariance_matrix(grid_size);
    if let Some(c) = Cholesky::new(k.clone()) {
        return Ok(c.l());
    }
    let jittered = k + DMatrix::identity(grid_size, grid_size) * JITTER;
    Cholesky::new(jittered)
        .map(|c| c.l())
        .ok_or_else(|| Error::Calibration("covariance factorization failed after jitter".into()))
}

/// Per-replication generator: stream `b` of the ChaCha8 generator keyed by `seed`.
pub fn substream(seed: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b);
    rng
}

fn standard_normals<R: Rng>(rng: &mut R, len: usize, out: &mut Vec<f64>) {
    out.clear();
    out.extend((0..len).map(|_| rng.sample::<f64, _>(StandardNormal)));
}

/// One simulated path on the grid, drawn from replication stream `b`.
pub fn sample_gp_path(factor: &PathFactor, seed: u64, b: u64) -> Vec<f64> {
    let mut rng = substream(seed, b);
    let mut z = Vec::new();
    standard_normals(&mut rng, factor.len(), &mut z);
    let mut path = Vec::new();
    factor.apply(&z, &mut path);
    path
}

/// How `p_S` is read off the calibration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PValueMode {
    /// `(omega c / S) exp(-8 S^2 / omega^2)`.
    #[default]
    TailFormula,
    /// One minus the mid-rank empirical CDF of the simulated maxima.
    EmpiricalCdf,
}

/// Simulated null distribution of `max_t V(t)` and its fitted tail constant.
#[derive(Clone, Debug, PartialEq)]
pub struct NullCalibration {
    pub grid_size: usize,
    pub reps: usize,
    pub seed: u64,
    /// Sorted ascending. Empty when loaded from an artifact without samples.
    pub samples: Vec<f64>,
    /// Quantiles at probabilities `i / 1000`, `i = 1..=999`.
    pub quantiles: Vec<f64>,
    pub c_hat: f64,
    pub alpha_used: f64,
}

/// Draws `reps` grid maxima of `V`; replication `b` uses stream `b` of `seed`.
pub fn sample_max_gp(grid_size: usize, reps: usize, seed: u64) -> Result<Vec<f64>> {
    if grid_size < 2 {
        return Err(Error::InvalidArgument(format!("grid size must be at least 2, got {grid_size}")));
    }
    if reps < 100 {
        return Err(Error::InvalidArgument(format!("need at least 100 replications, got {reps}")));
    }
    let factor = PathFactor::new(grid_size);
    let mut samples: Vec<f64> = (0..reps as u64)
        .into_par_iter()
        .map_init(
            || (Vec::with_capacity(grid_size), Vec::with_capacity(grid_size)),
            |(z, path), b| {
                let mut rng = substream(seed, b);
                standard_normals(&mut rng, grid_size, z);
                factor.apply(z, path);
                path.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            },
        )
        .collect();
    samples.sort_by(f64::total_cmp);
    Ok(samples)
}

/// Linear-interpolation quantile (type 7) of sorted data.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = prob.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Inverts the tail formula at level `alpha`: `c = alpha q exp(8 q^2)` with
/// `q` the empirical `(1 - alpha)` quantile.
pub fn fit_c_hat(sorted_samples: &[f64], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 0.5), got {alpha}")));
    }
    if sorted_samples.is_empty() {
        return Err(Error::Calibration("no calibration samples".into()));
    }
    let q = quantile_sorted(sorted_samples, 1.0 - alpha);
    let above = sorted_samples.len() - sorted_samples.partition_point(|v| *v <= q);
    if above < MIN_TAIL_DRAWS {
        return Err(Error::Calibration(format!(
            "only {above} draws above the {:.4} quantile; increase replications",
            1.0 - alpha
        )));
    }
    if !(q > 0.0) {
        return Err(Error::Calibration(format!("non-positive tail quantile {q}")));
    }
    Ok(alpha * q * (8.0 * q * q).exp())
}

impl NullCalibration {
    /// Simulates the maxima and fits `c_hat` at `alpha`.
    pub fn simulate(grid_size: usize, reps: usize, seed: u64, alpha: f64) -> Result<Self> {
        let samples = sample_max_gp(grid_size, reps, seed)?;
        Self::from_samples(grid_size, seed, samples, alpha)
    }

    pub fn from_samples(grid_size: usize, seed: u64, mut samples: Vec<f64>, alpha: f64) -> Result<Self> {
        samples.sort_by(f64::total_cmp);
        let c_hat = fit_c_hat(&samples, alpha)?;
        let quantiles = (1..=QUANTILE_TABLE_SIZE)
            .map(|i| quantile_sorted(&samples, i as f64 / (QUANTILE_TABLE_SIZE + 1) as f64))
            .collect();
        Ok(Self {
            grid_size,
            reps: samples.len(),
            seed,
            samples,
            quantiles,
            c_hat,
            alpha_used: alpha,
        })
    }

    /// Mid-rank empirical CDF at `x`; interpolates the quantile table when
    /// samples are not available.
    pub fn ecdf(&self, x: f64) -> Result<f64> {
        if !self.samples.is_empty() {
            let below = self.samples.partition_point(|v| *v < x);
            let upto = self.samples.partition_point(|v| *v <= x);
            return Ok((below as f64 + 0.5 * (upto - below) as f64) / self.samples.len() as f64);
        }
        let q = &self.quantiles;
        if q.is_empty() {
            return Err(Error::Calibration("calibration has neither samples nor quantiles".into()));
        }
        let step = 1.0 / (q.len() + 1) as f64;
        if x < q[0] {
            return Ok(0.0);
        }
        if x >= q[q.len() - 1] {
            return Ok(1.0 - step);
        }
        let i = q.partition_point(|v| *v <= x) - 1;
        let span = q[i + 1] - q[i];
        let frac = if span > 0.0 { (x - q[i]) / span } else { 0.0 };
        Ok((i as f64 + 1.0 + frac) * step)
    }

    pub fn save(&self, path: impl AsRef<Path>, embed_samples: bool) -> Result<()> {
        let artifact = CalibrationArtifact::from_calibration(self, embed_samples);
        let mut text = serde_json::to_string_pretty(&artifact)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let artifact: CalibrationArtifact = serde_json::from_str(&text)?;
        artifact.into_calibration()
    }
}

/// On-disk form of a [`NullCalibration`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationArtifact {
    pub schema_version: u32,
    pub grid_size: usize,
    pub reps: usize,
    pub seed: u64,
    pub c_hat: f64,
    pub alpha_used: f64,
    pub quantile_probs: Vec<f64>,
    pub quantiles: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<f64>>,
}

impl CalibrationArtifact {
    pub fn from_calibration(cal: &NullCalibration, embed_samples: bool) -> Self {
        Self {
            schema_version: CALIBRATION_SCHEMA_VERSION,
            grid_size: cal.grid_size,
            reps: cal.reps,
            seed: cal.seed,
            c_hat: cal.c_hat,
            alpha_used: cal.alpha_used,
            quantile_probs: (1..=QUANTILE_TABLE_SIZE)
                .map(|i| i as f64 / (QUANTILE_TABLE_SIZE + 1) as f64)
                .collect(),
            quantiles: cal.quantiles.clone(),
            samples: (embed_samples && !cal.samples.is_empty()).then(|| cal.samples.clone()),
        }
    }

    pub fn into_calibration(self) -> Result<NullCalibration> {
        if self.schema_version != CALIBRATION_SCHEMA_VERSION {
            return Err(Error::Calibration(format!(
                "unsupported calibration schema version {}",
                self.schema_version
            )));
        }
        if !(self.c_hat > 0.0 && self.c_hat.is_finite()) {
            return Err(Error::Calibration(format!("invalid c_hat {}", self.c_hat)));
        }
        let mut samples = self.samples.unwrap_or_default();
        samples.sort_by(f64::total_cmp);
        Ok(NullCalibration {
            grid_size: self.grid_size,
            reps: self.reps,
            seed: self.seed,
            samples,
            quantiles: self.quantiles,
            c_hat: self.c_hat,
            alpha_used: self.alpha_used,
        })
    }
}

/// p-value of the L2 statistic `S` given the scale `omega_hat`.
pub fn pvalue_l2(s: f64, omega_hat: f64, calibration: &NullCalibration, mode: PValueMode) -> Result<f64> {
    if !(omega_hat > 0.0) {
        return Err(Error::Domain(format!("omega_hat must be positive, got {omega_hat}")));
    }
    if !(s > 0.0) {
        return Ok(1.0);
    }
    let tail = || (omega_hat * calibration.c_hat / s * (-8.0 * (s / omega_hat).powi(2)).exp()).min(1.0);
    let p = match mode {
        PValueMode::TailFormula => tail(),
        PValueMode::EmpiricalCdf => {
            if calibration.samples.is_empty() && calibration.quantiles.is_empty() {
                return Err(Error::Calibration("empirical mode needs calibration samples".into()));
            }
            let x = s / omega_hat;
            let beyond_table = calibration.samples.is_empty()
                && calibration.quantiles.last().is_some_and(|q| x >= *q);
            if beyond_table {
                tail().min(1.0 / (QUANTILE_TABLE_SIZE + 1) as f64)
            } else {
                1.0 - calibration.ecdf(x)?
            }
        }
    };
    Ok(p.clamp(0.0, 1.0))
}

/// Gumbel distribution function `G(x) = exp(-exp(-x))`.
pub fn gumbel_cdf(x: f64) -> f64 {
    (-(-x).exp()).exp()
}

/// `1 - G(x)`, accurate in the upper tail.
pub fn gumbel_survival(x: f64) -> f64 {
    -(-(-x).exp()).exp_m1()
}

/// `u_p{exp(-x)} = sqrt({x + log(2p)} / 2)`.
pub fn u_p(p: usize, x: f64) -> f64 {
    ((x + (2.0 * p as f64).ln()) / 2.0).sqrt()
}

/// Normalizing constants of the max-type limits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GumbelNormalizers {
    /// `log(2p)`, the centering of the untrimmed statistic.
    pub log_2p: f64,
    /// `h_n = {(lambda_n / n)^{-1} - 1}^2`.
    pub h_n: f64,
    /// `A(p log h_n)` with `A(x) = sqrt(2 log x)`.
    pub a: f64,
    /// `D(p log h_n)` with `D(x) = 2 log x + log log x / 2 - log(pi) / 2`.
    pub d: f64,
}

pub fn gumbel_normalizers(p: usize, n: usize, lambda_n: usize) -> Result<GumbelNormalizers> {
    if p == 0 || lambda_n == 0 || 2 * lambda_n > n {
        return Err(Error::InvalidArgument(format!(
            "need p >= 1 and 1 <= lambda_n <= n/2, got p = {p}, n = {n}, lambda_n = {lambda_n}"
        )));
    }
    let h_n = (n as f64 / lambda_n as f64 - 1.0).powi(2);
    let x = p as f64 * h_n.ln();
    if !(x > 1.0) {
        return Err(Error::NormalizerDomain(x));
    }
    let lx = x.ln();
    Ok(GumbelNormalizers {
        log_2p: (2.0 * p as f64).ln(),
        h_n,
        a: (2.0 * lx).sqrt(),
        d: 2.0 * lx + 0.5 * lx.ln() - 0.5 * std::f64::consts::PI.ln(),
    })
}
