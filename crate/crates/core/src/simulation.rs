//! Synthetic panels and Monte Carlo size, power and location experiments.
//!
//! Observations follow a vector moving average with an optional mean shift:
//! `X_i = delta 1{i > tau} + sum_{h=0}^{M0} A_h eps_{i-h}`, `eps_i = Sigma^{1/2} u_i`,
//! where `u_i` has iid unit-variance entries (normal, or t(4) divided by `sqrt 2`).

use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array2};
use rand::Rng;
use rand_distr::{StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{substream, NullCalibration};
use crate::data::{Method, RunConfig, TimeSeriesMatrix};
use crate::error::{Error, Result};
use crate::inference::{run_battery, BatteryOptions, BatteryReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// Identity innovation covariance, `phi = v = 0.5`.
    S1,
    /// `Sigma_ij = 0.5^{|i-j|}`, `phi = v = 0.2`.
    S2,
}

impl Scenario {
    pub fn phi(self) -> f64 {
        match self {
            Scenario::S1 => 0.5,
            Scenario::S2 => 0.2,
        }
    }

    pub fn band_fraction(self) -> f64 {
        self.phi()
    }

    /// Innovation covariance; `None` for the identity.
    pub fn innovation_covariance(self, p: usize) -> Option<Array2<f64>> {
        match self {
            Scenario::S1 => None,
            Scenario::S2 => Some(Array2::from_shape_fn((p, p), |(i, j)| 0.5f64.powi(i.abs_diff(j) as i32))),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::S1 => "S1",
            Scenario::S2 => "S2",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorDist {
    Normal,
    /// Student t with 4 degrees of freedom, scaled to unit variance.
    T4,
}

impl fmt::Display for ErrorDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ErrorDist::Normal => "normal",
            ErrorDist::T4 => "t4",
        })
    }
}

/// Shift magnitude constant for a change at `tau_frac * n`.
pub fn default_c_tau(tau_frac: f64) -> f64 {
    if (tau_frac - 0.3).abs() < 1e-9 {
        20.0
    } else {
        15.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub n: usize,
    pub p: usize,
    pub m0: usize,
    pub scenario: Scenario,
    pub error_dist: ErrorDist,
    /// Change after observation `round(tau_frac * n)`; `1` means no change.
    pub tau_frac: f64,
    /// Number of shifted coordinates.
    pub s: usize,
    pub c_tau: f64,
    pub seed: u64,
}

impl DgpSpec {
    /// A no-change panel specification.
    pub fn null(n: usize, p: usize, m0: usize, scenario: Scenario, error_dist: ErrorDist, seed: u64) -> Self {
        Self { n, p, m0, scenario, error_dist, tau_frac: 1.0, s: 1, c_tau: 0.0, seed }
    }

    /// A single mean shift in the first `s` coordinates at `tau_frac * n`.
    pub fn alternative(mut self, tau_frac: f64, s: usize) -> Self {
        self.tau_frac = tau_frac;
        self.s = s;
        self.c_tau = default_c_tau(tau_frac);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < crate::data::MIN_OBSERVATIONS || self.p == 0 {
            return Err(Error::InvalidArgument(format!("need n >= 4 and p >= 1, got n = {}, p = {}", self.n, self.p)));
        }
        if !(self.tau_frac > 0.0 && self.tau_frac <= 1.0) {
            return Err(Error::InvalidArgument(format!("tau_frac must lie in (0, 1], got {}", self.tau_frac)));
        }
        if self.has_change() && !(1..=self.p).contains(&self.s) {
            return Err(Error::InvalidArgument(format!("sparsity must lie in 1..={}, got {}", self.p, self.s)));
        }
        if !self.c_tau.is_finite() {
            return Err(Error::InvalidArgument("c_tau must be finite".into()));
        }
        Ok(())
    }

    pub fn has_change(&self) -> bool {
        self.tau_frac < 1.0
    }

    /// Last pre-change index, or `n` when there is no change.
    pub fn tau(&self) -> usize {
        if self.has_change() {
            ((self.tau_frac * self.n as f64).round() as usize).clamp(1, self.n - 1)
        } else {
            self.n
        }
    }
}

/// Moving-average coefficient `A_h`: `phi/h` on the diagonal, `phi/(h d^2)`
/// at offset `1 <= d <= floor(p v)`, zero beyond. `A_0` is the identity.
pub fn build_a(h: usize, p: usize, phi: f64, v: f64) -> Array2<f64> {
    if h == 0 {
        return Array2::eye(p);
    }
    let band = (p as f64 * v).floor() as usize;
    let hf = h as f64;
    Array2::from_shape_fn((p, p), |(i, j)| {
        let d = i.abs_diff(j);
        if d == 0 {
            phi / hf
        } else if d <= band {
            phi / (hf * (d * d) as f64)
        } else {
            0.0
        }
    })
}

/// `delta_i = c_tau sqrt(log p / (n s))` for `i <= s`, zero otherwise.
pub fn alternative_delta(p: usize, s: usize, n: usize, c_tau: f64) -> Array1<f64> {
    let size = c_tau * ((p as f64).ln() / (n * s) as f64).sqrt();
    Array1::from_shape_fn(p, |i| if i < s { size } else { 0.0 })
}

/// Symmetric square root of a positive semidefinite matrix.
pub fn symmetric_sqrt(m: &Array2<f64>) -> Array2<f64> {
    let p = m.nrows();
    let eig = SymmetricEigen::new(DMatrix::from_fn(p, p, |i, j| m[[i, j]]));
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    let r = q * DMatrix::from_diagonal(&roots) * q.transpose();
    Array2::from_shape_fn((p, p), |(i, j)| 0.5 * (r[(i, j)] + r[(j, i)]))
}

/// Model matrices for one `(p, M0, scenario)`; reusable across replications.
#[derive(Clone, Debug)]
pub struct Dgp {
    pub spec: DgpSpec,
    sigma_sqrt: Option<Array2<f64>>,
    /// `A_h^T`, `h = 0..=M0`.
    a_t: Vec<Array2<f64>>,
    delta: Option<Array1<f64>>,
}

impl Dgp {
    pub fn new(spec: DgpSpec) -> Result<Self> {
        spec.validate()?;
        let (p, sc) = (spec.p, spec.scenario);
        let sigma_sqrt = sc.innovation_covariance(p).map(|c| symmetric_sqrt(&c));
        let a_t = (0..=spec.m0)
            .map(|h| build_a(h, p, sc.phi(), sc.band_fraction()).reversed_axes())
            .collect();
        let delta = spec.has_change().then(|| alternative_delta(p, spec.s, spec.n, spec.c_tau));
        Ok(Self { spec, sigma_sqrt, a_t, delta })
    }

    /// Lag-`h` autocovariance `sum_{k=0}^{M0-h} A_k Sigma A_{k+h}^T`.
    pub fn autocovariance(&self, h: usize) -> Array2<f64> {
        let p = self.spec.p;
        let sigma = self.spec.scenario.innovation_covariance(p).unwrap_or_else(|| Array2::eye(p));
        let mut out = Array2::zeros((p, p));
        for k in 0..=self.spec.m0 {
            if k + h > self.spec.m0 {
                break;
            }
            let a_k = self.a_t[k].t();
            out = out + a_k.dot(&sigma).dot(&self.a_t[k + h]);
        }
        out
    }

    /// Panel for replication stream `rep`.
    pub fn generate(&self, rep: u64) -> Result<TimeSeriesMatrix> {
        let (n, p, m0) = (self.spec.n, self.spec.p, self.spec.m0);
        let mut rng = substream(self.spec.seed, rep);
        let total = n + m0;
        let u = match self.spec.error_dist {
            ErrorDist::Normal => Array2::from_shape_simple_fn((total, p), || rng.sample::<f64, _>(StandardNormal)),
            ErrorDist::T4 => {
                let t = StudentT::new(4.0).expect("4 degrees of freedom is valid");
                let scale = std::f64::consts::SQRT_2.recip();
                Array2::from_shape_simple_fn((total, p), || rng.sample(t) * scale)
            }
        };
        // rows of `eps` are eps_{1-M0}, ..., eps_n
        let eps = match &self.sigma_sqrt {
            Some(r) => u.dot(r),
            None => u,
        };
        let mut x = Array2::<f64>::zeros((n, p));
        for (h, a_t) in self.a_t.iter().enumerate() {
            let lagged = eps.slice(s![m0 - h..m0 - h + n, ..]);
            x += &lagged.dot(a_t);
        }
        if let Some(delta) = &self.delta {
            let tau = self.spec.tau();
            let mut post = x.slice_mut(s![tau.., ..]);
            post += delta;
        }
        TimeSeriesMatrix::new(x)
    }
}

/// One panel from `spec`, drawn from replication stream 0.
pub fn generate(spec: &DgpSpec) -> Result<TimeSeriesMatrix> {
    Dgp::new(spec.clone())?.generate(0)
}

/// Quantity reported by an experiment row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    RejectionRate,
    /// Mean of `|tau_hat - tau| / n`.
    LocationError,
}

/// One line of an experiment table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub scenario: Scenario,
    pub n: usize,
    pub p: usize,
    #[serde(rename = "M0")]
    pub m0: usize,
    pub error: ErrorDist,
    pub tau_frac: f64,
    pub s: usize,
    pub method: String,
    pub metric: Metric,
    pub value: f64,
    pub reps: usize,
    pub seed: u64,
}

/// Aggregated result of [`run_experiment`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub spec: DgpSpec,
    pub reps: usize,
    /// Replications whose battery or data generation failed entirely.
    pub failed_reps: usize,
    pub rows: Vec<ExperimentRow>,
}

impl ExperimentSummary {
    pub fn value(&self, method: &str, metric: Metric) -> Option<f64> {
        self.rows.iter().find(|r| r.method == method && r.metric == metric).map(|r| r.value)
    }

    pub fn rejection_rate(&self, method: Method) -> Option<f64> {
        self.value(method.label(), Metric::RejectionRate)
    }
}

/// Success frequency over the outcomes that were observed; `None` entries
/// are failed replications and are excluded. Returns `(rate, used)`.
pub fn success_rate(outcomes: impl IntoIterator<Item = Option<bool>>) -> (f64, usize) {
    let (mut hits, mut used) = (0usize, 0usize);
    for o in outcomes.into_iter().flatten() {
        used += 1;
        hits += o as usize;
    }
    if used == 0 {
        (f64::NAN, 0)
    } else {
        (hits as f64 / used as f64, used)
    }
}

fn mean_of(values: impl IntoIterator<Item = Option<f64>>) -> (f64, usize) {
    let (mut sum, mut used) = (0.0, 0usize);
    for v in values.into_iter().flatten() {
        sum += v;
        used += 1;
    }
    if used == 0 {
        (f64::NAN, 0)
    } else {
        (sum / used as f64, used)
    }
}

/// Location labels reported in locate mode: the three single-statistic
/// candidates and the two adaptive estimators.
pub const LOCATION_LABELS: [&str; 5] = ["S", "M", "M_dagger", "tau_hat", "tau_hat_dagger"];

fn location_candidates(report: &BatteryReport) -> [Option<usize>; 5] {
    let st = &report.statistics;
    [
        st.s.map(|e| e.k),
        st.m.map(|e| e.k),
        st.m_dagger.map(|e| e.k),
        report.location.as_ref().map(|l| l.tau_hat),
        report.location_trimmed.as_ref().map(|l| l.tau_hat),
    ]
}

/// Runs `reps` independent replications of `spec`. Replication `r` draws its
/// panel from stream `r` of `spec.seed`. Rejection rates are reported for
/// every method; location errors are added when the spec has a change.
pub fn run_experiment(
    spec: &DgpSpec,
    reps: usize,
    config: &RunConfig,
    calibration: &NullCalibration,
    options: &BatteryOptions,
) -> Result<ExperimentSummary> {
    if reps < 50 {
        return Err(Error::InvalidArgument(format!("need at least 50 replications, got {reps}")));
    }
    let dgp = Dgp::new(spec.clone())?;
    let tau = spec.tau();
    let outcomes: Vec<Option<BatteryReport>> = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            dgp.generate(r)
                .and_then(|x| run_battery(&x, config, Some(calibration), options))
                .ok()
        })
        .collect();
    let failed_reps = outcomes.iter().filter(|o| o.is_none()).count();

    let row = |method: &str, metric: Metric, value: f64, used: usize| ExperimentRow {
        scenario: spec.scenario,
        n: spec.n,
        p: spec.p,
        m0: spec.m0,
        error: spec.error_dist,
        tau_frac: spec.tau_frac,
        s: spec.s,
        method: method.to_string(),
        metric,
        value,
        reps: used,
        seed: spec.seed,
    };

    let mut rows = Vec::new();
    for method in Method::ALL.iter().filter(|m| options.methods.contains(m)) {
        let (rate, used) = success_rate(
            outcomes
                .iter()
                .map(|o| o.as_ref().and_then(|r| r.report(*method)).map(|t| t.reject)),
        );
        rows.push(row(method.label(), Metric::RejectionRate, rate, used));
    }
    if spec.has_change() {
        for (i, label) in LOCATION_LABELS.iter().enumerate() {
            let (err, used) = mean_of(outcomes.iter().map(|o| {
                o.as_ref()
                    .and_then(|r| location_candidates(r)[i])
                    .map(|k| k.abs_diff(tau) as f64 / spec.n as f64)
            }));
            if used > 0 {
                rows.push(row(label, Metric::LocationError, err, used));
            }
        }
    }
    Ok(ExperimentSummary { spec: spec.clone(), reps, failed_reps, rows })
}

/// Writes experiment rows as CSV with a header line.
pub fn write_rows_csv<W: Write>(rows: &[ExperimentRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn coefficient_matrix_entries() {
        let a = build_a(1, 10, 0.5, 0.5);
        assert_eq!(a[[0, 2]], 0.125);
        assert_eq!(a[[3, 3]], 0.5);
        assert_eq!(build_a(2, 10, 0.5, 0.5)[[4, 4]], 0.25);
        assert_eq!(a[[0, 5]], 0.5 / 25.0);
        assert_eq!(a[[0, 6]], 0.0);
        assert_eq!(a, a.t());
        assert_eq!(build_a(0, 4, 0.5, 0.5), Array2::<f64>::eye(4));
    }

    #[test]
    fn delta_examples() {
        let d = alternative_delta(500, 1, 400, 15.0);
        assert!((d[0] - 1.8695).abs() < 5e-4, "{}", d[0]);
        assert_relative_eq!(d[0], 15.0 * (500f64.ln() / 400.0).sqrt(), max_relative = 1e-15);
        assert!(d.iter().skip(1).all(|v| *v == 0.0));
        for s in [1, 7, 50, 500] {
            let d = alternative_delta(500, s, 400, 20.0);
            assert_relative_eq!(d.dot(&d), 400.0 * 500f64.ln() / 400.0, max_relative = 1e-12);
        }
        let d = alternative_delta(30, 30, 100, 15.0);
        assert!(d.iter().all(|v| *v == d[0]));
    }

    #[test]
    fn symmetric_root_squares_back() {
        let c = Scenario::S2.innovation_covariance(12).unwrap();
        let r = symmetric_sqrt(&c);
        let back = r.dot(&r);
        for (a, b) in back.iter().zip(c.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn iid_null_has_identity_covariance() {
        let n = 4000;
        let x = generate(&DgpSpec::null(n, 4, 0, Scenario::S1, ErrorDist::Normal, 3)).unwrap();
        let v = x.values();
        let tol = 4.0 / (n as f64).sqrt();
        for i in 0..4 {
            for j in 0..4 {
                let (ci, cj) = (v.column(i), v.column(j));
                let (mi, mj) = (ci.mean().unwrap(), cj.mean().unwrap());
                let cov = ci.iter().zip(cj).map(|(a, b)| (a - mi) * (b - mj)).sum::<f64>() / n as f64;
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((cov - target).abs() < tol, "({i},{j}) {cov}");
            }
        }
    }

    #[test]
    fn autocovariance_matches_product_sum() {
        for (scenario, dist) in [(Scenario::S1, ErrorDist::Normal), (Scenario::S2, ErrorDist::T4)] {
            let p = 5;
            let dgp = Dgp::new(DgpSpec::null(4, p, 2, scenario, dist, 21)).unwrap();
            let reps = 20_000u64;
            for h in 0..=2 {
                let target = dgp.autocovariance(h);
                let mut sum = Array2::<f64>::zeros((p, p));
                let mut sq = Array2::<f64>::zeros((p, p));
                for r in 0..reps {
                    let x = dgp.generate(r).unwrap();
                    let (a, b) = (x.row(0), x.row(h));
                    for i in 0..p {
                        for j in 0..p {
                            let v = a[i] * b[j];
                            sum[[i, j]] += v;
                            sq[[i, j]] += v * v;
                        }
                    }
                }
                let rf = reps as f64;
                for i in 0..p {
                    for j in 0..p {
                        let mean = sum[[i, j]] / rf;
                        let se = ((sq[[i, j]] / rf - mean * mean) / rf).sqrt();
                        assert!(
                            (mean - target[[i, j]]).abs() < 4.0 * se,
                            "{scenario} h={h} ({i},{j}): {mean} vs {}",
                            target[[i, j]]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = DgpSpec::null(50, 8, 2, Scenario::S2, ErrorDist::T4, 5).alternative(0.3, 2);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = DgpSpec { seed: 6, ..spec.clone() };
        assert_ne!(generate(&spec).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn shift_applies_after_tau() {
        let spec = DgpSpec::null(40, 6, 1, Scenario::S1, ErrorDist::Normal, 1).alternative(0.3, 2);
        assert_eq!(spec.tau(), 12);
        let null = Dgp::new(DgpSpec { tau_frac: 1.0, ..spec.clone() }).unwrap().generate(0).unwrap();
        let alt = Dgp::new(spec.clone()).unwrap().generate(0).unwrap();
        let d = alternative_delta(6, 2, 40, 20.0);
        for i in 0..40 {
            for j in 0..6 {
                let expect = if i >= 12 { d[j] } else { 0.0 };
                assert_relative_eq!(alt.values()[[i, j]] - null.values()[[i, j]], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rate_harness_is_binomially_calibrated() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (r, reps, meta) = (0.05, 500usize, 400);
        let band = 4.0 * (r * (1.0 - r) / reps as f64).sqrt();
        let inside = (0..meta)
            .filter(|_| {
                let (rate, used) = success_rate((0..reps).map(|_| Some(rng.random::<f64>() < r)));
                assert_eq!(used, reps);
                (rate - r).abs() <= band
            })
            .count();
        assert!(inside as f64 >= 0.99 * meta as f64);
        assert_eq!(success_rate([Some(true), None, Some(false)]), (0.5, 2));
    }

    #[test]
    fn noiseless_shift_has_zero_location_error() {
        let spec = DgpSpec {
            n: 60,
            p: 4,
            m0: 0,
            scenario: Scenario::S1,
            error_dist: ErrorDist::Normal,
            tau_frac: 0.5,
            s: 4,
            c_tau: 15.0,
            seed: 0,
        };
        let mut x = Array2::<f64>::zeros((60, 4));
        x.slice_mut(s![30.., ..]).fill(5.0);
        let panel = TimeSeriesMatrix::new(x).unwrap();
        let cal = NullCalibration::simulate(200, 200, 0, 0.05).unwrap();
        let rep = run_battery(&panel, &RunConfig::default(), Some(&cal), &BatteryOptions::default()).unwrap();
        for k in location_candidates(&rep) {
            assert_eq!(k, Some(spec.tau()));
        }
    }

    #[test]
    fn experiment_rows_and_csv() {
        let spec = DgpSpec::null(60, 10, 1, Scenario::S1, ErrorDist::Normal, 4).alternative(0.5, 10);
        let cal = NullCalibration::simulate(500, 500, 0, 0.05).unwrap();
        let cfg = RunConfig::default();
        let sum = run_experiment(&spec, 50, &cfg, &cal, &BatteryOptions::default()).unwrap();
        assert_eq!(sum.failed_reps, 0);
        assert_eq!(sum.rows.len(), 10);
        assert!(sum.rejection_rate(Method::L2).unwrap() > 0.5);
        let again = run_experiment(&spec, 50, &cfg, &cal, &BatteryOptions::default()).unwrap();
        assert_eq!(sum, again);
        let mut buf = Vec::new();
        write_rows_csv(&sum.rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("scenario,n,p,M0,error,tau_frac,s,method,metric,value,reps,seed\n"));
        assert!(text.contains("S1,60,10,1,normal,0.5,10,S,rejection_rate,"));
        assert!(run_experiment(&spec, 49, &cfg, &cal, &BatteryOptions::default()).is_err());
    }
}
