//! Test statistics, p-values, Cauchy combination and change-point location.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::calibration::{gumbel_normalizers, gumbel_survival, pvalue_l2, NullCalibration, PValueMode};
use crate::cusum::{cusum_profile_from_sums, CusumProfile, Gamma, PartialSums};
use crate::data::{ChangePointEstimate, Method, RunConfig, TestReport, TimeSeriesMatrix};
use crate::dependence::{estimate_sigma_componentwise, LrvOptions};
use crate::dependence::{DependenceEstimates, L2Nuisance};
use crate::error::{Error, Result};

/// Inputs to the Cauchy transform are clamped to `[P_CLAMP, 1 - P_CLAMP]`.
pub const P_CLAMP: f64 = 1e-15;

/// A maximized statistic and the (smallest) split index `k` attaining it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extremum {
    pub value: f64,
    pub k: usize,
}

/// First maximum of `values`, reported with 1-based index `offset + i`.
fn first_max(values: impl IntoIterator<Item = f64>, offset: usize) -> Extremum {
    let mut best = Extremum { value: f64::NEG_INFINITY, k: offset };
    for (i, v) in values.into_iter().enumerate() {
        if v > best.value {
            best = Extremum { value: v, k: offset + i };
        }
    }
    best
}

/// `max_k {W(k) - mu_hat_k}` over `k = 1..=n-1`.
pub fn stat_l2_from_parts(w_profile: &[f64], mu_hat: &[f64]) -> Extremum {
    first_max(w_profile.iter().zip(mu_hat).map(|(w, m)| w - m), 1)
}

pub fn stat_l2(data: &TimeSeriesMatrix, nuisance: &L2Nuisance) -> Extremum {
    stat_l2_from_parts(&PartialSums::new(data).w_profile(), &nuisance.mu_hat)
}

/// Inclusive split range of the trimmed statistic.
pub fn trimmed_range(n: usize, lambda_n: usize) -> Result<(usize, usize)> {
    if lambda_n == 0 || 2 * lambda_n > n {
        return Err(Error::TrimTooLarge { lambda: lambda_n, n });
    }
    Ok((lambda_n, n - lambda_n))
}

/// `max_k max_j |C_{gamma,j}(k)|` over `k` in `[lo, hi]`.
pub fn profile_max(profile: &CusumProfile, lo: usize, hi: usize) -> Extremum {
    let rows = profile.values.rows().into_iter().skip(lo - 1).take(hi + 1 - lo);
    first_max(rows.map(|r| r.iter().fold(0.0_f64, |a, v| a.max(v.abs()))), lo)
}

/// Untrimmed (`gamma = 0`, all `k`) or trimmed (`gamma = 1/2`,
/// `lambda_n <= k <= n - lambda_n`) max-type statistic.
pub fn stat_linf(data: &TimeSeriesMatrix, sigma_hat: &[f64], trimmed: bool, lambda_n: usize) -> Result<Extremum> {
    stat_linf_from_sums(&PartialSums::new(data), sigma_hat, trimmed, lambda_n)
}

pub fn stat_linf_from_sums(sums: &PartialSums, sigma_hat: &[f64], trimmed: bool, lambda_n: usize) -> Result<Extremum> {
    let n = sums.n();
    let (gamma, lo, hi) = if trimmed {
        let (lo, hi) = trimmed_range(n, lambda_n)?;
        (Gamma::Half, lo, hi)
    } else {
        (Gamma::Zero, 1, n - 1)
    };
    let profile = cusum_profile_from_sums(sums, gamma, sigma_hat)?;
    Ok(profile_max(&profile, lo, hi))
}

/// Gumbel-limit p-value of a max-type statistic.
pub fn pvalue_linf(statistic: f64, p: usize, n: usize, lambda_n: usize, trimmed: bool) -> Result<f64> {
    let arg = if trimmed {
        let g = gumbel_normalizers(p, n, lambda_n)?;
        g.a * statistic - g.d
    } else {
        2.0 * statistic * statistic - (2.0 * p as f64).ln()
    };
    Ok(gumbel_survival(arg).clamp(0.0, 1.0))
}

/// Equal-weight Cauchy combination; returns `(T_cc, p_cc)`.
pub fn cauchy_combine(p1: f64, p2: f64) -> (f64, f64) {
    use std::f64::consts::PI;
    let clamp = |p: f64| if p.is_nan() { 1.0 - P_CLAMP } else { p.clamp(P_CLAMP, 1.0 - P_CLAMP) };
    let t = 0.5 * ((0.5 - clamp(p1)) * PI).tan() + 0.5 * ((0.5 - clamp(p2)) * PI).tan();
    (t, 0.5 - t.atan() / PI)
}

/// `1 + n^{-2/3} log p`.
pub fn normalization_divisor(n: usize, p: usize) -> f64 {
    1.0 + (n as f64).powf(-2.0 / 3.0) * (p as f64).ln()
}

/// The three raw maxima after optional normalization; `None` where a
/// statistic could not be computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatisticBundle {
    pub s: Option<Extremum>,
    pub m: Option<Extremum>,
    pub m_dagger: Option<Extremum>,
    pub normalized: bool,
    pub divisor: f64,
}

/// Adaptive choice between the L2 location and a max-type location: the L2
/// candidate wins only when its p-value is strictly smaller.
pub fn select_location(l2: (usize, f64), linf: (usize, f64), linf_method: Method) -> ChangePointEstimate {
    let (chosen_by, tau_hat) = if l2.1 < linf.1 { (Method::L2, l2.0) } else { (linf_method, linf.0) };
    ChangePointEstimate {
        tau_hat,
        chosen_by,
        candidates: BTreeMap::from([(Method::L2, l2.0), (linf_method, linf.0)]),
    }
}

/// Untrimmed and trimmed location estimates. `p_values` must hold `L2`,
/// `LinfUntrimmed` and `LinfTrimmed`.
pub fn locate(
    data: &TimeSeriesMatrix,
    deps: &DependenceEstimates,
    p_values: &BTreeMap<Method, f64>,
    lambda_n: usize,
) -> Result<(ChangePointEstimate, ChangePointEstimate)> {
    let get = |m: Method| {
        p_values
            .get(&m)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("missing p-value for {m}")))
    };
    let sums = PartialSums::new(data);
    let k_s = stat_l2_from_parts(&sums.w_profile(), &deps.l2.mu_hat).k;
    let k_m = stat_linf_from_sums(&sums, &deps.sigma_hat, false, lambda_n)?.k;
    let k_md = stat_linf_from_sums(&sums, &deps.sigma_hat, true, lambda_n)?.k;
    let p_s = get(Method::L2)?;
    Ok((
        select_location((k_s, p_s), (k_m, get(Method::LinfUntrimmed)?), Method::LinfUntrimmed),
        select_location((k_s, p_s), (k_md, get(Method::LinfTrimmed)?), Method::LinfTrimmed),
    ))
}

/// Options of [`run_battery`] beyond the run configuration.
#[derive(Clone, Debug)]
pub struct BatteryOptions {
    pub lrv: LrvOptions,
    pub pvalue_mode: PValueMode,
    /// Methods to report; dependencies of the combinations are computed as needed.
    pub methods: Vec<Method>,
}

impl Default for BatteryOptions {
    fn default() -> Self {
        Self {
            lrv: LrvOptions::default(),
            pvalue_mode: PValueMode::TailFormula,
            methods: Method::ALL.to_vec(),
        }
    }
}

/// Everything one battery run produces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatteryReport {
    pub n: usize,
    pub p: usize,
    pub m_lag: usize,
    pub lambda_n: Option<usize>,
    pub normalize: bool,
    pub omega_hat: Option<f64>,
    pub c_hat: Option<f64>,
    pub statistics: StatisticBundle,
    pub reports: Vec<TestReport>,
    pub location: Option<ChangePointEstimate>,
    pub location_trimmed: Option<ChangePointEstimate>,
    /// Methods that could not be evaluated, with the reason.
    pub failures: BTreeMap<Method, String>,
    pub warnings: Vec<String>,
}

impl BatteryReport {
    pub fn report(&self, method: Method) -> Option<&TestReport> {
        self.reports.iter().find(|r| r.method == method)
    }

    pub fn p_value(&self, method: Method) -> Option<f64> {
        self.report(method).map(|r| r.p_value)
    }
}

fn needs(methods: &[Method], base: Method) -> bool {
    methods.iter().any(|m| {
        *m == base
            || match m {
                Method::CauchyCC => matches!(base, Method::L2 | Method::LinfUntrimmed),
                Method::CauchyCCTrimmed => matches!(base, Method::L2 | Method::LinfTrimmed),
                _ => false,
            }
    })
}

/// Runs the requested tests and both location estimators on one panel.
///
/// Nuisance quantities are estimated once. A failing component only removes
/// the methods that depend on it; its error is recorded in `failures`. When
/// `calibration` is `None` and the L2 test is needed, one is simulated from
/// the grid size, replication count and seed in `config`.
pub fn run_battery(
    data: &TimeSeriesMatrix,
    config: &RunConfig,
    calibration: Option<&NullCalibration>,
    options: &BatteryOptions,
) -> Result<BatteryReport> {
    config.validate()?;
    let (n, p) = (data.n(), data.p());
    let methods = &options.methods;
    let m_lag = config.resolve_lag(n, p);
    let (lambda, trim_error) = match config.resolve_trim(n) {
        Ok(l) => (Some(l), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let divisor = if config.normalize { normalization_divisor(n, p) } else { 1.0 };

    let want_l2 = needs(methods, Method::L2);
    let want_m = needs(methods, Method::LinfUntrimmed);
    let want_md = needs(methods, Method::LinfTrimmed);

    let mut failures: BTreeMap<Method, String> = BTreeMap::new();
    let mut warnings = Vec::new();
    if p > n.saturating_mul(n) {
        warnings.push(format!("p = {p} exceeds n^2 = {}; limit theory may not apply", n * n));
    }

    let (l2, sigma) = rayon::join(
        || want_l2.then(|| L2Nuisance::estimate(data, m_lag)),
        || (want_m || want_md).then(|| estimate_sigma_componentwise(data, &options.lrv)),
    );
    let sums = PartialSums::new(data);

    let simulated;
    let mut c_hat = None;
    let mut omega_hat = None;
    let mut s_stat = None;
    let mut p_s = None;
    match l2 {
        None => {}
        Some(Err(e)) => {
            failures.insert(Method::L2, e.to_string());
        }
        Some(Ok(nu)) => {
            if nu.degenerate_scale {
                warnings.push("scale estimate was non-positive and has been floored".into());
            }
            omega_hat = Some(nu.omega_hat);
            let cal = match calibration {
                Some(c) => Ok(c),
                None => match NullCalibration::simulate(config.grid_size, config.calib_reps, config.seed, config.alpha) {
                    Ok(c) => {
                        simulated = c;
                        Ok(&simulated)
                    }
                    Err(e) => Err(e),
                },
            };
            let ex = stat_l2_from_parts(&sums.w_profile(), &nu.mu_hat);
            let ex = Extremum { value: ex.value / divisor, k: ex.k };
            s_stat = Some(ex);
            match cal.and_then(|cal| {
                c_hat = Some(cal.c_hat);
                pvalue_l2(ex.value, nu.omega_hat, cal, options.pvalue_mode)
            }) {
                Ok(pv) => p_s = Some(pv),
                Err(e) => {
                    failures.insert(Method::L2, e.to_string());
                }
            }
        }
    }

    let mut m_stat = None;
    let mut md_stat = None;
    let mut p_m = None;
    let mut p_md = None;
    match sigma {
        None => {}
        Some(Err(e)) => {
            for (want, method) in [(want_m, Method::LinfUntrimmed), (want_md, Method::LinfTrimmed)] {
                if want {
                    failures.insert(method, e.to_string());
                }
            }
        }
        Some(Ok(lrv)) => {
            if !lrv.floored.is_empty() {
                warnings.push(format!(
                    "long-run variance floored for {} component(s), first at column {}",
                    lrv.floored.len(),
                    lrv.floored[0] + 1
                ));
            }
            if want_m {
                let res = stat_linf_from_sums(&sums, &lrv.sigma, false, 1).and_then(|ex| {
                    let ex = Extremum { value: ex.value / divisor, k: ex.k };
                    m_stat = Some(ex);
                    pvalue_linf(ex.value, p, n, 1, false)
                });
                match res {
                    Ok(pv) => p_m = Some(pv),
                    Err(e) => {
                        failures.insert(Method::LinfUntrimmed, e.to_string());
                    }
                }
            }
            if want_md {
                match lambda {
                    None => {
                        failures.insert(Method::LinfTrimmed, trim_error.clone().unwrap_or_default());
                    }
                    Some(lam) => {
                        let res = stat_linf_from_sums(&sums, &lrv.sigma, true, lam).and_then(|ex| {
                            let ex = Extremum { value: ex.value / divisor, k: ex.k };
                            md_stat = Some(ex);
                            pvalue_linf(ex.value, p, n, lam, true)
                        });
                        match res {
                            Ok(pv) => p_md = Some(pv),
                            Err(e) => {
                                failures.insert(Method::LinfTrimmed, e.to_string());
                            }
                        }
                    }
                }
            }
        }
    }

    let mut reports = Vec::new();
    for method in Method::ALL {
        if !methods.contains(&method) {
            continue;
        }
        let (stat, pv) = match method {
            Method::L2 => (s_stat.map(|e| e.value), p_s),
            Method::LinfUntrimmed => (m_stat.map(|e| e.value), p_m),
            Method::LinfTrimmed => (md_stat.map(|e| e.value), p_md),
            Method::CauchyCC | Method::CauchyCCTrimmed => {
                let partner = if method == Method::CauchyCC { p_m } else { p_md };
                match (p_s, partner) {
                    (Some(a), Some(b)) => {
                        let (t, pv) = cauchy_combine(a, b);
                        (Some(t), Some(pv))
                    }
                    _ => {
                        failures
                            .entry(method)
                            .or_insert_with(|| "a component test could not be evaluated".into());
                        (None, None)
                    }
                }
            }
        };
        if let (Some(stat), Some(pv)) = (stat, pv) {
            reports.push(TestReport::new(method, stat, pv, config));
        }
    }

    let location = match (s_stat, p_s, m_stat, p_m) {
        (Some(s), Some(ps), Some(m), Some(pm)) => {
            Some(select_location((s.k, ps), (m.k, pm), Method::LinfUntrimmed))
        }
        _ => None,
    };
    let location_trimmed = match (s_stat, p_s, md_stat, p_md) {
        (Some(s), Some(ps), Some(m), Some(pm)) => Some(select_location((s.k, ps), (m.k, pm), Method::LinfTrimmed)),
        _ => None,
    };

    Ok(BatteryReport {
        n,
        p,
        m_lag,
        lambda_n: lambda,
        normalize: config.normalize,
        omega_hat,
        c_hat,
        statistics: StatisticBundle {
            s: s_stat,
            m: m_stat,
            m_dagger: md_stat,
            normalized: config.normalize,
            divisor,
        },
        reports,
        location,
        location_trimmed,
        failures,
        warnings,
    })
}
