use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use hdcp_core::calibration::{CalibrationArtifact, NullCalibration};
use hdcp_core::data::{load_csv, ChangePointEstimate, Method, RunConfig, TimeSeriesMatrix};
use hdcp_core::dependence::LrvOptions;
use hdcp_core::diagnostics::{pvalue_histogram, screen_panel, LjungBoxResult};
use hdcp_core::inference::{run_battery, BatteryOptions, BatteryReport};
use hdcp_core::simulation::{default_c_tau, run_experiment, write_rows_csv, DgpSpec, ExperimentSummary};
use hdcp_core::Error;
use serde::Serialize;

use crate::args::{CalibrateArgs, Cli, Command, InferenceArgs, MethodArg, ScreenArgs, SimulateArgs, TestArgs};

/// Version tag of every JSON document written by this tool.
pub const OUTPUT_SCHEMA_VERSION: u32 = 1;

/// Grid size and replications of the fallback calibration.
pub const AUTO_CALIBRATION_SIZE: usize = 2000;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_INTERNAL: u8 = 3;
pub const EXIT_ORDERING: u8 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_USAGE, message)
    }

    fn data(message: impl Into<String>) -> Self {
        Self::new(EXIT_DATA, message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidArgument(_) | Error::TrimTooLarge { .. } => EXIT_USAGE,
            Error::DegenerateVariance(_) | Error::WindowTooShort { .. } | Error::NormalizerDomain(_) => EXIT_DATA,
            _ if e.is_data_error() => EXIT_DATA,
            _ => EXIT_INTERNAL,
        };
        Self::new(code, e.to_string())
    }
}

type Outcome = std::result::Result<(), Failure>;

pub fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Calibrate(a) => calibrate(a),
        Command::Test(a) => test(a),
        Command::Locate(a) => locate(a),
        Command::Screen(a) => screen(a),
        Command::Simulate(a) => simulate(a),
    }
}

/// Writes `body` to `output` and the summary to stdout, or `body` to stdout
/// and the summary to stderr.
fn emit(output: Option<&Path>, body: &str, summary: &str) -> Outcome {
    match output {
        Some(path) => {
            std::fs::write(path, body)
                .map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display())))?;
            print!("{summary}");
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(body.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| Failure::new(EXIT_INTERNAL, e.to_string()))?;
            eprint!("{summary}");
        }
    }
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> std::result::Result<String, Failure> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Failure::new(EXIT_INTERNAL, e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn fmt_num(x: f64) -> String {
    if x == 0.0 || (1e-3..1e6).contains(&x.abs()) {
        format!("{x:.6}")
    } else {
        format!("{x:.6e}")
    }
}

fn load_panel(path: &Path, header: bool) -> std::result::Result<TimeSeriesMatrix, Failure> {
    load_csv(path, header).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn calibrate(a: CalibrateArgs) -> Outcome {
    if !(a.alpha > 0.0 && a.alpha < 0.5) {
        return Err(Failure::usage(format!("--alpha must lie in (0, 0.5), got {}", a.alpha)));
    }
    let cal = NullCalibration::simulate(a.grid, a.reps, a.seed, a.alpha)?;
    let artifact = CalibrationArtifact::from_calibration(&cal, a.embed_samples);
    let summary = format!(
        "c_hat = {:.4} (grid {}, reps {}, alpha {}, seed {})\n",
        cal.c_hat, cal.grid_size, cal.reps, cal.alpha_used, cal.seed
    );
    emit(a.output.as_deref(), &to_json(&artifact)?, &summary)
}

/// Where the L2 calibration came from.
#[derive(Debug, Serialize)]
struct CalibrationInfo {
    source: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    path: Option<String>,
    grid_size: usize,
    reps: usize,
    seed: u64,
    c_hat: f64,
    alpha_used: f64,
}

impl CalibrationInfo {
    fn new(cal: &NullCalibration, path: Option<&Path>) -> Self {
        Self {
            source: if path.is_some() { "file" } else { "auto" },
            path: path.map(|p| p.display().to_string()),
            grid_size: cal.grid_size,
            reps: cal.reps,
            seed: cal.seed,
            c_hat: cal.c_hat,
            alpha_used: cal.alpha_used,
        }
    }
}

fn load_or_simulate_calibration(
    inf: &InferenceArgs,
    auto_size: usize,
    warnings: &mut Vec<String>,
) -> std::result::Result<(NullCalibration, CalibrationInfo), Failure> {
    let cal = match &inf.calibration {
        Some(path) => NullCalibration::load(path)
            .map_err(|e| Failure::data(format!("calibration {}: {e}", path.display())))?,
        None => {
            if !(inf.alpha > 0.0 && inf.alpha < 0.5) {
                return Err(Failure::usage(format!("--alpha must lie in (0, 0.5), got {}", inf.alpha)));
            }
            let msg = format!(
                "no --calibration given; simulating one with grid = reps = {auto_size}, seed {}",
                inf.seed
            );
            eprintln!("warning: {msg}");
            warnings.push(msg);
            NullCalibration::simulate(auto_size, auto_size, inf.seed, inf.alpha)?
        }
    };
    let info = CalibrationInfo::new(&cal, inf.calibration.as_deref());
    Ok((cal, info))
}

fn run_config(inf: &InferenceArgs, cal: Option<&NullCalibration>) -> std::result::Result<RunConfig, Failure> {
    let defaults = RunConfig::default();
    let config = RunConfig {
        alpha: inf.alpha,
        m_lag: inf.m_lag,
        lambda_trim: inf.lambda,
        normalize: !inf.no_normalize,
        seed: inf.seed,
        grid_size: cal.map_or(defaults.grid_size, |c| c.grid_size),
        calib_reps: cal.map_or(defaults.calib_reps, |c| c.reps),
    };
    config.validate()?;
    Ok(config)
}

fn battery_options(inf: &InferenceArgs, methods: Vec<Method>) -> BatteryOptions {
    BatteryOptions {
        lrv: LrvOptions { kernel: inf.kernel.into(), bandwidth: inf.bandwidth, ..LrvOptions::default() },
        pvalue_mode: inf.pvalue_mode.into(),
        methods,
    }
}

/// Validates the panel, calibrates when the L2 test is involved and runs the battery.
fn run_on_panel(
    args: &TestArgs,
    methods: Vec<Method>,
) -> std::result::Result<(TimeSeriesMatrix, BatteryReport, Option<CalibrationInfo>), Failure> {
    let data = load_panel(&args.input, args.header)?;
    let inf = &args.inference;
    let needs_l2 = methods.iter().any(|m| matches!(m, Method::L2 | Method::CauchyCC | Method::CauchyCCTrimmed));
    let mut warnings = Vec::new();
    let (cal, info) = if needs_l2 {
        let (c, i) = load_or_simulate_calibration(inf, AUTO_CALIBRATION_SIZE, &mut warnings)?;
        (Some(c), Some(i))
    } else {
        (None, None)
    };
    let config = run_config(inf, cal.as_ref())?;
    let mut report = run_battery(&data, &config, cal.as_ref(), &battery_options(inf, methods))?;
    warnings.append(&mut report.warnings);
    report.warnings = warnings;
    Ok((data, report, info))
}

#[derive(Serialize)]
struct TestOutput<'a> {
    schema_version: u32,
    command: &'static str,
    input: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    calibration: Option<CalibrationInfo>,
    report: &'a BatteryReport,
}

fn test(args: TestArgs) -> Outcome {
    let methods = MethodArg::expand(&args.method);
    let (_, report, calibration) = run_on_panel(&args, methods)?;
    let mut summary = format!(
        "n = {}, p = {}, M = {}, lambda_n = {}, normalized = {}\n",
        report.n,
        report.p,
        report.m_lag,
        report.lambda_n.map_or("-".into(), |l| l.to_string()),
        report.normalize
    );
    for r in &report.reports {
        let _ = writeln!(
            summary,
            "{:<12} statistic {:>14}  p-value {:.4e}  {}",
            r.method.label(),
            fmt_num(r.statistic),
            r.p_value,
            if r.reject { "reject" } else { "-" }
        );
    }
    for (m, e) in &report.failures {
        let _ = writeln!(summary, "{:<12} failed: {e}", m.label());
    }
    let out = TestOutput {
        schema_version: OUTPUT_SCHEMA_VERSION,
        command: "test",
        input: args.input.display().to_string(),
        calibration,
        report: &report,
    };
    emit(args.output.as_deref(), &to_json(&out)?, &summary)?;
    if report.reports.is_empty() {
        return Err(Failure::data("no test could be evaluated on this panel"));
    }
    Ok(())
}

#[derive(Serialize)]
struct LocateOutput {
    schema_version: u32,
    command: &'static str,
    input: String,
    n: usize,
    p: usize,
    m_lag: usize,
    lambda_n: Option<usize>,
    /// Split index maximizing each statistic.
    candidates: BTreeMap<Method, usize>,
    p_values: BTreeMap<Method, f64>,
    tau_hat: Option<ChangePointEstimate>,
    tau_hat_dagger: Option<ChangePointEstimate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    calibration: Option<CalibrationInfo>,
    failures: BTreeMap<Method, String>,
    warnings: Vec<String>,
}

fn locate(args: TestArgs) -> Outcome {
    let methods = vec![Method::L2, Method::LinfUntrimmed, Method::LinfTrimmed];
    let (_, report, calibration) = run_on_panel(&args, methods)?;
    let st = &report.statistics;
    let candidates: BTreeMap<Method, usize> = [
        (Method::L2, st.s),
        (Method::LinfUntrimmed, st.m),
        (Method::LinfTrimmed, st.m_dagger),
    ]
    .into_iter()
    .filter_map(|(m, e)| e.map(|e| (m, e.k)))
    .collect();
    let p_values = report.reports.iter().map(|r| (r.method, r.p_value)).collect();
    let mut summary = String::new();
    for (label, est) in [("tau_hat", &report.location), ("tau_hat_dagger", &report.location_trimmed)] {
        match est {
            Some(e) => {
                let _ = writeln!(summary, "{label:<15} {:>6}  (chosen by {})", e.tau_hat, e.chosen_by.label());
            }
            None => {
                let _ = writeln!(summary, "{label:<15} unavailable");
            }
        }
    }
    let out = LocateOutput {
        schema_version: OUTPUT_SCHEMA_VERSION,
        command: "locate",
        input: args.input.display().to_string(),
        n: report.n,
        p: report.p,
        m_lag: report.m_lag,
        lambda_n: report.lambda_n,
        candidates,
        p_values,
        tau_hat: report.location.clone(),
        tau_hat_dagger: report.location_trimmed.clone(),
        calibration,
        failures: report.failures.clone(),
        warnings: report.warnings.clone(),
    };
    emit(args.output.as_deref(), &to_json(&out)?, &summary)?;
    if report.location.is_none() && report.location_trimmed.is_none() {
        return Err(Failure::data("no location estimate could be computed on this panel"));
    }
    Ok(())
}

#[derive(Serialize)]
struct SeriesFailure {
    series_index: usize,
    error: String,
}

#[derive(Serialize)]
struct Histogram {
    bins: usize,
    counts: Vec<usize>,
}

#[derive(Serialize)]
struct ScreenOutput {
    schema_version: u32,
    command: &'static str,
    input: String,
    n: usize,
    p: usize,
    lags: usize,
    alpha: f64,
    results: Vec<LjungBoxResult>,
    failed: Vec<SeriesFailure>,
    histogram: Histogram,
    rejection_fraction: Option<f64>,
}

fn screen(args: ScreenArgs) -> Outcome {
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(Failure::usage(format!("--alpha must lie in (0, 1), got {}", args.alpha)));
    }
    if args.bins == 0 {
        return Err(Failure::usage("--bins must be positive"));
    }
    let data = load_panel(&args.input, args.header)?;
    let lags = args.lags.unwrap_or_else(|| hdcp_core::diagnostics::default_lags(data.n()));
    if lags == 0 || lags >= data.n() {
        return Err(Failure::usage(format!("--lags must lie in 1..{}, got {lags}", data.n())));
    }
    let mut results = Vec::new();
    let mut failed = Vec::new();
    for (j, r) in screen_panel(&data, Some(lags)).into_iter().enumerate() {
        match r {
            Ok(r) => results.push(r),
            Err(e) => failed.push(SeriesFailure { series_index: j, error: e.to_string() }),
        }
    }
    let ps: Vec<f64> = results.iter().map(|r| r.p_value).collect();
    let counts = pvalue_histogram(&ps, args.bins)?;
    let rejection_fraction =
        (!ps.is_empty()).then(|| ps.iter().filter(|p| **p < args.alpha).count() as f64 / ps.len() as f64);
    let summary = format!(
        "{} series screened with {lags} lags, {} failed; rejected at {}: {}\nhistogram: {:?}\n",
        results.len(),
        failed.len(),
        args.alpha,
        rejection_fraction.map_or("-".into(), |f| format!("{:.1}%", 100.0 * f)),
        counts
    );
    let out = ScreenOutput {
        schema_version: OUTPUT_SCHEMA_VERSION,
        command: "screen",
        input: args.input.display().to_string(),
        n: data.n(),
        p: data.p(),
        lags,
        alpha: args.alpha,
        results,
        failed,
        histogram: Histogram { bins: args.bins, counts },
        rejection_fraction,
    };
    emit(args.output.as_deref(), &to_json(&out)?, &summary)
}

fn simulate(args: SimulateArgs) -> Outcome {
    if args.reps < 50 {
        return Err(Failure::usage(format!("--reps must be at least 50, got {}", args.reps)));
    }
    let inf = &args.inference;
    let spec = DgpSpec {
        n: args.n,
        p: args.p,
        m0: args.m0,
        scenario: args.scenario.into(),
        error_dist: args.error.into(),
        tau_frac: args.tau_frac,
        s: args.sparsity,
        c_tau: args.c_tau.unwrap_or_else(|| default_c_tau(args.tau_frac)),
        seed: inf.seed,
    };
    spec.validate()?;
    if args.assert_ordering && (!spec.has_change() || spec.s < 2) {
        return Err(Failure::usage("--assert-ordering needs --tau-frac below 1 and --sparsity of at least 2"));
    }
    let mut warnings = Vec::new();
    let (cal, _) = load_or_simulate_calibration(inf, args.calib_size, &mut warnings)?;
    let config = run_config(inf, Some(&cal))?;
    let options = battery_options(inf, Method::ALL.to_vec());

    let mut runs: Vec<ExperimentSummary> = Vec::new();
    if args.assert_ordering {
        let sparse = DgpSpec { s: 1, ..spec.clone() };
        runs.push(run_experiment(&sparse, args.reps, &config, &cal, &options)?);
    }
    runs.push(run_experiment(&spec, args.reps, &config, &cal, &options)?);

    let rows: Vec<_> = runs.iter().flat_map(|r| r.rows.iter().cloned()).collect();
    let mut csv = Vec::new();
    write_rows_csv(&rows, &mut csv)?;
    let csv = String::from_utf8(csv).map_err(|e| Failure::new(EXIT_INTERNAL, e.to_string()))?;

    let mut summary = String::new();
    for r in &runs {
        let _ = write!(summary, "{} n={} p={} M0={} {} tau_frac={} s={}:", r.spec.scenario, r.spec.n, r.spec.p, r.spec.m0, r.spec.error_dist, r.spec.tau_frac, r.spec.s);
        for m in Method::ALL {
            if let Some(v) = r.rejection_rate(m) {
                let _ = write!(summary, "  {}={:.3}", m.label(), v);
            }
        }
        if r.failed_reps > 0 {
            let _ = write!(summary, "  (failed reps: {})", r.failed_reps);
        }
        summary.push('\n');
    }

    let ordering = args.assert_ordering.then(|| {
        let rate = |i: usize, m: Method| runs[i].rejection_rate(m).unwrap_or(f64::NAN);
        let max_ok = rate(0, Method::LinfUntrimmed) > rate(1, Method::LinfUntrimmed);
        let l2_ok = rate(1, Method::L2) > rate(0, Method::L2);
        let _ = writeln!(
            summary,
            "ordering: M sparse > dense: {}; S dense > sparse: {}",
            if max_ok { "holds" } else { "FAILS" },
            if l2_ok { "holds" } else { "FAILS" }
        );
        max_ok && l2_ok
    });
    emit(args.output.as_deref(), &csv, &summary)?;
    if ordering == Some(false) {
        return Err(Failure::new(EXIT_ORDERING, "power ordering check failed"));
    }
    Ok(())
}
