use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hdcp_core::calibration::PValueMode;
use hdcp_core::data::Method;
use hdcp_core::dependence::Kernel;
use hdcp_core::simulation::{ErrorDist, Scenario};

fn at_least<const MIN: usize>(s: &str) -> Result<usize, String> {
    let v: usize = s.parse().map_err(|e| format!("{e}"))?;
    if v < MIN {
        return Err(format!("must be at least {MIN}"));
    }
    Ok(v)
}

#[derive(Debug, Parser)]
#[command(name = "hdcp", version, about = "Change-point tests for high-dimensional time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the L2 null distribution and fit its tail constant.
    Calibrate(CalibrateArgs),
    /// Run the test battery on a CSV panel (rows = time, columns = series).
    Test(TestArgs),
    /// Estimate the change-point location on a CSV panel.
    Locate(TestArgs),
    /// Ljung–Box screening of every column of a CSV panel.
    Screen(ScreenArgs),
    /// Monte Carlo size, power and location experiment.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Grid points on [0, 1].
    #[arg(long = "grid", default_value_t = 10_000, value_parser = at_least::<2>)]
    pub grid: usize,
    /// Simulated maxima.
    #[arg(long, default_value_t = 10_000, value_parser = at_least::<100>)]
    pub reps: usize,
    /// Level at which the tail constant is fitted.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Store all simulated maxima in the artifact.
    #[arg(long)]
    pub embed_samples: bool,
    /// Artifact path; JSON goes to stdout when omitted.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    L2,
    Linf,
    LinfTrim,
    Cc,
    CcTrim,
    All,
}

impl MethodArg {
    pub fn expand(args: &[MethodArg]) -> Vec<Method> {
        let mut out: Vec<Method> = Vec::new();
        for a in args {
            let add: &[Method] = match a {
                MethodArg::L2 => &[Method::L2],
                MethodArg::Linf => &[Method::LinfUntrimmed],
                MethodArg::LinfTrim => &[Method::LinfTrimmed],
                MethodArg::Cc => &[Method::CauchyCC],
                MethodArg::CcTrim => &[Method::CauchyCCTrimmed],
                MethodArg::All => &Method::ALL,
            };
            for m in add {
                if !out.contains(m) {
                    out.push(*m);
                }
            }
        }
        out.sort();
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PValueModeArg {
    Tail,
    Ecdf,
}

impl From<PValueModeArg> for PValueMode {
    fn from(m: PValueModeArg) -> Self {
        match m {
            PValueModeArg::Tail => PValueMode::TailFormula,
            PValueModeArg::Ecdf => PValueMode::EmpiricalCdf,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KernelArg {
    Bartlett,
    Qs,
}

impl From<KernelArg> for Kernel {
    fn from(k: KernelArg) -> Self {
        match k {
            KernelArg::Bartlett => Kernel::Bartlett,
            KernelArg::Qs => Kernel::QuadraticSpectral,
        }
    }
}

/// Panel input and inference options shared by `test`, `locate` and `simulate`.
#[derive(Debug, Args)]
pub struct InferenceArgs {
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Lag truncation M; default ceil(min(n, p)^(1/8)).
    #[arg(long = "m")]
    pub m_lag: Option<usize>,
    /// Trimming lambda_n; default ceil(sqrt(n)).
    #[arg(long = "lambda")]
    pub lambda: Option<usize>,
    /// Skip division of the statistics by 1 + n^(-2/3) log p.
    #[arg(long)]
    pub no_normalize: bool,
    /// Calibration artifact from `calibrate`; simulated at reduced size when omitted.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    /// Seed for any simulation this run performs.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = PValueModeArg::Tail)]
    pub pvalue_mode: PValueModeArg,
    #[arg(long, value_enum, default_value_t = KernelArg::Bartlett)]
    pub kernel: KernelArg,
    /// Long-run variance bandwidth; default from the kernel.
    #[arg(long)]
    pub bandwidth: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TestArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    /// The first CSV line is a header.
    #[arg(long)]
    pub header: bool,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "all")]
    pub method: Vec<MethodArg>,
    #[command(flatten)]
    pub inference: InferenceArgs,
    /// JSON result path; JSON goes to stdout when omitted.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScreenArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    #[arg(long)]
    pub header: bool,
    /// Ljung–Box lags; default min(10, n/5).
    #[arg(long)]
    pub lags: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScenarioArg {
    S1,
    S2,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::S1 => Scenario::S1,
            ScenarioArg::S2 => Scenario::S2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ErrorArg {
    Normal,
    T4,
}

impl From<ErrorArg> for ErrorDist {
    fn from(e: ErrorArg) -> Self {
        match e {
            ErrorArg::Normal => ErrorDist::Normal,
            ErrorArg::T4 => ErrorDist::T4,
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value_t = ScenarioArg::S1)]
    pub scenario: ScenarioArg,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 100)]
    pub p: usize,
    #[arg(long, default_value_t = 0)]
    pub m0: usize,
    #[arg(long, value_enum, default_value_t = ErrorArg::Normal)]
    pub error: ErrorArg,
    /// Change at round(tau_frac * n); 1 means no change.
    #[arg(long, default_value_t = 1.0)]
    pub tau_frac: f64,
    /// Shifted coordinates; with --assert-ordering, the dense level compared against 1.
    #[arg(long, default_value_t = 1)]
    pub sparsity: usize,
    /// Shift constant; default 20 for tau_frac = 0.3, otherwise 15.
    #[arg(long)]
    pub c_tau: Option<f64>,
    #[arg(long, default_value_t = 500)]
    pub reps: usize,
    /// Calibration grid and replications when no artifact is given.
    #[arg(long, default_value_t = 10_000)]
    pub calib_size: usize,
    /// Also run s = 1 and fail with exit code 4 unless the max-type test is
    /// more powerful at s = 1 and the L2 test is more powerful at --sparsity.
    #[arg(long)]
    pub assert_ordering: bool,
    #[command(flatten)]
    pub inference: InferenceArgs,
    /// CSV path; CSV goes to stdout when omitted.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}
