//! Observation panel, run configuration and the result records shared by
//! the rest of the crate.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest admissible sample size.
pub const MIN_OBSERVATIONS: usize = 4;

/// An `n x p` panel of finite observations; rows are time points.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesMatrix {
    values: Array2<f64>,
}

impl TimeSeriesMatrix {
    /// Wraps a dense matrix, rejecting non-finite cells and panels with fewer
    /// than four rows or no columns.
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (n, p) = values.dim();
        if n < MIN_OBSERVATIONS {
            return Err(Error::TooFewObservations { n });
        }
        if p == 0 {
            return Err(Error::InvalidArgument("panel has no columns".into()));
        }
        if let Some(((i, j), v)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Parse {
                row: i + 1,
                col: Some(j + 1),
                message: format!("non-finite value {v}"),
            });
        }
        Ok(Self { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(n * p);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != p {
                return Err(Error::Parse {
                    row: i + 1,
                    col: None,
                    message: format!("expected {p} columns, found {}", row.len()),
                });
            }
            flat.extend_from_slice(row);
        }
        let values = Array2::from_shape_vec((n, p), flat)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Self::new(values)
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    #[inline]
    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    /// Row `i` (0-based), i.e. the observation at time `i + 1`.
    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.row(i)
    }

    pub fn column(&self, j: usize) -> ArrayView1<'_, f64> {
        self.values.column(j)
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.values
    }
}

/// Reads a comma-separated panel. Row numbers in errors are 1-based lines of
/// the file (the header, if any, is line 1).
pub fn load_csv(path: impl AsRef<Path>, has_header: bool) -> Result<TimeSeriesMatrix> {
    let file = std::fs::File::open(path)?;
    read_csv(file, has_header)
}

pub fn read_csv<R: std::io::Read>(reader: R, has_header: bool) -> Result<TimeSeriesMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let offset = usize::from(has_header) + 1;
    let mut width: Option<usize> = None;
    let mut flat = Vec::new();
    let mut n = 0usize;
    for (i, record) in rdr.records().enumerate() {
        let line = i + offset;
        let record = record.map_err(|e| Error::Parse {
            row: line,
            col: None,
            message: e.to_string(),
        })?;
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(Error::Parse {
                row: line,
                col: None,
                message: format!("expected {w} columns, found {}", record.len()),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row: line,
                col: Some(j + 1),
                message: format!("cannot parse {cell:?} as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: line,
                    col: Some(j + 1),
                    message: format!("non-finite value {cell:?}"),
                });
            }
            flat.push(v);
        }
        n += 1;
    }
    if n < MIN_OBSERVATIONS {
        return Err(Error::TooFewObservations { n });
    }
    let p = width.unwrap_or(0);
    let values =
        Array2::from_shape_vec((n, p), flat).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    TimeSeriesMatrix::new(values)
}

/// Writes the panel using the shortest decimal form that round-trips each value.
pub fn write_csv<W: Write>(data: &TimeSeriesMatrix, mut out: W) -> Result<()> {
    for row in data.values.rows() {
        let mut first = true;
        for v in row {
            if !first {
                out.write_all(b",")?;
            }
            first = false;
            write!(out, "{v}")?;
        }
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// `ceil(x^(1/8))` computed exactly for integer `x >= 1`.
pub fn ceil_eighth_root(x: u64) -> u64 {
    if x <= 1 {
        return 1;
    }
    let pow8 = |k: u64| (k as u128).pow(8);
    let mut k = (x as f64).powf(0.125).ceil() as u64;
    while k > 1 && pow8(k - 1) >= x as u128 {
        k -= 1;
    }
    while pow8(k) < x as u128 {
        k += 1;
    }
    k
}

/// Default lag truncation `M = ceil(min(n, p)^(1/8))`.
pub fn default_lag(n: usize, p: usize) -> usize {
    ceil_eighth_root(n.min(p) as u64) as usize
}

/// Default boundary trim `lambda_n = ceil(sqrt(n))`, capped at `n / 2`.
pub fn default_trim(n: usize) -> usize {
    let mut k = (n as f64).sqrt().ceil() as usize;
    while k > 1 && (k - 1) * (k - 1) >= n {
        k -= 1;
    }
    while k * k < n {
        k += 1;
    }
    k.clamp(1, (n / 2).max(1))
}

/// User-facing knobs for a test run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub alpha: f64,
    pub m_lag: Option<usize>,
    pub lambda_trim: Option<usize>,
    pub normalize: bool,
    pub seed: u64,
    pub grid_size: usize,
    pub calib_reps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            m_lag: None,
            lambda_trim: None,
            normalize: true,
            seed: 0,
            grid_size: 10_000,
            calib_reps: 10_000,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.m_lag == Some(0) {
            return Err(Error::InvalidArgument("m_lag must be positive".into()));
        }
        if self.lambda_trim == Some(0) {
            return Err(Error::InvalidArgument("lambda_trim must be positive".into()));
        }
        if self.grid_size == 0 || self.calib_reps == 0 {
            return Err(Error::InvalidArgument(
                "grid_size and calib_reps must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn resolve_lag(&self, n: usize, p: usize) -> usize {
        self.m_lag.unwrap_or_else(|| default_lag(n, p))
    }

    pub fn resolve_trim(&self, n: usize) -> Result<usize> {
        let lambda = self.lambda_trim.unwrap_or_else(|| default_trim(n));
        if lambda == 0 || 2 * lambda > n {
            return Err(Error::TrimTooLarge { lambda, n });
        }
        Ok(lambda)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "S")]
    L2,
    #[serde(rename = "M")]
    LinfUntrimmed,
    #[serde(rename = "M_dagger")]
    LinfTrimmed,
    #[serde(rename = "T_CC")]
    CauchyCC,
    #[serde(rename = "T_CC_dagger")]
    CauchyCCTrimmed,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::L2,
        Method::LinfUntrimmed,
        Method::LinfTrimmed,
        Method::CauchyCC,
        Method::CauchyCCTrimmed,
    ];

    /// Short label used in tables and on the command line.
    pub fn label(self) -> &'static str {
        match self {
            Method::L2 => "S",
            Method::LinfUntrimmed => "M",
            Method::LinfTrimmed => "M_dagger",
            Method::CauchyCC => "T_CC",
            Method::CauchyCCTrimmed => "T_CC_dagger",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Outcome of one test procedure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub method: Method,
    pub statistic: f64,
    pub p_value: f64,
    pub reject: bool,
    pub config_echo: RunConfig,
}

impl TestReport {
    /// Builds a report, clamping the p-value into `[0, 1]` (NaN maps to 1).
    pub fn new(method: Method, statistic: f64, p_value: f64, config: &RunConfig) -> Self {
        let p_value = if p_value.is_nan() { 1.0 } else { p_value.clamp(0.0, 1.0) };
        Self {
            method,
            statistic,
            p_value,
            reject: p_value < config.alpha,
            config_echo: config.clone(),
        }
    }
}

/// Adaptive change-point location with the per-method candidates it chose from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChangePointEstimate {
    pub tau_hat: usize,
    pub chosen_by: Method,
    pub candidates: BTreeMap<Method, usize>,
}
