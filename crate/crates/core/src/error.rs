use thiserror::Error;

/// Errors raised anywhere in the inference pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at row {row}{}: {message}", col.map(|c| format!(", column {c}")).unwrap_or_default())]
    Parse {
        row: usize,
        col: Option<usize>,
        message: String,
    },

    #[error("too few observations: n = {n}, need at least 4")]
    TooFewObservations { n: usize },

    #[error("index out of range: {0}")]
    Index(String),

    #[error("non-positive long-run variance for component {0}")]
    DegenerateVariance(usize),

    #[error("estimation window is empty for lag {lag}")]
    WindowTooShort { lag: usize },

    #[error("argument outside its domain: {0}")]
    Domain(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("Gumbel normalizer undefined: p * log(h_n) = {0} must exceed 1")]
    NormalizerDomain(f64),

    #[error("trimmed range is empty: lambda_n = {lambda} with n = {n}")]
    TrimTooLarge { lambda: usize, n: usize },

    #[error("series is constant; autocorrelations are undefined")]
    DegenerateSeries,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by the input data rather than by the caller or internals.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::TooFewObservations { .. }
                | Error::DegenerateSeries
                | Error::Io(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
