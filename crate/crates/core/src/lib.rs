//! Change-point tests for high-dimensional time series with temporal
//! dependence.
//!
//! A panel of `n` observations on `p` series is tested for a single mean
//! shift with a bias-corrected max-L2 CUSUM statistic, two max-L-infinity
//! statistics and their Cauchy combinations, and the break is located from
//! whichever candidate carries the smaller p-value.
//!
//! ```no_run
//! use hdcp_core::calibration::NullCalibration;
//! use hdcp_core::data::{load_csv, RunConfig};
//! use hdcp_core::inference::{run_battery, BatteryOptions};
//!
//! let data = load_csv("panel.csv", false)?;
//! let calibration = NullCalibration::simulate(10_000, 10_000, 0, 0.05)?;
//! let report = run_battery(&data, &RunConfig::default(), Some(&calibration), &BatteryOptions::default())?;
//! for r in &report.reports {
//!     println!("{} {:.4}", r.method.label(), r.p_value);
//! }
//! # Ok::<(), hdcp_core::Error>(())
//! ```

// `!(x > 0.0)` style guards are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod cusum;
pub mod data;
pub mod dependence;
pub mod diagnostics;
pub mod error;
pub mod inference;
pub mod simulation;

pub use error::{Error, Result};
