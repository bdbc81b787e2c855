//! `hdcp`: change-point tests for high-dimensional time series.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error,
//! 4 failed `simulate --assert-ordering` check.
//!
//! JSON outputs carry `schema_version`; their schemas are in `schemas/`.

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use crate::args::Cli;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
