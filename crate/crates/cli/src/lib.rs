// SPDX-License-Identifier: Apache-2.0

//! `cstock`: fit working models, aggregate map layers, estimate carbon-stock
//! loss and run design simulations.

use std::ffi::OsString;

use clap::{Parser, Subcommand};

mod args;
mod commands;
pub mod config;
pub mod output;

pub use commands::estimate::{EstimateReport, EstimateRow};

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    /// Unreadable or inconsistent input.
    pub const INPUT: u8 = 1;
    /// An estimate or model could not be computed from valid input.
    pub const DEGENERATE: u8 = 2;
    /// `simulate --check` found a failing check.
    pub const CHECK_FAILED: u8 = 3;
}

#[derive(Parser)]
#[command(name = "cstock", version, about = "Carbon-stock loss estimation from panel forest-inventory samples")]
struct Cli {
    #[command(subcommand)]
    command: Commands,
}

#[derive(Subcommand)]
enum Commands {
    /// Fit the FCL and stock working models and write a parameter file
    Fit(commands::fit::FitArgs),
    /// Basic-expansion and model-assisted totals per panel, stratum and domain
    Estimate(commands::estimate::EstimateArgs),
    /// Area aggregates of the loss map for given windows
    Aggregate(commands::aggregate::AggregateArgs),
    /// Monte Carlo or exhaustive evaluation of the estimators
    Simulate(commands::simulate::SimulateArgs),
    /// Render a saved estimates file as text or CSV
    Report(commands::report::ReportArgs),
}

/// Parse arguments, run the command and return the exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::INPUT } else { exit::OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Commands::Fit(a) => commands::fit::run(a),
        Commands::Estimate(a) => commands::estimate::run(a),
        Commands::Aggregate(a) => commands::aggregate::run(a),
        Commands::Simulate(a) => commands::simulate::run(a),
        Commands::Report(a) => commands::report::run(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let degenerate = e
        .chain()
        .any(|c| c.downcast_ref::<cstock_core::Error>().is_some_and(cstock_core::Error::is_degeneracy));
    if degenerate {
        exit::DEGENERATE
    } else {
        exit::INPUT
    }
}
