// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;

use crate::args::OutputArgs;
use crate::commands::estimate::{table, EstimateReport};
use crate::config::RunConfig;
use crate::exit;

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Estimates file written by `estimate` (JSON)
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    output: OutputArgs,
}

pub fn run(a: ReportArgs) -> Result<u8> {
    let text = std::fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let report: EstimateReport =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", a.input.display()))?;
    a.output.sink(&RunConfig::default()).emit("report", &table(&report), &report)?;
    Ok(exit::OK)
}
