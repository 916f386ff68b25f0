// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;

use cstock_core::sim::{
    exhaustive, generate_population, run_on_population, CheckStatus, ExhaustiveReport, SampleDesign,
    SimulationConfig, ValidationReport,
};

use crate::args::OutputArgs;
use crate::config::RunConfig;
use crate::exit;
use crate::output::{Cell, Table};

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Run configuration file with a `[simulation]` table
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of replications
    #[arg(long)]
    replications: Option<usize>,
    /// Seed of the population and of the replication streams
    #[arg(long)]
    seed: Option<u64>,
    /// Simple random sample of this many clusters
    #[arg(long, conflicts_with = "step")]
    srs: Option<usize>,
    /// Systematic sample of every `step`-th cluster
    #[arg(long)]
    step: Option<usize>,
    /// Enumerate every sample of this size instead of drawing replications
    #[arg(long)]
    exhaustive: Option<usize>,
    /// Exit with status 3 when a check fails
    #[arg(long)]
    check: bool,
    #[command(flatten)]
    output: OutputArgs,
}

/// Largest relative bias accepted by the exhaustive check.
const EXHAUSTIVE_TOLERANCE: f64 = 1e-12;

pub fn run(a: SimulateArgs) -> Result<u8> {
    let cfg = RunConfig::load_optional(a.config.as_deref())?;
    let mut sim = cfg.simulation.clone().unwrap_or_else(SimulationConfig::default);
    if let Some(r) = a.replications {
        sim.replications = r;
    }
    if let Some(seed) = a.seed {
        sim.population.seed = seed;
    }
    if let Some(n) = a.srs {
        sim.design = SampleDesign::Srs { n };
    }
    if let Some(step) = a.step {
        sim.design = SampleDesign::Systematic { step };
    }
    sim.validate()?;
    let sink = a.output.sink(&cfg);
    let pop = generate_population(&sim.population)?;

    if let Some(n) = a.exhaustive {
        let report = exhaustive(&pop, n, sim.exhaustive_cap, sim.clamp_negative)?;
        sink.emit("exhaustive", &exhaustive_table(&report), &report)?;
        let worst = report.rows.iter().map(|r| r.relative_bias.abs()).fold(0.0, f64::max);
        if a.check && !(worst <= EXHAUSTIVE_TOLERANCE) {
            eprintln!("check failed: largest relative bias {worst:.3e} exceeds {EXHAUSTIVE_TOLERANCE:e}");
            return Ok(exit::CHECK_FAILED);
        }
        return Ok(exit::OK);
    }

    let report = run_on_population(&pop, &sim)?;
    sink.emit("simulation", &summary_table(&report), &report)?;
    for c in &report.checks {
        let status = match c.status {
            CheckStatus::Pass => "PASS",
            CheckStatus::Fail => "FAIL",
            CheckStatus::Skipped => "SKIP",
        };
        eprintln!("{status} {}: {}", c.name, c.detail);
    }
    if a.check && !report.passed() {
        return Ok(exit::CHECK_FAILED);
    }
    if report.summaries.iter().all(|s| s.successes == 0) {
        bail!("every replication failed");
    }
    Ok(exit::OK)
}

fn summary_table(r: &ValidationReport) -> Table {
    let mut t = Table::new(&[
        "estimator",
        "period",
        "ok",
        "failed",
        "true total",
        "mean estimate",
        "rel. bias",
        "MCSE",
        "emp. variance",
        "mean var. est.",
        "ratio",
        "mean RE",
    ]);
    for s in &r.summaries {
        t.push(vec![
            s.estimator.label().into(),
            s.period.to_string().into(),
            Cell::Int(s.successes),
            Cell::Int(s.failures),
            Cell::Num(s.true_total, 1),
            Cell::Num(s.mean_estimate, 1),
            Cell::Num(s.relative_bias, 5),
            Cell::Num(s.mcse, 1),
            Cell::Num(s.empirical_variance, 0),
            Cell::Num(s.mean_variance_estimate, 0),
            Cell::Num(s.variance_ratio, 3),
            Cell::num(s.mean_re, 3),
        ]);
    }
    t
}

fn exhaustive_table(r: &ExhaustiveReport) -> Table {
    let mut t = Table::new(&["estimator", "year", "samples", "true total", "mean estimate", "rel. bias"]);
    for row in &r.rows {
        t.push(vec![
            row.estimator.label().into(),
            r.year.to_string().into(),
            Cell::Int(r.samples as usize),
            Cell::Num(row.true_total, 6),
            Cell::Num(row.mean_estimate, 6),
            Cell::Text(format!("{:.3e}", row.relative_bias)),
        ]);
    }
    t
}
