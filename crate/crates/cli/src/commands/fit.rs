// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;

use cstock_core::models::{als_eligible, recode_fcl, CstockModelParams, FclModelParams, ModelSet, PanelWindow};
use cstock_core::survey::SurveyDataset;
use cstock_core::Error;

use crate::args::{DataArgs, FitFlags, OutputArgs};
use crate::exit;
use crate::output::{self, Cell, Table};

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    flags: FitFlags,
    /// Parameter file to write (default: models.toml in the output directory)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Validate and show an existing parameter file instead of fitting
    #[arg(long, conflicts_with = "out")]
    params: Option<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Serialize)]
struct WindowRow {
    window: String,
    clusters: Option<usize>,
    ybar_n: f64,
    n_n: usize,
    ybar_cl: f64,
    n_cl: usize,
    flagged_with_als: Option<usize>,
}

#[derive(Debug, Serialize)]
struct FitReport {
    interval_years: u32,
    windows: Vec<WindowRow>,
    cstock: Option<CstockModelParams>,
}

pub fn run(a: FitArgs) -> Result<u8> {
    let cfg = a.data.run_config()?;
    let sink = a.output.sink(&cfg);
    if let Some(path) = &a.params {
        let models = ModelSet::load(path).with_context(|| format!("checking {}", path.display()))?;
        let report = report(&models, None);
        sink.emit("fit", &table(&report), &report)?;
        return Ok(exit::OK);
    }

    let ds = a.data.load(&cfg)?;
    let outcome = cstock_core::estimate::fit_models(&ds, &a.flags.options(&cfg, a.data.height_metric(&cfg)));
    let mut status = exit::OK;
    for (label, e) in &outcome.failures {
        match e {
            // No complete remeasurement cycle: only annual models are fitted.
            Error::Invalid(_) if label == "pooled" => eprintln!("note: no pooled model: {e}"),
            Error::Panel { .. } => eprintln!("error: {e}"),
            _ => eprintln!("error: {label}: {e}"),
        }
        if !(label == "pooled" && matches!(e, Error::Invalid(_))) {
            let code = if e.is_degeneracy() { exit::DEGENERATE } else { exit::INPUT };
            status = status.max(code);
        }
    }

    let target = a.out.clone().or_else(|| sink.out_dir.as_ref().map(|d| d.join("models.toml")));
    if let Some(path) = target {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        output::write(&path, &outcome.models.to_toml_string())?;
    }
    let report = report(&outcome.models, Some(&ds));
    sink.emit("fit", &table(&report), &report)?;
    Ok(status)
}

fn report(models: &ModelSet, ds: Option<&SurveyDataset>) -> FitReport {
    let mut windows: Vec<(PanelWindow, &FclModelParams)> = models
        .fcl
        .iter()
        .filter_map(|(label, p)| PanelWindow::parse(label).ok().map(|w| (w.with_interval(models.interval_years), p)))
        .collect();
    // Annual windows by year, pooled last.
    windows.sort_by_key(|(w, _)| (w.period() == cstock_core::design::Period::Pooled, w.year()));
    let windows = windows
        .into_iter()
        .map(|(w, p)| {
            let plots: Option<Vec<_>> = ds.map(|ds| {
                ds.plots()
                    .iter()
                    .filter(|c| match w.period() {
                        cstock_core::design::Period::Annual(y) => c.panel_year() == y,
                        _ => true,
                    })
                    .collect()
            });
            let flagged_with_als = plots.as_ref().map(|plots| {
                plots
                    .iter()
                    .flat_map(|c| c.subplots())
                    .filter(|s| recode_fcl(s.fcl_loss_year, &w) && als_eligible(s.als.map(|a| a.year), &w))
                    .count()
            });
            WindowRow {
                window: w.label(),
                clusters: plots.map(|p| p.len()),
                ybar_n: p.ybar_n,
                n_n: p.n_n,
                ybar_cl: p.ybar_cl,
                n_cl: p.n_cl,
                flagged_with_als,
            }
        })
        .collect();
    FitReport { interval_years: models.interval_years, windows, cstock: models.cstock }
}

fn table(r: &FitReport) -> Table {
    let mut t = Table::new(&[
        "window",
        "clusters",
        "n FCL=0",
        "mean loss FCL=0",
        "n FCL=1",
        "mean loss FCL=1",
        "FCL=1 with ALS",
    ]);
    for w in &r.windows {
        t.push(vec![
            w.window.clone().into(),
            w.clusters.map_or(Cell::Empty, Cell::Int),
            Cell::Int(w.n_n),
            Cell::Num(w.ybar_n, 3),
            Cell::Int(w.n_cl),
            Cell::Num(w.ybar_cl, 3),
            w.flagged_with_als.map_or(Cell::Empty, Cell::Int),
        ]);
    }
    if let Some(c) = &r.cstock {
        t.push(vec![
            "stock model".into(),
            Cell::Int(c.fit_n),
            Cell::Text(format!("b0={:.4}", c.beta0)),
            Cell::Empty,
            Cell::Text(format!("b1={:.4}", c.beta1)),
            Cell::Empty,
            Cell::Text(format!("b2={:.5}", c.beta2)),
        ]);
    }
    t
}
