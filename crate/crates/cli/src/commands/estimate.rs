// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use cstock_core::assisted::relative_efficiency;
use cstock_core::design::{stratified_combine, EstimateResult, Estimator, Period};
use cstock_core::estimate::{fit_models, AggregatesFile, Estimation, Synthesis};
use cstock_core::models::ModelSet;
use cstock_core::survey::DomainSelector;

use crate::args::{parse_estimator, DataArgs, FitFlags, OutputArgs};
use crate::config::Mode;
use crate::exit;
use crate::output::{Cell, Table};

#[derive(Args, Debug)]
pub struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Model parameter file; models are fitted from the plots when absent
    #[arg(long)]
    models: Option<PathBuf>,
    /// Map aggregates file, needed by the model-assisted estimators
    #[arg(long)]
    aggregates: Option<PathBuf>,
    /// Which periods to report
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Domain name (a `domain_<name>` or `forest` column), or `all`
    #[arg(long)]
    domain: Option<String>,
    /// Estimators, comma separated (BE, MA-FCL, MA-ALS-FCL, MA-BEST)
    #[arg(long = "estimator", value_delimiter = ',', value_parser = parse_estimator)]
    estimators: Vec<Estimator>,
    /// Laser synthetic term when no per-cell heights are available
    #[arg(long, value_enum)]
    synthesis: Option<SynthesisArg>,
    #[command(flatten)]
    fit: FitFlags,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum SynthesisArg {
    Annualized,
    Unannualized,
}

impl From<SynthesisArg> for Synthesis {
    fn from(s: SynthesisArg) -> Self {
        match s {
            SynthesisArg::Annualized => Synthesis::Annualized,
            SynthesisArg::Unannualized => Synthesis::Unannualized,
        }
    }
}

/// One line of the estimates table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub period: String,
    /// Stratum id, or `combined` for the sum over strata.
    pub stratum: String,
    pub domain: String,
    pub estimator: Estimator,
    pub total: Option<f64>,
    pub se_pct: Option<f64>,
    pub variance: Option<f64>,
    pub n: Option<usize>,
    /// Variance of BE over the variance of this estimator, same period.
    pub re: Option<f64>,
    /// Estimator chosen per year (BEST only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<String>,
    /// Why the estimate could not be computed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub rows: Vec<EstimateRow>,
}

pub const COMBINED: &str = "combined";

/// Failure carried by a row: message and whether the input itself was bad.
#[derive(Debug, Clone)]
struct Failure {
    message: String,
    input_error: bool,
}

impl From<cstock_core::Error> for Failure {
    fn from(e: cstock_core::Error) -> Self {
        Failure { input_error: !e.is_degeneracy(), message: e.to_string() }
    }
}

type Outcome = std::result::Result<EstimateResult, Failure>;

struct Computed {
    period: Period,
    stratum: String,
    estimator: Estimator,
    outcome: Outcome,
    selection: Option<BTreeMap<i32, Estimator>>,
}

pub fn run(a: EstimateArgs) -> Result<u8> {
    let cfg = a.data.run_config()?;
    let ds = a.data.load(&cfg)?;
    let domain = DomainSelector::parse(a.domain.as_deref().or(cfg.domain.as_deref()).unwrap_or("all"));
    domain.validate(&ds)?;
    let mode = a.mode.or(cfg.mode).unwrap_or(Mode::All);
    let synthesis = a.synthesis.map(Synthesis::from).or(cfg.synthesis).unwrap_or_default();

    let models_path = a.models.as_ref().or(cfg.models.as_ref());
    let aggregates_path = a.aggregates.as_ref().or(cfg.aggregates.as_ref());
    let defaulted = a.estimators.is_empty() && cfg.estimators.is_none();
    let mut estimators = if !a.estimators.is_empty() {
        a.estimators.clone()
    } else if let Some(list) = &cfg.estimators {
        list.clone()
    } else if aggregates_path.is_some() {
        vec![Estimator::Be, Estimator::MaFcl, Estimator::MaAlsFcl, Estimator::MaBest]
    } else {
        vec![Estimator::Be]
    };
    if mode == Mode::Best && !estimators.contains(&Estimator::MaBest) {
        estimators.push(Estimator::MaBest);
    }
    // BE is always computed since the efficiencies are relative to it.
    if !estimators.contains(&Estimator::Be) {
        estimators.insert(0, Estimator::Be);
    }
    estimators.sort();
    estimators.dedup();
    let needs_ma = estimators.iter().any(|e| e.is_model_assisted());
    if needs_ma && aggregates_path.is_none() {
        bail!("model-assisted estimators need a map aggregates file (--aggregates)");
    }

    // Windows whose model could not be fitted, so that estimates needing
    // them report the fitting failure.
    let mut fit_failures: BTreeMap<String, Failure> = BTreeMap::new();
    let models = match (needs_ma, models_path) {
        (false, _) => None,
        (true, Some(path)) => {
            let m = ModelSet::load(path).with_context(|| format!("loading {}", path.display()))?;
            if m.interval_years != ds.interval_years() {
                bail!(
                    "{} was fitted with a {}-year interval but the data use {}",
                    path.display(),
                    m.interval_years,
                    ds.interval_years()
                );
            }
            Some(m)
        }
        (true, None) => {
            let outcome = fit_models(&ds, &a.fit.options(&cfg, a.data.height_metric(&cfg)));
            for (label, e) in outcome.failures {
                eprintln!("note: no model for {label}: {e}");
                fit_failures.insert(label, e.into());
            }
            Some(outcome.models)
        }
    };
    let aggregates_file = match aggregates_path {
        Some(path) if needs_ma => {
            Some(AggregatesFile::load(path).with_context(|| format!("loading {}", path.display()))?)
        }
        _ => None,
    };
    if defaulted {
        // Drop ALS-FCL by default when there is nothing to apply it to.
        let has_stock = models.as_ref().is_some_and(|m| m.cstock.is_some());
        let has_als = aggregates_file
            .as_ref()
            .is_some_and(|f| f.aggregates.iter().any(|r| r.aggregates.lambda_l.is_some()));
        if !(has_stock && has_als) {
            estimators.retain(|&e| e != Estimator::MaAlsFcl);
        }
    }
    let mut candidates: Vec<Estimator> =
        estimators.iter().copied().filter(|e| matches!(e, Estimator::MaFcl | Estimator::MaAlsFcl)).collect();
    if estimators.contains(&Estimator::MaBest) && candidates.is_empty() {
        candidates.push(Estimator::MaFcl);
    }
    let aggregates = aggregates_file
        .map(|f| f.into_table(ds.interval_years()))
        .transpose()
        .context("indexing map aggregates")?;

    let mut est = Estimation::new(&ds).with_domain(domain).with_synthesis(synthesis);
    if let Some(m) = &models {
        est = est.with_models(m);
    }
    if let Some(t) = &aggregates {
        est = est.with_aggregates(t);
    }

    let mut periods = Vec::new();
    if matches!(mode, Mode::Annual | Mode::All) {
        periods.extend(ds.panel_years().into_iter().map(Period::Annual));
    }
    match mode {
        Mode::Pooled => {
            est.pooled_window()?;
            periods.push(Period::Pooled);
        }
        Mode::All => match est.pooled_window() {
            Ok(_) => periods.push(Period::Pooled),
            Err(e) => eprintln!("note: pooled estimates skipped: {e}"),
        },
        _ => {}
    }
    if matches!(mode, Mode::Average | Mode::Best | Mode::All) {
        periods.push(Period::Average);
    }

    let strata: Vec<String> = ds.strata().iter().map(|s| s.id.clone()).collect();
    let mut cells: Vec<Computed> = Vec::new();
    for &period in &periods {
        let period_estimators: Vec<Estimator> = estimators
            .iter()
            .copied()
            .filter(|&e| match (mode, e, period) {
                (Mode::Best, e, _) => matches!(e, Estimator::Be | Estimator::MaBest),
                (_, Estimator::MaBest, p) => p == Period::Average,
                _ => true,
            })
            .collect();
        let mut per_stratum: Vec<Vec<Computed>> = Vec::new();
        for h in &strata {
            let row: Vec<Computed> = period_estimators
                .iter()
                .map(|&e| {
                    let (outcome, selection) = match (e, period) {
                        (Estimator::MaBest, _) => match est.stratum_best(&candidates, h) {
                            Ok((r, sel)) => (Ok(r), Some(sel)),
                            Err(err) => (Err(err.into()), None),
                        },
                        (_, Period::Annual(y)) => (est.stratum_annual(e, h, y).map_err(Failure::from), None),
                        (_, Period::Pooled) => (est.stratum_pooled(e, h).map_err(Failure::from), None),
                        (_, Period::Average) => (est.stratum_average(e, h).map_err(Failure::from), None),
                    };
                    let outcome = outcome.map_err(|f| explain(f, e, period, &fit_failures));
                    Computed { period, stratum: h.clone(), estimator: e, outcome, selection }
                })
                .collect();
            per_stratum.push(row);
        }
        if strata.len() > 1 {
            let combined: Vec<Computed> = period_estimators
                .iter()
                .enumerate()
                .map(|(j, &e)| {
                    let parts: std::result::Result<Vec<EstimateResult>, (String, Failure)> = per_stratum
                        .iter()
                        .map(|row| row[j].outcome.clone().map_err(|f| (row[j].stratum.clone(), f)))
                        .collect();
                    let outcome = match parts {
                        Ok(parts) => stratified_combine(&parts).map_err(Failure::from),
                        Err((h, f)) => Err(Failure { message: format!("stratum {h} failed"), input_error: f.input_error }),
                    };
                    Computed { period, stratum: COMBINED.into(), estimator: e, outcome, selection: None }
                })
                .collect();
            per_stratum.push(combined);
        }
        cells.extend(per_stratum.into_iter().flatten());
    }

    let report = build_report(&cells, est.domain().label());
    let (mut bad_input, mut degenerate) = (false, false);
    for c in &cells {
        if let Err(f) = &c.outcome {
            eprintln!("error: {} {} {}: {}", c.period, c.stratum, c.estimator, f.message);
            bad_input |= f.input_error;
            degenerate |= !f.input_error;
        }
    }
    a.output.sink(&cfg).emit("estimates", &table(&report), &report)?;
    Ok(if bad_input {
        exit::INPUT
    } else if degenerate {
        exit::DEGENERATE
    } else {
        exit::OK
    })
}

/// Replace a missing-model failure by the reason the model is missing.
fn explain(f: Failure, e: Estimator, period: Period, fit_failures: &BTreeMap<String, Failure>) -> Failure {
    if !f.input_error || !e.is_model_assisted() {
        return f;
    }
    let cause = match period {
        Period::Annual(y) => fit_failures.get(&y.to_string()),
        Period::Pooled => fit_failures.iter().find(|(label, _)| label.contains('-')).map(|(_, f)| f),
        Period::Average => fit_failures.iter().find(|(label, _)| label.parse::<i32>().is_ok()).map(|(_, f)| f),
    };
    cause.cloned().unwrap_or(f)
}

fn build_report(cells: &[Computed], domain: &str) -> EstimateReport {
    let be: BTreeMap<(Period, &str), &EstimateResult> = cells
        .iter()
        .filter(|c| c.estimator == Estimator::Be)
        .filter_map(|c| c.outcome.as_ref().ok().map(|r| ((c.period, c.stratum.as_str()), r)))
        .collect();
    let rows = cells
        .iter()
        .map(|c| {
            let (r, note) = match &c.outcome {
                Ok(r) => (Some(r), None),
                Err(f) => (None, Some(f.message.clone())),
            };
            let re = match (r, be.get(&(c.period, c.stratum.as_str()))) {
                (Some(r), Some(b)) if c.estimator != Estimator::Be => relative_efficiency(b, r).ok(),
                _ => None,
            };
            EstimateRow {
                period: c.period.to_string(),
                stratum: c.stratum.clone(),
                domain: domain.to_string(),
                estimator: c.estimator,
                total: r.map(|r| r.total),
                se_pct: r.and_then(EstimateResult::se_pct),
                variance: r.map(|r| r.variance_total),
                n: r.map(|r| r.n),
                re,
                selection: c.selection.as_ref().map(|s| {
                    s.iter().map(|(y, e)| format!("{y}:{e}")).collect::<Vec<_>>().join(" ")
                }),
                note,
            }
        })
        .collect();
    EstimateReport { rows }
}

/// Table of a report; also used by `report`.
pub fn table(r: &EstimateReport) -> Table {
    let mut t = Table::new(&[
        "period", "stratum", "domain", "estimator", "total", "SE%", "variance", "n", "RE", "selection", "note",
    ]);
    for row in &r.rows {
        t.push(vec![
            row.period.as_str().into(),
            row.stratum.as_str().into(),
            row.domain.as_str().into(),
            row.estimator.label().into(),
            Cell::num(row.total, 3),
            Cell::num(row.se_pct, 2),
            Cell::num(row.variance, 3),
            row.n.map_or(Cell::Empty, Cell::Int),
            Cell::num(row.re, 2),
            row.selection.clone().unwrap_or_default().into(),
            row.note.clone().unwrap_or_default().into(),
        ]);
    }
    t
}
