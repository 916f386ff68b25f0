// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;

use cstock_core::design::Estimator;
use cstock_core::estimate::{AggregateRecord, AggregatesFile};
use cstock_core::grid::{aggregate_layers, load_grid, synthetic_map, MapLayers};
use cstock_core::models::{ModelSet, PanelWindow, WorkingModel};
use cstock_core::survey::SurveyDataset;

use crate::config::RunConfig;
use crate::exit;
use crate::output::{self, Cell, Table};

#[derive(Args, Debug)]
pub struct AggregateArgs {
    /// Run configuration file (TOML); flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Grid of FCL loss years (0 for no mapped loss)
    #[arg(long)]
    fcl: Option<PathBuf>,
    /// Grid of laser heights (m)
    #[arg(long)]
    als_height: Option<PathBuf>,
    /// Grid of laser acquisition years
    #[arg(long)]
    als_year: Option<PathBuf>,
    /// Domain mask grid (non-zero cells belong to the domain)
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Domain name recorded for a masked aggregate
    #[arg(long)]
    domain: Option<String>,
    /// Stratum the grids cover
    #[arg(long)]
    stratum: Option<String>,
    /// Window labels such as `2018` or `2014-2018`; repeatable
    #[arg(long = "window")]
    windows: Vec<String>,
    /// Remeasurement interval in years
    #[arg(long)]
    interval: Option<u32>,
    /// Aggregates file to write; printed to stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
    /// Model parameter file for the synthetic loss map
    #[arg(long, requires = "map_out")]
    models: Option<PathBuf>,
    /// Write the per-cell ALS-FCL prediction grid here
    #[arg(long, requires = "models")]
    map_out: Option<PathBuf>,
    /// Window of the synthetic map (default: the only window given)
    #[arg(long)]
    map_window: Option<String>,
}

pub fn run(a: AggregateArgs) -> Result<u8> {
    let cfg = RunConfig::load_optional(a.config.as_deref())?;
    let k = a.interval.or(cfg.interval_years).unwrap_or(SurveyDataset::DEFAULT_INTERVAL);
    if k == 0 {
        bail!("interval must be at least 1 year");
    }
    let pick = |flag: &Option<PathBuf>, conf: &Option<PathBuf>| flag.clone().or_else(|| conf.clone());
    let fcl_path = pick(&a.fcl, &cfg.fcl_grid).ok_or_else(|| anyhow!("no FCL grid (--fcl)"))?;
    let load = |p: Option<PathBuf>| {
        p.map(|p| load_grid(&p).with_context(|| format!("loading {}", p.display()))).transpose()
    };
    let fcl = load(Some(fcl_path))?.expect("path given");
    let height = load(pick(&a.als_height, &cfg.als_height_grid))?;
    let year = load(pick(&a.als_year, &cfg.als_year_grid))?;
    let mask = load(pick(&a.mask, &cfg.mask_grid))?;
    let domain = a.domain.clone().or_else(|| cfg.domain.clone()).unwrap_or_else(|| "all".into());
    match (&mask, domain.as_str()) {
        (Some(_), "all") => bail!("a domain mask needs a domain name (--domain)"),
        (None, d) if d != "all" => bail!("domain `{d}` needs a mask grid (--mask)"),
        _ => {}
    }
    let stratum = a.stratum.clone().or_else(|| cfg.stratum.clone()).ok_or_else(|| anyhow!("no stratum (--stratum)"))?;
    let labels = if a.windows.is_empty() { cfg.windows.clone().unwrap_or_default() } else { a.windows.clone() };
    if labels.is_empty() {
        bail!("no windows (--window)");
    }
    let windows = labels
        .iter()
        .map(|l| PanelWindow::parse(l).map(|w| w.with_interval(k)))
        .collect::<cstock_core::Result<Vec<_>>>()?;

    let layers = MapLayers::new(&fcl).with_als(height.as_ref(), year.as_ref()).with_mask(mask.as_ref());
    let mut file = AggregatesFile::default();
    for w in &windows {
        let agg = aggregate_layers(&layers, w).with_context(|| format!("window {w}"))?;
        file.aggregates.push(AggregateRecord {
            stratum: stratum.clone(),
            window: w.label(),
            domain: domain.clone(),
            aggregates: agg.aggregates,
            excluded_cells: Some(agg.excluded_cells),
        });
    }

    if let Some(map_out) = &a.map_out {
        if mask.is_some() {
            bail!("the synthetic map is not restricted to a domain; drop --mask");
        }
        let w = match &a.map_window {
            Some(l) => PanelWindow::parse(l)?.with_interval(k),
            None if windows.len() == 1 => windows[0],
            None => bail!("several windows given; choose one with --map-window"),
        };
        let path = a.models.as_ref().expect("required by clap");
        let models = ModelSet::load(path).with_context(|| format!("loading {}", path.display()))?;
        let WorkingModel::AlsFcl(model) = models.working_model(Estimator::MaAlsFcl, &w)? else {
            unreachable!("ALS-FCL working model")
        };
        let map = synthetic_map(&fcl, height.as_ref(), year.as_ref(), &model, &w)?;
        output::write(map_out, &map.to_text())?;
    }

    let text = file.to_toml_string();
    match &a.out {
        Some(path) => {
            output::write(path, &text)?;
            print!("{}", table(&file).to_text());
        }
        None => print!("{text}"),
    }
    Ok(exit::OK)
}

fn table(f: &AggregatesFile) -> Table {
    let mut t = Table::new(&[
        "stratum", "window", "domain", "lambda", "lambda CL", "lambda L", "lambda N", "mean height L", "excluded",
    ]);
    for r in &f.aggregates {
        let a = &r.aggregates;
        t.push(vec![
            r.stratum.as_str().into(),
            r.window.as_str().into(),
            r.domain.as_str().into(),
            Cell::Num(a.lambda, 3),
            Cell::Num(a.lambda_cl, 3),
            Cell::num(a.lambda_l, 3),
            Cell::Num(a.lambda_n, 3),
            Cell::num(a.xbar_l, 3),
            r.excluded_cells.map_or(Cell::Empty, Cell::Int),
        ]);
    }
    t
}
