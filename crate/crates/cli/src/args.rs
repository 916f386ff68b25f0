// SPDX-License-Identifier: Apache-2.0

//! Argument groups shared by several subcommands.

use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;

use cstock_core::estimate::FitOptions;
use cstock_core::models::OutlierRule;
use cstock_core::survey::{load_dataset, HeightMetric, Schema, SurveyDataset};

use crate::config::RunConfig;
use crate::output::{Format, Sink};

pub fn parse_height_metric(s: &str) -> Result<HeightMetric, String> {
    match s {
        "first-returns" | "first" => Ok(HeightMetric::FirstReturns),
        "all-returns" | "all" => Ok(HeightMetric::AllReturns),
        _ => Err(format!("unknown height metric `{s}` (first-returns, all-returns)")),
    }
}

pub fn parse_estimator(s: &str) -> Result<cstock_core::design::Estimator, String> {
    cstock_core::design::Estimator::parse(s)
        .ok_or_else(|| format!("unknown estimator `{s}` (BE, MA-FCL, MA-ALS-FCL, MA-BEST)"))
}

#[derive(Args, Debug, Default)]
pub struct DataArgs {
    /// Run configuration file (TOML); flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Sub-plot file (one row per sub-plot and panel measurement)
    #[arg(long)]
    pub plots: Option<PathBuf>,
    /// Strata file with columns `stratum_id` and `lambda_ha`
    #[arg(long)]
    pub strata: Option<PathBuf>,
    /// Remeasurement interval in years
    #[arg(long)]
    pub interval: Option<u32>,
    /// Laser height column to read
    #[arg(long, value_parser = parse_height_metric)]
    pub height_metric: Option<HeightMetric>,
    /// Field delimiter of the input files
    #[arg(long)]
    pub delimiter: Option<char>,
}

impl DataArgs {
    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::load_optional(self.config.as_deref())
    }

    pub fn interval(&self, cfg: &RunConfig) -> u32 {
        self.interval.or(cfg.interval_years).unwrap_or(SurveyDataset::DEFAULT_INTERVAL)
    }

    pub fn height_metric(&self, cfg: &RunConfig) -> HeightMetric {
        self.height_metric.or(cfg.height_metric).unwrap_or_default()
    }

    pub fn load(&self, cfg: &RunConfig) -> Result<SurveyDataset> {
        let plots = self.plots.as_ref().or(cfg.plots.as_ref()).ok_or_else(|| anyhow!("no plot file (--plots)"))?;
        let strata = self.strata.as_ref().or(cfg.strata.as_ref()).ok_or_else(|| anyhow!("no strata file (--strata)"))?;
        let mut schema = Schema::default().with_height_metric(self.height_metric(cfg));
        if let Some(d) = self.delimiter.or(cfg.delimiter) {
            if !d.is_ascii() {
                bail!("delimiter `{d}` is not an ASCII character");
            }
            schema = schema.with_delimiter(d as u8);
        }
        let ds = load_dataset(plots, strata, &schema).with_context(|| format!("loading {}", plots.display()))?;
        Ok(ds.with_interval_years(self.interval(cfg))?)
    }
}

#[derive(Args, Debug, Default)]
pub struct FitFlags {
    /// Keep sub-plots disturbed after their laser acquisition in the stock fit
    #[arg(long)]
    pub keep_disturbed: bool,
    /// Drop stock pairs whose absolute residual exceeds this value (t/ha)
    #[arg(long)]
    pub residual_cutoff: Option<f64>,
    /// Allow negative predicted stock instead of clamping at zero
    #[arg(long)]
    pub no_clamp: bool,
}

impl FitFlags {
    pub fn options(&self, cfg: &RunConfig, height_metric: HeightMetric) -> FitOptions {
        let exclude_disturbed = !self.keep_disturbed && cfg.exclude_disturbed.unwrap_or(true);
        FitOptions {
            outlier_rule: OutlierRule {
                exclude_disturbed,
                residual_cutoff: self.residual_cutoff.or(cfg.residual_cutoff),
            },
            clamp_negative: !self.no_clamp && cfg.clamp_negative.unwrap_or(true),
            height_metric,
            pooled: true,
        }
    }
}

#[derive(Args, Debug, Default)]
pub struct OutputArgs {
    /// Directory for result files; results go to stdout when absent
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Output formats, comma separated (all three when writing files)
    #[arg(long, value_enum, value_delimiter = ',')]
    pub format: Vec<Format>,
}

impl OutputArgs {
    pub fn sink(&self, cfg: &RunConfig) -> Sink {
        Sink {
            out_dir: self.out_dir.clone().or_else(|| cfg.out_dir.clone()),
            formats: if self.format.is_empty() { cfg.formats.clone().unwrap_or_default() } else { self.format.clone() },
        }
    }
}
