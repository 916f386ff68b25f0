// SPDX-License-Identifier: Apache-2.0

//! Run configuration file. Every key is optional and command-line flags take
//! precedence; relative paths are resolved against the file's directory.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::ValueEnum;
use serde::Deserialize;

use cstock_core::design::Estimator;
use cstock_core::estimate::Synthesis;
use cstock_core::sim::SimulationConfig;
use cstock_core::survey::HeightMetric;

use crate::output::Format;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Annual,
    Pooled,
    Average,
    Best,
    All,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub plots: Option<PathBuf>,
    pub strata: Option<PathBuf>,
    pub aggregates: Option<PathBuf>,
    pub models: Option<PathBuf>,
    pub fcl_grid: Option<PathBuf>,
    pub als_height_grid: Option<PathBuf>,
    pub als_year_grid: Option<PathBuf>,
    pub mask_grid: Option<PathBuf>,
    pub stratum: Option<String>,
    pub windows: Option<Vec<String>>,
    pub mode: Option<Mode>,
    pub domain: Option<String>,
    pub estimators: Option<Vec<Estimator>>,
    pub interval_years: Option<u32>,
    pub clamp_negative: Option<bool>,
    pub height_metric: Option<HeightMetric>,
    pub synthesis: Option<Synthesis>,
    pub exclude_disturbed: Option<bool>,
    pub residual_cutoff: Option<f64>,
    pub delimiter: Option<char>,
    pub out_dir: Option<PathBuf>,
    pub formats: Option<Vec<Format>>,
    pub simulation: Option<SimulationConfig>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.plots,
            &mut cfg.strata,
            &mut cfg.aggregates,
            &mut cfg.models,
            &mut cfg.fcl_grid,
            &mut cfg.als_height_grid,
            &mut cfg.als_year_grid,
            &mut cfg.mask_grid,
            &mut cfg.out_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(sim) = &cfg.simulation {
            sim.validate().context("invalid [simulation] table")?;
        }
        Ok(cfg)
    }

    pub fn load_optional(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}
