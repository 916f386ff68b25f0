// SPDX-License-Identifier: Apache-2.0

//! End-to-end estimation over a dataset: model fitting per window, the table
//! of map aggregates, and per-stratum annual, pooled, average and BEST
//! estimates.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assisted::{
    best_selection, ma_total, residuals, synthetic_total_als_fcl, synthetic_total_fcl, AlsSynthesis,
    PopulationAggregates,
};
use crate::design::{
    average_annual, be_estimate, ClusterValue, EstimateResult, Estimator, EstimatorTag, Period,
};
use crate::error::{Error, Result};
use crate::models::{
    cstock_pairs, fit_cstock_model, fit_fcl_on_plots, ModelSet, OutlierRule, PanelWindow, WorkingModel,
};
use crate::survey::{cluster_domain_mean, ClusterPlot, DomainSelector, HeightMetric, Stratum, SurveyDataset};

/// Heights of every laser-covered flagged cell, for pixel-sum synthesis.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelHeights {
    pub heights: Vec<f64>,
    pub cell_area: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuxEntry {
    pub aggregates: PopulationAggregates,
    pub pixels: Option<PixelHeights>,
}

/// Map aggregates keyed by stratum, window label and domain label.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AggregateTable {
    entries: BTreeMap<(String, String, String), AuxEntry>,
}

impl AggregateTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, stratum: &str, window: &PanelWindow, domain: &str, entry: AuxEntry) {
        self.entries
            .insert((stratum.to_string(), window.label(), domain.to_string()), entry);
    }

    pub fn get(&self, stratum: &str, window: &PanelWindow, domain: &str) -> Option<&AuxEntry> {
        self.entries
            .get(&(stratum.to_string(), window.label(), domain.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_file(&self) -> AggregatesFile {
        AggregatesFile {
            aggregates: self
                .entries
                .iter()
                .map(|((stratum, window, domain), e)| AggregateRecord {
                    stratum: stratum.clone(),
                    window: window.clone(),
                    domain: domain.clone(),
                    aggregates: e.aggregates,
                    excluded_cells: None,
                })
                .collect(),
        }
    }
}

fn all_domain() -> String {
    "all".into()
}

/// One `[[aggregates]]` entry of an aggregates file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRecord {
    pub stratum: String,
    /// `2018` or `2014-2018`.
    pub window: String,
    #[serde(default = "all_domain")]
    pub domain: String,
    #[serde(flatten)]
    pub aggregates: PopulationAggregates,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub excluded_cells: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregatesFile {
    #[serde(default)]
    pub aggregates: Vec<AggregateRecord>,
}

impl AggregatesFile {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let file: AggregatesFile = toml::from_str(s).map_err(|e| Error::Format {
            what: "aggregates file".into(),
            message: e.to_string(),
        })?;
        for r in &file.aggregates {
            PanelWindow::parse(&r.window)?;
            r.aggregates.validate().map_err(|e| {
                Error::Aggregates(format!("stratum `{}` window {}: {e}", r.stratum, r.window))
            })?;
        }
        Ok(file)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("aggregates serialize")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Windows are re-labelled with the dataset's remeasurement interval.
    pub fn into_table(self, interval_years: u32) -> Result<AggregateTable> {
        let mut table = AggregateTable::new();
        for r in self.aggregates {
            let w = PanelWindow::parse(&r.window)?.with_interval(interval_years);
            if table.get(&r.stratum, &w, &r.domain).is_some() {
                return Err(Error::Aggregates(format!(
                    "duplicate entry for stratum `{}` window {} domain {}",
                    r.stratum, r.window, r.domain
                )));
            }
            table.insert(&r.stratum, &w, &r.domain, AuxEntry { aggregates: r.aggregates, pixels: None });
        }
        Ok(table)
    }
}

/// Models fitted from a dataset plus the windows where fitting failed.
#[derive(Debug)]
pub struct FitOutcome {
    pub models: ModelSet,
    pub failures: Vec<(String, Error)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub outlier_rule: OutlierRule,
    pub clamp_negative: bool,
    pub height_metric: HeightMetric,
    /// Also fit the FCL model of the pooled window.
    pub pooled: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            outlier_rule: OutlierRule::default(),
            clamp_negative: true,
            height_metric: HeightMetric::FirstReturns,
            pooled: true,
        }
    }
}

/// FCL models per annual panel (and the pooled window), plus the stock model
/// from every sub-plot with laser height and observed stock.
pub fn fit_models(ds: &SurveyDataset, opts: &FitOptions) -> FitOutcome {
    let k = ds.interval_years();
    let mut models = ModelSet {
        interval_years: k,
        clamp_negative: opts.clamp_negative,
        height_metric: opts.height_metric,
        ..ModelSet::default()
    };
    let mut failures = Vec::new();
    for (year, plots) in crate::survey::split_panels(ds) {
        let w = PanelWindow::annual(year).with_interval(k);
        match fit_fcl_on_plots(plots.iter().copied(), &w) {
            Ok(p) => {
                models.fcl.insert(w.label(), p);
            }
            Err(e) => failures.push((w.label(), e.in_panel(year))),
        }
    }
    if opts.pooled {
        match ds.pooled_span() {
            Ok((first, last)) => {
                let w = PanelWindow::pooled(first, last)
                    .expect("span is ordered")
                    .with_interval(k);
                match fit_fcl_on_plots(ds.plots(), &w) {
                    Ok(p) => {
                        models.fcl.insert(w.label(), p);
                    }
                    Err(e) => failures.push((w.label(), e)),
                }
            }
            Err(e) => failures.push(("pooled".into(), e)),
        }
    }
    let pairs = cstock_pairs(ds.plots());
    if !pairs.is_empty() {
        match fit_cstock_model(&pairs, &opts.outlier_rule) {
            Ok(c) => models.cstock = Some(c),
            Err(e) => failures.push(("cstock".into(), e)),
        }
    }
    FitOutcome { models, failures }
}

/// How the laser-covered synthetic term is evaluated when no pixel heights
/// are available.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Synthesis {
    /// Stock model at the mean height divided by the remeasurement interval.
    #[default]
    Annualized,
    /// Stock model at the mean height as is.
    Unannualized,
}

/// Estimation context over one dataset.
#[derive(Debug, Clone)]
pub struct Estimation<'a> {
    dataset: &'a SurveyDataset,
    domain: DomainSelector,
    models: Option<&'a ModelSet>,
    aggregates: Option<&'a AggregateTable>,
    synthesis: Synthesis,
}

impl<'a> Estimation<'a> {
    pub fn new(dataset: &'a SurveyDataset) -> Self {
        Self {
            dataset,
            domain: DomainSelector::All,
            models: None,
            aggregates: None,
            synthesis: Synthesis::default(),
        }
    }

    pub fn with_domain(mut self, domain: DomainSelector) -> Self {
        self.domain = domain;
        self
    }

    pub fn with_models(mut self, models: &'a ModelSet) -> Self {
        self.models = Some(models);
        self
    }

    pub fn with_aggregates(mut self, aggregates: &'a AggregateTable) -> Self {
        self.aggregates = Some(aggregates);
        self
    }

    pub fn with_synthesis(mut self, synthesis: Synthesis) -> Self {
        self.synthesis = synthesis;
        self
    }

    pub fn dataset(&self) -> &SurveyDataset {
        self.dataset
    }

    pub fn domain(&self) -> &DomainSelector {
        &self.domain
    }

    pub fn annual_window(&self, year: i32) -> PanelWindow {
        PanelWindow::annual(year).with_interval(self.dataset.interval_years())
    }

    pub fn pooled_window(&self) -> Result<PanelWindow> {
        let (first, last) = self.dataset.pooled_span()?;
        Ok(PanelWindow::pooled(first, last)?.with_interval(self.dataset.interval_years()))
    }

    fn stratum(&self, id: &str) -> Result<&'a Stratum> {
        self.dataset
            .stratum(id)
            .ok_or_else(|| Error::Invalid(format!("unknown stratum `{id}`")))
    }

    fn tag(&self, estimator: Estimator, period: Period, stratum: &str) -> EstimatorTag {
        EstimatorTag::new(estimator, period)
            .with_stratum(stratum)
            .with_domain(self.domain.label())
    }

    /// Estimate from one stratum's sample for one window.
    pub fn sample_estimate(
        &self,
        stratum: &Stratum,
        plots: &[&ClusterPlot],
        estimator: Estimator,
        window: &PanelWindow,
    ) -> Result<EstimateResult> {
        let tag = self.tag(estimator, window.period(), &stratum.id);
        if plots.is_empty() {
            return Err(Error::EmptySample(format!("stratum `{}` window {window}", stratum.id)));
        }
        match estimator {
            Estimator::Be => {
                let sample: Vec<ClusterValue> = plots
                    .iter()
                    .map(|p| ClusterValue::new(p.m(), cluster_domain_mean(p, &self.domain)))
                    .collect();
                be_estimate(&sample, stratum.lambda, tag)
            }
            Estimator::MaFcl | Estimator::MaAlsFcl => {
                let models = self
                    .models
                    .ok_or_else(|| Error::Invalid("model-assisted estimation needs model parameters".into()))?;
                let table = self
                    .aggregates
                    .ok_or_else(|| Error::Invalid("model-assisted estimation needs map aggregates".into()))?;
                let entry = table.get(&stratum.id, window, self.domain.label()).ok_or_else(|| {
                    Error::Invalid(format!(
                        "no aggregates for stratum `{}` window {window} domain {}",
                        stratum.id,
                        self.domain.label()
                    ))
                })?;
                let model = models.working_model(estimator, window)?;
                let synthetic = match &model {
                    WorkingModel::Fcl(p) => synthetic_total_fcl(&entry.aggregates, p)?,
                    WorkingModel::AlsFcl(m) => {
                        if entry.aggregates.lambda_l.is_none() {
                            return Err(Error::Aggregates(format!(
                                "ALS-FCL needs laser-covered area for stratum `{}` window {window}",
                                stratum.id
                            )));
                        }
                        let mode = match (&entry.pixels, self.synthesis) {
                            (Some(px), _) => AlsSynthesis::Pixels {
                                heights: &px.heights,
                                cell_area: px.cell_area,
                            },
                            (None, Synthesis::Annualized) => AlsSynthesis::MeanHeight,
                            (None, Synthesis::Unannualized) => AlsSynthesis::Unannualized,
                        };
                        synthetic_total_als_fcl(&entry.aggregates, m, mode)?
                    }
                };
                let res = residuals(plots.iter().copied(), &model, &self.domain, window);
                ma_total(synthetic, &res, stratum.lambda, tag)
            }
            Estimator::MaBest => Err(Error::Invalid(
                "BEST is a combination of annual estimates, not a sample estimator".into(),
            )),
        }
    }

    fn panel_plots(&self, stratum: &str, year: i32) -> Vec<&'a ClusterPlot> {
        self.dataset
            .plots()
            .iter()
            .filter(|p| p.stratum_id() == stratum && p.panel_year() == year)
            .collect()
    }

    /// Years with at least one plot in the stratum, and their cluster counts.
    pub fn panel_sizes(&self, stratum: &str) -> BTreeMap<i32, usize> {
        let mut sizes = BTreeMap::new();
        for p in self.dataset.stratum_plots(stratum) {
            *sizes.entry(p.panel_year()).or_insert(0) += 1;
        }
        sizes
    }

    pub fn stratum_annual(&self, estimator: Estimator, stratum: &str, year: i32) -> Result<EstimateResult> {
        let s = self.stratum(stratum)?;
        let plots = self.panel_plots(stratum, year);
        self.sample_estimate(s, &plots, estimator, &self.annual_window(year))
            .map_err(|e| e.in_panel(year))
    }

    pub fn stratum_pooled(&self, estimator: Estimator, stratum: &str) -> Result<EstimateResult> {
        let s = self.stratum(stratum)?;
        let w = self.pooled_window()?;
        let plots: Vec<&ClusterPlot> = self.dataset.stratum_plots(stratum).collect();
        self.sample_estimate(s, &plots, estimator, &w)
    }

    /// Per-year estimates of a stratum, one entry per panel year.
    pub fn stratum_annual_all(
        &self,
        estimator: Estimator,
        stratum: &str,
    ) -> BTreeMap<i32, Result<EstimateResult>> {
        self.panel_sizes(stratum)
            .into_keys()
            .map(|year| (year, self.stratum_annual(estimator, stratum, year)))
            .collect()
    }

    pub fn stratum_average(&self, estimator: Estimator, stratum: &str) -> Result<EstimateResult> {
        self.average_of(stratum, self.stratum_annual_all(estimator, stratum))
    }

    /// Panel-size weighted average of annual results; fails on the first failed year.
    pub fn average_of(&self, stratum: &str, annual: BTreeMap<i32, Result<EstimateResult>>) -> Result<EstimateResult> {
        let annual = annual
            .into_iter()
            .map(|(y, r)| r.map(|r| (y, r)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        if annual.is_empty() {
            return Err(Error::EmptySample(format!("stratum `{stratum}`")));
        }
        average_annual(&annual, &self.panel_sizes(stratum))
    }

    /// Average over years of the lowest-variance estimate among the candidates
    /// that could be computed in that year.
    pub fn stratum_best(&self, candidates: &[Estimator], stratum: &str) -> Result<(EstimateResult, BTreeMap<i32, Estimator>)> {
        let annual: Vec<_> = candidates.iter().map(|&e| self.stratum_annual_all(e, stratum)).collect();
        self.best_of(
            stratum,
            annual.iter().flatten().filter_map(|(&y, r)| r.as_ref().ok().map(|r| (y, r))),
        )
    }

    /// BEST from already computed annual candidates, with the estimator chosen each year.
    pub fn best_of<'r>(
        &self,
        stratum: &str,
        candidates: impl IntoIterator<Item = (i32, &'r EstimateResult)>,
    ) -> Result<(EstimateResult, BTreeMap<i32, Estimator>)> {
        let n_t = self.panel_sizes(stratum);
        if n_t.is_empty() {
            return Err(Error::EmptySample(format!("stratum `{stratum}`")));
        }
        let mut per_year: BTreeMap<i32, Vec<EstimateResult>> =
            n_t.keys().map(|&y| (y, Vec::new())).collect();
        for (year, r) in candidates {
            if let Some(v) = per_year.get_mut(&year) {
                v.push(r.clone());
            }
        }
        let selected = best_selection(&per_year)?;
        let choice = selected.iter().map(|(&y, r)| (y, r.tag.estimator)).collect();
        let mut avg = average_annual(&selected, &n_t)?;
        avg.tag = self.tag(Estimator::MaBest, Period::Average, stratum);
        Ok((avg, choice))
    }
}
