// SPDX-License-Identifier: Apache-2.0

//! Synthetic populations, repeated sampling and validation reports.
//!
//! Every sub-plot has one candidate disturbance year in each run of
//! `interval` consecutive calendar years (a random phase), realized with the
//! configured prevalence. A panel window therefore holds at most one loss and
//! the prevalence is the per-window probability of a loss.

use itertools::Itertools;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assisted::{ma_total, synthetic_total_als_fcl, synthetic_total_fcl, AlsSynthesis, ResidualSample};
use crate::design::{be_estimate, stratified_combine, ClusterValue, EstimateResult, Estimator, EstimatorTag, Period};
use crate::error::{Error, Result};
use crate::estimate::{fit_models, AggregateTable, AuxEntry, Estimation, FitOptions, PixelHeights};
use crate::grid::{aggregate, GridRaster};
use crate::models::{
    fit_fcl_on_plots, predict_subplot, AlsFclModel, CstockModelParams, OutlierRule, PanelWindow, WorkingModel,
};
use crate::survey::{cluster_domain_mean, ClusterPlot, DomainSelector, Stratum, SubPlotRecord, SurveyDataset};

const NODATA: f64 = -9999.0;
const MAX_CALENDAR_YEARS: i32 = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StratumConfig {
    pub id: String,
    /// Area (ha).
    pub lambda: f64,
    pub clusters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationConfig {
    pub seed: u64,
    pub strata: Vec<StratumConfig>,
    pub subplots_per_cluster: u32,
    pub first_year: i32,
    /// Number of annual panels; also the remeasurement interval.
    pub panel_count: u32,
    /// Probability that a sub-plot loses its stock within a panel window.
    pub loss_prevalence: f64,
    /// Mean annualized loss of a disturbed sub-plot (t/ha/a).
    pub loss_mean: f64,
    pub loss_cv: f64,
    /// Probability of a small background loss in a panel year.
    pub baseline_probability: f64,
    pub baseline_mean: f64,
    pub baseline_cv: f64,
    /// Probability that a true loss is missing from the FCL map.
    pub fcl_omission: f64,
    /// Probability that a window without loss is flagged anyway.
    pub fcl_commission: f64,
    /// Fraction of clusters with laser data.
    pub als_coverage: f64,
    /// First and last acquisition year.
    pub als_years: [i32; 2],
    /// Standard deviation (m) of heights around the inverse stock model.
    pub als_noise: f64,
    /// Stock model used to generate heights: intercept, linear, quadratic.
    pub stock_model: [f64; 3],
    pub forest_share: f64,
    /// Prevalence multiplier per panel, applied by calendar year of the loss.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trend: Option<Vec<f64>>,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            seed: 20181,
            strata: vec![StratumConfig { id: "S1".into(), lambda: 15_000_000.0, clusters: 100_000 }],
            subplots_per_cluster: 1,
            first_year: 2014,
            panel_count: 5,
            loss_prevalence: 0.017,
            loss_mean: 17.0,
            loss_cv: 0.8,
            baseline_probability: 0.1,
            baseline_mean: 3.0,
            baseline_cv: 1.0,
            fcl_omission: 0.1,
            fcl_commission: 0.002,
            als_coverage: 0.25,
            als_years: [2008, 2013],
            als_noise: 1.5,
            stock_model: [1.18, 8.57, 0.087],
            forest_share: 0.66,
            trend: None,
        }
    }
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {p} is not a probability")))
    }
}

impl PopulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strata.is_empty() {
            return Err(Error::Config("no strata".into()));
        }
        let mut ids = std::collections::BTreeSet::new();
        for s in &self.strata {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Config(format!("duplicate stratum `{}`", s.id)));
            }
            if s.clusters == 0 {
                return Err(Error::Config(format!("stratum `{}` has zero clusters", s.id)));
            }
            if !(s.lambda > 0.0 && s.lambda.is_finite()) {
                return Err(Error::Config(format!("stratum `{}` area must be positive", s.id)));
            }
        }
        if self.subplots_per_cluster == 0 {
            return Err(Error::Config("subplots_per_cluster must be >= 1".into()));
        }
        if self.panel_count == 0 {
            return Err(Error::Config("panel_count must be >= 1".into()));
        }
        for (name, p) in [
            ("loss_prevalence", self.loss_prevalence),
            ("baseline_probability", self.baseline_probability),
            ("fcl_omission", self.fcl_omission),
            ("fcl_commission", self.fcl_commission),
            ("als_coverage", self.als_coverage),
            ("forest_share", self.forest_share),
        ] {
            check_probability(name, p)?;
        }
        for (name, v) in [
            ("loss_mean", self.loss_mean),
            ("loss_cv", self.loss_cv),
            ("baseline_mean", self.baseline_mean),
            ("baseline_cv", self.baseline_cv),
            ("als_noise", self.als_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be non-negative")));
            }
        }
        if self.als_years[0] > self.als_years[1] {
            return Err(Error::Config("als_years must be ordered".into()));
        }
        if self.stock_model.iter().any(|b| !b.is_finite()) {
            return Err(Error::Config("stock_model coefficients must be finite".into()));
        }
        if let Some(trend) = &self.trend {
            if trend.len() != self.panel_count as usize {
                return Err(Error::Config(format!(
                    "trend has {} entries for {} panels",
                    trend.len(),
                    self.panel_count
                )));
            }
            for &f in trend {
                if !(f >= 0.0) {
                    return Err(Error::Config(format!("trend multiplier {f} is negative")));
                }
                check_probability("loss_prevalence x trend", self.loss_prevalence * f)?;
            }
        }
        let (start, end) = self.calendar();
        if end - start + 1 > MAX_CALENDAR_YEARS {
            return Err(Error::Config(format!("calendar {start}-{end} is too long")));
        }
        Ok(())
    }

    pub fn interval_years(&self) -> u32 {
        self.panel_count
    }

    pub fn panel_years(&self) -> Vec<i32> {
        (0..self.panel_count as i32).map(|i| self.first_year + i).collect()
    }

    pub fn last_year(&self) -> i32 {
        self.first_year + self.panel_count as i32 - 1
    }

    pub fn n_clusters(&self) -> usize {
        self.strata.iter().map(|s| s.clusters).sum()
    }

    /// Calendar years that can affect any panel window or laser height.
    fn calendar(&self) -> (i32, i32) {
        let k = self.panel_count as i32;
        let start = (self.first_year - k + 1).min(self.als_years[0] - k + 1);
        (start, self.last_year())
    }

    fn prevalence_in(&self, year: i32) -> f64 {
        let mult = match &self.trend {
            Some(t) => {
                let i = (year - self.first_year).clamp(0, self.panel_count as i32 - 1);
                t[i as usize]
            }
            None => 1.0,
        };
        self.loss_prevalence * mult
    }

    /// Height (m) whose modelled stock equals `stock`; zero below the intercept.
    fn inverse_stock(&self, stock: f64) -> f64 {
        let [b0, b1, b2] = self.stock_model;
        let x = if b2 == 0.0 {
            if b1 == 0.0 {
                0.0
            } else {
                (stock - b0) / b1
            }
        } else {
            let disc = b1 * b1 - 4.0 * b2 * (b0 - stock);
            if disc < 0.0 {
                0.0
            } else {
                (-b1 + disc.sqrt()) / (2.0 * b2)
            }
        };
        x.max(0.0)
    }
}

fn positive_draw<R: Rng + ?Sized>(mean: f64, cv: f64, rng: &mut R) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    if cv == 0.0 {
        return mean;
    }
    LogNormal::from_mean_cv(mean, cv)
        .expect("validated lognormal parameters")
        .sample(rng)
}

#[derive(Debug, Clone, PartialEq)]
struct SubPlotTruth {
    /// Observed loss at each panel year.
    losses: Box<[f64]>,
    /// Stock at each panel year.
    stocks: Box<[f64]>,
    map_year: Option<i32>,
    forest: bool,
    /// Height at the cluster's laser acquisition.
    height: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct PopulationCluster {
    stratum: usize,
    als_year: Option<i32>,
    subplots: Vec<SubPlotTruth>,
}

/// A finite population of clusters with known per-panel values.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    config: PopulationConfig,
    strata: Vec<Stratum>,
    clusters: Vec<PopulationCluster>,
    /// Cluster index range of each stratum.
    ranges: Vec<std::ops::Range<usize>>,
}

pub fn generate_population(cfg: &PopulationConfig) -> Result<Population> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0);
    let k = cfg.panel_count as i32;
    let years = cfg.panel_years();
    let (cal_start, cal_end) = cfg.calendar();
    let noise = Normal::new(0.0, cfg.als_noise).expect("validated noise");

    let mut strata = Vec::new();
    let mut clusters = Vec::with_capacity(cfg.n_clusters());
    let mut ranges = Vec::new();
    for (h, sc) in cfg.strata.iter().enumerate() {
        strata.push(Stratum::new(sc.id.clone(), sc.lambda)?);
        let begin = clusters.len();
        for _ in 0..sc.clusters {
            let als_year = rng
                .random_bool(cfg.als_coverage)
                .then(|| rng.random_range(cfg.als_years[0]..=cfg.als_years[1]));
            let mut subplots = Vec::with_capacity(cfg.subplots_per_cluster as usize);
            for _ in 0..cfg.subplots_per_cluster {
                let stock = k as f64 * positive_draw(cfg.loss_mean, cfg.loss_cv, &mut rng);
                let phase = rng.random_range(0..k);
                let mut events = Vec::new();
                let mut map_year = None;
                let mut c = cal_start + phase;
                while c <= cal_end {
                    if rng.random_bool(cfg.prevalence_in(c)) {
                        events.push(c);
                        if !rng.random_bool(cfg.fcl_omission) {
                            map_year = Some(c);
                        }
                    } else if rng.random_bool(cfg.fcl_commission) {
                        map_year = Some(c);
                    }
                    c += k;
                }
                let forest = rng.random_bool(cfg.forest_share);
                let cleared = |s: i32| events.iter().any(|&e| e > s - k && e <= s);
                let stock_at = |s: i32| if cleared(s) { 0.0 } else { stock };
                let losses = years
                    .iter()
                    .map(|&t| {
                        let base = if rng.random_bool(cfg.baseline_probability) {
                            positive_draw(cfg.baseline_mean, cfg.baseline_cv, &mut rng)
                        } else {
                            0.0
                        };
                        base + if cleared(t) { stock / k as f64 } else { 0.0 }
                    })
                    .collect();
                let stocks = years.iter().map(|&t| stock_at(t)).collect();
                let height = als_year.map(|y| (cfg.inverse_stock(stock_at(y)) + noise.sample(&mut rng)).max(0.0));
                subplots.push(SubPlotTruth { losses, stocks, map_year, forest, height });
            }
            clusters.push(PopulationCluster { stratum: h, als_year, subplots });
        }
        ranges.push(begin..clusters.len());
    }
    Ok(Population { config: cfg.clone(), strata, clusters, ranges })
}

impl Population {
    pub fn config(&self) -> &PopulationConfig {
        &self.config
    }

    pub fn strata(&self) -> &[Stratum] {
        &self.strata
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn stratum_clusters(&self, h: usize) -> std::ops::Range<usize> {
        self.ranges[h].clone()
    }

    fn panel_index(&self, year: i32) -> Option<usize> {
        let i = year - self.config.first_year;
        (0..self.config.panel_count as i32).contains(&i).then_some(i as usize)
    }

    /// Exact total of a stratum in a panel year: area times the mean sub-plot loss.
    pub fn stratum_total(&self, h: usize, year: i32) -> Result<f64> {
        let t = self
            .panel_index(year)
            .ok_or_else(|| Error::Invalid(format!("{year} is not a panel year")))?;
        let (sum, count) = self.clusters[self.ranges[h].clone()]
            .iter()
            .flat_map(|c| &c.subplots)
            .fold((0.0, 0usize), |(s, n), sp| (s + sp.losses[t], n + 1));
        Ok(self.strata[h].lambda * sum / count as f64)
    }

    pub fn true_total(&self, year: i32) -> Result<f64> {
        (0..self.strata.len()).map(|h| self.stratum_total(h, year)).sum()
    }

    /// The cluster as measured in a panel year.
    pub fn observe(&self, cluster: usize, year: i32) -> Result<ClusterPlot> {
        let t = self
            .panel_index(year)
            .ok_or_else(|| Error::Invalid(format!("{year} is not a panel year")))?;
        let c = &self.clusters[cluster];
        let id = format!("{}-{cluster}", self.strata[c.stratum].id);
        let subplots = c
            .subplots
            .iter()
            .enumerate()
            .map(|(j, sp)| {
                let mut r = SubPlotRecord::new(id.clone(), j as u32 + 1, sp.losses[t])
                    .with_forest(sp.forest)
                    .with_fcl(sp.map_year)
                    .with_stock(sp.stocks[t]);
                if let (Some(h), Some(y)) = (sp.height, c.als_year) {
                    r = r.with_als(h, y);
                }
                r
            })
            .collect();
        ClusterPlot::new(id, year, self.strata[c.stratum].id.clone(), subplots)
    }

    /// Loss-year, height and acquisition-year grids of a stratum, one cell per sub-plot.
    pub fn stratum_grids(&self, h: usize) -> Result<(GridRaster, GridRaster, GridRaster)> {
        let cells: Vec<(&PopulationCluster, &SubPlotTruth)> = self.clusters[self.ranges[h].clone()]
            .iter()
            .flat_map(|c| c.subplots.iter().map(move |sp| (c, sp)))
            .collect();
        let area = self.strata[h].lambda / cells.len() as f64;
        let grid = |values: Vec<Option<f64>>| GridRaster::new(values.len(), 1, area, NODATA, values);
        let fcl = grid(cells.iter().map(|(_, sp)| Some(sp.map_year.map_or(0.0, f64::from))).collect())?;
        let height = grid(cells.iter().map(|(c, sp)| c.als_year.and(sp.height)).collect())?;
        let year = grid(
            cells
                .iter()
                .map(|(c, sp)| sp.height.and(c.als_year).map(f64::from))
                .collect(),
        )?;
        Ok((fcl, height, year))
    }

    /// Annual windows of every panel plus the pooled window.
    pub fn windows(&self) -> Vec<PanelWindow> {
        let k = self.config.interval_years();
        let mut w: Vec<PanelWindow> = self
            .config
            .panel_years()
            .into_iter()
            .map(|t| PanelWindow::annual(t).with_interval(k))
            .collect();
        if self.config.panel_count == k {
            w.push(
                PanelWindow::pooled(self.config.first_year, self.config.last_year())
                    .expect("ordered years")
                    .with_interval(k),
            );
        }
        w
    }

    /// Map aggregates of every stratum and window, with per-pixel heights.
    pub fn aggregate_table(&self) -> Result<AggregateTable> {
        let mut table = AggregateTable::new();
        for h in 0..self.strata.len() {
            let (fcl, height, year) = self.stratum_grids(h)?;
            for w in self.windows() {
                let agg = aggregate(&fcl, Some(&height), Some(&year), &w)?;
                table.insert(
                    &self.strata[h].id,
                    &w,
                    DomainSelector::All.label(),
                    AuxEntry {
                        aggregates: agg.aggregates,
                        pixels: Some(PixelHeights { heights: agg.als_heights, cell_area: agg.cell_area }),
                    },
                );
            }
        }
        Ok(table)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SampleDesign {
    /// Simple random sampling of `n` clusters, allocated to strata in
    /// proportion to their size.
    Srs { n: usize },
    /// Every `step`-th cluster of each stratum from a random start.
    Systematic { step: usize },
}

impl SampleDesign {
    pub fn is_srs(&self) -> bool {
        matches!(self, SampleDesign::Srs { .. })
    }
}

impl std::fmt::Display for SampleDesign {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SampleDesign::Srs { n } => write!(f, "srs(n={n})"),
            SampleDesign::Systematic { step } => write!(f, "systematic(step={step})"),
        }
    }
}

/// Largest-remainder proportional allocation.
fn allocate(n: usize, sizes: &[usize]) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let mut alloc: Vec<usize> = sizes.iter().map(|&s| n * s / total).collect();
    let mut rest: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .map(|(h, &s)| (h, (n * s) % total))
        .collect();
    rest.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let short = n - alloc.iter().sum::<usize>();
    for &(h, _) in rest.iter().take(short) {
        alloc[h] += 1;
    }
    alloc
}

/// Sampled cluster indices with their panel index, panels assigned
/// round-robin in draw order within each stratum.
pub fn draw_members<R: Rng + ?Sized>(pop: &Population, design: &SampleDesign, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    let panels = pop.config.panel_count as usize;
    let mut members = Vec::new();
    match *design {
        SampleDesign::Srs { n } => {
            if n > pop.n_clusters() {
                return Err(Error::Config(format!(
                    "sample size {n} exceeds the population of {} clusters",
                    pop.n_clusters()
                )));
            }
            let sizes: Vec<usize> = pop.ranges.iter().map(|r| r.len()).collect();
            for (h, n_h) in allocate(n, &sizes).into_iter().enumerate() {
                let range = pop.stratum_clusters(h);
                let mut idx = rand::seq::index::sample(rng, range.len(), n_h).into_vec();
                idx.sort_unstable();
                idx.shuffle(rng);
                members.extend(idx.into_iter().enumerate().map(|(i, c)| (range.start + c, i % panels)));
            }
        }
        SampleDesign::Systematic { step } => {
            if step == 0 {
                return Err(Error::Config("systematic step must be >= 1".into()));
            }
            for h in 0..pop.strata.len() {
                let range = pop.stratum_clusters(h);
                let start = rng.random_range(0..step.min(range.len()));
                members.extend(
                    (range.start + start..range.end)
                        .step_by(step)
                        .enumerate()
                        .map(|(i, c)| (c, i % panels)),
                );
            }
        }
    }
    Ok(members)
}

pub fn draw_sample<R: Rng + ?Sized>(pop: &Population, design: &SampleDesign, rng: &mut R) -> Result<SurveyDataset> {
    let years = pop.config.panel_years();
    let plots = draw_members(pop, design, rng)?
        .into_iter()
        .map(|(c, p)| pop.observe(c, years[p]))
        .collect::<Result<Vec<_>>>()?;
    SurveyDataset::new(pop.strata.clone(), plots, pop.config.interval_years())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub population: PopulationConfig,
    pub design: SampleDesign,
    pub replications: usize,
    pub estimators: Vec<Estimator>,
    pub outlier_rule: OutlierRule,
    pub clamp_negative: bool,
    /// Largest tolerated share of failed replications per estimator.
    pub max_failure_rate: f64,
    /// Upper limit on the number of samples enumerated in exhaustive mode.
    pub exhaustive_cap: u64,
}

/// Replications needed before the variance calibration is asserted.
pub const CALIBRATION_REPLICATIONS: usize = 10_000;

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            population: PopulationConfig::default(),
            design: SampleDesign::Srs { n: 3000 },
            replications: CALIBRATION_REPLICATIONS,
            estimators: vec![Estimator::Be, Estimator::MaFcl, Estimator::MaAlsFcl, Estimator::MaBest],
            outlier_rule: OutlierRule::default(),
            clamp_negative: true,
            max_failure_rate: 0.01,
            exhaustive_cap: 1_000_000,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        self.population.validate()?;
        if self.replications < 2 {
            return Err(Error::Config(format!("replications = {} but at least 2 are needed", self.replications)));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("no estimators".into()));
        }
        if self.estimators.contains(&Estimator::MaBest) && !self.estimators.iter().any(|e| e.is_model_assisted() && *e != Estimator::MaBest) {
            return Err(Error::Config("MA-BEST needs MA-FCL or MA-ALS-FCL among the estimators".into()));
        }
        check_probability("max_failure_rate", self.max_failure_rate)
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: SimulationConfig =
            toml::from_str(s).map_err(|e| Error::Format { what: "simulation config".into(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("simulation config serializes")
    }

    /// Average and pooled targets of every estimator, BEST last since it
    /// reuses the annual candidates.
    fn targets(&self) -> Vec<(Estimator, Period)> {
        let mut out: Vec<(Estimator, Period)> = self
            .estimators
            .iter()
            .filter(|&&e| e != Estimator::MaBest)
            .flat_map(|&e| [(e, Period::Average), (e, Period::Pooled)])
            .collect();
        if self.estimators.contains(&Estimator::MaBest) {
            out.push((Estimator::MaBest, Period::Average));
        }
        out
    }
}

/// One replication's outcome for one estimator and period.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Draw {
    total: f64,
    variance: f64,
    target: f64,
    /// Variance of BE over this variance in the same replication.
    re: Option<f64>,
}

/// Outcomes of one replication, parallel to `SimulationConfig::targets`.
fn replicate(
    pop: &Population,
    table: &AggregateTable,
    cfg: &SimulationConfig,
    targets: &[(Estimator, Period)],
    index: usize,
) -> Result<Vec<Option<Draw>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(pop.config.seed);
    rng.set_stream(index as u64 + 1);
    let ds = draw_sample(pop, &cfg.design, &mut rng)?;
    let opts = FitOptions {
        outlier_rule: cfg.outlier_rule,
        clamp_negative: cfg.clamp_negative,
        ..FitOptions::default()
    };
    let models = fit_models(&ds, &opts).models;
    let est = Estimation::new(&ds).with_models(&models).with_aggregates(table);

    let mut target = 0.0;
    for (h, s) in pop.strata.iter().enumerate() {
        let sizes = est.panel_sizes(&s.id);
        let n_h: usize = sizes.values().sum();
        for (&year, &n_t) in &sizes {
            target += n_t as f64 * pop.stratum_total(h, year)? / n_h as f64;
        }
    }
    let candidates: Vec<Estimator> = cfg
        .estimators
        .iter()
        .copied()
        .filter(|e| e.is_model_assisted() && *e != Estimator::MaBest)
        .collect();
    let mut per_stratum: Vec<Vec<Result<EstimateResult>>> = Vec::new();
    for s in &pop.strata {
        let mut out = Vec::with_capacity(targets.len());
        let mut annual_ok: Vec<(i32, EstimateResult)> = Vec::new();
        for &(e, period) in targets {
            let r = match (e, period) {
                (Estimator::MaBest, _) => est
                    .best_of(&s.id, annual_ok.iter().map(|(y, r)| (*y, r)))
                    .map(|(r, _)| r),
                (_, Period::Pooled) => est.stratum_pooled(e, &s.id),
                _ => {
                    let annual = est.stratum_annual_all(e, &s.id);
                    if candidates.contains(&e) {
                        annual_ok.extend(annual.iter().filter_map(|(&y, r)| r.as_ref().ok().map(|r| (y, r.clone()))));
                    }
                    est.average_of(&s.id, annual)
                }
            };
            out.push(r);
        }
        per_stratum.push(out);
    }
    let results: Vec<Option<EstimateResult>> = (0..targets.len())
        .map(|i| {
            let parts: Vec<EstimateResult> = per_stratum
                .iter()
                .map(|v| v[i].as_ref().ok().cloned())
                .collect::<Option<_>>()?;
            stratified_combine(&parts).ok()
        })
        .collect();
    let be_var = |period: Period| {
        targets
            .iter()
            .zip(&results)
            .find(|((e, p), _)| *e == Estimator::Be && *p == period)
            .and_then(|(_, r)| r.as_ref().map(|r| r.variance_total))
    };
    let be_vars = [be_var(Period::Average), be_var(Period::Pooled)];
    let be_var = |period: Period| if period == Period::Pooled { be_vars[1] } else { be_vars[0] };
    Ok(targets
        .iter()
        .zip(results)
        .map(|(&(_, period), r)| {
            r.map(|r| Draw {
                total: r.total,
                variance: r.variance_total,
                target,
                re: be_var(period).filter(|_| r.variance_total > 0.0).map(|v| v / r.variance_total),
            })
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: Estimator,
    pub period: Period,
    pub successes: usize,
    pub failures: usize,
    /// Mean over replications of the estimation target.
    pub true_total: f64,
    pub mean_estimate: f64,
    pub relative_bias: f64,
    /// Monte Carlo standard error of the mean estimate.
    pub mcse: f64,
    /// Empirical variance of the estimation error.
    pub empirical_variance: f64,
    pub mean_variance_estimate: f64,
    pub variance_ratio: f64,
    pub mean_re: Option<f64>,
}

impl EstimatorSummary {
    fn from_draws(estimator: Estimator, period: Period, draws: &[Option<Draw>]) -> Self {
        let ok: Vec<&Draw> = draws.iter().flatten().collect();
        let n = ok.len();
        let nf = n as f64;
        let mean = |f: &dyn Fn(&Draw) -> f64| if n == 0 { f64::NAN } else { ok.iter().map(|d| f(d)).sum::<f64>() / nf };
        let true_total = mean(&|d| d.target);
        let mean_estimate = mean(&|d| d.total);
        let bias = mean(&|d| d.total - d.target);
        let empirical_variance = if n < 2 {
            f64::NAN
        } else {
            ok.iter().map(|d| (d.total - d.target - bias).powi(2)).sum::<f64>() / (nf - 1.0)
        };
        let mean_variance_estimate = mean(&|d| d.variance);
        let res: Vec<f64> = ok.iter().filter_map(|d| d.re).collect();
        Self {
            estimator,
            period,
            successes: n,
            failures: draws.len() - n,
            true_total,
            mean_estimate,
            relative_bias: if true_total != 0.0 { bias / true_total } else { bias },
            mcse: (empirical_variance / nf).sqrt(),
            empirical_variance,
            mean_variance_estimate,
            variance_ratio: mean_variance_estimate / empirical_variance,
            mean_re: (!res.is_empty()).then(|| res.iter().sum::<f64>() / res.len() as f64),
        }
    }

    pub fn bias(&self) -> f64 {
        self.mean_estimate - self.true_total
    }

    pub fn label(&self) -> String {
        format!("{}/{}", self.estimator, self.period)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckStatus {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub status: CheckStatus,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub seed: u64,
    pub design: SampleDesign,
    pub population_clusters: usize,
    pub replications: usize,
    pub summaries: Vec<EstimatorSummary>,
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Fail)
    }

    pub fn summary(&self, estimator: Estimator, period: Period) -> Option<&EstimatorSummary> {
        self.summaries
            .iter()
            .find(|s| s.estimator == estimator && s.period == period)
    }
}

/// Bias within three Monte Carlo standard errors, variance calibration and
/// failure rate. BEST picks the smallest estimated variance each year, so its
/// variance estimate is not expected to be calibrated and it is only reported.
fn checks(cfg: &SimulationConfig, summaries: &[EstimatorSummary]) -> Vec<Check> {
    let mut out = Vec::new();
    for s in summaries {
        let label = s.label();
        let total = (s.successes + s.failures) as f64;
        let rate = s.failures as f64 / total;
        out.push(Check {
            name: format!("{label} failure rate"),
            status: if rate <= cfg.max_failure_rate { CheckStatus::Pass } else { CheckStatus::Fail },
            detail: format!("{}/{} failed (limit {})", s.failures, total, cfg.max_failure_rate),
        });
        if s.estimator == Estimator::MaBest {
            continue;
        }
        let bias = s.bias();
        let tolerance = if s.mcse > 0.0 { 3.0 * s.mcse } else { 1e-12 * s.true_total.abs() };
        out.push(Check {
            name: format!("{label} bias"),
            status: if s.successes >= 2 && bias.abs() <= tolerance { CheckStatus::Pass } else { CheckStatus::Fail },
            detail: format!("bias {bias:.6e} vs 3 MCSE {tolerance:.6e}"),
        });
        let status = if cfg.replications < CALIBRATION_REPLICATIONS {
            CheckStatus::Skipped
        } else {
            let r = s.variance_ratio;
            let ok = if cfg.design.is_srs() { (0.9..=1.1).contains(&r) } else { r >= 0.9 };
            if ok {
                CheckStatus::Pass
            } else {
                CheckStatus::Fail
            }
        };
        out.push(Check {
            name: format!("{label} variance calibration"),
            status,
            detail: format!(
                "mean variance estimate / empirical variance = {:.4}{}",
                s.variance_ratio,
                if status == CheckStatus::Skipped {
                    format!(" (asserted from {CALIBRATION_REPLICATIONS} replications)")
                } else {
                    String::new()
                }
            ),
        });
    }
    out
}

/// Draws `cfg.replications` samples from a fixed population, fits the
/// working models on each sample and summarizes the estimates.
pub fn run_on_population(pop: &Population, cfg: &SimulationConfig) -> Result<ValidationReport> {
    cfg.validate()?;
    let table = pop.aggregate_table()?;
    let targets = cfg.targets();
    let draws: Vec<Vec<Option<Draw>>> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| replicate(pop, &table, cfg, &targets, r))
        .collect::<Result<_>>()?;
    let summaries: Vec<EstimatorSummary> = targets
        .iter()
        .enumerate()
        .map(|(i, &(e, p))| {
            let column: Vec<Option<Draw>> = draws.iter().map(|d| d[i]).collect();
            EstimatorSummary::from_draws(e, p, &column)
        })
        .collect();
    Ok(ValidationReport {
        seed: pop.config.seed,
        design: cfg.design,
        population_clusters: pop.n_clusters(),
        replications: cfg.replications,
        checks: checks(cfg, &summaries),
        summaries,
    })
}

pub fn run_replications(cfg: &SimulationConfig) -> Result<ValidationReport> {
    cfg.validate()?;
    let pop = generate_population(&cfg.population)?;
    run_on_population(&pop, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExhaustiveRow {
    pub estimator: Estimator,
    pub true_total: f64,
    pub mean_estimate: f64,
    pub relative_bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExhaustiveReport {
    pub clusters: usize,
    pub sample_size: usize,
    pub year: i32,
    pub samples: u64,
    pub rows: Vec<ExhaustiveRow>,
}

fn binomial(n: usize, k: usize) -> Option<u64> {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return None;
        }
    }
    Some(acc as u64)
}

/// Every simple random sample of `n` clusters from a one-stratum population,
/// all measured in the last panel year, with working models fixed in advance:
/// the FCL class means of the whole population and the generating stock model.
pub fn exhaustive(pop: &Population, n: usize, cap: u64, clamp_negative: bool) -> Result<ExhaustiveReport> {
    if pop.strata.len() != 1 {
        return Err(Error::Config("exhaustive mode needs a single stratum".into()));
    }
    let big_n = pop.n_clusters();
    if n < 2 || n > big_n {
        return Err(Error::Config(format!("sample size {n} must be in 2..={big_n}")));
    }
    let samples = binomial(big_n, n).filter(|&c| c <= cap).ok_or_else(|| {
        Error::Config(format!("C({big_n}, {n}) samples exceed the cap of {cap}"))
    })?;
    let year = pop.config.last_year();
    let k = pop.config.interval_years();
    let w = PanelWindow::annual(year).with_interval(k);
    let stratum = &pop.strata[0];
    let plots = (0..big_n).map(|c| pop.observe(c, year)).collect::<Result<Vec<_>>>()?;
    let truth = pop.true_total(year)?;
    let table = pop.aggregate_table()?;
    let entry = table
        .get(&stratum.id, &w, DomainSelector::All.label())
        .expect("table covers every annual window");

    let d = DomainSelector::All;
    let be_values: Vec<ClusterValue> = plots.iter().map(|p| ClusterValue::new(p.m(), cluster_domain_mean(p, &d))).collect();
    let mut models: Vec<(Estimator, f64, Vec<ClusterValue>)> = Vec::new();
    if let Ok(fcl) = fit_fcl_on_plots(&plots, &w) {
        let [b0, b1, b2] = pop.config.stock_model;
        let als = AlsFclModel::new(CstockModelParams::supplied(b0, b1, b2), fcl, k).with_clamp(clamp_negative);
        let px = entry.pixels.as_ref().expect("population tables carry pixels");
        for model in [WorkingModel::Fcl(fcl), WorkingModel::AlsFcl(als)] {
            let synthetic = match &model {
                WorkingModel::Fcl(p) => synthetic_total_fcl(&entry.aggregates, p)?,
                WorkingModel::AlsFcl(m) => synthetic_total_als_fcl(
                    &entry.aggregates,
                    m,
                    AlsSynthesis::Pixels { heights: &px.heights, cell_area: px.cell_area },
                )?,
            };
            let res: Vec<ClusterValue> = plots
                .iter()
                .map(|p| {
                    let e: f64 = p.subplots().iter().map(|s| s.c_loss - predict_subplot(s, &model, &w)).sum();
                    ClusterValue::new(p.m(), e / p.m() as f64)
                })
                .collect();
            models.push((model.estimator(), synthetic, res));
        }
    }

    let tag = |e| EstimatorTag::new(e, Period::Annual(year)).with_stratum(stratum.id.clone());
    let mut sums = vec![0.0; 1 + models.len()];
    for combo in (0..big_n).combinations(n) {
        let be: Vec<ClusterValue> = combo.iter().map(|&i| be_values[i]).collect();
        sums[0] += be_estimate(&be, stratum.lambda, tag(Estimator::Be))?.total;
        for (slot, (e, synthetic, res)) in sums[1..].iter_mut().zip(&models) {
            let values = combo.iter().map(|&i| res[i]).collect();
            *slot += ma_total(*synthetic, &ResidualSample { values }, stratum.lambda, tag(*e))?.total;
        }
    }
    let estimators = std::iter::once(Estimator::Be).chain(models.iter().map(|m| m.0));
    let rows = estimators
        .zip(sums)
        .map(|(estimator, sum)| {
            let mean = sum / samples as f64;
            ExhaustiveRow {
                estimator,
                true_total: truth,
                mean_estimate: mean,
                relative_bias: if truth != 0.0 { (mean - truth) / truth } else { mean - truth },
            }
        })
        .collect();
    Ok(ExhaustiveReport { clusters: big_n, sample_size: n, year, samples, rows })
}

/// Rank correlation with average ranks for ties.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "paired samples");
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}
