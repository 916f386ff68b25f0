// SPDX-License-Identifier: Apache-2.0

//! Panel-structured cluster samples: data model, validation and ingestion.
//!
//! A [`SurveyDataset`] holds the strata of the inventory and its sample plots
//! (clusters of sub-plots). Every cluster belongs to exactly one annual panel
//! and one stratum. Sub-plots carry the observed annual carbon-stock loss plus
//! the auxiliary observations extracted for them: the mapped forest-cover-loss
//! year and, where laser data exist, the canopy height and acquisition year.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name of the domain flag every sub-plot carries.
pub const FOREST: &str = "forest";

/// Laser canopy height together with the year it was acquired.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlsObservation {
    /// Mean canopy height (m).
    pub height: f64,
    pub year: i32,
}

/// Land-use domain memberships of a sub-plot.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainFlags(BTreeMap<String, bool>);

impl DomainFlags {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forest(is_forest: bool) -> Self {
        let mut flags = Self::new();
        flags.set(FOREST, is_forest);
        flags
    }

    pub fn set(&mut self, name: &str, value: bool) {
        self.0.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<bool> {
        self.0.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }
}

/// One sub-plot observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubPlotRecord {
    pub cluster_id: String,
    pub subplot_index: u32,
    /// Observed gross annual carbon-stock loss (t/ha/a).
    pub c_loss: f64,
    pub domains: DomainFlags,
    /// Mapped year of canopy loss; `None` when the map shows no loss.
    pub fcl_loss_year: Option<i32>,
    pub als: Option<AlsObservation>,
    /// Field-observed carbon stock (t/ha) used for fitting the height model.
    pub c_stock: Option<f64>,
}

impl SubPlotRecord {
    pub fn new(cluster_id: impl Into<String>, subplot_index: u32, c_loss: f64) -> Self {
        Self {
            cluster_id: cluster_id.into(),
            subplot_index,
            c_loss,
            domains: DomainFlags::forest(true),
            fcl_loss_year: None,
            als: None,
            c_stock: None,
        }
    }

    pub fn with_forest(mut self, is_forest: bool) -> Self {
        self.domains.set(FOREST, is_forest);
        self
    }

    pub fn with_fcl(mut self, loss_year: Option<i32>) -> Self {
        self.fcl_loss_year = loss_year;
        self
    }

    pub fn with_als(mut self, height: f64, year: i32) -> Self {
        self.als = Some(AlsObservation { height, year });
        self
    }

    pub fn with_stock(mut self, c_stock: f64) -> Self {
        self.c_stock = Some(c_stock);
        self
    }

    fn check(&self) -> std::result::Result<(), String> {
        if !(self.c_loss >= 0.0) || !self.c_loss.is_finite() {
            return Err(format!("negative or non-finite loss {}", self.c_loss));
        }
        if let Some(als) = self.als {
            if !als.height.is_finite() {
                return Err(format!("non-finite ALS height {}", als.height));
            }
        }
        Ok(())
    }
}

/// A sample plot: a cluster of one or more sub-plots measured in one panel year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterPlot {
    cluster_id: String,
    panel_year: i32,
    stratum_id: String,
    subplots: Vec<SubPlotRecord>,
}

impl ClusterPlot {
    pub fn new(
        cluster_id: impl Into<String>,
        panel_year: i32,
        stratum_id: impl Into<String>,
        subplots: Vec<SubPlotRecord>,
    ) -> Result<Self> {
        let cluster_id = cluster_id.into();
        if subplots.is_empty() {
            return Err(Error::Invalid(format!(
                "cluster `{cluster_id}` has no sub-plots"
            )));
        }
        if let Some(s) = subplots.iter().find(|s| s.cluster_id != cluster_id) {
            return Err(Error::Invalid(format!(
                "sub-plot of cluster `{}` filed under cluster `{cluster_id}`",
                s.cluster_id
            )));
        }
        Ok(Self {
            cluster_id,
            panel_year,
            stratum_id: stratum_id.into(),
            subplots,
        })
    }

    pub fn cluster_id(&self) -> &str {
        &self.cluster_id
    }

    pub fn panel_year(&self) -> i32 {
        self.panel_year
    }

    pub fn stratum_id(&self) -> &str {
        &self.stratum_id
    }

    pub fn subplots(&self) -> &[SubPlotRecord] {
        &self.subplots
    }

    /// Number of sub-plots on land, `m_i`.
    pub fn m(&self) -> usize {
        self.subplots.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub id: String,
    /// Known area (ha).
    pub lambda: f64,
}

impl Stratum {
    pub fn new(id: impl Into<String>, lambda: f64) -> Result<Self> {
        let id = id.into();
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::Invalid(format!(
                "stratum `{id}` has non-positive area {lambda}"
            )));
        }
        Ok(Self { id, lambda })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyDataset {
    strata: Vec<Stratum>,
    plots: Vec<ClusterPlot>,
    interval_years: u32,
}

impl SurveyDataset {
    pub const DEFAULT_INTERVAL: u32 = 5;

    pub fn new(strata: Vec<Stratum>, plots: Vec<ClusterPlot>, interval_years: u32) -> Result<Self> {
        if interval_years == 0 {
            return Err(Error::Invalid("remeasurement interval must be >= 1".into()));
        }
        let mut ids = HashSet::new();
        for s in &strata {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Invalid(format!("stratum `{}` declared twice", s.id)));
            }
        }
        let mut seen = HashSet::new();
        for plot in &plots {
            if !ids.contains(plot.stratum_id()) {
                return Err(Error::Invalid(format!(
                    "cluster `{}` references unknown stratum `{}`",
                    plot.cluster_id(),
                    plot.stratum_id()
                )));
            }
            for s in plot.subplots() {
                if let Err(msg) = s.check() {
                    return Err(Error::Invalid(format!(
                        "cluster `{}` sub-plot {}: {msg}",
                        s.cluster_id, s.subplot_index
                    )));
                }
                if !seen.insert((s.cluster_id.as_str(), s.subplot_index)) {
                    return Err(Error::Invalid(format!(
                        "duplicate sub-plot ({}, {})",
                        s.cluster_id, s.subplot_index
                    )));
                }
            }
        }
        Ok(Self {
            strata,
            plots,
            interval_years,
        })
    }

    pub fn strata(&self) -> &[Stratum] {
        &self.strata
    }

    pub fn stratum(&self, id: &str) -> Option<&Stratum> {
        self.strata.iter().find(|s| s.id == id)
    }

    pub fn plots(&self) -> &[ClusterPlot] {
        &self.plots
    }

    pub fn interval_years(&self) -> u32 {
        self.interval_years
    }

    pub fn with_interval_years(mut self, interval_years: u32) -> Result<Self> {
        if interval_years == 0 {
            return Err(Error::Invalid("remeasurement interval must be >= 1".into()));
        }
        self.interval_years = interval_years;
        Ok(self)
    }

    pub fn n_subplots(&self) -> usize {
        self.plots.iter().map(ClusterPlot::m).sum()
    }

    /// Restrict to the plots of one stratum.
    pub fn stratum_plots<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a ClusterPlot> + 'a {
        self.plots.iter().filter(move |p| p.stratum_id() == id)
    }

    /// Sorted distinct panel years.
    pub fn panel_years(&self) -> Vec<i32> {
        let mut years: Vec<i32> = self.plots.iter().map(ClusterPlot::panel_year).collect();
        years.sort_unstable();
        years.dedup();
        years
    }

    /// First and last panel year of a complete remeasurement cycle: the panel
    /// years must be exactly `interval_years` consecutive years.
    pub fn pooled_span(&self) -> Result<(i32, i32)> {
        let years = self.panel_years();
        let k = self.interval_years as usize;
        let consecutive = years.windows(2).all(|w| w[1] == w[0] + 1);
        if years.len() != k || !consecutive {
            return Err(Error::Invalid(format!(
                "pooled estimation needs {k} consecutive panel years, found {years:?}"
            )));
        }
        Ok((years[0], years[k - 1]))
    }
}

/// Which sub-plots count towards an estimate.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum DomainSelector {
    /// Every land-use category.
    #[default]
    All,
    Named(String),
}

impl DomainSelector {
    pub fn forest() -> Self {
        DomainSelector::Named(FOREST.to_string())
    }

    pub fn parse(s: &str) -> Self {
        match s {
            "all" | "" => DomainSelector::All,
            other => DomainSelector::Named(other.to_string()),
        }
    }

    pub fn label(&self) -> &str {
        match self {
            DomainSelector::All => "all",
            DomainSelector::Named(name) => name,
        }
    }

    /// Domain indicator `I_d` of one sub-plot.
    pub fn indicator(&self, s: &SubPlotRecord) -> bool {
        match self {
            DomainSelector::All => true,
            DomainSelector::Named(name) => s.domains.get(name).unwrap_or(false),
        }
    }

    /// A named domain has to be recorded on every sub-plot.
    pub fn validate(&self, ds: &SurveyDataset) -> Result<()> {
        if let DomainSelector::Named(name) = self {
            let missing = ds
                .plots()
                .iter()
                .flat_map(ClusterPlot::subplots)
                .any(|s| s.domains.get(name).is_none());
            if missing {
                return Err(Error::UnknownDomain(name.clone()));
            }
        }
        Ok(())
    }
}

/// Cluster value `y_i`: domain-restricted sub-plot sum divided by `m_i`.
///
/// The divisor is the number of sub-plots on land whatever their domain.
pub fn cluster_domain_mean(plot: &ClusterPlot, d: &DomainSelector) -> f64 {
    let sum: f64 = plot
        .subplots()
        .iter()
        .filter(|s| d.indicator(s))
        .map(|s| s.c_loss)
        .sum();
    sum / plot.m() as f64
}

/// Partition the plots into annual samples keyed by panel year.
pub fn split_panels(ds: &SurveyDataset) -> BTreeMap<i32, Vec<&ClusterPlot>> {
    split_plots(ds.plots().iter())
}

pub fn split_plots<'a>(
    plots: impl IntoIterator<Item = &'a ClusterPlot>,
) -> BTreeMap<i32, Vec<&'a ClusterPlot>> {
    let mut panels: BTreeMap<i32, Vec<&ClusterPlot>> = BTreeMap::new();
    for plot in plots {
        panels.entry(plot.panel_year()).or_default().push(plot);
    }
    panels
}

/// Which laser metric the height column holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeightMetric {
    /// Mean height of first returns.
    #[default]
    FirstReturns,
    /// Mean height of all returns.
    AllReturns,
}

/// Column names and delimiter of the plot file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    pub delimiter: u8,
    pub cluster_id: String,
    pub subplot_index: String,
    pub panel_year: String,
    pub stratum_id: String,
    pub c_loss: String,
    pub forest: String,
    pub fcl_loss_year: String,
    pub als_height: String,
    pub als_year: String,
    /// Optional column; absent column means no stock observations.
    pub c_stock: String,
    /// Columns with this prefix become extra domain flags named by the rest.
    pub domain_prefix: String,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            delimiter: b',',
            cluster_id: "cluster_id".into(),
            subplot_index: "subplot_index".into(),
            panel_year: "panel_year".into(),
            stratum_id: "stratum_id".into(),
            c_loss: "c_loss".into(),
            forest: "forest".into(),
            fcl_loss_year: "fcl_loss_year".into(),
            als_height: "als_height".into(),
            als_year: "als_year".into(),
            c_stock: "c_stock".into(),
            domain_prefix: "domain_".into(),
        }
    }
}

impl Schema {
    /// Read heights from `als_height_all` instead of the first-return column.
    pub fn with_height_metric(mut self, metric: HeightMetric) -> Self {
        self.als_height = match metric {
            HeightMetric::FirstReturns => "als_height".into(),
            HeightMetric::AllReturns => "als_height_all".into(),
        };
        self
    }

    pub fn with_delimiter(mut self, delimiter: u8) -> Self {
        self.delimiter = delimiter;
        self
    }
}

/// Load and validate a plot file and its strata file.
pub fn load_dataset(plots: &Path, strata: &Path, schema: &Schema) -> Result<SurveyDataset> {
    let pf = File::open(plots).map_err(|e| Error::io(plots, e))?;
    let sf = File::open(strata).map_err(|e| Error::io(strata, e))?;
    read_dataset(pf, sf, schema)
}

pub fn read_strata<R: Read>(input: R, delimiter: u8) -> Result<Vec<Stratum>> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = rdr.headers()?.clone();
    let id_col = column(&headers, "stratum_id")?;
    let area_col = column(&headers, "lambda_ha")?;
    let mut strata = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let lambda: f64 = parse_field(&rec, area_col, "lambda_ha", row)?;
        let stratum = Stratum::new(&rec[id_col], lambda)
            .map_err(|e| Error::InvalidRow { row, message: e.to_string() })?;
        if strata.iter().any(|s: &Stratum| s.id == stratum.id) {
            return Err(Error::InvalidRow {
                row,
                message: format!("stratum `{}` declared twice", stratum.id),
            });
        }
        strata.push(stratum);
    }
    Ok(strata)
}

/// Parse a plot file against already-read strata. Row numbers in errors are
/// file line numbers (the header is line 1).
pub fn read_dataset<R1: Read, R2: Read>(plots: R1, strata: R2, schema: &Schema) -> Result<SurveyDataset> {
    let strata = read_strata(strata, schema.delimiter)?;
    let known: HashSet<&str> = strata.iter().map(|s| s.id.as_str()).collect();

    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .trim(csv::Trim::All)
        .from_reader(plots);
    let headers = rdr.headers()?.clone();
    let c_cluster = column(&headers, &schema.cluster_id)?;
    let c_index = column(&headers, &schema.subplot_index)?;
    let c_year = column(&headers, &schema.panel_year)?;
    let c_stratum = column(&headers, &schema.stratum_id)?;
    let c_loss = column(&headers, &schema.c_loss)?;
    let c_forest = column(&headers, &schema.forest)?;
    let c_fcl = column(&headers, &schema.fcl_loss_year)?;
    let c_height = column(&headers, &schema.als_height)?;
    let c_als_year = column(&headers, &schema.als_year)?;
    let c_stock = headers.iter().position(|h| h == schema.c_stock);
    let extra_domains: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| {
            h.strip_prefix(schema.domain_prefix.as_str())
                .filter(|name| !name.is_empty())
                .map(|name| (i, name.to_string()))
        })
        .collect();

    // cluster id -> (position in `groups`, first row)
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut groups: Vec<(String, i32, String, usize, Vec<SubPlotRecord>)> = Vec::new();
    let mut seen: HashSet<(String, u32)> = HashSet::new();

    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let cluster = rec[c_cluster].to_string();
        if cluster.is_empty() {
            return Err(Error::InvalidRow { row, message: "empty cluster_id".into() });
        }
        let subplot_index: u32 = parse_field(&rec, c_index, &schema.subplot_index, row)?;
        let panel_year: i32 = parse_field(&rec, c_year, &schema.panel_year, row)?;
        let stratum = rec[c_stratum].to_string();
        if !known.contains(stratum.as_str()) {
            return Err(Error::UnknownStratum { row, stratum });
        }
        let loss: f64 = parse_field(&rec, c_loss, &schema.c_loss, row)?;
        if !loss.is_finite() {
            return Err(Error::Parse {
                row,
                column: schema.c_loss.clone(),
                value: rec[c_loss].to_string(),
            });
        }
        if loss < 0.0 {
            return Err(Error::NegativeLoss { row, value: loss });
        }
        let forest = parse_bool(&rec[c_forest]).ok_or_else(|| Error::Parse {
            row,
            column: schema.forest.clone(),
            value: rec[c_forest].to_string(),
        })?;
        let fcl: Option<i32> = parse_optional(&rec, c_fcl, &schema.fcl_loss_year, row)?;
        let height: Option<f64> = parse_optional(&rec, c_height, &schema.als_height, row)?;
        let als_year: Option<i32> = parse_optional(&rec, c_als_year, &schema.als_year, row)?;
        let als = match (height, als_year) {
            (Some(height), Some(year)) if height.is_finite() => Some(AlsObservation { height, year }),
            (None, None) => None,
            (Some(h), Some(_)) => {
                return Err(Error::InvalidRow { row, message: format!("non-finite ALS height {h}") })
            }
            _ => {
                return Err(Error::InvalidRow {
                    row,
                    message: "invariant violated: als_height and als_year must be both present or both absent"
                        .into(),
                })
            }
        };
        let c_stock_value: Option<f64> = match c_stock {
            Some(c) => parse_optional(&rec, c, &schema.c_stock, row)?,
            None => None,
        };

        let mut domains = DomainFlags::forest(forest);
        for (col, name) in &extra_domains {
            let v = parse_bool(&rec[*col]).ok_or_else(|| Error::Parse {
                row,
                column: headers[*col].to_string(),
                value: rec[*col].to_string(),
            })?;
            domains.set(name, v);
        }

        if !seen.insert((cluster.clone(), subplot_index)) {
            return Err(Error::DuplicateSubplot { row, cluster, index: subplot_index });
        }

        let record = SubPlotRecord {
            cluster_id: cluster.clone(),
            subplot_index,
            c_loss: loss,
            domains,
            fcl_loss_year: fcl,
            als,
            c_stock: c_stock_value,
        };
        match index.get(&cluster) {
            Some(&g) => {
                let group = &mut groups[g];
                if group.1 != panel_year || group.2 != stratum {
                    return Err(Error::InvalidRow {
                        row,
                        message: format!(
                            "cluster `{cluster}` first seen on row {} with panel {} / stratum `{}`",
                            group.3, group.1, group.2
                        ),
                    });
                }
                group.4.push(record);
            }
            None => {
                index.insert(cluster.clone(), groups.len());
                groups.push((cluster, panel_year, stratum, row, vec![record]));
            }
        }
    }

    let plots = groups
        .into_iter()
        .map(|(id, year, stratum, _, subplots)| ClusterPlot::new(id, year, stratum, subplots))
        .collect::<Result<Vec<_>>>()?;
    SurveyDataset::new(strata, plots, SurveyDataset::DEFAULT_INTERVAL)
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::MissingColumn { column: name.to_string() })
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, col: usize, name: &str, row: usize) -> Result<T> {
    let raw = rec.get(col).unwrap_or("");
    raw.parse().map_err(|_| Error::Parse {
        row,
        column: name.to_string(),
        value: raw.to_string(),
    })
}

fn parse_optional<T: std::str::FromStr>(
    rec: &csv::StringRecord,
    col: usize,
    name: &str,
    row: usize,
) -> Result<Option<T>> {
    match rec.get(col) {
        None | Some("") => Ok(None),
        Some(_) => parse_field(rec, col, name, row).map(Some),
    }
}

fn parse_bool(raw: &str) -> Option<bool> {
    match raw.to_ascii_lowercase().as_str() {
        "1" | "true" | "t" | "yes" | "y" => Some(true),
        "0" | "false" | "f" | "no" | "n" => Some(false),
        _ => None,
    }
}
