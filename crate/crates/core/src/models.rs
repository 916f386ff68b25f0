// SPDX-License-Identifier: Apache-2.0

//! Working models that predict sub-plot carbon-stock loss from auxiliary data.
//!
//! The FCL model predicts one of two class means depending on whether the
//! forest-cover-loss map shows a loss inside the panel's window. The ALS-FCL
//! model additionally predicts the lost stock from the pre-disturbance laser
//! height with a quadratic stock model wherever laser data acquired before the
//! window are available, and falls back to the FCL class means elsewhere.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{Estimator, Period};
use crate::error::{Error, Result};
use crate::survey::{AlsObservation, ClusterPlot, HeightMetric, SubPlotRecord, SurveyDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WindowKind {
    Annual(i32),
    Pooled { first: i32, last: i32 },
}

/// Reference period of an annual panel or of a pooled remeasurement cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PanelWindow {
    pub kind: WindowKind,
    pub interval_years: u32,
}

impl PanelWindow {
    pub fn annual(year: i32) -> Self {
        Self {
            kind: WindowKind::Annual(year),
            interval_years: SurveyDataset::DEFAULT_INTERVAL,
        }
    }

    pub fn pooled(first: i32, last: i32) -> Result<Self> {
        if first > last {
            return Err(Error::Invalid(format!(
                "pooled window starts after it ends ({first} > {last})"
            )));
        }
        Ok(Self {
            kind: WindowKind::Pooled { first, last },
            interval_years: SurveyDataset::DEFAULT_INTERVAL,
        })
    }

    pub fn with_interval(mut self, interval_years: u32) -> Self {
        assert!(interval_years >= 1, "remeasurement interval must be >= 1");
        self.interval_years = interval_years;
        self
    }

    /// Last year of the window.
    pub fn year(&self) -> i32 {
        match self.kind {
            WindowKind::Annual(t) => t,
            WindowKind::Pooled { last, .. } => last,
        }
    }

    fn first_panel(&self) -> i32 {
        match self.kind {
            WindowKind::Annual(t) => t,
            WindowKind::Pooled { first, .. } => first,
        }
    }

    /// Inclusive range of mapped loss years recoded to 1.
    pub fn loss_years(&self) -> (i32, i32) {
        let back = self.interval_years as i32 - 1;
        (self.first_panel() - back, self.year())
    }

    /// Latest laser acquisition year that still precedes every loss in the window.
    pub fn als_cutoff(&self) -> i32 {
        self.first_panel() - self.interval_years as i32
    }

    pub fn period(&self) -> Period {
        match self.kind {
            WindowKind::Annual(t) => Period::Annual(t),
            WindowKind::Pooled { .. } => Period::Pooled,
        }
    }

    /// `2018` for an annual window, `2014-2018` for a pooled one.
    pub fn label(&self) -> String {
        match self.kind {
            WindowKind::Annual(t) => t.to_string(),
            WindowKind::Pooled { first, last } => format!("{first}-{last}"),
        }
    }

    pub fn parse(label: &str) -> Result<Self> {
        let bad = || Error::Format {
            what: "panel window".into(),
            message: format!("`{label}` is neither `YYYY` nor `YYYY-YYYY`"),
        };
        match label.trim().split_once('-') {
            None => Ok(Self::annual(label.trim().parse().map_err(|_| bad())?)),
            Some((a, b)) => {
                let first = a.trim().parse().map_err(|_| bad())?;
                let last = b.trim().parse().map_err(|_| bad())?;
                Self::pooled(first, last)
            }
        }
    }
}

impl fmt::Display for PanelWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Binary FCL flag of a mapped loss year within the window.
pub fn recode_fcl(loss_year: Option<i32>, w: &PanelWindow) -> bool {
    let (from, to) = w.loss_years();
    matches!(loss_year, Some(y) if y >= from && y <= to)
}

/// Whether laser data of this year describe the stock before any loss in the window.
pub fn als_eligible(als_year: Option<i32>, w: &PanelWindow) -> bool {
    matches!(als_year, Some(y) if y <= w.als_cutoff())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FclModelParams {
    /// Mean loss on sub-plots flagged by FCL (t/ha/a).
    pub ybar_cl: f64,
    /// Mean loss on unflagged sub-plots (t/ha/a).
    pub ybar_n: f64,
    pub n_cl: usize,
    pub n_n: usize,
}

impl FclModelParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.ybar_cl >= 0.0
            && self.ybar_n >= 0.0
            && self.ybar_cl.is_finite()
            && self.ybar_n.is_finite()
            && self.n_cl >= 1
            && self.n_n >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("invalid FCL model parameters {self:?}")))
        }
    }

    pub fn predict(&self, flagged: bool) -> f64 {
        if flagged {
            self.ybar_cl
        } else {
            self.ybar_n
        }
    }
}

/// Class means of the loss with and without an FCL flag.
pub fn fit_fcl_model(subplots: &[(f64, bool)]) -> Result<FclModelParams> {
    let (mut sum_cl, mut n_cl, mut sum_n, mut n_n) = (0.0, 0usize, 0.0, 0usize);
    for &(loss, flag) in subplots {
        if flag {
            sum_cl += loss;
            n_cl += 1;
        } else {
            sum_n += loss;
            n_n += 1;
        }
    }
    if n_cl == 0 {
        return Err(Error::DegenerateModel { class: "FCL = 1".into() });
    }
    if n_n == 0 {
        return Err(Error::DegenerateModel { class: "FCL = 0".into() });
    }
    Ok(FclModelParams {
        ybar_cl: sum_cl / n_cl as f64,
        ybar_n: sum_n / n_n as f64,
        n_cl,
        n_n,
    })
}

/// Fit the FCL model on every sub-plot of the given plots, all land uses.
pub fn fit_fcl_on_plots<'a>(
    plots: impl IntoIterator<Item = &'a ClusterPlot>,
    w: &PanelWindow,
) -> Result<FclModelParams> {
    let pairs: Vec<(f64, bool)> = plots
        .into_iter()
        .flat_map(ClusterPlot::subplots)
        .map(|s| (s.c_loss, recode_fcl(s.fcl_loss_year, w)))
        .collect();
    fit_fcl_model(&pairs)
}

/// Quadratic stock model `cs = β₀ + β₁ x + β₂ x²` in laser height `x` (m).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CstockModelParams {
    pub beta0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub fit_n: usize,
}

impl CstockModelParams {
    /// Coefficients taken from elsewhere rather than fitted here.
    pub fn supplied(beta0: f64, beta1: f64, beta2: f64) -> Self {
        Self { beta0, beta1, beta2, fit_n: 0 }
    }

    /// Unclamped stock (t/ha).
    pub fn stock(&self, height: f64) -> f64 {
        self.beta0 + height * (self.beta1 + self.beta2 * height)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.beta0, self.beta1, self.beta2].iter().all(|b| b.is_finite()) {
            Ok(())
        } else {
            Err(Error::Invalid(format!("non-finite stock model coefficients {self:?}")))
        }
    }
}

/// One observation for fitting the stock model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CstockPair {
    pub height: f64,
    pub stock: f64,
    /// A loss was mapped between laser acquisition and field measurement.
    pub disturbed_since_als: bool,
}

/// Which pairs to drop before fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierRule {
    pub exclude_disturbed: bool,
    /// Refit once without pairs whose absolute residual exceeds this (t/ha).
    pub residual_cutoff: Option<f64>,
}

impl Default for OutlierRule {
    fn default() -> Self {
        Self {
            exclude_disturbed: true,
            residual_cutoff: None,
        }
    }
}

impl OutlierRule {
    pub fn keep_all() -> Self {
        Self {
            exclude_disturbed: false,
            residual_cutoff: None,
        }
    }
}

/// Sub-plots with both laser height and observed stock, from any panel.
pub fn cstock_pairs<'a>(plots: impl IntoIterator<Item = &'a ClusterPlot>) -> Vec<CstockPair> {
    plots
        .into_iter()
        .flat_map(|p| {
            let measured = p.panel_year();
            p.subplots().iter().filter_map(move |s| {
                let als = s.als?;
                let stock = s.c_stock?;
                let disturbed = matches!(s.fcl_loss_year, Some(y) if y >= als.year && y <= measured);
                Some(CstockPair {
                    height: als.height,
                    stock,
                    disturbed_since_als: disturbed,
                })
            })
        })
        .collect()
}

/// Ordinary least squares fit of the quadratic stock model.
pub fn fit_cstock_model(pairs: &[CstockPair], rule: &OutlierRule) -> Result<CstockModelParams> {
    let retained: Vec<(f64, f64)> = pairs
        .iter()
        .filter(|p| !(rule.exclude_disturbed && p.disturbed_since_als))
        .map(|p| (p.height, p.stock))
        .collect();
    let fit = least_squares_quadratic(&retained)?;
    let Some(cutoff) = rule.residual_cutoff else {
        return Ok(fit);
    };
    let trimmed: Vec<(f64, f64)> = retained
        .into_iter()
        .filter(|&(x, y)| (y - fit.stock(x)).abs() <= cutoff)
        .collect();
    least_squares_quadratic(&trimmed)
}

fn least_squares_quadratic(points: &[(f64, f64)]) -> Result<CstockModelParams> {
    let distinct: HashSet<u64> = points.iter().map(|&(x, _)| x.to_bits()).collect();
    if distinct.len() < 3 {
        return Err(Error::RankDeficient {
            distinct: distinct.len(),
            retained: points.len(),
        });
    }
    // Centre and scale heights so the normal matrix stays well conditioned.
    let n = points.len() as f64;
    let centre = points.iter().map(|p| p.0).sum::<f64>() / n;
    let scale = points
        .iter()
        .map(|p| (p.0 - centre).abs())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let design = DMatrix::from_fn(points.len(), 3, |i, j| {
        let z = (points[i].0 - centre) / scale;
        z.powi(j as i32)
    });
    let response = DVector::from_iterator(points.len(), points.iter().map(|p| p.1));
    let svd = design.svd(true, true);
    let gamma = svd
        .solve(&response, 1e-12)
        .map_err(|e| Error::Invalid(format!("least squares failed: {e}")))?;
    let (g0, g1, g2) = (gamma[0], gamma[1], gamma[2]);
    // Expand γ₀ + γ₁ z + γ₂ z², z = (x - c) / s, into powers of x.
    let s2 = scale * scale;
    Ok(CstockModelParams {
        beta0: g0 - g1 * centre / scale + g2 * centre * centre / s2,
        beta1: g1 / scale - 2.0 * g2 * centre / s2,
        beta2: g2 / s2,
        fit_n: points.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlsFclModel {
    pub cstock: CstockModelParams,
    pub fcl: FclModelParams,
    pub interval_years: u32,
    pub clamp_negative: bool,
}

impl AlsFclModel {
    pub fn new(cstock: CstockModelParams, fcl: FclModelParams, interval_years: u32) -> Self {
        Self {
            cstock,
            fcl,
            interval_years,
            clamp_negative: true,
        }
    }

    pub fn with_clamp(mut self, clamp_negative: bool) -> Self {
        self.clamp_negative = clamp_negative;
        self
    }

    /// Predicted stock at a height, clamped at zero when configured.
    pub fn stock(&self, height: f64) -> f64 {
        let cs = self.cstock.stock(height);
        if self.clamp_negative {
            cs.max(0.0)
        } else {
            cs
        }
    }

    /// Annual loss if the whole stock at this height was removed.
    pub fn annual_loss(&self, height: f64) -> f64 {
        self.stock(height) / self.interval_years as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WorkingModel {
    Fcl(FclModelParams),
    AlsFcl(AlsFclModel),
}

impl WorkingModel {
    pub fn estimator(&self) -> Estimator {
        match self {
            WorkingModel::Fcl(_) => Estimator::MaFcl,
            WorkingModel::AlsFcl(_) => Estimator::MaAlsFcl,
        }
    }

    pub fn fcl(&self) -> &FclModelParams {
        match self {
            WorkingModel::Fcl(p) => p,
            WorkingModel::AlsFcl(m) => &m.fcl,
        }
    }
}

/// Prediction from the auxiliary values of one location (sub-plot or map cell).
pub fn predict_auxiliary(
    fcl_loss_year: Option<i32>,
    als: Option<AlsObservation>,
    model: &WorkingModel,
    w: &PanelWindow,
) -> f64 {
    let flagged = recode_fcl(fcl_loss_year, w);
    match model {
        WorkingModel::Fcl(p) => p.predict(flagged),
        WorkingModel::AlsFcl(m) => match als {
            Some(a) if flagged && als_eligible(Some(a.year), w) => m.annual_loss(a.height),
            _ => m.fcl.predict(flagged),
        },
    }
}

pub fn predict_subplot(s: &SubPlotRecord, model: &WorkingModel, w: &PanelWindow) -> f64 {
    predict_auxiliary(s.fcl_loss_year, s.als, model, w)
}

/// Parameter file contents: one FCL model per window plus the stock model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSet {
    pub interval_years: u32,
    pub clamp_negative: bool,
    #[serde(default)]
    pub height_metric: HeightMetric,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cstock: Option<CstockModelParams>,
    /// Keyed by window label (`2018`, `2014-2018`).
    #[serde(default)]
    pub fcl: BTreeMap<String, FclModelParams>,
}

impl Default for ModelSet {
    fn default() -> Self {
        Self {
            interval_years: SurveyDataset::DEFAULT_INTERVAL,
            clamp_negative: true,
            height_metric: HeightMetric::default(),
            cstock: None,
            fcl: BTreeMap::new(),
        }
    }
}

impl ModelSet {
    pub fn validate(&self) -> Result<()> {
        if self.interval_years == 0 {
            return Err(Error::Invalid("interval_years must be >= 1".into()));
        }
        for (label, p) in &self.fcl {
            PanelWindow::parse(label)?;
            p.validate()?;
        }
        if let Some(c) = &self.cstock {
            c.validate()?;
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let set: ModelSet = toml::from_str(s).map_err(|e| Error::Format {
            what: "model parameter file".into(),
            message: e.to_string(),
        })?;
        set.validate()?;
        Ok(set)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("model set serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }

    pub fn fcl_for(&self, w: &PanelWindow) -> Option<&FclModelParams> {
        self.fcl.get(&w.label())
    }

    /// Working model of an estimator for a window.
    pub fn working_model(&self, estimator: Estimator, w: &PanelWindow) -> Result<WorkingModel> {
        let fcl = *self.fcl_for(w).ok_or_else(|| {
            Error::Invalid(format!("no FCL model parameters for window {w}"))
        })?;
        match estimator {
            Estimator::MaFcl => Ok(WorkingModel::Fcl(fcl)),
            Estimator::MaAlsFcl => {
                let cstock = self
                    .cstock
                    .ok_or_else(|| Error::Invalid("no stock model parameters".into()))?;
                Ok(WorkingModel::AlsFcl(
                    AlsFclModel::new(cstock, fcl, self.interval_years).with_clamp(self.clamp_negative),
                ))
            }
            other => Err(Error::Invalid(format!("{other} has no working model"))),
        }
    }
}
