// SPDX-License-Identifier: Apache-2.0

//! Model-assisted (difference) estimation.
//!
//! The estimate is the synthetic total of the working model over the map plus
//! a correction: the basic-expansion estimate of the mean residual, expanded
//! by the stratum area. Its variance is the basic-expansion variance computed
//! on residuals instead of observations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::design::{self, average_annual, ClusterValue, EstimateResult, Estimator, EstimatorTag};
use crate::error::{Error, Result};
use crate::models::{predict_subplot, AlsFclModel, FclModelParams, PanelWindow, WorkingModel};
use crate::survey::{ClusterPlot, DomainSelector};

const AREA_RTOL: f64 = 1e-9;

/// Known map areas (ha) of one stratum and window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationAggregates {
    pub lambda: f64,
    /// Flagged area outside eligible laser coverage.
    pub lambda_cl: f64,
    /// Unflagged area.
    pub lambda_n: f64,
    /// Flagged area with eligible laser coverage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_l: Option<f64>,
    /// Mean laser height (m) over `lambda_l`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xbar_l: Option<f64>,
}

impl PopulationAggregates {
    pub fn fcl(lambda_cl: f64, lambda_n: f64) -> Self {
        Self {
            lambda: lambda_cl + lambda_n,
            lambda_cl,
            lambda_n,
            lambda_l: None,
            xbar_l: None,
        }
    }

    pub fn als_fcl(lambda_cl: f64, lambda_l: f64, lambda_n: f64, xbar_l: Option<f64>) -> Self {
        Self {
            lambda: lambda_cl + lambda_l + lambda_n,
            lambda_cl,
            lambda_n,
            lambda_l: Some(lambda_l),
            xbar_l,
        }
    }

    /// All flagged area, with or without laser coverage.
    pub fn flagged_area(&self) -> f64 {
        self.lambda_cl + self.lambda_l.unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [Some(self.lambda), Some(self.lambda_cl), Some(self.lambda_n), self.lambda_l];
        if parts.iter().flatten().any(|a| !(*a >= 0.0) || !a.is_finite()) {
            return Err(Error::Aggregates(format!("negative or non-finite area in {self:?}")));
        }
        let sum = self.lambda_cl + self.lambda_n + self.lambda_l.unwrap_or(0.0);
        if (sum - self.lambda).abs() > AREA_RTOL * self.lambda.max(1.0) {
            return Err(Error::Aggregates(format!(
                "parts sum to {sum} but lambda is {}",
                self.lambda
            )));
        }
        let has_als = matches!(self.lambda_l, Some(l) if l > 0.0);
        match (has_als, self.xbar_l) {
            (true, None) => Err(Error::Aggregates("lambda_l > 0 but xbar_l is missing".into())),
            (false, Some(_)) => Err(Error::Aggregates("xbar_l given without laser-covered area".into())),
            (true, Some(x)) if !x.is_finite() => Err(Error::Aggregates("non-finite xbar_l".into())),
            _ => Ok(()),
        }
    }
}

/// Cluster residual means `e_i = Σ_j I_d (y_ij - ŷ_ij) / m_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSample {
    pub values: Vec<ClusterValue>,
}

impl ResidualSample {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn residuals<'a>(
    plots: impl IntoIterator<Item = &'a ClusterPlot>,
    model: &WorkingModel,
    d: &DomainSelector,
    w: &PanelWindow,
) -> ResidualSample {
    let values = plots
        .into_iter()
        .map(|plot| {
            let sum: f64 = plot
                .subplots()
                .iter()
                .filter(|s| d.indicator(s))
                .map(|s| s.c_loss - predict_subplot(s, model, w))
                .sum();
            ClusterValue::new(plot.m(), sum / plot.m() as f64)
        })
        .collect();
    ResidualSample { values }
}

/// Synthetic total of the FCL model: `λ_N ȳ_N + λ_CL ȳ_CL` (t/a).
pub fn synthetic_total_fcl(a: &PopulationAggregates, p: &FclModelParams) -> Result<f64> {
    a.validate()?;
    Ok(a.lambda_n * p.ybar_n + a.flagged_area() * p.ybar_cl)
}

/// How the laser-covered part of the synthetic total is evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlsSynthesis<'a> {
    /// Stock model at the mean height, annualized.
    MeanHeight,
    /// Stock model at the mean height without annualization, i.e. in stock units.
    Unannualized,
    /// Sum of per-pixel predictions over the laser-covered flagged cells.
    Pixels { heights: &'a [f64], cell_area: f64 },
}

/// Synthetic total of the ALS-FCL model (t/a).
pub fn synthetic_total_als_fcl(
    a: &PopulationAggregates,
    m: &AlsFclModel,
    mode: AlsSynthesis<'_>,
) -> Result<f64> {
    a.validate()?;
    let lambda_l = a.lambda_l.unwrap_or(0.0);
    let rest = a.lambda_n * m.fcl.ybar_n + a.lambda_cl * m.fcl.ybar_cl;
    if lambda_l == 0.0 {
        return Ok(rest);
    }
    let covered = match mode {
        AlsSynthesis::MeanHeight => {
            let xbar = a.xbar_l.ok_or_else(|| Error::Aggregates("xbar_l missing".into()))?;
            lambda_l * m.annual_loss(xbar)
        }
        AlsSynthesis::Unannualized => {
            let xbar = a.xbar_l.ok_or_else(|| Error::Aggregates("xbar_l missing".into()))?;
            lambda_l * m.stock(xbar)
        }
        AlsSynthesis::Pixels { heights, cell_area } => {
            let area = heights.len() as f64 * cell_area;
            if (area - lambda_l).abs() > AREA_RTOL * lambda_l.max(1.0) {
                return Err(Error::Aggregates(format!(
                    "{} pixels of {cell_area} ha do not cover lambda_l = {lambda_l}",
                    heights.len()
                )));
            }
            cell_area * heights.iter().map(|&h| m.annual_loss(h)).sum::<f64>()
        }
    };
    Ok(covered + rest)
}

/// Total and variance of the difference estimator.
pub fn ma_total(synthetic: f64, res: &ResidualSample, lambda: f64, tag: EstimatorTag) -> Result<EstimateResult> {
    let (mean_residual, correction) = design::be_total(&res.values, lambda)?;
    let (_, variance_total) = design::be_variance(&res.values, lambda)?;
    debug_assert!((correction - lambda * mean_residual).abs() <= 1e-12 * correction.abs().max(1.0));
    Ok(EstimateResult {
        total: synthetic + correction,
        variance_total,
        n: res.len(),
        tag,
    })
}

/// `V(BE) / V(MA)`.
pub fn relative_efficiency(be: &EstimateResult, ma: &EstimateResult) -> Result<f64> {
    if ma.variance_total == 0.0 {
        return Err(Error::ZeroVariance);
    }
    if !(be.variance_total > 0.0) || !(ma.variance_total > 0.0) {
        return Err(Error::Invalid(format!(
            "relative efficiency needs positive variances, got {} and {}",
            be.variance_total, ma.variance_total
        )));
    }
    Ok(be.variance_total / ma.variance_total)
}

fn priority(e: Estimator) -> u8 {
    match e {
        Estimator::MaAlsFcl => 0,
        Estimator::MaFcl => 1,
        Estimator::Be => 2,
        Estimator::MaBest => 3,
    }
}

/// Lowest-variance candidate of every year; ties go to ALS-FCL, then FCL, then BE.
pub fn best_selection(
    per_year: &BTreeMap<i32, Vec<EstimateResult>>,
) -> Result<BTreeMap<i32, EstimateResult>> {
    per_year
        .iter()
        .map(|(&year, candidates)| {
            candidates
                .iter()
                .min_by(|a, b| {
                    a.variance_total
                        .total_cmp(&b.variance_total)
                        .then(priority(a.tag.estimator).cmp(&priority(b.tag.estimator)))
                })
                .map(|best| (year, best.clone()))
                .ok_or(Error::NoCandidates(year))
        })
        .collect()
}

/// Average of the per-year best candidates, weighted by panel size.
pub fn best_combination(
    per_year: &BTreeMap<i32, Vec<EstimateResult>>,
    n_t: &BTreeMap<i32, usize>,
) -> Result<EstimateResult> {
    let selected = best_selection(per_year)?;
    let mut avg = average_annual(&selected, n_t)?;
    avg.tag.estimator = Estimator::MaBest;
    Ok(avg)
}
