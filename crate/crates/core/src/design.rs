// SPDX-License-Identifier: Apache-2.0

//! Basic-expansion estimation from field data only.
//!
//! Cluster values enter as `(m_i, y_i)` pairs. The mean per sub-plot is the
//! ratio `Σ m_i y_i / Σ m_i`, and its variance follows the ratio-of-means form
//! for clusters of varying size,
//!
//! ```text
//! V(Ŷ) = 1 / (n (n - 1)) · Σ (m_i / m̄)² (y_i - Ŷ)²
//! ```
//!
//! Systematic samples are treated as simple random samples, which makes the
//! variance conservative.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Value of one cluster: number of sub-plots on land and the cluster mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterValue {
    pub m: usize,
    pub y: f64,
}

impl ClusterValue {
    pub fn new(m: usize, y: f64) -> Self {
        Self { m, y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Estimator {
    #[serde(rename = "BE")]
    Be,
    #[serde(rename = "MA-FCL")]
    MaFcl,
    #[serde(rename = "MA-ALS-FCL")]
    MaAlsFcl,
    /// Per-year lowest-variance selection, averaged over panels.
    #[serde(rename = "MA-BEST")]
    MaBest,
}

impl Estimator {
    pub fn label(self) -> &'static str {
        match self {
            Estimator::Be => "BE",
            Estimator::MaFcl => "MA-FCL",
            Estimator::MaAlsFcl => "MA-ALS-FCL",
            Estimator::MaBest => "MA-BEST",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "be" => Some(Estimator::Be),
            "ma-fcl" | "fcl" => Some(Estimator::MaFcl),
            "ma-als-fcl" | "als-fcl" => Some(Estimator::MaAlsFcl),
            "ma-best" | "best" => Some(Estimator::MaBest),
            _ => None,
        }
    }

    pub fn is_model_assisted(self) -> bool {
        self != Estimator::Be
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Period {
    Annual(i32),
    Average,
    Pooled,
}

impl fmt::Display for Period {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Period::Annual(year) => write!(f, "{year}"),
            Period::Average => f.write_str("average"),
            Period::Pooled => f.write_str("pooled"),
        }
    }
}

/// Provenance of an estimate.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EstimatorTag {
    pub estimator: Estimator,
    pub period: Period,
    /// `None` for a combination over strata.
    pub stratum: Option<String>,
    pub domain: String,
}

impl EstimatorTag {
    pub fn new(estimator: Estimator, period: Period) -> Self {
        Self {
            estimator,
            period,
            stratum: None,
            domain: "all".into(),
        }
    }

    pub fn with_stratum(mut self, stratum: impl Into<String>) -> Self {
        self.stratum = Some(stratum.into());
        self
    }

    pub fn with_domain(mut self, domain: impl Into<String>) -> Self {
        self.domain = domain.into();
        self
    }

    pub fn with_period(mut self, period: Period) -> Self {
        self.period = period;
        self
    }

    pub fn with_estimator(mut self, estimator: Estimator) -> Self {
        self.estimator = estimator;
        self
    }

    fn without_stratum(&self) -> Self {
        Self {
            stratum: None,
            ..self.clone()
        }
    }
}

impl fmt::Display for EstimatorTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}/{}",
            self.estimator,
            self.period,
            self.stratum.as_deref().unwrap_or("combined"),
            self.domain
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    /// Estimated total (t/a).
    pub total: f64,
    /// Estimated variance of the total (t²).
    pub variance_total: f64,
    /// Number of clusters used.
    pub n: usize,
    pub tag: EstimatorTag,
}

impl EstimateResult {
    /// Rebuild an estimate from a published total and relative standard error.
    pub fn from_se_pct(total: f64, se_pct: f64, n: usize, tag: EstimatorTag) -> Self {
        let se = se_pct / 100.0 * total.abs();
        Self {
            total,
            variance_total: se * se,
            n,
            tag,
        }
    }

    pub fn standard_error(&self) -> f64 {
        self.variance_total.sqrt()
    }

    /// Standard error in percent of the total; `None` for a zero total.
    pub fn se_pct(&self) -> Option<f64> {
        (self.total != 0.0).then(|| 100.0 * self.standard_error() / self.total.abs())
    }
}

/// Weighted mean per sub-plot and the expanded total `(Ŷ, λŶ)`.
pub fn be_total(sample: &[ClusterValue], lambda: f64) -> Result<(f64, f64)> {
    let mean = weighted_mean(sample)?;
    Ok((mean, lambda * mean))
}

pub(crate) fn weighted_mean(sample: &[ClusterValue]) -> Result<f64> {
    let weight: usize = sample.iter().map(|c| c.m).sum();
    if sample.is_empty() || weight == 0 {
        return Err(Error::EmptySample("stratum/panel".into()));
    }
    let sum: f64 = sample.iter().map(|c| c.m as f64 * c.y).sum();
    Ok(sum / weight as f64)
}

/// Variance of the mean and of the total `(V(Ŷ), λ² V(Ŷ))`.
pub fn be_variance(sample: &[ClusterValue], lambda: f64) -> Result<(f64, f64)> {
    let n = sample.len();
    if n < 2 {
        return Err(Error::VarianceUndefined {
            context: "stratum/panel".into(),
            n,
        });
    }
    let mean = weighted_mean(sample)?;
    let m_bar = sample.iter().map(|c| c.m as f64).sum::<f64>() / n as f64;
    let ss: f64 = sample
        .iter()
        .map(|c| {
            let w = c.m as f64 / m_bar;
            let d = c.y - mean;
            w * w * d * d
        })
        .sum();
    let var_mean = ss / (n as f64 * (n as f64 - 1.0));
    Ok((var_mean, lambda * lambda * var_mean))
}

pub fn be_estimate(sample: &[ClusterValue], lambda: f64, tag: EstimatorTag) -> Result<EstimateResult> {
    let (_, total) = be_total(sample, lambda)?;
    let (_, variance_total) = be_variance(sample, lambda)?;
    Ok(EstimateResult {
        total,
        variance_total,
        n: sample.len(),
        tag,
    })
}

/// Estimates per annual panel; errors carry the panel year.
pub fn be_annual(
    panels: &BTreeMap<i32, Vec<ClusterValue>>,
    lambda: f64,
    tag: &EstimatorTag,
) -> Result<BTreeMap<i32, EstimateResult>> {
    panels
        .iter()
        .map(|(&year, sample)| {
            be_estimate(sample, lambda, tag.clone().with_period(Period::Annual(year)))
                .map(|r| (year, r))
                .map_err(|e| e.in_panel(year))
        })
        .collect()
}

/// Panel-size weighted average of annual estimates.
///
/// `t = Σ n_t t_t / n_P` and `V = Σ n_t² V_t / n_P²`, with `n_t` counted in
/// clusters.
pub fn average_annual(
    results: &BTreeMap<i32, EstimateResult>,
    n_t: &BTreeMap<i32, usize>,
) -> Result<EstimateResult> {
    if results.len() != n_t.len() || results.keys().zip(n_t.keys()).any(|(a, b)| a != b) {
        return Err(Error::MismatchedYears);
    }
    let n_p: usize = n_t.values().sum();
    let first = results
        .values()
        .next()
        .ok_or_else(|| Error::EmptySample("average over zero panels".into()))?;
    if n_p == 0 {
        return Err(Error::EmptySample("average over zero plots".into()));
    }
    let n_p_f = n_p as f64;
    let mut total = 0.0;
    let mut variance = 0.0;
    for (year, r) in results {
        let w = n_t[year] as f64;
        total += w * r.total;
        variance += w * w * r.variance_total;
    }
    Ok(EstimateResult {
        total: total / n_p_f,
        variance_total: variance / (n_p_f * n_p_f),
        n: n_p,
        tag: first.tag.clone().with_period(Period::Average),
    })
}

/// Sum independent per-stratum estimates.
pub fn stratified_combine(per_stratum: &[EstimateResult]) -> Result<EstimateResult> {
    let first = per_stratum
        .first()
        .ok_or_else(|| Error::EmptySample("combination over zero strata".into()))?;
    let key = first.tag.without_stratum();
    let mut out = EstimateResult {
        total: 0.0,
        variance_total: 0.0,
        n: 0,
        tag: key.clone(),
    };
    for r in per_stratum {
        let other = r.tag.without_stratum();
        if other != key {
            return Err(Error::MixedTags(key.to_string(), other.to_string()));
        }
        out.total += r.total;
        out.variance_total += r.variance_total;
        out.n += r.n;
    }
    Ok(out)
}
