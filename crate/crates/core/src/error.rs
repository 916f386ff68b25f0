// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed delimited text: {0}")]
    Csv(#[from] csv::Error),

    #[error("missing required column `{column}`")]
    MissingColumn { column: String },

    #[error("row {row}: cannot parse `{value}` in column `{column}`")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error("row {row}: negative loss {value} (c_loss must be >= 0)")]
    NegativeLoss { row: usize, value: f64 },

    #[error("row {row}: {message}")]
    InvalidRow { row: usize, message: String },

    #[error("row {row}: unknown stratum `{stratum}`")]
    UnknownStratum { row: usize, stratum: String },

    #[error("row {row}: duplicate sub-plot ({cluster}, {index})")]
    DuplicateSubplot {
        row: usize,
        cluster: String,
        index: u32,
    },

    #[error("domain `{0}` is not recorded on every sub-plot")]
    UnknownDomain(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("no plots in {0}")]
    EmptySample(String),

    #[error("variance undefined for {context}: n = {n} < 2")]
    VarianceUndefined { context: String, n: usize },

    #[error("panel {year}: {source}")]
    Panel {
        year: i32,
        #[source]
        source: Box<Error>,
    },

    #[error("year sets differ between estimates and panel sizes")]
    MismatchedYears,

    #[error("cannot combine estimates with different tags: `{0}` vs `{1}`")]
    MixedTags(String, String),

    #[error("degenerate working model: no sub-plots with {class}")]
    DegenerateModel { class: String },

    #[error("rank-deficient design: {distinct} distinct heights among {retained} retained pairs (need 3)")]
    RankDeficient { distinct: usize, retained: usize },

    #[error("inconsistent population aggregates: {0}")]
    Aggregates(String),

    #[error("relative efficiency undefined: model-assisted variance is zero")]
    ZeroVariance,

    #[error("no candidate estimates for year {0}")]
    NoCandidates(i32),

    #[error("malformed grid: {0}")]
    Grid(String),

    #[error("invalid simulation config: {0}")]
    Config(String),

    #[error("cannot parse {what}: {message}")]
    Format { what: String, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_panel(self, year: i32) -> Self {
        Error::Panel {
            year,
            source: Box::new(self),
        }
    }

    /// True for failures of the estimation itself (empty classes, too few
    /// plots, zero variance) as opposed to bad input.
    pub fn is_degeneracy(&self) -> bool {
        match self {
            Error::Panel { source, .. } => source.is_degeneracy(),
            Error::EmptySample(_)
            | Error::VarianceUndefined { .. }
            | Error::DegenerateModel { .. }
            | Error::RankDeficient { .. }
            | Error::ZeroVariance
            | Error::NoCandidates(_) => true,
            _ => false,
        }
    }
}
