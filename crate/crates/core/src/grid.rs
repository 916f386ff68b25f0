// SPDX-License-Identifier: Apache-2.0

//! Plain-text grids and the map aggregates the synthetic estimators need.
//!
//! Grid files start with four `key value` header lines (`ncols`, `nrows`,
//! `cellarea_ha`, `nodata`, any order) followed by whitespace-separated cell
//! values in row-major order. In a forest-cover-loss grid a cell holds the
//! mapped loss year, `0` for no loss, or the no-data value for cells outside
//! the population.

use std::fmt::Write as _;
use std::path::Path;

use crate::assisted::PopulationAggregates;
use crate::error::{Error, Result};
use crate::models::{als_eligible, predict_auxiliary, recode_fcl, AlsFclModel, PanelWindow, WorkingModel};
use crate::survey::AlsObservation;

#[derive(Debug, Clone, PartialEq)]
pub struct GridRaster {
    ncols: usize,
    nrows: usize,
    cell_area: f64,
    nodata: f64,
    values: Vec<Option<f64>>,
}

impl GridRaster {
    pub fn new(ncols: usize, nrows: usize, cell_area: f64, nodata: f64, values: Vec<Option<f64>>) -> Result<Self> {
        if ncols.checked_mul(nrows) != Some(values.len()) {
            return Err(Error::Grid(format!(
                "{ncols} x {nrows} header but {} cells",
                values.len()
            )));
        }
        if !(cell_area > 0.0) || !cell_area.is_finite() {
            return Err(Error::Grid(format!("cell area must be positive, got {cell_area}")));
        }
        Ok(Self { ncols, nrows, cell_area, nodata, values })
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn cell_area(&self) -> f64 {
        self.cell_area
    }

    pub fn nodata(&self) -> f64 {
        self.nodata
    }

    pub fn values(&self) -> &[Option<f64>] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.values[row * self.ncols + col]
    }

    /// `cell_area · Σ value` over cells with data.
    pub fn area_weighted_sum(&self) -> f64 {
        self.cell_area * self.values.iter().flatten().sum::<f64>()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let (mut ncols, mut nrows, mut cell_area, mut nodata) = (None, None, None, None);
        for _ in 0..4 {
            let line = lines.next().ok_or_else(|| Error::Grid("truncated header".into()))?;
            let mut parts = line.split_whitespace();
            let (Some(key), Some(value), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Grid(format!("bad header line `{line}`")));
            };
            let bad = || Error::Grid(format!("bad value in header line `{line}`"));
            match key.to_ascii_lowercase().as_str() {
                "ncols" => ncols = Some(value.parse::<usize>().map_err(|_| bad())?),
                "nrows" => nrows = Some(value.parse::<usize>().map_err(|_| bad())?),
                "cellarea_ha" => cell_area = Some(value.parse::<f64>().map_err(|_| bad())?),
                "nodata" => nodata = Some(value.parse::<f64>().map_err(|_| bad())?),
                other => return Err(Error::Grid(format!("unknown header key `{other}`"))),
            }
        }
        let (Some(ncols), Some(nrows), Some(cell_area), Some(nodata)) = (ncols, nrows, cell_area, nodata) else {
            return Err(Error::Grid("header needs ncols, nrows, cellarea_ha and nodata".into()));
        };
        let mut values = Vec::with_capacity(ncols.saturating_mul(nrows));
        for token in lines.flat_map(str::split_whitespace) {
            let v: f64 = token
                .parse()
                .map_err(|_| Error::Grid(format!("cell value `{token}` is not a number")))?;
            values.push(if v == nodata || (v.is_nan() && nodata.is_nan()) { None } else { Some(v) });
        }
        Self::new(ncols, nrows, cell_area, nodata, values)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "ncols {}\nnrows {}\ncellarea_ha {}\nnodata {}\n",
            self.ncols, self.nrows, self.cell_area, self.nodata
        );
        for row in self.values.chunks(self.ncols.max(1)) {
            let cells: Vec<String> = row
                .iter()
                .map(|v| format!("{}", v.unwrap_or(self.nodata)))
                .collect();
            let _ = writeln!(out, "{}", cells.join(" "));
        }
        out
    }

    fn same_shape(&self, other: &GridRaster, what: &str) -> Result<()> {
        if self.ncols != other.ncols || self.nrows != other.nrows {
            return Err(Error::Grid(format!(
                "{what} grid is {}x{}, loss grid is {}x{}",
                other.ncols, other.nrows, self.ncols, self.nrows
            )));
        }
        if (self.cell_area - other.cell_area).abs() > 1e-12 * self.cell_area {
            return Err(Error::Grid(format!(
                "{what} grid cell area {} differs from {}",
                other.cell_area, self.cell_area
            )));
        }
        Ok(())
    }
}

pub fn load_grid(path: &Path) -> Result<GridRaster> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    GridRaster::parse(&text)
}

/// Map inputs of one stratum; all grids must share shape and cell area.
#[derive(Debug, Clone, Copy)]
pub struct MapLayers<'a> {
    pub fcl_years: &'a GridRaster,
    pub als_height: Option<&'a GridRaster>,
    pub als_year: Option<&'a GridRaster>,
    /// Cells with a zero or no-data mask value are outside the domain.
    pub domain_mask: Option<&'a GridRaster>,
}

impl<'a> MapLayers<'a> {
    pub fn new(fcl_years: &'a GridRaster) -> Self {
        Self { fcl_years, als_height: None, als_year: None, domain_mask: None }
    }

    pub fn with_als(mut self, height: Option<&'a GridRaster>, year: Option<&'a GridRaster>) -> Self {
        self.als_height = height;
        self.als_year = year;
        self
    }

    pub fn with_mask(mut self, mask: Option<&'a GridRaster>) -> Self {
        self.domain_mask = mask;
        self
    }

    fn check(&self) -> Result<()> {
        let base = self.fcl_years;
        if let Some(g) = self.als_height {
            base.same_shape(g, "ALS height")?;
            if self.als_year.is_none() {
                return Err(Error::Grid("ALS heights given without ALS years".into()));
            }
        }
        if let Some(g) = self.als_year {
            base.same_shape(g, "ALS year")?;
        }
        if let Some(g) = self.domain_mask {
            base.same_shape(g, "domain mask")?;
        }
        Ok(())
    }

    fn cells(&self) -> impl Iterator<Item = Result<Cell>> + '_ {
        (0..self.fcl_years.values.len()).map(move |i| {
            if let Some(mask) = self.domain_mask {
                if !matches!(mask.values[i], Some(v) if v != 0.0) {
                    return Ok(Cell::Outside);
                }
            }
            let Some(raw) = self.fcl_years.values[i] else {
                return Ok(Cell::Outside);
            };
            let loss_year = if raw == 0.0 {
                None
            } else if raw.fract() == 0.0 && raw > 0.0 && raw <= i32::MAX as f64 {
                Some(raw as i32)
            } else {
                return Err(Error::Grid(format!("cell {i}: `{raw}` is not a loss year")));
            };
            let year = self.als_year.and_then(|g| g.values[i]);
            let year = match year {
                Some(y) if y.fract() == 0.0 => Some(y as i32),
                Some(y) => return Err(Error::Grid(format!("cell {i}: `{y}` is not an ALS year"))),
                None => None,
            };
            let height = self.als_height.and_then(|g| g.values[i]);
            Ok(Cell::Inside { loss_year, als_year: year, height })
        })
    }
}

enum Cell {
    Outside,
    Inside {
        loss_year: Option<i32>,
        als_year: Option<i32>,
        height: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregation {
    pub aggregates: PopulationAggregates,
    /// Cells left out for missing loss status or outside the domain mask.
    pub excluded_cells: usize,
    pub cell_area: f64,
    /// Heights of the laser-covered flagged cells in cell order.
    pub als_heights: Vec<f64>,
}

/// Areas of the flagged, laser-covered and unflagged parts of the map.
pub fn aggregate(
    fcl_years: &GridRaster,
    als_height: Option<&GridRaster>,
    als_year: Option<&GridRaster>,
    w: &PanelWindow,
) -> Result<Aggregation> {
    aggregate_layers(&MapLayers::new(fcl_years).with_als(als_height, als_year), w)
}

pub fn aggregate_layers(layers: &MapLayers<'_>, w: &PanelWindow) -> Result<Aggregation> {
    layers.check()?;
    let (mut n_cl, mut n_n, mut excluded, mut eligible_without_height) = (0usize, 0usize, 0usize, 0usize);
    let mut heights = Vec::new();
    for cell in layers.cells() {
        match cell? {
            Cell::Outside => excluded += 1,
            Cell::Inside { loss_year, als_year, height } => {
                if !recode_fcl(loss_year, w) {
                    n_n += 1;
                } else if als_eligible(als_year, w) {
                    match height {
                        Some(h) => heights.push(h),
                        None => {
                            eligible_without_height += 1;
                            n_cl += 1;
                        }
                    }
                } else {
                    n_cl += 1;
                }
            }
        }
    }
    if layers.als_height.is_none() && eligible_without_height > 0 {
        return Err(Error::Grid(format!(
            "{eligible_without_height} flagged cells have eligible ALS years but no height grid was given"
        )));
    }
    let area = layers.fcl_years.cell_area;
    let with_als = layers.als_year.is_some();
    let aggregates = if with_als {
        let xbar = (!heights.is_empty()).then(|| heights.iter().sum::<f64>() / heights.len() as f64);
        PopulationAggregates {
            lambda: area * (n_cl + n_n + heights.len()) as f64,
            lambda_cl: area * n_cl as f64,
            lambda_n: area * n_n as f64,
            lambda_l: Some(area * heights.len() as f64),
            xbar_l: xbar,
        }
    } else {
        PopulationAggregates {
            lambda: area * (n_cl + n_n) as f64,
            lambda_cl: area * n_cl as f64,
            lambda_n: area * n_n as f64,
            lambda_l: None,
            xbar_l: None,
        }
    };
    Ok(Aggregation {
        aggregates,
        excluded_cells: excluded,
        cell_area: area,
        als_heights: heights,
    })
}

/// Per-cell predictions of the ALS-FCL model; cells outside the population
/// carry no data.
pub fn synthetic_map(
    fcl_years: &GridRaster,
    als_height: Option<&GridRaster>,
    als_year: Option<&GridRaster>,
    model: &AlsFclModel,
    w: &PanelWindow,
) -> Result<GridRaster> {
    let layers = MapLayers::new(fcl_years).with_als(als_height, als_year);
    layers.check()?;
    let working = WorkingModel::AlsFcl(*model);
    let values = layers
        .cells()
        .map(|cell| {
            Ok(match cell? {
                Cell::Outside => None,
                Cell::Inside { loss_year, als_year, height } => {
                    let als = match (als_year, height) {
                        (Some(year), Some(height)) => Some(AlsObservation { height, year }),
                        _ => None,
                    };
                    Some(predict_auxiliary(loss_year, als, &working, w))
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    GridRaster::new(fcl_years.ncols, fcl_years.nrows, fcl_years.cell_area, fcl_years.nodata, values)
}
