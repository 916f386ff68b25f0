// SPDX-License-Identifier: Apache-2.0

//! Property checks shared by the `properties` and `acceptance` targets. Each
//! runs a deterministic proptest runner and reports the first failure.

#![allow(dead_code)]

use std::collections::BTreeMap;

use itertools::Itertools;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

use cstock_core::assisted::{
    ma_total, relative_efficiency, residuals, synthetic_total_als_fcl, synthetic_total_fcl, AlsSynthesis,
    PopulationAggregates,
};
use cstock_core::design::{
    average_annual, be_estimate, be_total, be_variance, ClusterValue, EstimateResult, Estimator, EstimatorTag, Period,
};
use cstock_core::grid::{aggregate, synthetic_map, GridRaster};
use cstock_core::models::{
    fit_cstock_model, fit_fcl_model, predict_subplot, recode_fcl, AlsFclModel, CstockModelParams, CstockPair,
    FclModelParams, OutlierRule, PanelWindow, WorkingModel,
};
use cstock_core::sim::{generate_population, run_on_population, PopulationConfig, SampleDesign, SimulationConfig, StratumConfig};
use cstock_core::survey::{cluster_domain_mean, split_panels, ClusterPlot, DomainSelector, Stratum, SubPlotRecord, SurveyDataset};

pub type Property = (&'static str, fn() -> Result<(), String>);

pub fn all() -> Vec<Property> {
    vec![
        ("all-domain cluster value is the sub-plot mean", all_domain_mean),
        ("domain membership only moves its own sub-plot", domain_monotone),
        ("panels partition the sample", panels_partition),
        ("pooled BE equals average BE on equal panels", pooled_equals_average),
        ("BE variance is shift invariant and scales quadratically", variance_shift_scale),
        ("BE is design-unbiased over all samples of 8 clusters", brute_force_unbiased),
        ("annual windows overlap and each loss year is in k windows", window_overlap),
        ("FCL fit reproduces its class means", fcl_class_means),
        ("stock model residuals are orthogonal to 1, x, x^2", cstock_orthogonal),
        ("ALS-FCL reduces to FCL without eligible laser data", als_reduces_to_fcl),
        ("clamped stock predictions are never negative", clamp_behaviour),
        ("MA equals BE under the constant-mean model", ma_constant_model),
        ("MA is invariant to a joint shift of predictions and synthetic total", ma_joint_shift),
        ("RE exceeds 1 exactly when MA variance is smaller, and ignores scale", re_scale),
        ("map areas add up to the defined cells", aggregate_partition),
        ("aggregation ignores cell order", aggregate_permutation),
        ("aggregation adds over chunks", aggregate_additive),
        ("laser mean height and map sum agree with the pixel synthesis", map_consistency),
        ("populations and reports are reproducible from the seed", seed_determinism),
    ]
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config { cases, failure_persistence: None, ..Config::default() },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

fn run<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    runner(cases).run(&strategy, test).map_err(|e| e.to_string())
}

fn close(a: f64, b: f64, rtol: f64) -> bool {
    (a - b).abs() <= rtol * a.abs().max(b.abs()).max(1.0)
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(TestCaseError::fail(format!($($fmt)+)));
        }
    };
}

fn loss() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.0), 0.0..60.0f64]
}

fn plot(id: usize, year: i32, losses: &[f64], members: &[bool]) -> ClusterPlot {
    let id = format!("c{id}");
    let subplots = losses
        .iter()
        .zip(members)
        .enumerate()
        .map(|(j, (&y, &f))| SubPlotRecord::new(id.clone(), j as u32 + 1, y).with_forest(f))
        .collect();
    ClusterPlot::new(id, year, "S", subplots).unwrap()
}

fn sub_plots() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (1usize..6).prop_flat_map(|m| (prop::collection::vec(loss(), m), prop::collection::vec(any::<bool>(), m)))
}

pub fn all_domain_mean() -> Result<(), String> {
    run(256, sub_plots(), |(y, f)| {
        let p = plot(0, 2018, &y, &f);
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        ensure!(close(cluster_domain_mean(&p, &DomainSelector::All), mean, 1e-12), "mean mismatch");
        Ok(())
    })
}

pub fn domain_monotone() -> Result<(), String> {
    run(256, (sub_plots(), any::<prop::sample::Index>()), |((y, f), idx)| {
        let j = idx.index(y.len());
        let d = DomainSelector::forest();
        let before = cluster_domain_mean(&plot(0, 2018, &y, &f), &d);
        let mut g = f.clone();
        g[j] = !g[j];
        let after = cluster_domain_mean(&plot(0, 2018, &y, &g), &d);
        let sign = if g[j] { 1.0 } else { -1.0 };
        ensure!(
            close(after - before, sign * y[j] / y.len() as f64, 1e-12),
            "flipping sub-plot {j} moved the value by {}",
            after - before
        );
        Ok(())
    })
}

fn dataset(plots: Vec<ClusterPlot>, lambda: f64) -> SurveyDataset {
    SurveyDataset::new(vec![Stratum::new("S", lambda).unwrap()], plots, 5).unwrap()
}

pub fn panels_partition() -> Result<(), String> {
    run(128, prop::collection::vec((2014i32..2019, loss()), 1..60), |rows| {
        let plots = rows
            .iter()
            .enumerate()
            .map(|(i, &(t, y))| plot(i, t, &[y], &[true]))
            .collect();
        let ds = dataset(plots, 10.0);
        let panels = split_panels(&ds);
        let total: usize = panels.values().map(Vec::len).sum();
        ensure!(total == ds.plots().len(), "panels hold {total} of {} plots", ds.plots().len());
        let ids: Vec<&str> = panels.values().flatten().map(|p| p.cluster_id()).sorted().collect();
        ensure!(ids.iter().tuple_windows().all(|(a, b)| a != b), "a plot appears twice");
        ensure!(panels.iter().all(|(t, v)| v.iter().all(|p| p.panel_year() == *t)), "wrong panel");
        Ok(())
    })
}

fn tag() -> EstimatorTag {
    EstimatorTag::new(Estimator::Be, Period::Annual(2018))
}

pub fn pooled_equals_average() -> Result<(), String> {
    let strategy = (2usize..6, 1usize..4).prop_flat_map(|(per_panel, m)| {
        prop::collection::vec(prop::collection::vec(loss(), m), per_panel * 5)
    });
    run(128, strategy, |clusters| {
        let per_panel = clusters.len() / 5;
        let plots: Vec<ClusterPlot> = clusters
            .iter()
            .enumerate()
            .map(|(i, y)| plot(i, 2014 + (i / per_panel) as i32, y, &vec![true; y.len()]))
            .collect();
        let values: Vec<ClusterValue> = plots
            .iter()
            .map(|p| ClusterValue::new(p.m(), cluster_domain_mean(p, &DomainSelector::All)))
            .collect();
        let pooled = be_total(&values, 50.0).unwrap().1;
        let mut annual = BTreeMap::new();
        let mut n_t = BTreeMap::new();
        for (t, chunk) in values.chunks(per_panel).enumerate() {
            let year = 2014 + t as i32;
            annual.insert(year, be_estimate(chunk, 50.0, tag()).unwrap());
            n_t.insert(year, chunk.len());
        }
        let avg = average_annual(&annual, &n_t).unwrap().total;
        ensure!(close(avg, pooled, 1e-12), "average {avg} vs pooled {pooled}");
        Ok(())
    })
}

fn cluster_values() -> impl Strategy<Value = Vec<ClusterValue>> {
    prop::collection::vec((1usize..5, loss()), 2..30)
        .prop_map(|v| v.into_iter().map(|(m, y)| ClusterValue::new(m, y)).collect())
}

pub fn variance_shift_scale() -> Result<(), String> {
    run(256, (cluster_values(), -50.0..50.0f64, 0.01..20.0f64), |(v, a, c)| {
        let (base, _) = be_variance(&v, 7.0).unwrap();
        let shifted: Vec<ClusterValue> = v.iter().map(|x| ClusterValue::new(x.m, x.y + a)).collect();
        let scaled: Vec<ClusterValue> = v.iter().map(|x| ClusterValue::new(x.m, x.y * c)).collect();
        let (s, _) = be_variance(&shifted, 7.0).unwrap();
        let (k, _) = be_variance(&scaled, 7.0).unwrap();
        let tol = 1e-9 * (base + 1e-6 * (1.0 + a * a));
        ensure!((s - base).abs() <= tol.max(1e-9), "shift: {s} vs {base}");
        ensure!(close(k, c * c * base, 1e-9), "scale: {k} vs {}", c * c * base);
        Ok(())
    })
}

/// Mean and spread of the BE total over every sample of size `n`.
fn enumerate_be(v: &[ClusterValue], n: usize) -> (f64, f64) {
    let totals: Vec<f64> = (0..v.len())
        .combinations(n)
        .map(|idx| {
            let s: Vec<ClusterValue> = idx.iter().map(|&i| v[i]).collect();
            be_total(&s, 1.0).unwrap().1
        })
        .collect();
    let k = totals.len() as f64;
    let mean = totals.iter().sum::<f64>() / k;
    let sd = (totals.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / k).sqrt();
    (mean, sd)
}

pub fn brute_force_unbiased() -> Result<(), String> {
    let strategy = (2usize..=8).prop_flat_map(|big_n| {
        (
            prop::collection::vec(loss(), big_n),
            prop::collection::vec(1usize..5, big_n),
            1usize..=big_n,
            1usize..4,
        )
    });
    run(64, strategy, |(y, ms, n, m)| {
        // constant m: exact
        let v: Vec<ClusterValue> = y.iter().map(|&y| ClusterValue::new(m, y)).collect();
        let truth = y.iter().sum::<f64>() / y.len() as f64;
        let (mean, _) = enumerate_be(&v, n);
        ensure!(close(mean, truth, 1e-12), "constant m: {mean} vs {truth}");
        // varying m: ratio bias stays below the estimator's spread
        let v: Vec<ClusterValue> = y.iter().zip(&ms).map(|(&y, &m)| ClusterValue::new(m, y)).collect();
        let truth = v.iter().map(|c| c.m as f64 * c.y).sum::<f64>() / ms.iter().sum::<usize>() as f64;
        let (mean, sd) = enumerate_be(&v, n);
        ensure!((mean - truth).abs() <= sd + 1e-9 * truth.abs().max(1.0), "bias {} > sd {sd}", mean - truth);
        Ok(())
    })
}

pub fn window_overlap() -> Result<(), String> {
    run(256, (1990i32..2030, 1u32..9), |(loss_year, k)| {
        let windows: Vec<i32> = (loss_year - 20..=loss_year + 20)
            .filter(|&t| recode_fcl(Some(loss_year), &PanelWindow::annual(t).with_interval(k)))
            .collect();
        ensure!(windows.len() == k as usize, "{loss_year} in {} windows", windows.len());
        ensure!(windows.iter().tuple_windows().all(|(a, b)| b - a == 1), "windows not consecutive");
        let (a0, a1) = PanelWindow::annual(loss_year).with_interval(k).loss_years();
        let (b0, b1) = PanelWindow::annual(loss_year + 1).with_interval(k).loss_years();
        ensure!(a1.min(b1) - a0.max(b0) + 1 == k as i32 - 1, "overlap of consecutive windows");
        ensure!(!recode_fcl(None, &PanelWindow::annual(loss_year)), "no loss flagged");
        Ok(())
    })
}

pub fn fcl_class_means() -> Result<(), String> {
    let strategy = (prop::collection::vec(loss(), 1..20), prop::collection::vec(loss(), 1..20));
    run(256, strategy, |(cl, n)| {
        let data: Vec<(f64, bool)> = cl.iter().map(|&y| (y, true)).chain(n.iter().map(|&y| (y, false))).collect();
        let p = fit_fcl_model(&data).unwrap();
        for flag in [true, false] {
            let class: Vec<f64> = data.iter().filter(|d| d.1 == flag).map(|d| d.0).collect();
            let predicted = class.iter().map(|_| p.predict(flag)).sum::<f64>() / class.len() as f64;
            let mean = class.iter().sum::<f64>() / class.len() as f64;
            ensure!(close(predicted, mean, 1e-12), "class {flag}: {predicted} vs {mean}");
        }
        Ok(())
    })
}

pub fn cstock_orthogonal() -> Result<(), String> {
    let strategy = prop::collection::vec((0.0..30.0f64, 0.0..400.0f64), 4..60).prop_filter("three distinct heights", |v| {
        v.iter().map(|p| p.0.to_bits()).unique().count() >= 3
    });
    run(256, strategy, |pairs| {
        let pairs: Vec<CstockPair> = pairs
            .iter()
            .map(|&(height, stock)| CstockPair { height, stock, disturbed_since_als: false })
            .collect();
        let p = fit_cstock_model(&pairs, &OutlierRule::keep_all()).unwrap();
        for power in 0..3 {
            let dot: f64 = pairs.iter().map(|c| (c.stock - p.stock(c.height)) * c.height.powi(power)).sum();
            let scale: f64 = pairs.iter().map(|c| c.stock.abs() * c.height.powi(power)).sum::<f64>() + 1.0;
            ensure!(dot.abs() <= 1e-9 * scale, "x^{power}: {dot} (scale {scale})");
        }
        Ok(())
    })
}

fn fcl_params() -> impl Strategy<Value = FclModelParams> {
    (0.0..40.0f64, 0.0..2.0f64).prop_map(|(ybar_cl, ybar_n)| FclModelParams { ybar_cl, ybar_n, n_cl: 3, n_n: 30 })
}

fn beta() -> impl Strategy<Value = CstockModelParams> {
    (-80.0..5.0f64, 0.0..30.0f64, -0.5..0.5f64).prop_map(|(a, b, c)| CstockModelParams::supplied(a, b, c))
}

pub fn als_reduces_to_fcl() -> Result<(), String> {
    let strategy = (
        fcl_params(),
        beta(),
        prop::option::of(2005i32..2019),
        prop::option::of((0.0..30.0f64, 2013i32..2019)),
    );
    run(256, strategy, |(fcl, cs, loss_year, als)| {
        // laser data after the cutoff of the 2018 window (2013) is never eligible
        let w = PanelWindow::annual(2018);
        let mut s = SubPlotRecord::new("c", 1, 0.0).with_fcl(loss_year);
        if let Some((h, y)) = als.filter(|a| a.1 > w.als_cutoff()) {
            s = s.with_als(h, y);
        }
        let a = predict_subplot(&s, &WorkingModel::AlsFcl(AlsFclModel::new(cs, fcl, 5)), &w);
        let b = predict_subplot(&s, &WorkingModel::Fcl(fcl), &w);
        ensure!(a == b, "{a} vs {b}");
        Ok(())
    })
}

pub fn clamp_behaviour() -> Result<(), String> {
    run(256, (fcl_params(), beta(), 0.0..40.0f64, 1u32..8), |(fcl, cs, h, k)| {
        let clamped = AlsFclModel::new(cs, fcl, k);
        let raw = clamped.with_clamp(false);
        ensure!(clamped.annual_loss(h) >= 0.0, "negative clamped prediction");
        ensure!(close(raw.annual_loss(h), cs.stock(h) / k as f64, 1e-12), "unclamped prediction");
        ensure!(close(clamped.annual_loss(h), raw.annual_loss(h).max(0.0), 1e-12), "clamp is max(0, .)");
        Ok(())
    })
}

/// Single-sub-plot clusters with FCL flags for the 2018 window.
fn flagged_sample() -> impl Strategy<Value = Vec<(f64, bool)>> {
    prop::collection::vec((loss(), any::<bool>()), 2..40)
}

fn flagged_plots(rows: &[(f64, bool)]) -> Vec<ClusterPlot> {
    rows.iter()
        .enumerate()
        .map(|(i, &(y, f))| {
            let id = format!("c{i}");
            let s = SubPlotRecord::new(id.clone(), 1, y).with_fcl(f.then_some(2017));
            ClusterPlot::new(id, 2018, "S", vec![s]).unwrap()
        })
        .collect()
}

fn ma(plots: &[ClusterPlot], model: &WorkingModel, synthetic: f64, lambda: f64) -> EstimateResult {
    let w = PanelWindow::annual(2018);
    let res = residuals(plots, model, &DomainSelector::All, &w);
    ma_total(synthetic, &res, lambda, tag().with_estimator(model.estimator())).unwrap()
}

pub fn ma_constant_model() -> Result<(), String> {
    run(256, (flagged_sample(), 1.0..1e6f64, 0.0..1.0f64), |(rows, lambda, share)| {
        let plots = flagged_plots(&rows);
        let ybar = rows.iter().map(|r| r.0).sum::<f64>() / rows.len() as f64;
        let model = FclModelParams { ybar_cl: ybar, ybar_n: ybar, n_cl: 1, n_n: 1 };
        let agg = PopulationAggregates::fcl(share * lambda, (1.0 - share) * lambda);
        let synthetic = synthetic_total_fcl(&agg, &model).unwrap();
        let ma = ma(&plots, &WorkingModel::Fcl(model), synthetic, lambda);
        let values: Vec<ClusterValue> = rows.iter().map(|r| ClusterValue::new(1, r.0)).collect();
        let be = be_estimate(&values, lambda, tag()).unwrap();
        ensure!(close(ma.total, be.total, 1e-10), "total {} vs {}", ma.total, be.total);
        ensure!(close(ma.variance_total, be.variance_total, 1e-9), "variance {} vs {}", ma.variance_total, be.variance_total);
        Ok(())
    })
}

pub fn ma_joint_shift() -> Result<(), String> {
    run(256, (flagged_sample(), fcl_params(), -5.0..5.0f64, 0.0..1.0f64), |(rows, p, c, share)| {
        let plots = flagged_plots(&rows);
        let lambda = 1000.0;
        let agg = PopulationAggregates::fcl(share * lambda, (1.0 - share) * lambda);
        let shifted = FclModelParams { ybar_cl: p.ybar_cl + c, ybar_n: p.ybar_n + c, ..p };
        let a = ma(&plots, &WorkingModel::Fcl(p), synthetic_total_fcl(&agg, &p).unwrap(), lambda);
        let b = ma(&plots, &WorkingModel::Fcl(shifted), synthetic_total_fcl(&agg, &shifted).unwrap(), lambda);
        ensure!(close(a.total, b.total, 1e-9), "total {} vs {}", a.total, b.total);
        ensure!(
            (a.variance_total - b.variance_total).abs() <= 1e-9 * a.variance_total.max(lambda * lambda),
            "variance {} vs {}",
            a.variance_total,
            b.variance_total
        );
        Ok(())
    })
}

pub fn re_scale() -> Result<(), String> {
    run(256, (flagged_sample(), fcl_params(), 0.01..100.0f64), |(rows, p, c)| {
        let lambda = 500.0;
        let agg = PopulationAggregates::fcl(0.1 * lambda, 0.9 * lambda);
        let estimates = |rows: &[(f64, bool)], p: FclModelParams| {
            let plots = flagged_plots(rows);
            let values: Vec<ClusterValue> = rows.iter().map(|r| ClusterValue::new(1, r.0)).collect();
            let be = be_estimate(&values, lambda, tag()).unwrap();
            let ma = ma(&plots, &WorkingModel::Fcl(p), synthetic_total_fcl(&agg, &p).unwrap(), lambda);
            (be, ma)
        };
        let (be, ma) = estimates(&rows, p);
        let Ok(re) = relative_efficiency(&be, &ma) else {
            return Ok(());
        };
        ensure!((re > 1.0) == (ma.variance_total < be.variance_total), "RE {re} disagrees with variances");
        let scaled: Vec<(f64, bool)> = rows.iter().map(|&(y, f)| (c * y, f)).collect();
        let q = FclModelParams { ybar_cl: c * p.ybar_cl, ybar_n: c * p.ybar_n, ..p };
        let (be2, ma2) = estimates(&scaled, q);
        let re2 = relative_efficiency(&be2, &ma2).unwrap();
        ensure!(close(re, re2, 1e-8), "RE {re} vs scaled {re2}");
        Ok(())
    })
}

/// Cells: optional loss year (0 = no loss), optional laser year and height.
type CellSpec = (Option<i32>, Option<i32>, Option<f64>);

fn cells() -> impl Strategy<Value = Vec<CellSpec>> {
    prop::collection::vec(
        (
            prop::option::weighted(0.9, prop_oneof![Just(0), 2008i32..2019]),
            prop::option::of(2005i32..2016),
            prop::option::of(0.0..30.0f64),
        ),
        1..80,
    )
}

fn grids(cells: &[CellSpec], area: f64) -> (GridRaster, GridRaster, GridRaster) {
    let n = cells.len();
    let g = |v: Vec<Option<f64>>| GridRaster::new(n, 1, area, -9999.0, v).unwrap();
    (
        g(cells.iter().map(|c| c.0.map(f64::from)).collect()),
        g(cells.iter().map(|c| c.2).collect()),
        g(cells.iter().map(|c| c.1.map(f64::from)).collect()),
    )
}

pub fn aggregate_partition() -> Result<(), String> {
    run(256, (cells(), 0.01..100.0f64, 2014i32..2019), |(cells, area, t)| {
        let (f, h, y) = grids(&cells, area);
        let w = PanelWindow::annual(t);
        let a = aggregate(&f, Some(&h), Some(&y), &w).unwrap().aggregates;
        let defined = cells.iter().filter(|c| c.0.is_some()).count() as f64;
        let parts = a.lambda_cl + a.lambda_n + a.lambda_l.unwrap();
        ensure!(close(parts, a.lambda, 1e-12), "parts {parts} vs {}", a.lambda);
        ensure!(close(a.lambda, area * defined, 1e-12), "lambda {} vs {}", a.lambda, area * defined);
        let b = aggregate(&f, None, None, &w);
        if let Ok(b) = b {
            ensure!(close(b.aggregates.lambda, a.lambda, 1e-12), "lambda without laser data");
        }
        Ok(())
    })
}

pub fn aggregate_permutation() -> Result<(), String> {
    run(128, (cells(), any::<u64>()), |(cells, seed)| {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut shuffled = cells.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let w = PanelWindow::annual(2018);
        let (f, h, y) = grids(&cells, 1.0);
        let (g, i, z) = grids(&shuffled, 1.0);
        let a = aggregate(&f, Some(&h), Some(&y), &w).unwrap().aggregates;
        let b = aggregate(&g, Some(&i), Some(&z), &w).unwrap().aggregates;
        ensure!(a.lambda == b.lambda && a.lambda_cl == b.lambda_cl && a.lambda_n == b.lambda_n, "areas differ");
        ensure!(a.lambda_l == b.lambda_l, "laser area differs");
        match (a.xbar_l, b.xbar_l) {
            (Some(x), Some(y)) => ensure!(close(x, y, 1e-12), "mean height {x} vs {y}"),
            (x, y) => ensure!(x == y, "mean height presence"),
        }
        Ok(())
    })
}

pub fn aggregate_additive() -> Result<(), String> {
    run(128, (cells(), any::<prop::sample::Index>()), |(cells, idx)| {
        let cut = idx.index(cells.len() + 1);
        let w = PanelWindow::annual(2017);
        let agg = |c: &[CellSpec]| {
            if c.is_empty() {
                return PopulationAggregates::als_fcl(0.0, 0.0, 0.0, None);
            }
            let (f, h, y) = grids(c, 2.0);
            aggregate(&f, Some(&h), Some(&y), &w).unwrap().aggregates
        };
        let (whole, left, right) = (agg(&cells), agg(&cells[..cut]), agg(&cells[cut..]));
        for (name, get) in [
            ("lambda", (|a: &PopulationAggregates| a.lambda) as fn(&PopulationAggregates) -> f64),
            ("lambda_cl", |a| a.lambda_cl),
            ("lambda_n", |a| a.lambda_n),
            ("lambda_l", |a| a.lambda_l.unwrap_or(0.0)),
        ] {
            ensure!(close(get(&whole), get(&left) + get(&right), 1e-12), "{name} is not additive");
        }
        let weighted = |a: &PopulationAggregates| a.xbar_l.unwrap_or(0.0) * a.lambda_l.unwrap_or(0.0);
        ensure!(close(weighted(&whole), weighted(&left) + weighted(&right), 1e-10), "height sums");
        Ok(())
    })
}

pub fn map_consistency() -> Result<(), String> {
    run(128, (cells(), fcl_params(), beta()), |(cells, fcl, cs)| {
        let w = PanelWindow::annual(2018);
        let (f, h, y) = grids(&cells, 0.5);
        let agg = aggregate(&f, Some(&h), Some(&y), &w).unwrap();
        if let Some(xbar) = agg.aggregates.xbar_l {
            let mean = agg.als_heights.iter().sum::<f64>() / agg.als_heights.len() as f64;
            ensure!(close(xbar, mean, 1e-12), "mean height {xbar} vs {mean}");
        }
        let model = AlsFclModel::new(cs, fcl, 5);
        let map = synthetic_map(&f, Some(&h), Some(&y), &model, &w).unwrap();
        let pixels = synthetic_total_als_fcl(
            &agg.aggregates,
            &model,
            AlsSynthesis::Pixels { heights: &agg.als_heights, cell_area: agg.cell_area },
        )
        .unwrap();
        ensure!(close(map.area_weighted_sum(), pixels, 1e-10), "map {} vs {pixels}", map.area_weighted_sum());
        Ok(())
    })
}

pub fn seed_determinism() -> Result<(), String> {
    run(4, any::<u64>(), |seed| {
        let population = PopulationConfig {
            seed,
            strata: vec![
                StratumConfig { id: "A".into(), lambda: 1000.0, clusters: 1500 },
                StratumConfig { id: "B".into(), lambda: 400.0, clusters: 900 },
            ],
            loss_prevalence: 0.05,
            ..PopulationConfig::default()
        };
        let a = generate_population(&population).unwrap();
        ensure!(a == generate_population(&population).unwrap(), "population differs");
        let cfg = SimulationConfig {
            population,
            design: SampleDesign::Srs { n: 400 },
            replications: 6,
            ..SimulationConfig::default()
        };
        let r1 = run_on_population(&a, &cfg).unwrap();
        let r2 = run_on_population(&a, &cfg).unwrap();
        ensure!(format!("{r1:?}") == format!("{r2:?}"), "report differs");
        Ok(())
    })
}
