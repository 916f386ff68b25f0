// SPDX-License-Identifier: Apache-2.0

mod support;

use std::fs;

use cstock_cli::{EstimateReport, EstimateRow};
use cstock_core::design::Estimator;
use cstock_core::estimate::{fit_models, AggregatesFile, FitOptions};
use cstock_core::models::ModelSet;
use cstock_core::survey::{load_dataset, Schema};

use support::{cstock, p, Fixture};

fn estimate_json(dir: &std::path::Path, extra: &[&str]) -> (i32, EstimateReport) {
    let files = Fixture::default().write(dir);
    let out = dir.join("out");
    let mut args = vec!["estimate".to_string()];
    args.extend(files.data_args());
    args.extend(["--aggregates".into(), p(&files.aggregates), "--out-dir".into(), p(&out)]);
    args.extend(extra.iter().map(|s| s.to_string()));
    let run = cstock(&args);
    let text = fs::read_to_string(out.join("estimates.json")).unwrap_or_else(|_| panic!("{}", run.stderr));
    (run.code, serde_json::from_str(&text).unwrap())
}

fn row<'a>(r: &'a EstimateReport, period: &str, estimator: Estimator) -> &'a EstimateRow {
    r.rows
        .iter()
        .find(|row| row.period == period && row.estimator == estimator && row.stratum == "S1")
        .unwrap_or_else(|| panic!("no {estimator} row for {period}"))
}

#[test]
fn help_and_bad_flags() {
    assert_eq!(cstock(&["--help"]).code, 0);
    let run = cstock(&["estimate", "--no-such-flag"]);
    assert_eq!(run.code, 1);
    assert!(run.stderr.contains("--no-such-flag"));
}

#[test]
fn estimate_outputs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let files = Fixture::default().write(dir.path());
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let mut args = vec!["estimate".to_string()];
        args.extend(files.data_args());
        args.extend(["--aggregates".into(), p(&files.aggregates), "--out-dir".into(), p(&out)]);
        let run = cstock(&args);
        assert_eq!(run.code, 0, "{}", run.stderr);
        outputs.push(
            ["estimates.txt", "estimates.csv", "estimates.json"].map(|f| fs::read(out.join(f)).unwrap()),
        );
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn estimate_rows_cover_periods_and_estimators() {
    let dir = tempfile::tempdir().unwrap();
    let (code, report) = estimate_json(dir.path(), &[]);
    assert_eq!(code, 0);
    for year in support::YEARS {
        for e in [Estimator::Be, Estimator::MaFcl, Estimator::MaAlsFcl] {
            assert!(row(&report, &year.to_string(), e).total.is_some());
        }
    }
    for period in ["pooled", "average"] {
        assert!(row(&report, period, Estimator::MaFcl).total.is_some());
    }
    let best = row(&report, "average", Estimator::MaBest);
    assert_eq!(best.selection.as_deref().unwrap().split(' ').count(), 5);
    assert!(report.rows.iter().all(|r| r.domain == "all"));
}

#[test]
fn re_column_is_the_variance_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let (_, report) = estimate_json(dir.path(), &[]);
    let mut checked = 0;
    for r in report.rows.iter().filter(|r| r.estimator != Estimator::Be) {
        let be = row(&report, &r.period, Estimator::Be);
        let expected = be.variance.unwrap() / r.variance.unwrap();
        assert!((r.re.unwrap() - expected).abs() <= 1e-12 * expected, "{r:?}");
        checked += 1;
    }
    assert!(checked > 10);
    assert!(report.rows.iter().filter(|r| r.estimator == Estimator::Be).all(|r| r.re.is_none()));
}

#[test]
fn report_renders_saved_estimates() {
    let dir = tempfile::tempdir().unwrap();
    estimate_json(dir.path(), &[]);
    let out = dir.path().join("out");
    let rendered = dir.path().join("rendered");
    let run = cstock(&[
        "report",
        "--input",
        &p(&out.join("estimates.json")),
        "--out-dir",
        &p(&rendered),
        "--format",
        "text,csv",
    ]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    assert_eq!(fs::read(rendered.join("report.txt")).unwrap(), fs::read(out.join("estimates.txt")).unwrap());
    assert_eq!(fs::read(rendered.join("report.csv")).unwrap(), fs::read(out.join("estimates.csv")).unwrap());
}

#[test]
fn domain_estimates() {
    let dir = tempfile::tempdir().unwrap();
    let files = Fixture::default().write(dir.path());
    let mut args = vec!["estimate".to_string()];
    args.extend(files.data_args());
    args.extend(["--domain".into(), "conifer".into(), "--mode".into(), "average".into()]);
    let conifer = cstock(&args);
    assert_eq!(conifer.code, 0, "{}", conifer.stderr);
    assert!(conifer.stdout.contains("conifer"));

    let mut args = vec!["estimate".to_string()];
    args.extend(files.data_args());
    args.extend(["--domain".into(), "nonexistent".into()]);
    let run = cstock(&args);
    assert_eq!(run.code, 1);
    assert!(run.stderr.contains("nonexistent"));
}

#[test]
fn be_needs_no_aggregates_but_ma_does() {
    let dir = tempfile::tempdir().unwrap();
    let files = Fixture::default().write(dir.path());
    let mut args = vec!["estimate".to_string()];
    args.extend(files.data_args());
    let be = cstock(&args);
    assert_eq!(be.code, 0, "{}", be.stderr);
    assert!(be.stdout.contains("BE") && !be.stdout.contains("MA-FCL"));

    args.extend(["--estimator".into(), "MA-FCL".into()]);
    let ma = cstock(&args);
    assert_eq!(ma.code, 1);
    assert!(ma.stderr.contains("aggregates"));
}

#[test]
fn combined_rows_add_strata() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = Fixture { strata: vec![("S1", 1000.0), ("S2", 400.0)], ..Fixture::default() };
    let files = fixture.write(dir.path());
    let out = dir.path().join("out");
    let mut args = vec!["estimate".to_string()];
    args.extend(files.data_args());
    args.extend(["--aggregates".into(), p(&files.aggregates), "--out-dir".into(), p(&out)]);
    let run = cstock(&args);
    assert_eq!(run.code, 0, "{}", run.stderr);
    let report: EstimateReport = serde_json::from_str(&fs::read_to_string(out.join("estimates.json")).unwrap()).unwrap();
    let combined: Vec<_> = report.rows.iter().filter(|r| r.stratum == "combined").collect();
    assert!(!combined.is_empty());
    for c in combined {
        let parts: Vec<_> = report
            .rows
            .iter()
            .filter(|r| r.period == c.period && r.estimator == c.estimator && r.stratum != "combined")
            .collect();
        assert_eq!(parts.len(), 2);
        let total: f64 = parts.iter().map(|r| r.total.unwrap()).sum();
        let variance: f64 = parts.iter().map(|r| r.variance.unwrap()).sum();
        assert!((c.total.unwrap() - total).abs() <= 1e-9 * total.abs());
        assert!((c.variance.unwrap() - variance).abs() <= 1e-9 * variance);
    }
}

#[test]
fn fit_writes_and_validates_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let files = Fixture::default().write(dir.path());
    let models = dir.path().join("models.toml");
    let mut args = vec!["fit".to_string()];
    args.extend(files.data_args());
    args.extend(["--out".into(), p(&models)]);
    let run = cstock(&args);
    assert_eq!(run.code, 0, "{}", run.stderr);
    for window in ["2014", "2018", "2014-2018", "stock model"] {
        assert!(run.stdout.contains(window), "{window} missing from\n{}", run.stdout);
    }

    let written = ModelSet::load(&models).unwrap();
    let ds = load_dataset(&files.plots, &files.strata, &Schema::default()).unwrap();
    let direct = fit_models(&ds, &FitOptions::default());
    assert!(direct.failures.is_empty());
    assert_eq!(written, direct.models);

    let check = cstock(&["fit", "--params", &p(&models)]);
    assert_eq!(check.code, 0, "{}", check.stderr);
}

#[test]
fn malformed_parameter_file_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "interval_years = 5\nclamp_negative = true\n[fcl.\"2018\"]\nybar_cl = \"ten\"\n").unwrap();
    let run = cstock(&["fit", "--params", &p(&bad)]);
    assert_eq!(run.code, 1);
    assert!(run.stderr.contains("bad.toml"));
}

#[test]
fn panel_without_flagged_subplots_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = Fixture { unflagged_panel: Some(2016), ..Fixture::default() };
    let files = fixture.write(dir.path());
    let mut args = vec!["fit".to_string()];
    args.extend(files.data_args());
    let run = cstock(&args);
    assert_eq!(run.code, 2, "{}", run.stderr);
    assert!(run.stderr.contains("panel 2016"), "{}", run.stderr);

    // The other panels still estimate; the failed one is reported per row.
    let mut args = vec!["estimate".to_string()];
    args.extend(files.data_args());
    args.extend(["--aggregates".into(), p(&files.aggregates), "--mode".into(), "annual".into()]);
    let run = cstock(&args);
    assert_eq!(run.code, 2);
    assert!(run.stderr.contains("2016"));
    assert!(run.stdout.contains("2017"));
}

#[test]
fn aggregate_counts_cells() {
    let dir = tempfile::tempdir().unwrap();
    let grid = |name: &str, cells: &str| {
        let path = dir.path().join(name);
        fs::write(&path, format!("ncols 2\nnrows 2\ncellarea_ha 1\nnodata -9999\n{cells}\n")).unwrap();
        path
    };
    let fcl = grid("fcl.asc", "2016 0\n0 2017");
    let height = grid("h.asc", "10 -9999\n-9999 14");
    let year = grid("y.asc", "2012 -9999\n-9999 2012");
    let out = dir.path().join("agg.toml");

    let run = cstock(&["aggregate", "--fcl", &p(&fcl), "--stratum", "S1", "--window", "2018", "--out", &p(&out)]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    let file = AggregatesFile::load(&out).unwrap();
    let a = file.aggregates[0].aggregates;
    assert_eq!((a.lambda_cl, a.lambda_n, a.lambda_l), (2.0, 2.0, None));

    let run = cstock(&[
        "aggregate", "--fcl", &p(&fcl), "--als-height", &p(&height), "--als-year", &p(&year), "--stratum", "S1",
        "--window", "2018", "--window", "2014-2018",
    ]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    let file = AggregatesFile::from_toml_str(&run.stdout).unwrap();
    assert_eq!(file.aggregates.len(), 2);
    let a = file.aggregates[0].aggregates;
    assert_eq!((a.lambda_cl, a.lambda_n, a.lambda_l, a.xbar_l), (0.0, 2.0, Some(2.0), Some(12.0)));
}

#[test]
fn aggregate_mask_needs_domain_name() {
    let dir = tempfile::tempdir().unwrap();
    let fcl = dir.path().join("fcl.asc");
    fs::write(&fcl, "ncols 1\nnrows 1\ncellarea_ha 1\nnodata -9999\n0\n").unwrap();
    let run = cstock(&["aggregate", "--fcl", &p(&fcl), "--mask", &p(&fcl), "--stratum", "S1", "--window", "2018"]);
    assert_eq!(run.code, 1);
    assert!(run.stderr.contains("--domain"));
}

fn small_simulation(dir: &std::path::Path, replications: usize) -> std::path::PathBuf {
    let path = dir.join("sim.toml");
    fs::write(
        &path,
        format!(
            "[simulation]\nreplications = {replications}\ndesign = {{ kind = \"srs\", n = 200 }}\n\n\
             [simulation.population]\nseed = 7\nstrata = [{{ id = \"S1\", lambda = 20000.0, clusters = 2000 }}]\n"
        ),
    )
    .unwrap();
    path
}

#[test]
fn single_replication_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_simulation(dir.path(), 50);
    let run = cstock(&["simulate", "--config", &p(&config), "--replications", "1"]);
    assert_eq!(run.code, 1);
    assert!(run.stderr.contains("replications"), "{}", run.stderr);
}

#[test]
fn simulation_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_simulation(dir.path(), 20);
    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let run = cstock(&["simulate", "--config", &p(&config), "--out-dir", &p(&out), "--format", "json"]);
            assert_eq!(run.code, 0, "{}", run.stderr);
            fs::read(out.join("simulation.json")).unwrap()
        })
        .collect();
    assert_eq!(runs[0], runs[1]);

    let other = cstock(&["simulate", "--config", &p(&config), "--seed", "8", "--format", "json"]);
    assert_eq!(other.code, 0);
    assert_ne!(other.stdout.as_bytes(), runs[0].as_slice());
}
