// SPDX-License-Identifier: Apache-2.0

//! Fixtures for driving the `cstock` binary.

#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn cstock<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_cstock")).args(args).output().expect("binary runs");
    Run {
        code: out.status.code().expect("exit code"),
        stdout: String::from_utf8(out.stdout).expect("utf-8 stdout"),
        stderr: String::from_utf8(out.stderr).expect("utf-8 stderr"),
    }
}

pub fn p(path: &Path) -> String {
    path.to_str().expect("utf-8 path").to_string()
}

/// Deterministic panel survey: five annual panels 2014-2018 per stratum,
/// two sub-plots per cluster, laser data from 2008 on every other cluster.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub strata: Vec<(&'static str, f64)>,
    pub clusters_per_panel: usize,
    /// Panel in which no sub-plot is flagged by the loss map.
    pub unflagged_panel: Option<i32>,
}

impl Default for Fixture {
    fn default() -> Self {
        Self { strata: vec![("S1", 1000.0)], clusters_per_panel: 20, unflagged_panel: None }
    }
}

pub const YEARS: [i32; 5] = [2014, 2015, 2016, 2017, 2018];

impl Fixture {
    pub fn plots_csv(&self) -> String {
        let mut out = String::from(
            "cluster_id,subplot_index,panel_year,stratum_id,c_loss,forest,fcl_loss_year,als_height,als_year,c_stock,domain_conifer\n",
        );
        for (h, (stratum, _)) in self.strata.iter().enumerate() {
            for t in YEARS {
                for i in 0..self.clusters_per_panel {
                    for j in 1..=2usize {
                        let mix = i + j + h + t as usize;
                        let flagged = mix % 4 == 0 && self.unflagged_panel != Some(t);
                        let (loss, fcl) = if flagged {
                            (8.0 + (i % 5) as f64 + j as f64, format!("{}", t - 1 - (i % 3) as i32))
                        } else {
                            (0.1 * (mix % 4) as f64, String::new())
                        };
                        let (height, als_year, stock) = if i % 2 == 0 {
                            let x = 5.0 + 0.7 * i as f64 + j as f64;
                            let cs = 1.2 + 8.5 * x + 0.09 * x * x + ((i * 7 + j) % 5) as f64 - 2.0;
                            (format!("{x}"), "2008".to_string(), if flagged { String::new() } else { format!("{cs}") })
                        } else {
                            (String::new(), String::new(), String::new())
                        };
                        let forest = u8::from(mix % 5 != 0);
                        let conifer = u8::from(mix % 3 == 0);
                        writeln!(
                            out,
                            "{stratum}-{t}-{i},{j},{t},{stratum},{loss},{forest},{fcl},{height},{als_year},{stock},{conifer}"
                        )
                        .unwrap();
                    }
                }
            }
        }
        out
    }

    pub fn strata_csv(&self) -> String {
        let mut out = String::from("stratum_id,lambda_ha\n");
        for (id, lambda) in &self.strata {
            writeln!(out, "{id},{lambda}").unwrap();
        }
        out
    }

    /// Map aggregates for every annual window and the pooled window.
    pub fn aggregates_toml(&self) -> String {
        let mut out = String::new();
        for (id, lambda) in &self.strata {
            let windows = YEARS.iter().map(|y| y.to_string()).chain(["2014-2018".to_string()]);
            for w in windows {
                let (cl, l) = (0.03 * lambda, 0.02 * lambda);
                writeln!(
                    out,
                    "[[aggregates]]\nstratum = \"{id}\"\nwindow = \"{w}\"\nlambda = {lambda:?}\nlambda_cl = {cl:?}\nlambda_l = {l:?}\nlambda_n = {:?}\nxbar_l = 12.0\n",
                    lambda - cl - l
                )
                .unwrap();
            }
        }
        out
    }

    /// Writes plots.csv, strata.csv and aggregates.toml into `dir`.
    pub fn write(&self, dir: &Path) -> Files {
        let files = Files {
            plots: dir.join("plots.csv"),
            strata: dir.join("strata.csv"),
            aggregates: dir.join("aggregates.toml"),
        };
        std::fs::write(&files.plots, self.plots_csv()).unwrap();
        std::fs::write(&files.strata, self.strata_csv()).unwrap();
        std::fs::write(&files.aggregates, self.aggregates_toml()).unwrap();
        files
    }
}

pub struct Files {
    pub plots: PathBuf,
    pub strata: PathBuf,
    pub aggregates: PathBuf,
}

impl Files {
    /// `--plots` and `--strata` arguments.
    pub fn data_args(&self) -> Vec<String> {
        vec!["--plots".into(), p(&self.plots), "--strata".into(), p(&self.strata)]
    }
}
