// SPDX-License-Identifier: Apache-2.0

//! Tables rendered as aligned text or CSV, and the single writer for all
//! command outputs.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Text,
    Csv,
    Json,
}

impl Format {
    fn extension(self) -> &'static str {
        match self {
            Format::Text => "txt",
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Text(String),
    /// Value and number of decimals in the text rendering.
    Num(f64, usize),
    Int(usize),
    Empty,
}

impl Cell {
    pub fn num(v: Option<f64>, decimals: usize) -> Self {
        v.filter(|x| x.is_finite()).map_or(Cell::Empty, |x| Cell::Num(x, decimals))
    }

    fn text(&self) -> String {
        match self {
            Cell::Text(s) => s.clone(),
            Cell::Num(v, d) => format!("{v:.d$}"),
            Cell::Int(n) => n.to_string(),
            Cell::Empty => "-".into(),
        }
    }

    fn csv(&self) -> String {
        match self {
            Cell::Text(s) => s.clone(),
            Cell::Num(v, _) => v.to_string(),
            Cell::Int(n) => n.to_string(),
            Cell::Empty => String::new(),
        }
    }

    fn right_aligned(&self) -> bool {
        !matches!(self, Cell::Text(_))
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(headers: &[&str]) -> Self {
        Self { headers: headers.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.headers.len());
        self.rows.push(row);
    }

    pub fn to_text(&self) -> String {
        let cells: Vec<Vec<String>> = self.rows.iter().map(|r| r.iter().map(Cell::text).collect()).collect();
        let widths: Vec<usize> = (0..self.headers.len())
            .map(|j| cells.iter().map(|r| r[j].len()).chain([self.headers[j].len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let line = |items: Vec<String>| items.join("  ").trim_end().to_string() + "\n";
        out += &line(
            self.headers
                .iter()
                .zip(&widths)
                .map(|(h, &w)| format!("{h:<w$}"))
                .collect(),
        );
        out += &line(widths.iter().map(|&w| "-".repeat(w)).collect());
        for (row, texts) in self.rows.iter().zip(&cells) {
            out += &line(
                row.iter()
                    .zip(texts)
                    .zip(&widths)
                    .map(|((c, t), &w)| if c.right_aligned() { format!("{t:>w$}") } else { format!("{t:<w$}") })
                    .collect(),
            );
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::csv))?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }
}

/// Where and how a command writes its results.
#[derive(Debug, Clone, Default)]
pub struct Sink {
    pub out_dir: Option<std::path::PathBuf>,
    pub formats: Vec<Format>,
}

impl Sink {
    fn render<T: Serialize>(format: Format, table: &Table, data: &T) -> Result<String> {
        Ok(match format {
            Format::Text => table.to_text(),
            Format::Csv => table.to_csv()?,
            Format::Json => serde_json::to_string_pretty(data)? + "\n",
        })
    }

    /// Files `<stem>.<ext>` in the output directory, one per format (all
    /// three by default); without a directory the first format goes to stdout.
    pub fn emit<T: Serialize>(&self, stem: &str, table: &Table, data: &T) -> Result<()> {
        match &self.out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
                let formats = if self.formats.is_empty() {
                    vec![Format::Text, Format::Csv, Format::Json]
                } else {
                    self.formats.clone()
                };
                for f in formats {
                    write(&dir.join(format!("{stem}.{}", f.extension())), &Self::render(f, table, data)?)?;
                }
            }
            None => {
                let f = self.formats.first().copied().unwrap_or(Format::Text);
                print!("{}", Self::render(f, table, data)?);
            }
        }
        Ok(())
    }
}

pub fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}
