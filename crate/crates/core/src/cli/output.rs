//! Artifact writer: CSV with 17 significant digits, pretty JSON, and
//! optional gnuplot scripts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::densities::{fmt_f64, Density};
use crate::error::{Error, Result};

/// One CSV field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(u64),
    Missing,
}

impl Cell {
    pub fn opt(v: Option<f64>) -> Self {
        v.map_or(Cell::Missing, Cell::Num)
    }

    fn render(self) -> String {
        match self {
            Cell::Num(v) => fmt_f64(v),
            Cell::Int(v) => v.to_string(),
            Cell::Missing => String::new(),
        }
    }
}

/// Writes artifacts into one directory and records their names.
#[derive(Debug)]
pub struct Output {
    dir: PathBuf,
    gnuplot: bool,
    files: Vec<String>,
}

fn io(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

impl Output {
    pub fn new(dir: &Path, gnuplot: bool) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf(), gnuplot, files: Vec::new() })
    }

    pub fn into_files(self) -> Vec<String> {
        self.files
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    pub fn csv<I>(&mut self, name: &str, header: &[&str], rows: I) -> Result<()>
    where
        I: IntoIterator<Item = Vec<Cell>>,
    {
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| io(&path, e))?;
        w.write_record(header).map_err(|e| io(&path, e))?;
        for row in rows {
            debug_assert_eq!(row.len(), header.len());
            w.write_record(row.into_iter().map(Cell::render)).map_err(|e| io(&path, e))?;
        }
        w.flush().map_err(|e| io(&path, e))?;
        if self.gnuplot {
            self.gnuplot_script(name, header.len())?;
        }
        Ok(())
    }

    fn gnuplot_script(&mut self, csv_name: &str, columns: usize) -> Result<()> {
        let stem = csv_name.trim_end_matches(".csv");
        let script = format!(
            "set datafile separator ','\nset key autotitle columnhead\nset terminal pngcairo size 900,600\nset output '{stem}.png'\nplot for [i=2:{columns}] '{csv_name}' using 1:i with linespoints\n"
        );
        let path = self.path(&format!("{stem}.gp"));
        fs::write(&path, script).map_err(|e| io(&path, e))
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(value).map_err(|e| io(&path, e))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| io(&path, e))
    }

    /// `iter,mse` trace.
    pub fn trace(&mut self, name: &str, trace: &[f64]) -> Result<()> {
        self.csv(name, &["iter", "mse"], trace.iter().enumerate().map(|(i, v)| vec![Cell::Int(i as u64), Cell::Num(*v)]))
    }

    /// Histogram weights: `bin_lo,bin_hi,weight` in 1-D and
    /// `x_lo,x_hi,y_lo,y_hi,weight` in 2-D.
    pub fn density(&mut self, name: &str, d: &Density) -> Result<()> {
        match d {
            Density::Histogram(h) => {
                let e = h.edges();
                self.csv(
                    name,
                    &["bin_lo", "bin_hi", "weight"],
                    h.weights().iter().enumerate().map(|(k, w)| vec![Cell::Num(e[k]), Cell::Num(e[k + 1]), Cell::Num(*w)]),
                )
            }
            Density::Histogram2D(h) => {
                let e = h.edges();
                let k = h.bins_per_axis();
                self.csv(
                    name,
                    &["x_lo", "x_hi", "y_lo", "y_hi", "weight"],
                    h.weights().iter().enumerate().map(|(b, w)| {
                        let (i, j) = (b / k, b % k);
                        vec![Cell::Num(e[i]), Cell::Num(e[i + 1]), Cell::Num(e[j]), Cell::Num(e[j + 1]), Cell::Num(*w)]
                    }),
                )
            }
            other => Err(Error::InvalidParameter(format!("cannot write {} as a histogram", other.id()))),
        }
    }
}
