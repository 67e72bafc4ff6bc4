//! CSV and JSON artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::RunError;

/// Shortest round-trip decimal; scientific notation outside `[1e-4, 1e15)`.
pub fn num(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-4..1e15).contains(&a) || !v.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

/// Writes `rows` under `header` to `dir/name`, returning the path.
pub fn write_csv(dir: &Path, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf, RunError> {
    let path = dir.join(name);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(path)
}

pub fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<PathBuf, RunError> {
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value).map_err(superenv::Error::from)?;
    text.push('\n');
    fs::write(&path, text)?;
    Ok(path)
}

/// One invariant or statistical check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub statistic: String,
    pub value: f64,
    /// Standard error when the check is statistical.
    pub stderr: Option<f64>,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    /// `|value - target| <= tolerance`.
    pub fn near(statistic: &str, value: f64, target: f64, tolerance: f64) -> Self {
        Self { statistic: statistic.into(), value, stderr: None, tolerance, pass: (value - target).abs() <= tolerance }
    }

    /// `|mean - target| <= max(k se, rel |target|)`.
    pub fn within_se(statistic: &str, mean: f64, se: f64, target: f64, k: f64, rel: f64) -> Self {
        let tolerance = (k * se).max(rel * target.abs());
        Self { statistic: statistic.into(), value: mean, stderr: Some(se), tolerance, pass: (mean - target).abs() <= tolerance }
    }

    /// `lo < value <= hi`.
    pub fn band(statistic: &str, value: f64, stderr: Option<f64>, lo: f64, hi: f64) -> Self {
        Self { statistic: statistic.into(), value, stderr, tolerance: hi - lo, pass: value > lo && value <= hi }
    }

    pub fn flag(statistic: &str, ok: bool) -> Self {
        Self { statistic: statistic.into(), value: if ok { 1.0 } else { 0.0 }, stderr: None, tolerance: 0.0, pass: ok }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub schema: u32,
    pub experiment: String,
    pub config_hash: String,
    pub pass: bool,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn new(experiment: &str, config_hash: &str, checks: Vec<Check>) -> Self {
        let pass = checks.iter().all(|c| c.pass);
        Self { schema: 1, experiment: experiment.into(), config_hash: config_hash.into(), pass, checks }
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }
}
