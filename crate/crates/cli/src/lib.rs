//! Experiment runner for the `superenv` simulator.
//!
//! A run reads an [`ExperimentConfig`], derives every random stream from the
//! master seed, dispatches one of five experiment families and writes CSV
//! data, a run-metadata JSON and a pass/fail report into the output directory.

pub mod config;
pub mod experiments;
pub mod model;
pub mod output;
pub mod pool;

use std::fs;
use std::path::PathBuf;

use serde_json::json;

pub use config::{ConfigError, Experiment, ExperimentConfig};
pub use output::{Check, Report};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] superenv::Error),
    #[error("cannot write output: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot write CSV: {0}")]
    Csv(#[from] csv::Error),
}

impl RunError {
    /// `2` config, `3` numeric, `4` budget.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Model(e) if e.is_numeric() => 3,
            RunError::Model(e) if e.is_budget() => 4,
            _ => 2,
        }
    }
}

/// Exit code for a run whose checks did not all pass.
pub const EXIT_CHECKS_FAILED: i32 = 1;

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub experiment: Experiment,
    pub output: PathBuf,
    pub report: Report,
    pub files: Vec<PathBuf>,
}

impl RunSummary {
    pub fn exit_code(&self) -> i32 {
        if self.report.pass {
            0
        } else {
            EXIT_CHECKS_FAILED
        }
    }
}

/// Runs the configured experiment and writes its artifacts.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary, RunError> {
    let experiment = cfg.validate()?;
    let out = cfg.output();
    fs::create_dir_all(&out)?;
    let hash = cfg.content_hash();
    let model = model::Model::from_config(cfg)?;
    let mut files = vec![out.join("config.txt")];
    fs::write(&files[0], cfg.resolved_text())?;
    let meta = json!({
        "schema": 1,
        "experiment": experiment.name(),
        "seed": cfg.seed()?,
        "n": model.n,
        "m": model.substeps,
        "T": model.horizon.to_string(),
        "dim": model.dim,
        "replicas": cfg.count("run.replicas")?,
        "kernel": model.kernel_json(cfg),
        "config_hash": hash,
        "version": env!("CARGO_PKG_VERSION"),
    });
    files.push(output::write_json(&out, "metadata.json", &meta)?);
    let ctx = experiments::Context { cfg, model: &model, out: &out, workers: cfg.count("run.workers")? };
    let (checks, mut written) = match experiment {
        Experiment::Simulate => experiments::simulate::run(&ctx)?,
        Experiment::Moments => experiments::moments::run(&ctx)?,
        Experiment::Mild => experiments::mild::run(&ctx)?,
        Experiment::Holder => experiments::mild::run_holder(&ctx)?,
        Experiment::Validate => experiments::validate::run(&ctx)?,
    };
    files.append(&mut written);
    let report = Report::new(experiment.name(), &hash, checks);
    files.push(output::write_json(&out, "report.json", &report)?);
    Ok(RunSummary { experiment, output: out, report, files })
}
