//! The five experiment families.

pub mod mild;
pub mod moments;
pub mod simulate;
pub mod validate;

use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::model::Model;
use crate::output::Check;
use crate::RunError;

pub struct Context<'a> {
    pub cfg: &'a ExperimentConfig,
    pub model: &'a Model,
    pub out: &'a Path,
    pub workers: usize,
}

pub type Outcome = Result<(Vec<Check>, Vec<PathBuf>), RunError>;
