//! Flat `section.key = value` experiment configuration.
//!
//! Every key has a default; a file lists only the keys it overrides. Values
//! are kept as the strings read, so serialization reproduces them exactly and
//! decimals never pass through a locale-dependent formatter.

use std::fmt;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use superenv::particles::Time;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self { key: key.into(), message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config key `{}`: {}", self.key, self.message)
    }
}

impl std::error::Error for ConfigError {}

/// `(key, default)` in canonical order.
pub const KEYS: &[(&str, &str)] = &[
    ("run.experiment", "simulate"),
    ("run.seed", "1"),
    ("run.output", "out"),
    ("run.workers", "1"),
    ("run.replicas", "1"),
    ("model.dim", "1"),
    ("model.n", "100"),
    ("model.substeps", "8"),
    ("model.horizon", "0.25"),
    ("model.particle_cap", "1000000"),
    ("model.init", "gauss"),
    ("model.init_sd", "1"),
    ("model.init_half_width", "1"),
    ("model.motion", "exact"),
    ("model.block_threshold", "2000"),
    ("model.block_size", "500"),
    ("model.frozen_spacing", "0.125"),
    ("kernel.h", "box"),
    ("kernel.h_width", "1"),
    ("kernel.h_sigma", "0.5"),
    ("kernel.h_cutoff", "4"),
    ("kernel.h_amplitude", "1"),
    ("kernel.h_bound", "auto"),
    ("kernel.kappa", "gauss"),
    ("kernel.kappa_amplitude", "1"),
    ("kernel.kappa_scale", "1"),
    ("kernel.kappa_envelope", "4"),
    ("kernel.kappa_value", "1"),
    ("output.trajectory", "flat"),
    ("output.bins", "64"),
    ("output.hist_half_width", "4"),
    ("moments.order", "2"),
    ("moments.f", "one"),
    ("moments.bump_width", "1"),
    ("moments.grid_nodes", "41"),
    ("moments.grid_half_width", "5"),
    ("moments.pde_steps", "200"),
    ("moments.jump_replicas", "0"),
    ("mild.nodes", "65"),
    ("mild.half_width", "4"),
    ("mild.coarse_steps", "16"),
    ("mild.substeps", "4"),
    ("mild.paths", "1000"),
    ("mild.z_stride", "4"),
    ("mild.iterations", "5"),
    ("mild.init_sd", "0.5"),
    ("mild.save_env", "false"),
    ("holder.space_lags", "1,2,4,8"),
    ("holder.time_lags", "1,2,4,8"),
    ("holder.p", "1"),
];

fn key_index(key: &str) -> Option<usize> {
    KEYS.iter().position(|(k, _)| *k == key)
}

/// Experiment families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Simulate,
    Moments,
    Mild,
    Holder,
    Validate,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Simulate => "simulate",
            Experiment::Moments => "moments",
            Experiment::Mild => "mild",
            Experiment::Holder => "holder",
            Experiment::Validate => "validate",
        }
    }
}

/// Ordered key-value configuration with typed accessors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExperimentConfig {
    /// Explicitly set keys in the order they were given.
    entries: Vec<(String, String)>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::new()
    }
}

impl ExperimentConfig {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    /// Parses `section.key = value` lines; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::new(line, format!("line {} is not `key = value`", lineno + 1)))?;
            let key = key.trim();
            if cfg.entries.iter().any(|(k, _)| k == key) {
                return Err(ConfigError::new(key, "set more than once"));
            }
            cfg.set(key, value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("<file>", format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets or replaces one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if key_index(key).is_none() {
            return Err(ConfigError::new(key, "unknown key"));
        }
        if value.is_empty() || value.contains('\n') {
            return Err(ConfigError::new(key, "empty or multi-line value"));
        }
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value.to_string(),
            None => self.entries.push((key.to_string(), value.to_string())),
        }
        Ok(())
    }

    pub fn with(mut self, key: &str, value: &str) -> Result<Self, ConfigError> {
        self.set(key, value)?;
        Ok(self)
    }

    /// Explicit entries in the order given.
    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    /// Serialization of the explicit entries; `parse` inverts it exactly.
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Every key with defaults filled in, in canonical order.
    pub fn resolved_text(&self) -> String {
        KEYS.iter().map(|(k, _)| format!("{k} = {}\n", self.raw(k))).collect()
    }

    /// Content hash of the resolved configuration, git style:
    /// `sha256("config <len>\0" + resolved_text)` in hex.
    pub fn content_hash(&self) -> String {
        let body = self.resolved_text();
        let mut hasher = Sha256::new();
        hasher.update(format!("config {}\0", body.len()).as_bytes());
        hasher.update(body.as_bytes());
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Raw string value, falling back to the default.
    pub fn raw(&self, key: &str) -> &str {
        if let Some((_, v)) = self.entries.iter().find(|(k, _)| k == key) {
            return v;
        }
        let i = key_index(key).unwrap_or_else(|| panic!("undeclared config key {key}"));
        KEYS[i].1
    }

    pub fn f64(&self, key: &str) -> Result<f64, ConfigError> {
        let raw = self.raw(key);
        let v: f64 = raw.parse().map_err(|_| ConfigError::new(key, format!("`{raw}` is not a decimal")))?;
        if !(v.is_finite() && v > 0.0) {
            return Err(ConfigError::new(key, format!("must be positive, got `{raw}`")));
        }
        Ok(v)
    }

    pub fn u64(&self, key: &str) -> Result<u64, ConfigError> {
        let raw = self.raw(key);
        raw.parse().map_err(|_| ConfigError::new(key, format!("`{raw}` is not an unsigned integer")))
    }

    /// Positive integer.
    pub fn count(&self, key: &str) -> Result<usize, ConfigError> {
        let v = self.u64(key)?;
        if v == 0 {
            return Err(ConfigError::new(key, "must be positive"));
        }
        usize::try_from(v).map_err(|_| ConfigError::new(key, "too large"))
    }

    /// Nonnegative integer.
    pub fn amount(&self, key: &str) -> Result<usize, ConfigError> {
        usize::try_from(self.u64(key)?).map_err(|_| ConfigError::new(key, "too large"))
    }

    pub fn flag(&self, key: &str) -> Result<bool, ConfigError> {
        match self.raw(key) {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(ConfigError::new(key, format!("expected true or false, got `{other}`"))),
        }
    }

    pub fn choice<'a>(&self, key: &str, options: &[&'a str]) -> Result<&'a str, ConfigError> {
        let raw = self.raw(key);
        options
            .iter()
            .find(|o| **o == raw)
            .copied()
            .ok_or_else(|| ConfigError::new(key, format!("expected one of {}, got `{raw}`", options.join("|"))))
    }

    /// Comma-separated positive integers.
    pub fn counts(&self, key: &str) -> Result<Vec<usize>, ConfigError> {
        self.raw(key)
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|&v| v > 0)
                    .ok_or_else(|| ConfigError::new(key, format!("`{s}` is not a positive integer")))
            })
            .collect()
    }

    pub fn experiment(&self) -> Result<Experiment, ConfigError> {
        Ok(match self.choice("run.experiment", &["simulate", "moments", "mild", "holder", "validate"])? {
            "simulate" => Experiment::Simulate,
            "moments" => Experiment::Moments,
            "mild" => Experiment::Mild,
            "holder" => Experiment::Holder,
            _ => Experiment::Validate,
        })
    }

    pub fn seed(&self) -> Result<u64, ConfigError> {
        self.u64("run.seed")
    }

    pub fn output(&self) -> PathBuf {
        PathBuf::from(self.raw("run.output"))
    }

    /// Horizon as an exact rational; accepts `p/q` or a plain decimal.
    pub fn horizon(&self) -> Result<Time, ConfigError> {
        let key = "model.horizon";
        let raw = self.raw(key);
        let t = parse_rational(raw).ok_or_else(|| ConfigError::new(key, format!("`{raw}` is not a decimal or fraction")))?;
        if t == Time::from_integer(0) {
            return Err(ConfigError::new(key, "must be positive"));
        }
        Ok(t)
    }

    /// Checks every key the experiment reads, plus `T n` integral.
    pub fn validate(&self) -> Result<Experiment, ConfigError> {
        let exp = self.experiment()?;
        self.seed()?;
        for key in ["run.workers", "run.replicas", "model.dim", "model.n", "model.substeps", "model.particle_cap"] {
            self.count(key)?;
        }
        let t = self.horizon()?;
        let n = self.count("model.n")? as u64;
        if !(t * Time::from_integer(n)).is_integer() {
            return Err(ConfigError::new("model.horizon", format!("horizon times n = {n} must be an integer")));
        }
        let dim = self.count("model.dim")?;
        if dim > 3 {
            return Err(ConfigError::new("model.dim", "supported dimensions are 1, 2 and 3"));
        }
        match self.choice("model.init", &["gauss", "uniform"])? {
            "gauss" => self.f64("model.init_sd").map(drop)?,
            _ => self.f64("model.init_half_width").map(drop)?,
        }
        match self.choice("model.motion", &["exact", "block", "frozen"])? {
            "block" => {
                self.count("model.block_threshold")?;
                self.count("model.block_size")?;
            }
            "frozen" => self.f64("model.frozen_spacing").map(drop)?,
            _ => {}
        }
        match self.choice("kernel.h", &["box", "hat", "gauss", "zero"])? {
            "box" | "hat" => self.f64("kernel.h_width").map(drop)?,
            "gauss" => {
                self.f64("kernel.h_sigma")?;
                self.f64("kernel.h_cutoff")?;
            }
            _ => {}
        }
        if self.raw("kernel.h") != "zero" {
            self.f64("kernel.h_amplitude")?;
        }
        if self.raw("kernel.h_bound") != "auto" {
            self.f64("kernel.h_bound")?;
        }
        match self.choice("kernel.kappa", &["gauss", "const", "zero"])? {
            "gauss" => {
                self.f64("kernel.kappa_amplitude")?;
                self.f64("kernel.kappa_scale")?;
                self.f64("kernel.kappa_envelope")?;
            }
            "const" => self.f64("kernel.kappa_value").map(drop)?,
            _ => {}
        }
        match exp {
            Experiment::Simulate => {
                if self.choice("output.trajectory", &["flat", "histogram"])? == "histogram" {
                    self.count("output.bins")?;
                    self.f64("output.hist_half_width")?;
                }
            }
            Experiment::Moments => {
                let order = self.count("moments.order")?;
                if order > 2 || order * dim > 2 {
                    return Err(ConfigError::new("moments.order", "the moment PDE needs order times dimension at most 2"));
                }
                if self.choice("moments.f", &["one", "bump"])? == "bump" {
                    self.f64("moments.bump_width")?;
                }
                if self.count("moments.grid_nodes")? < 5 {
                    return Err(ConfigError::new("moments.grid_nodes", "need at least 5 nodes"));
                }
                self.f64("moments.grid_half_width")?;
                self.count("moments.pde_steps")?;
                self.amount("moments.jump_replicas")?;
            }
            Experiment::Mild | Experiment::Holder => {
                if dim != 1 {
                    return Err(ConfigError::new("model.dim", "the mild solver is one-dimensional"));
                }
                if self.count("mild.nodes")? < 2 {
                    return Err(ConfigError::new("mild.nodes", "need at least two nodes"));
                }
                for key in ["mild.coarse_steps", "mild.substeps", "mild.paths", "mild.z_stride", "mild.iterations"] {
                    self.count(key)?;
                }
                self.f64("mild.half_width")?;
                self.f64("mild.init_sd")?;
                self.flag("mild.save_env")?;
                if exp == Experiment::Holder {
                    let space = self.counts("holder.space_lags")?;
                    let time = self.counts("holder.time_lags")?;
                    if space.len() < 4 {
                        return Err(ConfigError::new("holder.space_lags", "need at least 4 lags"));
                    }
                    if time.len() < 4 {
                        return Err(ConfigError::new("holder.time_lags", "need at least 4 lags"));
                    }
                    let steps = self.count("mild.coarse_steps")?;
                    if time.iter().any(|&l| l >= steps) {
                        return Err(ConfigError::new("holder.time_lags", "lags must be below mild.coarse_steps"));
                    }
                    if space.iter().any(|&l| l >= self.count("mild.nodes").unwrap_or(0)) {
                        return Err(ConfigError::new("holder.space_lags", "lags must be below mild.nodes"));
                    }
                    self.f64("holder.p")?;
                }
            }
            Experiment::Validate => {}
        }
        Ok(exp)
    }
}

/// Exact rational from `p/q`, an integer or a plain decimal such as `0.25`.
pub fn parse_rational(s: &str) -> Option<Time> {
    if let Some((p, q)) = s.split_once('/') {
        let p: u64 = p.trim().parse().ok()?;
        let q: u64 = q.trim().parse().ok()?;
        return (q != 0).then(|| Time::new(p, q));
    }
    let (int, frac) = s.split_once('.').unwrap_or((s, ""));
    if (int.is_empty() && frac.is_empty()) || !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) {
        return None;
    }
    let denom = 10u64.checked_pow(u32::try_from(frac.len()).ok()?)?;
    let int: u64 = if int.is_empty() { 0 } else { int.parse().ok()? };
    let frac: u64 = if frac.is_empty() { 0 } else { frac.parse().ok()? };
    Some(Time::new(int.checked_mul(denom)?.checked_add(frac)?, denom))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let text = "run.experiment = moments\nmodel.horizon = 0.250\nkernel.kappa = const\nrun.seed = 18446744073709551615\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.to_text(), text);
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = ExperimentConfig::parse("model.nn = 3\n").unwrap_err();
        assert_eq!(err.key, "model.nn");
    }

    #[test]
    fn horizon_must_align_with_n() {
        let cfg = ExperimentConfig::new().with("model.n", "3").unwrap().with("model.horizon", "0.25").unwrap();
        assert_eq!(cfg.validate().unwrap_err().key, "model.horizon");
        let cfg = cfg.with("model.n", "4").unwrap();
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn nonpositive_values_are_rejected() {
        let cfg = ExperimentConfig::new().with("model.init_sd", "0").unwrap();
        assert_eq!(cfg.validate().unwrap_err().key, "model.init_sd");
        let cfg = ExperimentConfig::new().with("run.replicas", "0").unwrap();
        assert_eq!(cfg.validate().unwrap_err().key, "run.replicas");
    }

    #[test]
    fn rationals_parse_exactly() {
        assert_eq!(parse_rational("0.25"), Some(Time::new(1, 4)));
        assert_eq!(parse_rational("1/3"), Some(Time::new(1, 3)));
        assert_eq!(parse_rational("2"), Some(Time::new(2, 1)));
        assert_eq!(parse_rational(".5"), Some(Time::new(1, 2)));
        assert_eq!(parse_rational("1e-3"), None);
        assert_eq!(parse_rational("-1"), None);
    }

    #[test]
    fn hash_ignores_explicit_defaults() {
        let a = ExperimentConfig::new();
        let b = ExperimentConfig::new().with("model.n", "100").unwrap();
        let c = ExperimentConfig::new().with("model.n", "50").unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        assert_ne!(a.content_hash(), c.content_hash());
        assert_eq!(a.content_hash().len(), 64);
    }
}
