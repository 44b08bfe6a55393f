//! Experiment configuration files.
//!
//! A configuration is one JSON object. The workload is either a named preset
//! or an explicit `n` plus `classes`; everything else has a default.
//!
//! ```json
//! {
//!   "preset": "appendix-h",
//!   "scales": [4, 16, 64],
//!   "policies": ["wham", "fwcam"],
//!   "replicas": 10,
//!   "seed": 7
//! }
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::policies::{PolicyKind, Wham};
use crate::relaxopt::{relax_classes, solve_relaxed};
use crate::simulator::{SweepConfig, DEFAULT_ARRIVALS_PER_CELL, DEFAULT_LIVE_CAP, DEFAULT_WARMUP_FRACTION};
use crate::speedup::{SpeedupFunction, SpeedupSpec};
use crate::workload::{ArrivalProcess, JobClass, SizeDist, SizeSpec, WorkloadError, WorkloadSpec};

/// Three-class mixed workload at load 0.25 shipped with the crate.
pub const THREE_CLASS_PRESET: &str = include_str!("../../configs/three-class.json");

pub const DEFAULT_BETA: f64 = 0.8;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("schema error{}: {message}", location_suffix(*line, *column))]
    Schema { line: usize, column: usize, message: String },
    #[error("class {class}: speedup violates the model axioms: {message}")]
    Axiom { class: usize, message: String },
    #[error("invalid workload: {0}")]
    Workload(String),
    #[error("relaxed problem is infeasible: {0}")]
    Infeasible(String),
}

fn location_suffix(line: usize, column: usize) -> String {
    if line == 0 {
        String::new()
    } else {
        format!(" at line {line}, column {column}")
    }
}

impl ConfigError {
    fn schema(message: impl fmt::Display) -> Self {
        ConfigError::Schema { line: 0, column: 0, message: message.to_string() }
    }

    /// Short tag naming the error family, used on the command line.
    pub fn kind(&self) -> &'static str {
        match self {
            ConfigError::Io { .. } => "io",
            ConfigError::Parse { .. } => "parse",
            ConfigError::Schema { .. } => "schema",
            ConfigError::Axiom { .. } => "axiom",
            ConfigError::Workload(_) => "workload",
            ConfigError::Infeasible(_) => "infeasible",
        }
    }
}

impl From<serde_json::Error> for ConfigError {
    fn from(e: serde_json::Error) -> Self {
        use serde_json::error::Category;
        let (line, column) = (e.line(), e.column());
        // serde_json appends " at line L column C"; the location is reported separately
        let message = e.to_string();
        let message = match message.rfind(" at line ") {
            Some(i) => message[..i].to_string(),
            None => message,
        };
        match e.classify() {
            Category::Syntax | Category::Eof | Category::Io => ConfigError::Parse { line, column, message },
            Category::Data => ConfigError::Schema { line, column, message },
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawClass {
    arrival: ArrivalProcess,
    size: SizeSpec,
    holding_cost: f64,
    speedup: SpeedupSpec,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWorkload {
    n: Option<f64>,
    classes: Option<Vec<RawClass>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    preset: Option<String>,
    n: Option<f64>,
    classes: Option<Vec<RawClass>>,
    scales: Option<Vec<f64>>,
    policies: Option<Vec<PolicyKind>>,
    beta: Option<f64>,
    horizon: Option<f64>,
    warmup: Option<f64>,
    replicas: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    live_cap: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub workload: WorkloadSpec,
    pub scales: Vec<f64>,
    pub policies: Vec<PolicyKind>,
    pub beta: f64,
    /// Expected arrivals per simulated cell.
    pub horizon: f64,
    /// Fraction of each cell's horizon discarded as warmup.
    pub warmup: f64,
    pub replicas: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub live_cap: usize,
}

impl ExperimentConfig {
    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            scales: self.scales.clone(),
            policies: self.policies.clone(),
            replicas: self.replicas,
            arrivals_per_cell: self.horizon,
            warmup_fraction: self.warmup,
            base_seed: self.seed,
            beta: self.beta,
            live_cap: self.live_cap,
        }
    }
}

fn build_workload(n: Option<f64>, classes: Option<Vec<RawClass>>) -> Result<WorkloadSpec, ConfigError> {
    let n = n.ok_or_else(|| ConfigError::schema("missing field `n`"))?;
    let raw = classes.ok_or_else(|| ConfigError::schema("missing field `classes`"))?;
    let mut classes = Vec::with_capacity(raw.len());
    for (i, c) in raw.into_iter().enumerate() {
        let speedup = SpeedupFunction::try_from(c.speedup)
            .map_err(|e| ConfigError::Axiom { class: i, message: e.to_string() })?;
        let size = SizeDist::try_from(c.size).map_err(|e| ConfigError::Workload(format!("class {i}: {e}")))?;
        classes.push(JobClass::new(c.arrival, size, c.holding_cost, speedup));
    }
    WorkloadSpec::new(classes, n).map_err(|e| match e {
        WorkloadError::Speedup(s) => ConfigError::Axiom { class: 0, message: s.to_string() },
        other => ConfigError::Workload(other.to_string()),
    })
}

/// Workload of a named preset.
pub fn preset(name: &str) -> Result<WorkloadSpec, ConfigError> {
    match name {
        "appendix-h" => {
            let raw: RawWorkload = serde_json::from_str(THREE_CLASS_PRESET)?;
            build_workload(raw.n, raw.classes)
        }
        other => Err(ConfigError::schema(format!("unknown preset {other:?}; known presets: appendix-h"))),
    }
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    // syntax first, so malformed JSON never reports as a schema problem
    let _: serde_json::Value = serde_json::from_str(text)?;
    let raw: RawConfig = serde_json::from_str(text)?;

    let workload = match raw.preset {
        Some(name) => {
            if raw.n.is_some() || raw.classes.is_some() {
                return Err(ConfigError::schema("`preset` cannot be combined with `n` or `classes`"));
            }
            preset(&name)?
        }
        None => build_workload(raw.n, raw.classes)?,
    };

    let scales = raw.scales.unwrap_or_else(|| vec![1.0]);
    if scales.is_empty() || scales.iter().any(|d| !(*d >= 1.0) || !d.is_finite()) {
        return Err(ConfigError::schema(format!("`scales` must be a non-empty list of values >= 1, got {scales:?}")));
    }
    let policies = raw
        .policies
        .unwrap_or_else(|| vec![PolicyKind::Wham, PolicyKind::Fwcam, PolicyKind::Equi, PolicyKind::Greedy]);
    if policies.is_empty() {
        return Err(ConfigError::schema("`policies` must not be empty"));
    }
    for (i, p) in policies.iter().enumerate() {
        if policies[..i].contains(p) {
            return Err(ConfigError::schema(format!("policy {p} listed twice")));
        }
    }
    let beta = raw.beta.unwrap_or(DEFAULT_BETA);
    if !(beta > 0.75 && beta < 1.0) {
        return Err(ConfigError::schema(format!("`beta` must lie in (0.75, 1), got {beta}")));
    }
    let horizon = raw.horizon.unwrap_or(DEFAULT_ARRIVALS_PER_CELL);
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(ConfigError::schema(format!("`horizon` must be positive, got {horizon}")));
    }
    let warmup = raw.warmup.unwrap_or(DEFAULT_WARMUP_FRACTION);
    if !(0.0..1.0).contains(&warmup) {
        return Err(ConfigError::schema(format!("`warmup` must lie in [0, 1), got {warmup}")));
    }
    let replicas = raw.replicas.unwrap_or(10);
    if replicas == 0 {
        return Err(ConfigError::schema("`replicas` must be at least 1"));
    }
    let live_cap = raw.live_cap.unwrap_or(DEFAULT_LIVE_CAP);

    if policies.contains(&PolicyKind::Wham) {
        Wham::new(&workload.classes).map_err(|e| match e {
            crate::policies::PolicyError::NotStrictlyConcave(class) => {
                ConfigError::Axiom { class, message: "wham needs a strictly concave speedup".into() }
            }
            other => ConfigError::Workload(other.to_string()),
        })?;
    }
    solve_relaxed(&relax_classes(&workload, 1.0), workload.n).map_err(|e| ConfigError::Infeasible(e.to_string()))?;

    Ok(ExperimentConfig {
        workload,
        scales,
        policies,
        beta,
        horizon,
        warmup,
        replicas,
        seed: raw.seed.unwrap_or(1),
        out: raw.out,
        live_cap,
    })
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    parse_config(&text)
}
