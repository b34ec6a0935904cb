//! Experiment configuration: a JSON tree with an explicit schema version.

use std::collections::BTreeMap;

use bpme::conditioned::PlusConfig;
use bpme::theorems::TheoremConfig;
use bpme::{EnvironmentModel, MarkovKernel, ModelError, OffspringError, OffspringLaw};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("{field}: {message}")]
    Validation { field: String, message: String },
}

impl ConfigError {
    fn invalid(field: impl Into<String>, message: impl ToString) -> Self {
        ConfigError::Validation { field: field.into(), message: message.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase", deny_unknown_fields)]
pub enum OffspringSpec {
    Geometric {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        p: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mean: Option<f64>,
    },
    Poisson {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lambda: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mean: Option<f64>,
    },
    Explicit {
        pmf: Pmf,
    },
}

/// Either a dense list or a sparse `{"k": p}` map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Pmf {
    Dense(Vec<f64>),
    Sparse(BTreeMap<String, f64>),
}

impl Pmf {
    fn dense(&self, field: &str) -> Result<Vec<f64>, ConfigError> {
        match self {
            Pmf::Dense(v) => Ok(v.clone()),
            Pmf::Sparse(map) => {
                let mut out = Vec::new();
                for (k, &p) in map {
                    let k: usize = k.trim().parse().map_err(|_| ConfigError::invalid(field, format!("pmf key {k:?} is not a count")))?;
                    if out.len() <= k {
                        out.resize(k + 1, 0.0);
                    }
                    out[k] = p;
                }
                Ok(out)
            }
        }
    }
}

impl OffspringSpec {
    pub fn to_law(&self, field: &str) -> Result<OffspringLaw, ConfigError> {
        let wrap = |r: Result<OffspringLaw, OffspringError>| r.map_err(|e| ConfigError::invalid(field, e));
        match self {
            OffspringSpec::Geometric { p: Some(p), mean: None } => wrap(OffspringLaw::geometric(*p)),
            OffspringSpec::Geometric { p: None, mean: Some(m) } => wrap(OffspringLaw::geometric_with_mean(*m)),
            OffspringSpec::Poisson { lambda: Some(l), mean: None } | OffspringSpec::Poisson { lambda: None, mean: Some(l) } => {
                wrap(OffspringLaw::poisson(*l))
            }
            OffspringSpec::Explicit { pmf } => wrap(OffspringLaw::explicit(pmf.dense(field)?)),
            OffspringSpec::Geometric { .. } => Err(ConfigError::invalid(field, "geometric needs exactly one of p, mean")),
            OffspringSpec::Poisson { .. } => Err(ConfigError::invalid(field, "poisson needs exactly one of lambda, mean")),
        }
    }

    pub fn from_law(law: &OffspringLaw) -> Self {
        match law {
            OffspringLaw::Geometric { p } => OffspringSpec::Geometric { p: Some(*p), mean: None },
            OffspringLaw::Poisson { lambda } => OffspringSpec::Poisson { lambda: Some(*lambda), mean: None },
            OffspringLaw::Explicit(e) => OffspringSpec::Explicit { pmf: Pmf::Dense(e.pmf().to_vec()) },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateSpec {
    pub label: String,
    pub offspring: OffspringSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSpec {
    pub states: Vec<StateSpec>,
    pub kernel: Vec<Vec<f64>>,
}

/// A state given by label or by index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StateRef {
    Index(usize),
    Label(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Replicates {
    /// Trajectories written by `simulate`.
    pub simulate: u64,
    /// Paths per starting state for `V`.
    pub harmonic: u64,
    /// Paths for `U` and `u`.
    pub plus: u64,
    /// Survivors wanted at the last horizon.
    pub min_survivors: u64,
    pub max_survival: u64,
    pub bootstrap: u64,
}

impl Default for Replicates {
    fn default() -> Self {
        Self { simulate: 10, harmonic: 100_000, plus: 100_000, min_survivors: 10_000, max_survival: 10_000_000, bootstrap: 200 }
    }
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}
fn default_population() -> u64 {
    1
}
fn default_horizons() -> Vec<usize> {
    vec![256, 1024, 4096]
}
fn default_y_grid() -> Vec<f64> {
    vec![0.0, 0.5, 1.0, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0, 16.0, 24.0, 32.0, 50.0]
}
fn default_u_levels() -> Vec<f64> {
    vec![2.0, 4.0, 6.0, 8.0]
}
fn default_level() -> f64 {
    1.0
}
fn default_harmonic_horizon() -> usize {
    4096
}
fn default_plus_horizon() -> usize {
    4096
}
fn default_seed() -> u64 {
    42
}
fn default_state() -> StateRef {
    StateRef::Index(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub environment: EnvironmentSpec,
    #[serde(default = "default_state")]
    pub initial_state: StateRef,
    #[serde(default = "default_population")]
    pub initial_population: u64,
    /// Restricts conditional laws to one final state.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_state: Option<StateRef>,
    #[serde(default = "default_horizons")]
    pub horizons: Vec<usize>,
    #[serde(default)]
    pub replicates: Replicates,
    #[serde(default = "default_y_grid")]
    pub y_grid: Vec<f64>,
    /// Levels at which the product `V·U` is evaluated for `u`.
    #[serde(default = "default_u_levels")]
    pub u_levels: Vec<f64>,
    /// Starting level of the killed walk.
    #[serde(default = "default_level")]
    pub y: f64,
    #[serde(default = "default_harmonic_horizon")]
    pub harmonic_horizon: usize,
    #[serde(default = "default_plus_horizon")]
    pub plus_horizon: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    /// Hash of the configuration this one was derived from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derived_from: Option<String>,
}

/// A configuration together with the model it describes.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: EnvironmentModel,
    pub i: usize,
    pub j: Option<usize>,
}

pub fn parse_config(text: &str) -> Result<Experiment, ConfigError> {
    let config: ExperimentConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
        line: e.line(),
        column: e.column(),
        message: strip_position(&e.to_string()),
    })?;
    Experiment::new(config)
}

fn strip_position(message: &str) -> String {
    match message.rfind(" at line ") {
        Some(k) => message[..k].to_string(),
        None => message.to_string(),
    }
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self, ConfigError> {
        if config.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::invalid(
                "schema_version",
                format!("unsupported version {} (this build reads {SCHEMA_VERSION})", config.schema_version),
            ));
        }
        let model = build_model(&config.environment)?;
        let i = resolve(&model, &config.initial_state, "initial_state")?;
        let j = config.final_state.as_ref().map(|s| resolve(&model, s, "final_state")).transpose()?;
        if config.horizons.is_empty() || config.horizons.contains(&0) || config.horizons.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ConfigError::invalid("horizons", "must be positive and strictly increasing"));
        }
        let r = &config.replicates;
        for (name, v) in [
            ("simulate", r.simulate),
            ("harmonic", r.harmonic),
            ("plus", r.plus),
            ("min_survivors", r.min_survivors),
            ("max_survival", r.max_survival),
            ("bootstrap", r.bootstrap),
        ] {
            if v == 0 {
                return Err(ConfigError::invalid(format!("replicates.{name}"), "must be at least 1"));
            }
        }
        check_levels(&config.y_grid, "y_grid")?;
        check_levels(&config.u_levels, "u_levels")?;
        if !(config.y.is_finite() && config.y >= 0.0) {
            return Err(ConfigError::invalid("y", "must be finite and nonnegative"));
        }
        if config.harmonic_horizon < 2 || config.plus_horizon == 0 {
            return Err(ConfigError::invalid("harmonic_horizon", "horizons must be at least 2"));
        }
        Ok(Self { config, model, i, j })
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON, output
    /// directory excluded.
    pub fn hash(&self) -> String {
        let mut canonical = self.config.clone();
        canonical.output_dir = None;
        let bytes = serde_json::to_vec(&canonical).expect("config serialises");
        let digest = Sha256::digest(&bytes);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn theorem_config(&self) -> TheoremConfig {
        let c = &self.config;
        TheoremConfig {
            i: self.i,
            z: c.initial_population,
            j: self.j,
            y: c.y,
            n_list: c.horizons.clone(),
            min_survivors: c.replicates.min_survivors as usize,
            max_replicates: c.replicates.max_survival,
            bootstrap: c.replicates.bootstrap as usize,
            seed: c.seed,
        }
    }

    pub fn plus_config(&self) -> PlusConfig {
        PlusConfig { horizon: self.config.plus_horizon, ..PlusConfig::default() }
    }

    pub fn label(&self, state: usize) -> &str {
        &self.model.labels()[state]
    }
}

fn check_levels(levels: &[f64], field: &str) -> Result<(), ConfigError> {
    if levels.is_empty() || levels.iter().any(|y| !y.is_finite() || *y < 0.0) || levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ConfigError::invalid(field, "levels must be finite, nonnegative and strictly increasing"));
    }
    Ok(())
}

fn resolve(model: &EnvironmentModel, state: &StateRef, field: &str) -> Result<usize, ConfigError> {
    match state {
        StateRef::Index(k) if *k < model.dim() => Ok(*k),
        StateRef::Index(k) => Err(ConfigError::invalid(field, format!("state index {k} is out of range (d = {})", model.dim()))),
        StateRef::Label(l) => model.state_index(l).ok_or_else(|| ConfigError::invalid(field, format!("no state labelled {l:?}"))),
    }
}

fn build_model(env: &EnvironmentSpec) -> Result<EnvironmentModel, ConfigError> {
    if env.states.len() != env.kernel.len() {
        return Err(ConfigError::invalid("environment.kernel", format!("{} rows for {} states", env.kernel.len(), env.states.len())));
    }
    let kernel = MarkovKernel::new(&env.kernel).map_err(|e| {
        let field = match &e {
            bpme::EnvironmentError::NonStochastic { row, .. } | bpme::EnvironmentError::NotSquare { row, .. } => {
                format!("environment.kernel[{row}] ({})", env.states[*row].label)
            }
            bpme::EnvironmentError::NegativeEntry { row, col, .. } => format!("environment.kernel[{row}][{col}]"),
            _ => "environment.kernel".to_string(),
        };
        ConfigError::invalid(field, e)
    })?;
    let mut laws = Vec::with_capacity(env.states.len());
    for (k, s) in env.states.iter().enumerate() {
        laws.push(s.offspring.to_law(&format!("environment.states[{k}] ({})", s.label))?);
    }
    let labels = env.states.iter().map(|s| s.label.clone()).collect();
    EnvironmentModel::with_labels(labels, kernel, laws).map_err(|e| match &e {
        ModelError::Offspring { state, source } => {
            let k = env.states.iter().position(|s| &s.label == state).unwrap_or(0);
            ConfigError::invalid(format!("environment.states[{k}] ({state})"), source)
        }
        ModelError::Environment(inner) => ConfigError::invalid("environment.kernel", inner),
        _ => ConfigError::invalid("environment", e),
    })
}

/// The configuration with `state`'s offspring mean rescaled so the model is critical.
pub fn calibrated(exp: &Experiment, state: usize) -> Result<ExperimentConfig, ConfigError> {
    let field = format!("environment.states[{state}] ({})", exp.label(state));
    let model = exp.model.calibrate(state).map_err(|e| ConfigError::invalid(field, e))?;
    let mut config = exp.config.clone();
    config.environment.states[state].offspring = OffspringSpec::from_law(model.law(state));
    config.derived_from = Some(exp.hash());
    Ok(config)
}
