//! Experiment specification documents (TOML).
//!
//! ```toml
//! name = "gridworld"
//! out = "runs/gridworld"
//! seeds = [0, 1, 2]
//! algorithms = ["pepg", "pepg-reg", "rpo-fs", "mdrr"]
//!
//! [env]
//! type = "gridworld"
//! beta_b = 200.0
//!
//! [train]
//! eta = 0.1
//! iterations = 1000
//!
//! [algorithm_overrides.pepg-reg]
//! lambda = 2.0
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envs::{EnvSpec, GridworldConfig};
use crate::error::{PepgError, Result};
use crate::trainers::{Algorithm, LoanTrainConfig, TrainConfig};

/// Default entropy weight of `pepg-reg` when neither `train.lambda` nor an override sets one.
pub const PEPG_REG_LAMBDA: f64 = 2.0;

/// One-parameter grid for `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    /// A `TrainConfig` field name.
    pub parameter: String,
    pub values: Vec<toml::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "default_algorithms")]
    pub algorithms: Vec<Algorithm>,
    pub env: Option<EnvSpec>,
    /// Gridworld layout file, relative to the spec file; replaces `env.layout`.
    pub grid_file: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
    /// Per-algorithm `TrainConfig` fields, keyed by algorithm name.
    #[serde(default)]
    pub algorithm_overrides: BTreeMap<String, toml::Table>,
    /// Runs the loan protocol instead of a tabular environment.
    pub loan: Option<LoanTrainConfig>,
    pub sweep: Option<SweepGrid>,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_algorithms() -> Vec<Algorithm> {
    vec![Algorithm::Pepg]
}

/// Sets `path` (dot separated) in a TOML document. The value is parsed as a
/// TOML literal and falls back to a bare string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| PepgError::config("override", format!("expected key=value, got `{assignment}`")))?;
    let path = path.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(PepgError::config("override", format!("malformed key `{path}`")));
    }
    let mut table = doc;
    for key in &keys[..keys.len() - 1] {
        let entry = table.entry(key.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| PepgError::config(path, format!("`{key}` is not a table")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Turns a serde error message into a config error naming the offending key.
fn schema_error(e: toml::de::Error) -> PepgError {
    let msg = e.message().to_string();
    let key = msg
        .split('`')
        .nth(1)
        .filter(|_| msg.contains("unknown field") || msg.contains("missing field"))
        .unwrap_or("spec")
        .to_string();
    PepgError::config(key, msg)
}

impl ExperimentSpec {
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(schema_error)?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let spec: ExperimentSpec = toml::Value::Table(doc).try_into().map_err(schema_error)?;
        Ok(spec)
    }

    /// Reads, applies overrides, resolves `grid_file` and validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut spec = Self::parse(&text, overrides)?;
        if let Some(file) = spec.grid_file.take() {
            let file = path.parent().map(|p| p.join(&file)).unwrap_or(file);
            let layout = GridworldConfig::load_layout(&file)?;
            match &mut spec.env {
                Some(EnvSpec::Gridworld(c)) => c.layout = layout,
                None => spec.env = Some(EnvSpec::Gridworld(GridworldConfig { layout, ..GridworldConfig::default() })),
                Some(_) => return Err(PepgError::config("grid_file", "only valid with a gridworld environment")),
            }
            spec.grid_file = Some(file);
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Effective training config of one algorithm.
    pub fn config_for(&self, algorithm: Algorithm) -> Result<TrainConfig> {
        let mut doc = toml::Table::try_from(&self.train).map_err(|e| PepgError::config("train", e.to_string()))?;
        let extra = self.algorithm_overrides.get(algorithm.as_str());
        if let Some(extra) = extra {
            for (k, v) in extra {
                doc.insert(k.clone(), v.clone());
            }
        }
        let mut cfg: TrainConfig = toml::Value::Table(doc).try_into().map_err(schema_error)?;
        cfg.algorithm = algorithm;
        let lambda_set = extra.is_some_and(|t| t.contains_key("lambda"));
        if algorithm == Algorithm::PepgReg && !lambda_set && cfg.lambda == 0.0 {
            cfg.lambda = PEPG_REG_LAMBDA;
        }
        Ok(cfg)
    }

    /// `(label, config)` pairs: one per algorithm, times the sweep grid when present.
    pub fn configs(&self) -> Result<Vec<(String, TrainConfig)>> {
        let mut out = Vec::new();
        for &algo in &self.algorithms {
            let base = self.config_for(algo)?;
            match &self.sweep {
                None => out.push((algo.to_string(), base)),
                Some(grid) => {
                    for v in &grid.values {
                        let mut doc =
                            toml::Table::try_from(&base).map_err(|e| PepgError::config("sweep", e.to_string()))?;
                        doc.insert(grid.parameter.clone(), v.clone());
                        let cfg: TrainConfig = toml::Value::Table(doc).try_into().map_err(schema_error)?;
                        out.push((format!("{algo}-{}={v}", grid.parameter), cfg));
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.env, &self.loan) {
            (None, None) => return Err(PepgError::config("env", "spec needs an `env` or a `loan` section")),
            (Some(_), Some(_)) => return Err(PepgError::config("loan", "`env` and `loan` are mutually exclusive")),
            _ => {}
        }
        if let Some(loan) = &self.loan {
            if !(loan.eta >= 0.0 && loan.eta.is_finite()) {
                return Err(PepgError::config("eta", format!("must be finite and non-negative, got {}", loan.eta)));
            }
            crate::envs::LoanModel::new(loan.loan.clone())?;
            return Ok(());
        }
        if self.algorithms.is_empty() {
            return Err(PepgError::config("algorithms", "list at least one algorithm"));
        }
        if let Some(grid) = &self.sweep {
            if grid.values.is_empty() {
                return Err(PepgError::config("sweep.values", "needs at least one value"));
            }
        }
        for (_, cfg) in self.configs()? {
            cfg.validate()?;
        }
        self.env.as_ref().expect("checked above").build()?;
        Ok(())
    }
}
