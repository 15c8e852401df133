//! Run artifacts: one CSV and one JSON manifest per (label, seed).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::spec::ExperimentSpec;
use crate::envs::EnvSpec;
use crate::error::Result;
use crate::trainers::RunRecord;

/// `git describe` of the build, or `unknown` outside a checkout.
pub const GIT_DESCRIBE: &str = env!("PEPG_GIT_DESCRIBE");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub label: String,
    pub seed: u64,
    pub git_describe: String,
    pub env: serde_json::Value,
    pub config: serde_json::Value,
    pub aborted: Option<String>,
}

/// SHA-256 of the spec's JSON form, ignoring the seed list and output directory
/// so that the same experiment hashes identically wherever and however often it runs.
pub fn spec_hash(spec: &ExperimentSpec) -> Result<String> {
    let mut canonical = spec.clone();
    canonical.seeds.clear();
    canonical.out = None;
    let bytes = serde_json::to_vec(&canonical)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Directory name for a run label; path separators and spaces become `_`.
pub fn label_dir(label: &str) -> String {
    label.chars().map(|c| if c == '/' || c == '\\' || c.is_whitespace() { '_' } else { c }).collect()
}

/// Writes `out/<label>/seed-<n>.csv` and the matching `.json`; returns the CSV path.
pub fn write_run(
    out: &Path,
    label: &str,
    record: &RunRecord,
    hash: &str,
    env: Option<&EnvSpec>,
    config: serde_json::Value,
) -> Result<PathBuf> {
    let dir = out.join(label_dir(label));
    fs::create_dir_all(&dir)?;
    let csv_path = dir.join(format!("seed-{}.csv", record.seed));
    record.write_csv(fs::File::create(&csv_path)?)?;
    let manifest = Manifest {
        config_hash: hash.to_string(),
        label: label.to_string(),
        seed: record.seed,
        git_describe: GIT_DESCRIBE.to_string(),
        env: match env {
            Some(e) => serde_json::to_value(e)?,
            None => serde_json::Value::Null,
        },
        config,
        aborted: record.aborted.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(dir.join(format!("seed-{}.json", record.seed)), json)?;
    Ok(csv_path)
}
