//! Training loops and run records.

pub mod baselines;
pub mod loan;
pub mod pepg;
pub mod sweep;

use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::envs::EnvSpec;
use crate::error::{PepgError, Result};
use crate::gradients::GradProvider;

pub use baselines::{run_mdrr, run_repeated_retraining};
pub use loan::{deploy_fixed, run_loan_protocol, LoanRun, LoanTrainConfig};
pub use pepg::{run_pepg, run_vanilla_pg};
pub use sweep::{summarize, sweep, SweepResult, SweepSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Pepg,
    PepgReg,
    VanillaPg,
    RpoFs,
    Mdrr,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] =
        [Algorithm::Pepg, Algorithm::PepgReg, Algorithm::VanillaPg, Algorithm::RpoFs, Algorithm::Mdrr];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Pepg => "pepg",
            Algorithm::PepgReg => "pepg-reg",
            Algorithm::VanillaPg => "vanilla-pg",
            Algorithm::RpoFs => "rpo-fs",
            Algorithm::Mdrr => "mdrr",
        }
    }
}

impl FromStr for Algorithm {
    type Err = PepgError;
    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| PepgError::config("algorithm", format!("unknown algorithm `{s}`")))
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub eta: f64,
    pub lambda: f64,
    /// Trajectories per iteration.
    pub trajectories: usize,
    /// Rollout length; derived from `eps_tail` when absent.
    pub horizon: Option<usize>,
    pub eps_tail: f64,
    pub iterations: usize,
    pub seed: u64,
    pub provider: GradProvider,
    pub discount_weights: bool,
    /// Replace the estimator by central differences of the exact value.
    pub exact_gradient: bool,
    /// Entropy weight of the baselines' inner solver.
    pub lambda_base: f64,
    /// MDRR memory weight `v`.
    pub memory_weight: f64,
    /// MDRR retraining delay `k`.
    pub delay: usize,
    /// MDRR window of past environment estimates.
    pub window: usize,
    /// MDRR trajectories per round used for environment estimates; 0 uses exact induced tables.
    pub batch: usize,
    /// Mixing toward the shortest-path policy for baseline initialization (gridworld only).
    pub epsilon_init: f64,
    /// Draw a fresh gridworld perturbation every iteration.
    pub resample_perturbation: bool,
    /// Record wall-clock milliseconds (breaks byte-identical output).
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            algorithm: Algorithm::Pepg,
            eta: 0.1,
            lambda: 0.0,
            trajectories: 100,
            horizon: None,
            eps_tail: 1e-4,
            iterations: 1000,
            seed: 0,
            provider: GradProvider::Analytic,
            discount_weights: true,
            exact_gradient: false,
            lambda_base: 0.1,
            memory_weight: 1.1,
            delay: 3,
            window: 10,
            batch: 10,
            epsilon_init: 0.5,
            resample_perturbation: false,
            timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(PepgError::config("eta", format!("must be finite and non-negative, got {}", self.eta)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(PepgError::config("lambda", "must be finite and non-negative"));
        }
        if !(self.lambda_base > 0.0) {
            return Err(PepgError::config("lambda_base", "must be positive"));
        }
        if self.iterations == 0 {
            return Err(PepgError::config("iterations", "must be at least 1"));
        }
        if self.trajectories == 0 {
            return Err(PepgError::config("trajectories", "must be at least 1"));
        }
        if self.horizon == Some(0) {
            return Err(PepgError::config("horizon", "must be at least 1"));
        }
        if !(self.eps_tail > 0.0 && self.eps_tail < 1.0) {
            return Err(PepgError::config("eps_tail", "must lie in (0, 1)"));
        }
        if self.delay == 0 || self.window == 0 {
            return Err(PepgError::config("delay", "delay and window must be at least 1"));
        }
        if !(self.memory_weight >= 1.0) {
            return Err(PepgError::config("memory_weight", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.epsilon_init) {
            return Err(PepgError::config("epsilon_init", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One logged iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub iteration: usize,
    pub seed: u64,
    pub algo: String,
    pub mc_return: f64,
    pub exact_value: f64,
    pub stability_l2: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

/// Per-iteration metrics of a run plus its terminal state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub algo: String,
    pub seed: u64,
    pub rows: Vec<RunRow>,
    pub final_theta: Vec<f64>,
    /// Set when the run stopped early.
    pub aborted: Option<String>,
}

pub const CSV_COLUMNS: [&str; 8] =
    ["iteration", "seed", "algo", "mc_return", "exact_value", "stability_l2", "grad_norm", "wall_ms"];

impl RunRecord {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for row in &self.rows {
            wtr.serialize(row)?;
        }
        if self.rows.is_empty() {
            wtr.write_record(CSV_COLUMNS)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Vec<RunRow>> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != CSV_COLUMNS {
            return Err(PepgError::config("csv", "columns do not match the run-record layout"));
        }
        Ok(rdr.deserialize().collect::<std::result::Result<Vec<RunRow>, _>>()?)
    }

    pub fn final_row(&self) -> Option<&RunRow> {
        self.rows.last()
    }
}

/// SplitMix64 mix of a run seed with a stream tag and index.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs the configured algorithm on the environment described by `env`.
pub fn run(env: &EnvSpec, config: &TrainConfig) -> Result<RunRecord> {
    config.validate()?;
    match config.algorithm {
        Algorithm::Pepg | Algorithm::PepgReg => run_pepg(env, config),
        Algorithm::VanillaPg => run_vanilla_pg(env, config),
        Algorithm::RpoFs => run_repeated_retraining(env, config),
        Algorithm::Mdrr => run_mdrr(env, config),
    }
}

/// Wall-clock helper honouring [`TrainConfig::timing`].
pub(crate) struct Clock {
    start: Option<std::time::Instant>,
}

impl Clock {
    pub fn start(enabled: bool) -> Self {
        Clock { start: enabled.then(std::time::Instant::now) }
    }
    pub fn elapsed_ms(&self) -> f64 {
        self.start.map(|s| s.elapsed().as_secs_f64() * 1e3).unwrap_or(0.0)
    }
}
