//! Parallel sweeps over (config, seed) pairs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run, RunRecord, TrainConfig};
use crate::envs::EnvSpec;
use crate::error::{PepgError, Result};

/// Per-iteration aggregate of one config across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub label: String,
    pub seeds: usize,
    pub mean_value: Vec<f64>,
    pub stderr_value: Vec<f64>,
    pub mean_return: Vec<f64>,
    pub stderr_return: Vec<f64>,
    pub mean_stability: Vec<f64>,
    /// Cross-seed mean and standard deviation of the last logged exact value.
    pub final_mean: f64,
    pub final_std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    /// `records[i]` holds the successful runs of config `i`, in seed order.
    pub records: Vec<Vec<RunRecord>>,
    pub summaries: Vec<SweepSummary>,
    /// `(config index, seed, message)` for runs that failed.
    pub failures: Vec<(usize, u64, String)>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

fn column(records: &[RunRecord], len: usize, f: impl Fn(&super::RunRow) -> f64) -> (Vec<f64>, Vec<f64>) {
    (0..len)
        .map(|i| {
            let xs: Vec<f64> = records.iter().filter_map(|r| r.rows.get(i).map(&f)).collect();
            let (m, s) = mean_std(&xs);
            (m, s / (xs.len() as f64).sqrt())
        })
        .unzip()
}

pub fn summarize(label: &str, records: &[RunRecord]) -> Option<SweepSummary> {
    let len = records.iter().map(|r| r.rows.len()).min()?;
    if len == 0 {
        return None;
    }
    let (mean_value, stderr_value) = column(records, len, |r| r.exact_value);
    let (mean_return, stderr_return) = column(records, len, |r| r.mc_return);
    let (mean_stability, _) = column(records, len, |r| r.stability_l2);
    let finals: Vec<f64> = records.iter().map(|r| r.rows[len - 1].exact_value).collect();
    let (final_mean, final_std) = mean_std(&finals);
    Some(SweepSummary {
        label: label.into(),
        seeds: records.len(),
        mean_value,
        stderr_value,
        mean_return,
        stderr_return,
        mean_stability,
        final_mean,
        final_std,
    })
}

/// Runs every config for every seed (config seeds are overridden) on up to `jobs` threads.
pub fn sweep(env: &EnvSpec, configs: &[(String, TrainConfig)], seeds: &[u64], jobs: Option<usize>) -> Result<SweepResult> {
    if configs.is_empty() || seeds.is_empty() {
        return Err(PepgError::config("sweep", "needs at least one config and one seed"));
    }
    let tasks: Vec<(usize, u64)> = (0..configs.len()).flat_map(|i| seeds.iter().map(move |&s| (i, s))).collect();
    let exec = || {
        tasks
            .par_iter()
            .map(|&(i, seed)| (i, seed, run(env, &TrainConfig { seed, ..configs[i].1.clone() })))
            .collect::<Vec<_>>()
    };
    let outcomes = match jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build()
            .map_err(|e| PepgError::config("jobs", e.to_string()))?
            .install(exec),
        None => exec(),
    };
    let mut records: Vec<Vec<RunRecord>> = vec![Vec::new(); configs.len()];
    let mut failures = Vec::new();
    for (i, seed, out) in outcomes {
        match out {
            Ok(rec) => {
                if let Some(msg) = &rec.aborted {
                    failures.push((i, seed, msg.clone()));
                }
                records[i].push(rec);
            }
            Err(e) => failures.push((i, seed, e.to_string())),
        }
    }
    let summaries = configs.iter().zip(&records).filter_map(|((label, _), recs)| summarize(label, recs)).collect();
    Ok(SweepResult { records, summaries, failures })
}
