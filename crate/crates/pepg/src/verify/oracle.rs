//! Approximate performatively optimal policies by multi-restart gradient ascent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::best_provider;
use crate::envs::{LoanModel, PerformativeEnv};
use crate::error::{PepgError, Result};
use crate::gradients::{performative_value, theorem2_gradient};
use crate::policy::PolicyParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleBudget {
    /// Random starting points besides the fixed ones.
    pub restarts: usize,
    /// Ascent iterations per start.
    pub max_iters: usize,
    pub grad_tol: f64,
    pub seed: u64,
    /// Logit placed on the chosen action of each deterministic corner start.
    pub corner_scale: f64,
    /// Corner starts are enumerated only up to this many parameters.
    pub max_corner_params: usize,
}

impl Default for OracleBudget {
    fn default() -> Self {
        OracleBudget { restarts: 6, max_iters: 1500, grad_tol: 1e-9, seed: 0, corner_scale: 8.0, max_corner_params: 12 }
    }
}

/// One ascent run in the search log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub start: String,
    pub start_value: f64,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalPolicyOracle {
    pub theta: Vec<f64>,
    pub value: f64,
    pub lambda: f64,
    pub restarts: usize,
    pub corners: usize,
    pub log: Vec<Probe>,
    /// The best run stopped on the iteration cap rather than a stationarity test.
    pub budget_exhausted: bool,
}

impl OptimalPolicyOracle {
    pub fn params(&self, n_states: usize, n_actions: usize) -> Result<PolicyParams> {
        PolicyParams::new(n_states, n_actions, self.theta.clone())
    }

    pub fn provenance(&self) -> String {
        format!(
            "oracle: {} starts ({} corners, {} random), value {:.12}, lower bound on the optimum{}",
            self.log.len(),
            self.corners,
            self.restarts,
            self.value,
            if self.budget_exhausted { ", budget exhausted" } else { "" }
        )
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Backtracking (Armijo) gradient ascent from each start; keeps the best end point.
pub fn maximize(
    f: &dyn Fn(&[f64]) -> Result<f64>,
    grad: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    starts: Vec<(String, Vec<f64>)>,
    budget: &OracleBudget,
) -> Result<(Vec<f64>, f64, Vec<Probe>, bool)> {
    let eval = |x: &[f64]| match f(x) {
        Ok(v) if v.is_finite() => v,
        _ => f64::NEG_INFINITY,
    };
    let mut best: Option<(Vec<f64>, f64, bool)> = None;
    let mut log = Vec::with_capacity(starts.len());
    for (label, mut x) in starts {
        let start_value = eval(&x);
        if !start_value.is_finite() {
            log.push(Probe { start: label, start_value, value: start_value, iterations: 0, converged: false });
            continue;
        }
        let mut fx = start_value;
        let mut step = 1.0;
        let mut converged = false;
        let mut iters = 0;
        while iters < budget.max_iters {
            iters += 1;
            let g = grad(&x)?;
            let gg = dot(&g, &g);
            if !gg.is_finite() {
                break;
            }
            if gg.sqrt() < budget.grad_tol {
                converged = true;
                break;
            }
            let mut t = step;
            let accepted = loop {
                let y: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a + t * b).collect();
                let fy = eval(&y);
                if fy >= fx + 1e-4 * t * gg {
                    break Some((y, fy));
                }
                t *= 0.5;
                if t < 1e-14 {
                    break None;
                }
            };
            match accepted {
                Some((y, fy)) => {
                    x = y;
                    fx = fy;
                    step = (t * 2.0).min(1e6);
                }
                None => {
                    converged = true;
                    break;
                }
            }
        }
        log.push(Probe { start: label, start_value, value: fx, iterations: iters, converged });
        if best.as_ref().is_none_or(|b| fx > b.1) {
            best = Some((x, fx, !converged));
        }
    }
    let (x, v, exhausted) = best.ok_or_else(|| PepgError::NonFinite("no start point had a finite value".into()))?;
    Ok((x, v, log, exhausted))
}

/// Search for `argmax_θ Ṽ^{π_θ}_{π_θ}(ρ)`: the zero vector, `restarts` random
/// draws, and every deterministic corner when the parameter count is small.
pub fn find_optimal_policy(env: &dyn PerformativeEnv, lambda: f64, budget: &OracleBudget) -> Result<OptimalPolicyOracle> {
    let (n, na) = (env.n_states(), env.n_actions());
    let dim = n * na;
    let mut starts = vec![("zero".to_string(), vec![0.0; dim])];
    let mut rng = ChaCha8Rng::seed_from_u64(budget.seed);
    for i in 0..budget.restarts {
        starts.push((format!("random-{i}"), (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect()));
    }
    let mut corners = 0;
    if dim <= budget.max_corner_params {
        let total = na.pow(n as u32);
        for code in 0..total {
            let mut theta = vec![0.0; dim];
            let mut c = code;
            for s in 0..n {
                theta[s * na + c % na] = budget.corner_scale;
                c /= na;
            }
            starts.push((format!("corner-{code}"), theta));
        }
        corners = total;
    }
    let provider = best_provider(env);
    let f = |x: &[f64]| performative_value(env, &PolicyParams::new(n, na, x.to_vec())?, lambda);
    let g = |x: &[f64]| theorem2_gradient(env, &PolicyParams::new(n, na, x.to_vec())?, lambda, provider);
    let (theta, value, log, budget_exhausted) = maximize(&f, &g, starts, budget)?;
    Ok(OptimalPolicyOracle { theta, value, lambda, restarts: budget.restarts, corners, log, budget_exhausted })
}

/// One-dimensional oracle for the loan threshold, `argmax_θ U(θ, μ*(θ))`.
pub fn find_optimal_loan(model: &LoanModel, budget: &OracleBudget) -> Result<OptimalPolicyOracle> {
    let k = budget.restarts.max(1);
    let starts = (0..=k).map(|i| (format!("grid-{i}"), vec![-5.0 + 10.0 * i as f64 / k as f64])).collect();
    let f = |x: &[f64]| model.equilibrium_utility(x[0]);
    let g = |x: &[f64]| {
        let h = 1e-5;
        Ok(vec![(model.equilibrium_utility(x[0] + h)? - model.equilibrium_utility(x[0] - h)?) / (2.0 * h)])
    };
    let (theta, value, log, budget_exhausted) = maximize(&f, &g, starts, budget)?;
    Ok(OptimalPolicyOracle { theta, value, lambda: 0.0, restarts: k + 1, corners: 0, log, budget_exhausted })
}
