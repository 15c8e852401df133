//! Exact tabular MDP mathematics: values, Q-functions, advantages,
//! discounted occupancy measures and their entropy-regularized variants.
//!
//! Every quantity is obtained from a dense direct solve, so results are exact
//! up to floating-point round-off.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{PepgError, Result};

/// Probabilities at or below this are treated as zero when forming `log π`.
pub const ZERO_PROB_GUARD: f64 = 1e-300;

/// Row-sum tolerance for transition tables.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Concrete MDP dynamics: `P(s'|s,a)` stored as `[s][a][s']` and `r(s,a)` as `[s][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularTables {
    pub n_states: usize,
    pub n_actions: usize,
    pub transition: Vec<f64>,
    pub reward: Vec<f64>,
}

impl TabularTables {
    /// Builds tables and checks that every transition row is a distribution.
    pub fn new(n_states: usize, n_actions: usize, transition: Vec<f64>, reward: Vec<f64>) -> Result<Self> {
        let t = TabularTables { n_states, n_actions, transition, reward };
        t.validate(None)?;
        Ok(t)
    }

    /// Checks shapes, row sums, non-negativity and (optionally) the reward bound.
    pub fn validate(&self, r_max: Option<f64>) -> Result<()> {
        let (s_n, a_n) = (self.n_states, self.n_actions);
        if s_n == 0 || a_n == 0 {
            return Err(PepgError::Dimension("empty state or action space".into()));
        }
        if self.transition.len() != s_n * a_n * s_n {
            return Err(PepgError::Dimension(format!(
                "transition has {} entries, expected {}",
                self.transition.len(),
                s_n * a_n * s_n
            )));
        }
        if self.reward.len() != s_n * a_n {
            return Err(PepgError::Dimension(format!(
                "reward has {} entries, expected {}",
                self.reward.len(),
                s_n * a_n
            )));
        }
        for s in 0..s_n {
            for a in 0..a_n {
                let row = self.row(s, a);
                if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                    return Err(PepgError::InvalidTransition { state: s, action: a, sum: f64::NAN });
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(PepgError::InvalidTransition { state: s, action: a, sum });
                }
                let r = self.r(s, a);
                if !r.is_finite() {
                    return Err(PepgError::NonFinite(format!("reward at ({s}, {a})")));
                }
                if let Some(bound) = r_max {
                    if r.abs() > bound + 1e-12 {
                        return Err(PepgError::RewardOutOfRange { state: s, action: a, value: r, bound });
                    }
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn p(&self, s: usize, a: usize, s_next: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + s_next]
    }

    #[inline]
    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    /// Transition row `P(·|s,a)`.
    #[inline]
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }
}

/// A stochastic policy `π(a|s)` stored row-major as `[s][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticPolicy {
    pub n_states: usize,
    pub n_actions: usize,
    pub probs: Vec<f64>,
}

impl StochasticPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(PepgError::Dimension(format!(
                "policy has {} entries, expected {}",
                probs.len(),
                n_states * n_actions
            )));
        }
        for s in 0..n_states {
            let row = &probs[s * n_actions..(s + 1) * n_actions];
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(PepgError::InvalidDistribution(format!("policy row {s} has invalid entries")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-10 {
                return Err(PepgError::InvalidDistribution(format!("policy row {s} sums to {sum}")));
            }
        }
        Ok(StochasticPolicy { n_states, n_actions, probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        StochasticPolicy { n_states, n_actions, probs: vec![1.0 / n_actions as f64; n_states * n_actions] }
    }

    #[inline]
    pub fn pi(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }
}

/// Discounted state-action occupancy `d(s,a)`, normalized to sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyMeasure {
    pub n_states: usize,
    pub n_actions: usize,
    pub d: Vec<f64>,
    pub gamma: f64,
    pub rho: Vec<f64>,
}

impl OccupancyMeasure {
    #[inline]
    pub fn at(&self, s: usize, a: usize) -> f64 {
        self.d[s * self.n_actions + a]
    }

    /// State marginal `d̄(s) = Σ_a d(s,a)`.
    pub fn state_marginal(&self) -> Vec<f64> {
        (0..self.n_states).map(|s| self.d[s * self.n_actions..(s + 1) * self.n_actions].iter().sum()).collect()
    }

    /// Euclidean distance between two occupancy measures.
    pub fn l2_distance(&self, other: &OccupancyMeasure) -> f64 {
        self.d.iter().zip(&other.d).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }
}

fn check_shapes(tables: &TabularTables, policy: &StochasticPolicy) -> Result<()> {
    if tables.n_states != policy.n_states || tables.n_actions != policy.n_actions {
        return Err(PepgError::Dimension(format!(
            "tables are {}x{}, policy is {}x{}",
            tables.n_states, tables.n_actions, policy.n_states, policy.n_actions
        )));
    }
    Ok(())
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(PepgError::config("gamma", format!("must lie in [0, 1), got {gamma}")));
    }
    Ok(())
}

/// Checks that `rho` is a probability vector over `n` states.
pub fn check_distribution(rho: &[f64], n: usize) -> Result<()> {
    if rho.len() != n {
        return Err(PepgError::InvalidDistribution(format!("length {} but {} states", rho.len(), n)));
    }
    if rho.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(PepgError::InvalidDistribution("negative or non-finite entry".into()));
    }
    let sum: f64 = rho.iter().sum();
    if (sum - 1.0).abs() > 1e-10 {
        return Err(PepgError::InvalidDistribution(format!("sums to {sum}")));
    }
    Ok(())
}

/// State-to-state kernel `P_π(s'|s)` and expected reward `r_π(s)` under a policy.
pub fn policy_kernel(tables: &TabularTables, policy: &StochasticPolicy) -> (DMatrix<f64>, DVector<f64>) {
    let n = tables.n_states;
    let mut p = DMatrix::<f64>::zeros(n, n);
    let mut r = DVector::<f64>::zeros(n);
    for s in 0..n {
        for a in 0..tables.n_actions {
            let w = policy.pi(s, a);
            if w == 0.0 {
                continue;
            }
            r[s] += w * tables.r(s, a);
            for (s2, &pr) in tables.row(s, a).iter().enumerate() {
                if pr != 0.0 {
                    p[(s, s2)] += w * pr;
                }
            }
        }
    }
    (p, r)
}

fn solve_dense(mut m: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..n {
            if !m[(i, j)].is_finite() {
                return Err(PepgError::NonFinite("system matrix".into()));
            }
        }
    }
    let lu = std::mem::replace(&mut m, DMatrix::zeros(0, 0)).lu();
    lu.solve(&b).ok_or_else(|| PepgError::Singular("I - γP is singular".into()))
}

/// Solves `V = r_π + γ P_π V` exactly. `γ = 0` returns the myopic value.
pub fn solve_value(tables: &TabularTables, policy: &StochasticPolicy, gamma: f64) -> Result<Vec<f64>> {
    check_shapes(tables, policy)?;
    check_gamma(gamma)?;
    let (p, r) = policy_kernel(tables, policy);
    if gamma == 0.0 {
        return Ok(r.iter().copied().collect());
    }
    let n = tables.n_states;
    let m = DMatrix::<f64>::identity(n, n) - p * gamma;
    Ok(solve_dense(m, r)?.iter().copied().collect())
}

/// Returns `(Q, A)` with `Q = r + γ P V` and `A = Q − V`, both `[s][a]`.
pub fn q_and_advantage(
    tables: &TabularTables,
    v: &[f64],
    policy: &StochasticPolicy,
    gamma: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_shapes(tables, policy)?;
    if v.len() != tables.n_states {
        return Err(PepgError::Dimension(format!("value has {} entries, expected {}", v.len(), tables.n_states)));
    }
    let (n, na) = (tables.n_states, tables.n_actions);
    let mut q = vec![0.0; n * na];
    let mut adv = vec![0.0; n * na];
    for s in 0..n {
        for a in 0..na {
            let ev: f64 = tables.row(s, a).iter().zip(v).map(|(p, x)| p * x).sum();
            let qv = tables.r(s, a) + gamma * ev;
            q[s * na + a] = qv;
            adv[s * na + a] = qv - v[s];
        }
    }
    Ok((q, adv))
}

/// Discounted occupancy `d(s,a) = d̄(s) π(a|s)` with `d̄ = (1−γ)ρ + γ P_πᵀ d̄`.
pub fn occupancy(tables: &TabularTables, policy: &StochasticPolicy, gamma: f64, rho: &[f64]) -> Result<OccupancyMeasure> {
    check_shapes(tables, policy)?;
    check_gamma(gamma)?;
    check_distribution(rho, tables.n_states)?;
    let n = tables.n_states;
    let (p, _) = policy_kernel(tables, policy);
    let rhs = DVector::from_iterator(n, rho.iter().map(|x| (1.0 - gamma) * x));
    let dbar = if gamma == 0.0 {
        rhs
    } else {
        let m = DMatrix::<f64>::identity(n, n) - p.transpose() * gamma;
        solve_dense(m, rhs)?
    };
    let na = tables.n_actions;
    let mut d = vec![0.0; n * na];
    for s in 0..n {
        for a in 0..na {
            d[s * na + a] = dbar[s] * policy.pi(s, a);
        }
    }
    Ok(OccupancyMeasure { n_states: n, n_actions: na, d, gamma, rho: rho.to_vec() })
}

/// Soft tables: reward replaced by `r(s,a) − λ log π(a|s)`; transitions unchanged.
pub fn soft_tables(tables: &TabularTables, policy: &StochasticPolicy, lambda: f64) -> Result<TabularTables> {
    check_shapes(tables, policy)?;
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(PepgError::config("lambda", format!("must be finite and non-negative, got {lambda}")));
    }
    for s in 0..tables.n_states {
        for a in 0..tables.n_actions {
            if policy.pi(s, a) <= ZERO_PROB_GUARD {
                return Err(PepgError::ZeroProbability { state: s, action: a });
            }
        }
    }
    let mut out = tables.clone();
    if lambda > 0.0 {
        for (i, r) in out.reward.iter_mut().enumerate() {
            *r -= lambda * policy.probs[i].ln();
        }
    }
    Ok(out)
}

/// `max_{s,a} d_num(s,a) / d_den(s,a)`; `+∞` when `d_den` misses part of the support of `d_num`.
pub fn coverage_ratio(d_num: &OccupancyMeasure, d_den: &OccupancyMeasure) -> Result<f64> {
    if d_num.d.len() != d_den.d.len() {
        return Err(PepgError::Dimension("occupancy measures differ in shape".into()));
    }
    let mut best = f64::NEG_INFINITY;
    for (&x, &y) in d_num.d.iter().zip(&d_den.d) {
        if x <= 0.0 {
            continue;
        }
        if y <= 0.0 {
            return Ok(f64::INFINITY);
        }
        best = best.max(x / y);
    }
    Ok(best)
}

/// `Σ_s ρ(s) V(s)`.
pub fn expected_value(v: &[f64], rho: &[f64]) -> f64 {
    v.iter().zip(rho).map(|(a, b)| a * b).sum()
}

/// Bundle of exact quantities for one (tables, policy) pair.
#[derive(Debug, Clone)]
pub struct ExactSolution {
    pub v: Vec<f64>,
    pub q: Vec<f64>,
    pub adv: Vec<f64>,
    pub occupancy: OccupancyMeasure,
    pub value_rho: f64,
}

/// Solves value, Q, advantage and occupancy in one call.
pub fn exact_solution(tables: &TabularTables, policy: &StochasticPolicy, gamma: f64, rho: &[f64]) -> Result<ExactSolution> {
    let v = solve_value(tables, policy, gamma)?;
    let (q, adv) = q_and_advantage(tables, &v, policy, gamma)?;
    let occ = occupancy(tables, policy, gamma, rho)?;
    let value_rho = expected_value(&v, rho);
    Ok(ExactSolution { v, q, adv, occupancy: occ, value_rho })
}
