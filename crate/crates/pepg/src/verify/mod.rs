//! Numerical certification of the performative identities and inequalities on
//! small instances.
//!
//! Every check returns a [`LemmaReport`]. Equalities pass when the absolute
//! residual is within tolerance; inequalities pass when the slack `RHS − LHS`
//! is at least `−tolerance`.

mod bounds;
mod identities;
mod oracle;
mod smoothness;
mod suite;

use serde::{Deserialize, Serialize};

use crate::envs::{EnvGradTables, PerformativeEnv};
use crate::error::Result;
use crate::gradients::GradProvider;
use crate::mdp::TabularTables;
use crate::policy::PolicyParams;

pub use bounds::{
    check_coverage, check_entropy_bound, check_gradient_domination, check_shift_bound, check_soft_value_bound,
    empirical_lipschitz, hellinger, DominationForm, Lipschitz,
};
pub use identities::{
    check_advantage_zero_mean, check_gradient_theorem, check_occupancy_normalization, check_performance_difference,
    check_performance_difference_biased, richardson_gradient,
};
pub use oracle::{find_optimal_loan, find_optimal_policy, maximize, OracleBudget, OptimalPolicyOracle, Probe};
pub use smoothness::{beta_lambda, check_smoothness, smoothness_constant, smoothness_probe, SmoothnessConstants};
pub use suite::{generate_instances, run_suite, summary_table, Instance, Suite, SuiteOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Equality,
    Inequality,
}

/// Outcome of one numerical check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub lemma: String,
    pub instance: String,
    pub kind: CheckKind,
    pub lhs: f64,
    pub rhs: f64,
    /// `|LHS − RHS|` for equalities, `RHS − LHS` for inequalities.
    pub residual: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// Set when the bound is vacuous (for example infinite coverage).
    pub inconclusive: bool,
    pub note: Option<String>,
}

impl LemmaReport {
    pub fn equality(lemma: &str, instance: &str, lhs: f64, rhs: f64, tolerance: f64) -> Self {
        Self::equality_with_residual(lemma, instance, lhs, rhs, (lhs - rhs).abs(), tolerance)
    }

    /// Equality whose residual is measured by the caller (for example a max over coordinates).
    pub fn equality_with_residual(lemma: &str, instance: &str, lhs: f64, rhs: f64, residual: f64, tolerance: f64) -> Self {
        LemmaReport {
            lemma: lemma.into(),
            instance: instance.into(),
            kind: CheckKind::Equality,
            lhs,
            rhs,
            residual,
            tolerance,
            pass: residual <= tolerance,
            inconclusive: false,
            note: None,
        }
    }

    pub fn inequality(lemma: &str, instance: &str, lhs: f64, rhs: f64, tolerance: f64) -> Self {
        let slack = rhs - lhs;
        LemmaReport {
            lemma: lemma.into(),
            instance: instance.into(),
            kind: CheckKind::Inequality,
            lhs,
            rhs,
            residual: slack,
            tolerance,
            pass: slack >= -tolerance,
            inconclusive: !rhs.is_finite(),
            note: None,
        }
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }
}

/// Gradient provider to use for `env`: analytic when available.
pub fn best_provider(env: &dyn PerformativeEnv) -> GradProvider {
    if env.has_analytic_gradient() {
        GradProvider::Analytic
    } else {
        GradProvider::FiniteDifference { h: 1e-6 }
    }
}

/// The same environment started from a different initial distribution.
pub(crate) struct Restarted<'a> {
    pub env: &'a dyn PerformativeEnv,
    pub rho: Vec<f64>,
}

impl PerformativeEnv for Restarted<'_> {
    fn n_states(&self) -> usize {
        self.env.n_states()
    }
    fn n_actions(&self) -> usize {
        self.env.n_actions()
    }
    fn gamma(&self) -> f64 {
        self.env.gamma()
    }
    fn r_max(&self) -> f64 {
        self.env.r_max()
    }
    fn rho(&self) -> &[f64] {
        &self.rho
    }
    fn induce(&self, theta: &PolicyParams) -> Result<TabularTables> {
        self.env.induce(theta)
    }
    fn analytic_vjp(
        &self,
        theta: &PolicyParams,
        tables: &TabularTables,
        w_logp: &[f64],
        w_r: &[f64],
    ) -> Option<Result<(Vec<f64>, Vec<f64>)>> {
        self.env.analytic_vjp(theta, tables, w_logp, w_r)
    }
    fn has_analytic_gradient(&self) -> bool {
        self.env.has_analytic_gradient()
    }
    fn analytic_tables(&self, theta: &PolicyParams) -> Option<Result<EnvGradTables>> {
        self.env.analytic_tables(theta)
    }
    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "restarted": self.env.describe(), "rho": self.rho })
    }
}
