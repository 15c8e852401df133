//! Performative environments: maps from deployed policy parameters to induced
//! tabular dynamics, with optional analytic derivatives.

pub mod expfam;
pub mod gridworld;
pub mod loan;

use crate::error::{PepgError, Result};
use crate::mdp::{check_distribution, TabularTables};
use crate::policy::PolicyParams;

pub use expfam::{ExpFamilyConfig, ExpFamilyEnv};
pub use gridworld::{GridworldConfig, GridworldEnv};
pub use loan::{LoanConfig, LoanModel};

/// A policy-dependent environment `θ ↦ (P_{π_θ}, r_{π_θ})`.
pub trait PerformativeEnv: Send + Sync {
    fn n_states(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn gamma(&self) -> f64;
    fn r_max(&self) -> f64;
    fn rho(&self) -> &[f64];

    /// Induced dynamics for the deployed policy `softmax(θ)`.
    fn induce(&self, theta: &PolicyParams) -> Result<TabularTables>;

    /// Vector-Jacobian product `(Σ W ∂log P/∂θ, Σ U ∂r/∂θ)` where `W` is indexed
    /// `[s][a][s']` and `U` is indexed `[s][a]`. `None` when no analytic form exists.
    fn analytic_vjp(
        &self,
        _theta: &PolicyParams,
        _tables: &TabularTables,
        _w_logp: &[f64],
        _w_r: &[f64],
    ) -> Option<Result<(Vec<f64>, Vec<f64>)>> {
        None
    }

    /// Whether [`PerformativeEnv::analytic_vjp`] is implemented.
    fn has_analytic_gradient(&self) -> bool {
        false
    }

    /// Full analytic derivative tables, when cheap enough to form.
    fn analytic_tables(&self, _theta: &PolicyParams) -> Option<Result<EnvGradTables>> {
        None
    }

    /// Machine-readable description recorded in run manifests.
    fn describe(&self) -> serde_json::Value;

    fn n_params(&self) -> usize {
        self.n_states() * self.n_actions()
    }
}

/// Dense derivative tables `∂log P(s'|s,a)/∂θ` and `∂r(s,a)/∂θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvGradTables {
    pub n_states: usize,
    pub n_actions: usize,
    pub n_params: usize,
    /// Row `(s,a,s')` holds the gradient of `log P(s'|s,a)`.
    pub dlogp: Vec<f64>,
    /// Row `(s,a)` holds the gradient of `r(s,a)`.
    pub dr: Vec<f64>,
    /// `(s, a, s')` entries with zero induced probability; their rows are zero.
    pub zero_entries: Vec<(usize, usize, usize)>,
}

impl EnvGradTables {
    pub fn zeros(n_states: usize, n_actions: usize, n_params: usize) -> Self {
        EnvGradTables {
            n_states,
            n_actions,
            n_params,
            dlogp: vec![0.0; n_states * n_actions * n_states * n_params],
            dr: vec![0.0; n_states * n_actions * n_params],
            zero_entries: Vec::new(),
        }
    }

    #[inline]
    pub fn dlogp_row(&self, s: usize, a: usize, s_next: usize) -> &[f64] {
        let i = ((s * self.n_actions + a) * self.n_states + s_next) * self.n_params;
        &self.dlogp[i..i + self.n_params]
    }

    #[inline]
    pub fn dr_row(&self, s: usize, a: usize) -> &[f64] {
        let i = (s * self.n_actions + a) * self.n_params;
        &self.dr[i..i + self.n_params]
    }

    /// Contracts the tables with weights; see [`PerformativeEnv::analytic_vjp`].
    pub fn vjp(&self, w_logp: &[f64], w_r: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.n_params;
        let mut g_p = vec![0.0; n];
        let mut g_r = vec![0.0; n];
        for (row, &w) in w_logp.iter().enumerate() {
            if w != 0.0 {
                for (g, d) in g_p.iter_mut().zip(&self.dlogp[row * n..(row + 1) * n]) {
                    *g += w * d;
                }
            }
        }
        for (row, &w) in w_r.iter().enumerate() {
            if w != 0.0 {
                for (g, d) in g_r.iter_mut().zip(&self.dr[row * n..(row + 1) * n]) {
                    *g += w * d;
                }
            }
        }
        (g_p, g_r)
    }

    /// Largest entry-wise absolute difference.
    pub fn max_abs_diff(&self, other: &EnvGradTables) -> f64 {
        let d = |x: &f64, y: &f64| (x - y).abs();
        let a = self.dlogp.iter().zip(&other.dlogp).map(|(x, y)| d(x, y)).fold(0.0, f64::max);
        let b = self.dr.iter().zip(&other.dr).map(|(x, y)| d(x, y)).fold(0.0, f64::max);
        a.max(b)
    }

    /// Largest entry-wise relative difference, `|x−y| / max(|x|,|y|,floor)`.
    pub fn max_rel_diff(&self, other: &EnvGradTables, floor: f64) -> f64 {
        let rel = |x: &f64, y: &f64| (x - y).abs() / x.abs().max(y.abs()).max(floor);
        let a = self.dlogp.iter().zip(&other.dlogp).map(|(x, y)| rel(x, y)).fold(0.0, f64::max);
        let b = self.dr.iter().zip(&other.dr).map(|(x, y)| rel(x, y)).fold(0.0, f64::max);
        a.max(b)
    }
}

/// An environment whose dynamics ignore the deployed policy.
#[derive(Debug, Clone)]
pub struct StaticEnv {
    pub tables: TabularTables,
    pub gamma: f64,
    pub rho: Vec<f64>,
    pub r_max: f64,
}

impl StaticEnv {
    pub fn new(tables: TabularTables, gamma: f64, rho: Vec<f64>) -> Result<Self> {
        check_distribution(&rho, tables.n_states)?;
        if !(0.0..1.0).contains(&gamma) {
            return Err(PepgError::config("gamma", "must lie in [0, 1)"));
        }
        let r_max = tables.reward.iter().fold(0.0f64, |m, r| m.max(r.abs()));
        Ok(StaticEnv { tables, gamma, rho, r_max })
    }
}

impl PerformativeEnv for StaticEnv {
    fn n_states(&self) -> usize {
        self.tables.n_states
    }
    fn n_actions(&self) -> usize {
        self.tables.n_actions
    }
    fn gamma(&self) -> f64 {
        self.gamma
    }
    fn r_max(&self) -> f64 {
        self.r_max
    }
    fn rho(&self) -> &[f64] {
        &self.rho
    }
    fn induce(&self, theta: &PolicyParams) -> Result<TabularTables> {
        if theta.n_states != self.tables.n_states || theta.n_actions != self.tables.n_actions {
            return Err(PepgError::Dimension("theta shape does not match environment".into()));
        }
        Ok(self.tables.clone())
    }
    fn has_analytic_gradient(&self) -> bool {
        true
    }
    fn analytic_vjp(
        &self,
        _theta: &PolicyParams,
        _tables: &TabularTables,
        _w_logp: &[f64],
        _w_r: &[f64],
    ) -> Option<Result<(Vec<f64>, Vec<f64>)>> {
        let n = self.n_params();
        Some(Ok((vec![0.0; n], vec![0.0; n])))
    }
    fn analytic_tables(&self, _theta: &PolicyParams) -> Option<Result<EnvGradTables>> {
        Some(Ok(EnvGradTables::zeros(self.n_states(), self.n_actions(), self.n_params())))
    }
    fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "type": "static",
            "n_states": self.tables.n_states,
            "n_actions": self.tables.n_actions,
            "gamma": self.gamma,
        })
    }
}

/// Serializable fixed-environment description.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaticConfig {
    pub n_states: usize,
    pub n_actions: usize,
    /// `[s][a][s']`, flattened.
    pub transition: Vec<f64>,
    /// `[s][a]`, flattened.
    pub reward: Vec<f64>,
    pub gamma: f64,
    pub rho: Vec<f64>,
}

/// Environment selector used by trainers and experiment specs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EnvSpec {
    Expfam(ExpFamilyConfig),
    Gridworld(GridworldConfig),
    Static(StaticConfig),
}

impl EnvSpec {
    /// Builds the environment. The gridworld perturbation is part of the
    /// configuration, so run seeds only drive sampling.
    pub fn build(&self) -> Result<Box<dyn PerformativeEnv>> {
        Ok(match self {
            EnvSpec::Expfam(c) => Box::new(ExpFamilyEnv::new(c.clone())?),
            EnvSpec::Gridworld(c) => Box::new(GridworldEnv::new(c.clone())?),
            EnvSpec::Static(c) => {
                let t = TabularTables::new(c.n_states, c.n_actions, c.transition.clone(), c.reward.clone())?;
                Box::new(StaticEnv::new(t, c.gamma, c.rho.clone())?)
            }
        })
    }

    /// Gridworld built with an explicit perturbation seed.
    pub fn build_gridworld(&self, perturbation_seed: u64) -> Result<Option<GridworldEnv>> {
        match self {
            EnvSpec::Gridworld(c) => {
                let mut c = c.clone();
                c.perturbation_seed = perturbation_seed;
                Ok(Some(GridworldEnv::new(c)?))
            }
            _ => Ok(None),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            EnvSpec::Expfam(_) => "expfam",
            EnvSpec::Gridworld(_) => "gridworld",
            EnvSpec::Static(_) => "static",
        }
    }
}
