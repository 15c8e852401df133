//! Exponential-family performative MDP.
//!
//! Transition rows are softmaxes over destination logits `θ_{s'',a} ψ(s'')`,
//! rewards are `clip(ξ θ_{s,a}, ±R_max)`.

use serde::{Deserialize, Serialize};

use super::{EnvGradTables, PerformativeEnv};
use crate::error::{PepgError, Result};
use crate::mdp::{check_distribution, TabularTables};
use crate::policy::{softmax_row, PolicyParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpFamilyConfig {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub r_max: f64,
    pub xi: f64,
    /// Feature map `ψ(s) ≥ 0`.
    pub psi: Vec<f64>,
    /// Initial state distribution.
    pub rho: Vec<f64>,
}

impl ExpFamilyConfig {
    /// Default features `ψ(s) = ψ_max (s+1)/|S|` with `ψ_max = (1−γ)/γ`, uniform `ρ`.
    pub fn with_defaults(n_states: usize, n_actions: usize, gamma: f64, r_max: f64, xi: f64) -> Self {
        ExpFamilyConfig {
            n_states,
            n_actions,
            gamma,
            r_max,
            xi,
            psi: default_psi(n_states, gamma),
            rho: vec![1.0 / n_states as f64; n_states],
        }
    }

    pub fn psi_max(&self) -> f64 {
        self.psi.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.n_actions == 0 {
            return Err(PepgError::config("n_states", "state and action counts must be positive"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(PepgError::config("gamma", format!("must lie in (0, 1), got {}", self.gamma)));
        }
        if !(self.r_max > 0.0) {
            return Err(PepgError::config("r_max", "must be positive"));
        }
        if !(self.xi >= 0.0 && self.xi <= self.r_max) {
            return Err(PepgError::config("xi", "must lie in [0, r_max]"));
        }
        if self.psi.len() != self.n_states || self.psi.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(PepgError::config("psi", "needs one non-negative entry per state"));
        }
        check_distribution(&self.rho, self.n_states)
    }
}

/// `ψ(s) = ψ_max (s+1)/|S|`, `ψ_max = (1−γ)/γ`.
pub fn default_psi(n_states: usize, gamma: f64) -> Vec<f64> {
    let psi_max = (1.0 - gamma) / gamma;
    (0..n_states).map(|i| psi_max * (i + 1) as f64 / n_states as f64).collect()
}

#[derive(Debug, Clone)]
pub struct ExpFamilyEnv {
    pub config: ExpFamilyConfig,
}

impl ExpFamilyEnv {
    pub fn new(config: ExpFamilyConfig) -> Result<Self> {
        config.validate()?;
        Ok(ExpFamilyEnv { config })
    }

    fn check_theta(&self, theta: &PolicyParams) -> Result<()> {
        if theta.n_states != self.config.n_states || theta.n_actions != self.config.n_actions {
            return Err(PepgError::Dimension("theta shape does not match environment".into()));
        }
        Ok(())
    }

    /// Destination distribution for action `a` (identical for every source state).
    pub fn destination_probs(&self, theta: &PolicyParams, a: usize) -> Vec<f64> {
        let n = self.config.n_states;
        let logits: Vec<f64> = (0..n).map(|x| theta.get(x, a) * self.config.psi[x]).collect();
        let mut out = vec![0.0; n];
        softmax_row(&logits, &mut out);
        out
    }

    #[inline]
    fn reward_unclipped(&self, theta: &PolicyParams, s: usize, a: usize) -> bool {
        (self.config.xi * theta.get(s, a)).abs() < self.config.r_max
    }
}

impl PerformativeEnv for ExpFamilyEnv {
    fn n_states(&self) -> usize {
        self.config.n_states
    }
    fn n_actions(&self) -> usize {
        self.config.n_actions
    }
    fn gamma(&self) -> f64 {
        self.config.gamma
    }
    fn r_max(&self) -> f64 {
        self.config.r_max
    }
    fn rho(&self) -> &[f64] {
        &self.config.rho
    }

    fn induce(&self, theta: &PolicyParams) -> Result<TabularTables> {
        self.check_theta(theta)?;
        let (n, na) = (self.config.n_states, self.config.n_actions);
        let rows: Vec<Vec<f64>> = (0..na).map(|a| self.destination_probs(theta, a)).collect();
        let mut transition = Vec::with_capacity(n * na * n);
        let mut reward = Vec::with_capacity(n * na);
        for s in 0..n {
            for (a, row) in rows.iter().enumerate() {
                transition.extend_from_slice(row);
                let r = self.config.xi * theta.get(s, a);
                reward.push(r.clamp(-self.config.r_max, self.config.r_max));
            }
        }
        Ok(TabularTables { n_states: n, n_actions: na, transition, reward })
    }

    fn has_analytic_gradient(&self) -> bool {
        true
    }

    fn analytic_vjp(
        &self,
        theta: &PolicyParams,
        tables: &TabularTables,
        w_logp: &[f64],
        w_r: &[f64],
    ) -> Option<Result<(Vec<f64>, Vec<f64>)>> {
        let (n, na) = (self.config.n_states, self.config.n_actions);
        if w_logp.len() != n * na * n || w_r.len() != n * na {
            return Some(Err(PepgError::Dimension("weight shapes do not match environment".into())));
        }
        let mut g_p = vec![0.0; n * na];
        let mut g_r = vec![0.0; n * na];
        for a in 0..na {
            // ∂log P(s''|s,a)/∂θ_{x,a} = ψ(x)(1[s''=x] − P(x|s,a))
            let mut total = 0.0;
            let mut col = vec![0.0; n];
            for s in 0..n {
                for s2 in 0..n {
                    let w = w_logp[(s * na + a) * n + s2];
                    total += w;
                    col[s2] += w;
                }
            }
            for x in 0..n {
                // P(x|s,a) does not depend on s in this family.
                g_p[x * na + a] = self.config.psi[x] * (col[x] - tables.p(0, a, x) * total);
            }
        }
        for s in 0..n {
            for a in 0..na {
                if self.reward_unclipped(theta, s, a) {
                    g_r[s * na + a] = w_r[s * na + a] * self.config.xi;
                }
            }
        }
        Some(Ok((g_p, g_r)))
    }

    fn analytic_tables(&self, theta: &PolicyParams) -> Option<Result<EnvGradTables>> {
        if let Err(e) = self.check_theta(theta) {
            return Some(Err(e));
        }
        let (n, na) = (self.config.n_states, self.config.n_actions);
        let np = n * na;
        let mut out = EnvGradTables::zeros(n, na, np);
        let rows: Vec<Vec<f64>> = (0..na).map(|a| self.destination_probs(theta, a)).collect();
        for s in 0..n {
            for a in 0..na {
                for s2 in 0..n {
                    let base = ((s * na + a) * n + s2) * np;
                    for x in 0..n {
                        let ind = if s2 == x { 1.0 } else { 0.0 };
                        out.dlogp[base + x * na + a] = self.config.psi[x] * (ind - rows[a][x]);
                    }
                }
                if self.reward_unclipped(theta, s, a) {
                    out.dr[(s * na + a) * np + s * na + a] = self.config.xi;
                }
            }
        }
        Some(Ok(out))
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "type": "expfam", "config": self.config })
    }
}
