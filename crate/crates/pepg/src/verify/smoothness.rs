//! Curvature probes of the performative value along random directions, and the
//! theoretical smoothness constants for exponential-family instances.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::identities::instance_label;
use super::LemmaReport;
use crate::envs::{ExpFamilyEnv, PerformativeEnv};
use crate::error::{PepgError, Result};
use crate::gradients::performative_value;
use crate::policy::PolicyParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessConstants {
    pub c1: f64,
    pub c2: f64,
    pub t1: f64,
    pub t2: f64,
    pub r1: f64,
    pub r2: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// `C₂/(1−γ) + 2C₁β₁ + C₂β₂`.
    pub l: f64,
}

/// Constants for an exponential-family instance: `C₁ = 2`, `C₂ = 6`, `T₁ = ψ_max`,
/// `T₂ = ψ_max²`, `R₁ = ξ|A|`, `R₂ = 0`.
pub fn smoothness_constant(env: &ExpFamilyEnv) -> SmoothnessConstants {
    let cfg = &env.config;
    let g = cfg.gamma;
    let (c1, c2) = (2.0, 6.0);
    let t1 = cfg.psi_max();
    let t2 = t1 * t1;
    let r1 = cfg.xi * cfg.n_actions as f64;
    let r2 = 0.0;
    let q = 1.0 - g;
    let beta1 = g / q.powi(2) * (c1 + t1) + r1 / q;
    let mix = c2 + 2.0 * c1 * t1 + t2;
    let beta2 = 2.0 * g * g / q.powi(3) * (c1 + t1).powi(2)
        + g / q.powi(2) * mix
        + 2.0 * g * r1 / q.powi(2) * mix
        + r2 / q
        + g * c1 * r1 / q.powi(2);
    let l = c2 / q + 2.0 * c1 * beta1 + c2 * beta2;
    SmoothnessConstants { c1, c2, t1, t2, r1, r2, beta1, beta2, l }
}

/// Smoothness constant of the discounted entropy.
pub fn beta_lambda(k: &SmoothnessConstants, gamma: f64, n_actions: usize) -> f64 {
    let q = 1.0 - gamma;
    let la = (n_actions as f64).ln();
    2.0 * gamma * gamma * 3.0 * (1.0 + la) / q
        + gamma * 2.0 * la / q.powi(2) * (k.c1 + k.t1)
        + 2.0 * gamma * la / q.powi(2) * (k.c2 + 2.0 * k.c1 * k.t1 + k.t2)
        + la / q.powi(3) * (k.c1 + k.t1).powi(2)
}

/// `max_u |V(θ+hu) − 2V(θ) + V(θ−hu)| / h²` over `m` random unit directions.
pub fn smoothness_probe(
    env: &dyn PerformativeEnv,
    theta: &PolicyParams,
    lambda: f64,
    m: usize,
    h: f64,
    seed: u64,
) -> Result<f64> {
    if m == 0 || !(h > 0.0) {
        return Err(PepgError::config("smoothness_probe", "needs m ≥ 1 and h > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v0 = performative_value(env, theta, lambda)?;
    let mut worst = 0.0f64;
    for _ in 0..m {
        let mut u: Vec<f64> = (0..theta.dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        u.iter_mut().for_each(|x| *x /= norm);
        let vp = performative_value(env, &theta.offset(&u, h), lambda)?;
        let vm = performative_value(env, &theta.offset(&u, -h), lambda)?;
        worst = worst.max((vp - 2.0 * v0 + vm).abs() / (h * h));
    }
    Ok(worst)
}

/// Probe against `L` (unregularized) or `L + λβ_λ` (soft value).
pub fn check_smoothness(env: &ExpFamilyEnv, theta: &PolicyParams, lambda: f64, m: usize, seed: u64) -> Result<LemmaReport> {
    let probe = smoothness_probe(env, theta, lambda, m, 1e-3, seed)?;
    let k = smoothness_constant(env);
    let bound = k.l + lambda * beta_lambda(&k, env.config.gamma, env.config.n_actions);
    let name = if lambda > 0.0 { "smoothness-soft" } else { "smoothness" };
    Ok(LemmaReport::inequality(name, &instance_label(env), probe, bound, 1e-8))
}
