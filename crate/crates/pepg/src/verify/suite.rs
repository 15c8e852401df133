//! Seeded instance generator and the identity / inequality suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::*;
use crate::envs::{ExpFamilyConfig, ExpFamilyEnv};
use crate::error::{PepgError, Result};
use crate::trainers::derive_seed;

const TAG_INSTANCE: u64 = 0x5eed;

/// One generated exponential-family instance with three probe parameters.
#[derive(Debug, Clone)]
pub struct Instance {
    pub id: usize,
    pub seed: u64,
    pub env: ExpFamilyEnv,
    pub thetas: Vec<PolicyParams>,
}

impl Instance {
    pub fn label(&self) -> String {
        let c = &self.env.config;
        format!("#{} seed={} |S|={} |A|={} gamma={}", self.id, self.seed, c.n_states, c.n_actions, c.gamma)
    }
}

/// `|S| ∈ {2,3,4}`, `|A| ∈ {2,3}`, `γ ∈ {0.5, 0.9}`, `R_max ∈ [0.5, 1]`,
/// `ξ ∈ [0.1, 0.9]·R_max`, `ψ(s) ∈ [0, (1−γ)/γ]`, random full-support `ρ`,
/// and `θ` entries in `[−1, 1]` (so rewards stay unclipped).
pub fn generate_instances(seed: u64, count: usize) -> Vec<Instance> {
    (0..count)
        .map(|id| {
            let s = derive_seed(seed, TAG_INSTANCE, id as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let n = rng.random_range(2..=4usize);
            let na = rng.random_range(2..=3usize);
            let gamma = if rng.random_bool(0.5) { 0.5 } else { 0.9 };
            let r_max = rng.random_range(0.5..=1.0);
            let xi = r_max * rng.random_range(0.1..0.9);
            let psi_max = (1.0 - gamma) / gamma;
            let psi = (0..n).map(|_| rng.random_range(0.0..=psi_max)).collect();
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
            let total: f64 = w.iter().sum();
            let cfg = ExpFamilyConfig {
                n_states: n,
                n_actions: na,
                gamma,
                r_max,
                xi,
                psi,
                rho: w.iter().map(|x| x / total).collect(),
            };
            let env = ExpFamilyEnv::new(cfg).expect("generated config is valid");
            let thetas = (0..3)
                .map(|_| {
                    PolicyParams::new(n, na, (0..n * na).map(|_| rng.random_range(-1.0..1.0)).collect())
                        .expect("shape matches")
                })
                .collect();
            Instance { id, seed: s, env, thetas }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Identities,
    Inequalities,
    All,
}

impl std::str::FromStr for Suite {
    type Err = PepgError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identities" => Ok(Suite::Identities),
            "inequalities" => Ok(Suite::Inequalities),
            "all" => Ok(Suite::All),
            _ => Err(PepgError::config("suite", format!("unknown suite `{s}`; expected identities, inequalities or all"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteOptions {
    pub seed: u64,
    pub instances: usize,
    pub oracle: OracleBudget,
    pub lipschitz_probes: usize,
    pub lipschitz_inflation: f64,
    pub smoothness_directions: usize,
    /// Added to every advantage in the performance-difference check; nonzero only to test sensitivity.
    pub advantage_bias: f64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seed: 0,
            instances: 50,
            oracle: OracleBudget::default(),
            lipschitz_probes: 200,
            lipschitz_inflation: 1.05,
            smoothness_directions: 100,
            advantage_bias: 0.0,
        }
    }
}

fn identities(inst: &Instance, opts: &SuiteOptions) -> Result<Vec<LemmaReport>> {
    let env = &inst.env;
    let [a, b, c] = [&inst.thetas[0], &inst.thetas[1], &inst.thetas[2]];
    let nu = vec![1.0 / env.config.n_states as f64; env.config.n_states];
    Ok(vec![
        check_performance_difference_biased(env, a, b, opts.advantage_bias)?,
        check_performance_difference_biased(env, b, c, opts.advantage_bias)?,
        check_gradient_theorem(env, a, 0.0)?,
        check_gradient_theorem(env, b, 0.5)?,
        check_occupancy_normalization(env, a)?,
        check_advantage_zero_mean(env, a)?,
        check_coverage(env, a, b, &nu)?,
        check_coverage(env, c, a, env.rho())?,
    ])
}

/// `λ = (1−γ) R_max / (1 + 2 log|A|)`.
pub(crate) fn domination_lambda(env: &ExpFamilyEnv) -> f64 {
    let c = &env.config;
    (1.0 - c.gamma) * c.r_max / (1.0 + 2.0 * (c.n_actions as f64).ln())
}

fn inequalities(inst: &Instance, opts: &SuiteOptions) -> Result<Vec<LemmaReport>> {
    let env = &inst.env;
    let (n, na) = (env.config.n_states, env.config.n_actions);
    let nu = vec![1.0 / n as f64; n];
    let budget = OracleBudget { seed: inst.seed, ..opts.oracle.clone() };
    let lam = domination_lambda(env);
    let hard = find_optimal_policy(env, 0.0, &budget)?;
    let soft = find_optimal_policy(env, lam, &budget)?;
    let star = hard.params(n, na)?;
    let mut anchors: Vec<&PolicyParams> = inst.thetas.iter().collect();
    anchors.push(&star);
    let lip = empirical_lipschitz(env, &anchors, opts.lipschitz_probes, inst.seed, opts.lipschitz_inflation)?;
    let mut out = Vec::new();
    for th in &inst.thetas {
        out.push(check_shift_bound(env, th, &hard, &lip)?);
        out.push(check_gradient_domination(env, th, &hard, &nu, DominationForm::ExpFamily, None)?);
        out.push(check_gradient_domination(env, th, &soft, &nu, DominationForm::ExpFamily, None)?);
        out.push(check_gradient_domination(env, th, &hard, &nu, DominationForm::Generic, Some(&lip))?);
        out.push(check_gradient_domination(env, th, &soft, &nu, DominationForm::Generic, Some(&lip))?);
    }
    let th = &inst.thetas[0];
    out.push(check_smoothness(env, th, 0.0, opts.smoothness_directions, inst.seed)?);
    out.push(check_smoothness(env, th, 2.0, opts.smoothness_directions, inst.seed)?);
    out.push(check_soft_value_bound(env, th, lam)?);
    out.push(check_soft_value_bound(env, th, 2.0)?);
    out.push(check_entropy_bound(env, th)?);
    Ok(out)
}

/// Runs the suite on `opts.instances` generated instances in parallel; reports
/// come back in instance order.
pub fn run_suite(suite: Suite, opts: &SuiteOptions) -> Result<Vec<LemmaReport>> {
    let instances = generate_instances(opts.seed, opts.instances);
    let per: Vec<Vec<LemmaReport>> = instances
        .par_iter()
        .map(|inst| {
            let mut reports = Vec::new();
            if matches!(suite, Suite::Identities | Suite::All) {
                reports.extend(identities(inst, opts)?);
            }
            if matches!(suite, Suite::Inequalities | Suite::All) {
                reports.extend(inequalities(inst, opts)?);
            }
            let label = inst.label();
            reports.iter_mut().for_each(|r| r.instance = label.clone());
            Ok(reports)
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// Fixed-width pass/fail table with a totals line.
pub fn summary_table(reports: &[LemmaReport]) -> String {
    let mut out = format!(
        "{:<34} {:<40} {:>13} {:>13} {:>11} {:>8}  result\n",
        "check", "instance", "lhs", "rhs", "residual", "tol"
    );
    for r in reports {
        let verdict = match (r.pass, r.inconclusive) {
            (true, true) => "INCONCLUSIVE",
            (true, false) => "PASS",
            (false, _) => "FAIL",
        };
        out.push_str(&format!(
            "{:<34} {:<40} {:>13.6e} {:>13.6e} {:>11.3e} {:>8.0e}  {verdict}\n",
            r.lemma, r.instance, r.lhs, r.rhs, r.residual, r.tolerance
        ));
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    out.push_str(&format!("{} checks, {} passed, {} failed\n", reports.len(), reports.len() - failed, failed));
    out
}
