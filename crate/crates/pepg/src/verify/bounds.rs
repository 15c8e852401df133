//! Inequalities: shift bound, gradient domination, coverage, entropy and
//! soft-value bounds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::identities::instance_label;
use super::{best_provider, LemmaReport, OptimalPolicyOracle, Restarted};
use crate::envs::PerformativeEnv;
use crate::error::{PepgError, Result};
use crate::gradients::{l2_norm, theorem2_gradient};
use crate::mdp::{coverage_ratio, exact_solution, occupancy, soft_tables, solve_value, StochasticPolicy};
use crate::policy::{policy_entropy, softmax, PolicyParams};

/// Hellinger distance with `H² = ½ Σ (√p − √q)²`.
pub fn hellinger(p: &[f64], q: &[f64]) -> f64 {
    (0.5 * p.iter().zip(q).map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum::<f64>()).sqrt()
}

/// Empirical constants with `‖r_π − r_π'‖₁ ≤ L_r ‖π − π'‖_∞` and the same for `P`,
/// norms taken entrywise over the whole table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lipschitz {
    pub l_r: f64,
    pub l_p: f64,
    pub probes: usize,
    pub inflation: f64,
}

/// Max ratio over `probes` random pairs plus every pair of `anchors`, inflated by `inflation`.
pub fn empirical_lipschitz(
    env: &dyn PerformativeEnv,
    anchors: &[&PolicyParams],
    probes: usize,
    seed: u64,
    inflation: f64,
) -> Result<Lipschitz> {
    let (n, na) = (env.n_states(), env.n_actions());
    let dim = n * na;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs: Vec<(PolicyParams, PolicyParams)> = Vec::new();
    for (i, a) in anchors.iter().enumerate() {
        for b in &anchors[i + 1..] {
            pairs.push(((*a).clone(), (*b).clone()));
        }
    }
    for _ in 0..probes {
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let scale = 10f64.powf(rng.random_range(-2.0..0.5));
        let y: Vec<f64> = x.iter().map(|v| v + scale * rng.random_range(-1.0..1.0)).collect();
        pairs.push((PolicyParams::new(n, na, x)?, PolicyParams::new(n, na, y)?));
    }
    let (mut l_r, mut l_p) = (0.0f64, 0.0f64);
    for (a, b) in &pairs {
        let (pa, pb) = (softmax(a)?, softmax(b)?);
        let dpi = pa.probs.iter().zip(&pb.probs).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        if dpi < 1e-9 {
            continue;
        }
        let (ta, tb) = (env.induce(a)?, env.induce(b)?);
        let dr: f64 = ta.reward.iter().zip(&tb.reward).map(|(x, y)| (x - y).abs()).sum();
        let dp: f64 = ta.transition.iter().zip(&tb.transition).map(|(x, y)| (x - y).abs()).sum();
        l_r = l_r.max(dr / dpi);
        l_p = l_p.max(dp / dpi);
    }
    Ok(Lipschitz { l_r: l_r * inflation, l_p: l_p * inflation, probes: pairs.len(), inflation })
}

/// Soft value vector of `π` in fixed tables.
fn soft_v(tables: &crate::mdp::TabularTables, pi: &StochasticPolicy, gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    if lambda > 0.0 {
        solve_value(&soft_tables(tables, pi, lambda)?, pi, gamma)
    } else {
        solve_value(tables, pi, gamma)
    }
}

fn rho_value(v: &[f64], rho: &[f64]) -> f64 {
    v.iter().zip(rho).map(|(a, b)| a * b).sum()
}

/// Shift bound: `|SubOpt − E_{d^{π*}_{πθ}}[A]/(1−γ)|` against the Hellinger right-hand side.
pub fn check_shift_bound(
    env: &dyn PerformativeEnv,
    theta: &PolicyParams,
    oracle: &OptimalPolicyOracle,
    lip: &Lipschitz,
) -> Result<LemmaReport> {
    let (n, na, gamma, rho) = (env.n_states(), env.n_actions(), env.gamma(), env.rho());
    let star = oracle.params(n, na)?;
    let (pi, pi_star) = (softmax(theta)?, softmax(&star)?);
    let t = env.induce(theta)?;
    let own = exact_solution(&t, &pi, gamma, rho)?;
    let v_star = rho_value(&solve_value(&env.induce(&star)?, &pi_star, gamma)?, rho);
    let d = occupancy(&t, &pi_star, gamma, rho)?;
    let adv_term: f64 = d.d.iter().zip(&own.adv).map(|(w, a)| w * a).sum::<f64>() / (1.0 - gamma);
    let lhs = (v_star - own.value_rho - adv_term).abs();
    let h: f64 = (0..n).map(|s| rho[s] * hellinger(pi_star.row(s), pi.row(s))).sum();
    let rhs = 2.0 * 2f64.sqrt() / (1.0 - gamma) * (lip.l_r + gamma * lip.l_p * env.r_max() / (1.0 - gamma)) * h;
    Ok(LemmaReport::inequality("shift-bound", &instance_label(env), lhs, rhs, 1e-8).with_note(format!(
        "L_r={:.4} L_P={:.4} from {} probes; {}",
        lip.l_r,
        lip.l_p,
        lip.probes,
        oracle.provenance()
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DominationForm {
    /// Bias from Lipschitz constants, `(1+Cov)(L_r + L_P R)/(1−γ)²` (`2+Cov` when soft).
    Generic,
    /// Exponential-family bias `(R_max + λ log|A|)/(1−γ)`.
    ExpFamily,
}

/// Gradient domination at `θ` against the oracle, with the gradient taken from start distribution `ν`.
pub fn check_gradient_domination(
    env: &dyn PerformativeEnv,
    theta: &PolicyParams,
    oracle: &OptimalPolicyOracle,
    nu: &[f64],
    form: DominationForm,
    lip: Option<&Lipschitz>,
) -> Result<LemmaReport> {
    let (n, na, gamma, rho) = (env.n_states(), env.n_actions(), env.gamma(), env.rho());
    let lambda = oracle.lambda;
    let star = oracle.params(n, na)?;
    let (pi, pi_star) = (softmax(theta)?, softmax(&star)?);
    let t = env.induce(theta)?;
    let v = rho_value(&soft_v(&t, &pi, gamma, lambda)?, rho);
    let v_star = rho_value(&soft_v(&env.induce(&star)?, &pi_star, gamma, lambda)?, rho);
    let lhs = v_star - v;

    let cov = coverage_ratio(&occupancy(&t, &pi_star, gamma, rho)?, &occupancy(&t, &pi, gamma, nu)?)?;
    let restarted = Restarted { env, rho: nu.to_vec() };
    let grad = theorem2_gradient(&restarted, theta, lambda, best_provider(env))?;
    let r = env.r_max();
    let log_a = (na as f64).ln();
    let bias = match form {
        DominationForm::ExpFamily => (r + lambda * log_a) / (1.0 - gamma),
        DominationForm::Generic => {
            let lip = lip.ok_or_else(|| PepgError::config("lipschitz", "generic form needs Lipschitz constants"))?;
            let k = if lambda > 0.0 { 2.0 } else { 1.0 };
            (k + cov) * (lip.l_r + lip.l_p * (r + lambda * log_a)) / (1.0 - gamma).powi(2)
        }
    };
    let rhs = ((n * na) as f64).sqrt() * cov * l2_norm(&grad) + bias;
    let name = match (form, lambda > 0.0) {
        (DominationForm::ExpFamily, false) => "gradient-domination/expfam",
        (DominationForm::ExpFamily, true) => "gradient-domination/expfam-soft",
        (DominationForm::Generic, false) => "gradient-domination/generic",
        (DominationForm::Generic, true) => "gradient-domination/generic-soft",
    };
    Ok(LemmaReport::inequality(name, &instance_label(env), lhs, rhs, 1e-8)
        .with_note(format!("Cov={cov:.4} |grad|={:.3e} bias={bias:.4}; {}", l2_norm(&grad), oracle.provenance())))
}

/// `Cov ≥ 1` for the occupancy of `θ_num` over that of `θ` from `ν`, both in the environment of `θ`.
pub fn check_coverage(
    env: &dyn PerformativeEnv,
    theta: &PolicyParams,
    theta_num: &PolicyParams,
    nu: &[f64],
) -> Result<LemmaReport> {
    let t = env.induce(theta)?;
    let cov = coverage_ratio(
        &occupancy(&t, &softmax(theta_num)?, env.gamma(), env.rho())?,
        &occupancy(&t, &softmax(theta)?, env.gamma(), nu)?,
    )?;
    Ok(LemmaReport::inequality("coverage", &instance_label(env), 1.0, cov, 1e-12))
}

/// `max_s H(π(·|s)) ≤ log|A|`.
pub fn check_entropy_bound(env: &dyn PerformativeEnv, theta: &PolicyParams) -> Result<LemmaReport> {
    let pi = softmax(theta)?;
    let h = (0..env.n_states()).map(|s| policy_entropy(&pi, s)).collect::<Result<Vec<_>>>()?;
    let worst = h.into_iter().fold(f64::NEG_INFINITY, f64::max);
    Ok(LemmaReport::inequality("entropy-bound", &instance_label(env), worst, (env.n_actions() as f64).ln(), 1e-12))
}

/// `‖Ṽ‖_∞ ≤ (R_max + λ log|A|)/(1−γ)`.
pub fn check_soft_value_bound(env: &dyn PerformativeEnv, theta: &PolicyParams, lambda: f64) -> Result<LemmaReport> {
    let v = soft_v(&env.induce(theta)?, &softmax(theta)?, env.gamma(), lambda)?;
    let worst = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let bound = (env.r_max() + lambda * (env.n_actions() as f64).ln()) / (1.0 - env.gamma());
    Ok(LemmaReport::inequality("soft-value-bound", &instance_label(env), worst, bound, 1e-8))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{ExpFamilyConfig, ExpFamilyEnv, StaticEnv};
    use crate::mdp::tests::random_tables;
    use crate::verify::{find_optimal_policy, generate_instances, OracleBudget};

    #[test]
    fn hellinger_examples() {
        assert_eq!(hellinger(&[0.5, 0.5], &[0.5, 0.5]), 0.0);
        assert!((hellinger(&[1.0, 0.0], &[0.0, 1.0]) - 1.0).abs() < 1e-15);
        // TV ≤ √2 H
        let (p, q) = ([0.7, 0.2, 0.1], [0.1, 0.3, 0.6]);
        let tv = 0.5 * p.iter().zip(&q).map(|(a, b): (&f64, &f64)| (a - b).abs()).sum::<f64>();
        assert!(tv <= 2f64.sqrt() * hellinger(&p, &q));
    }

    #[test]
    fn shift_bound_is_tight_at_the_optimum() {
        let env = ExpFamilyEnv::new(ExpFamilyConfig::with_defaults(2, 2, 0.5, 1.0, 0.6)).unwrap();
        let oracle = find_optimal_policy(&env, 0.0, &OracleBudget::default()).unwrap();
        let star = oracle.params(2, 2).unwrap();
        let lip = empirical_lipschitz(&env, &[&star], 50, 1, 1.05).unwrap();
        let r = check_shift_bound(&env, &star, &oracle, &lip).unwrap();
        assert!(r.lhs < 1e-12 && r.rhs.abs() < 1e-12 && r.pass, "{r:?}");
    }

    #[test]
    fn static_env_has_zero_constants() {
        let env = StaticEnv::new(random_tables(3, 2, 9), 0.9, vec![1.0 / 3.0; 3]).unwrap();
        let oracle = find_optimal_policy(&env, 0.0, &OracleBudget::default()).unwrap();
        let th = PolicyParams::new(3, 2, vec![0.3, -0.2, 0.1, 0.5, -1.0, 0.0]).unwrap();
        let lip = empirical_lipschitz(&env, &[&th], 30, 2, 1.05).unwrap();
        assert_eq!((lip.l_r, lip.l_p), (0.0, 0.0));
        let r = check_shift_bound(&env, &th, &oracle, &lip).unwrap();
        assert!(r.lhs < 1e-9 && r.rhs == 0.0 && r.pass, "{r:?}");
    }

    #[test]
    fn shift_bound_on_random_instances() {
        for inst in generate_instances(21, 20) {
            let oracle = find_optimal_policy(&inst.env, 0.0, &OracleBudget { restarts: 2, ..OracleBudget::default() }).unwrap();
            let star = oracle.params(inst.env.config.n_states, inst.env.config.n_actions).unwrap();
            let th = &inst.thetas[0];
            let lip = empirical_lipschitz(&inst.env, &[th, &star], 200, inst.seed, 1.05).unwrap();
            let r = check_shift_bound(&inst.env, th, &oracle, &lip).unwrap();
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn domination_at_the_optimum() {
        let env = ExpFamilyEnv::new(ExpFamilyConfig::with_defaults(3, 2, 0.9, 1.0, 0.5)).unwrap();
        let oracle = find_optimal_policy(&env, 0.0, &OracleBudget::default()).unwrap();
        let star = oracle.params(3, 2).unwrap();
        let nu = vec![1.0 / 3.0; 3];
        let r = check_gradient_domination(&env, &star, &oracle, &nu, DominationForm::ExpFamily, None).unwrap();
        assert!(r.lhs.abs() <= 1e-12 && r.rhs >= 1.0 / 0.1 && r.pass);
    }

    #[test]
    fn expfam_domination_over_random_thetas() {
        use rand::{Rng, SeedableRng};
        let env = ExpFamilyEnv::new(ExpFamilyConfig::with_defaults(3, 2, 0.9, 1.0, 0.8)).unwrap();
        let nu = vec![1.0 / 3.0; 3];
        let log_a = 2f64.ln();
        let soft_lambda = 0.1 * 1.0 / (1.0 + 2.0 * log_a);
        let hard = find_optimal_policy(&env, 0.0, &OracleBudget::default()).unwrap();
        let soft = find_optimal_policy(&env, soft_lambda, &OracleBudget::default()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let th = PolicyParams::new(3, 2, (0..6).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            for o in [&hard, &soft] {
                let r = check_gradient_domination(&env, &th, o, &nu, DominationForm::ExpFamily, None).unwrap();
                assert!(r.pass, "{r:?}");
            }
        }
    }

    #[test]
    fn generic_form_needs_constants() {
        let env = ExpFamilyEnv::new(ExpFamilyConfig::with_defaults(2, 2, 0.5, 1.0, 0.6)).unwrap();
        let oracle = find_optimal_policy(&env, 0.0, &OracleBudget::default()).unwrap();
        let th = PolicyParams::zeros(2, 2);
        assert!(check_gradient_domination(&env, &th, &oracle, &[0.5, 0.5], DominationForm::Generic, None).is_err());
    }

    #[test]
    fn infinite_coverage_is_inconclusive() {
        // A start distribution on state 0 only, with no way to reach state 1.
        let t = crate::mdp::TabularTables::new(2, 1, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 1.0]).unwrap();
        let env = StaticEnv::new(t, 0.9, vec![0.5, 0.5]).unwrap();
        let th = PolicyParams::zeros(2, 1);
        let r = check_coverage(&env, &th, &th, &[1.0, 0.0]).unwrap();
        assert!(r.inconclusive && r.pass);
    }

    #[test]
    fn simple_bounds_hold() {
        for inst in generate_instances(8, 10) {
            let th = &inst.thetas[0];
            assert!(check_entropy_bound(&inst.env, th).unwrap().pass);
            assert!(check_soft_value_bound(&inst.env, th, 2.0).unwrap().pass);
            let other = PolicyParams::zeros(th.n_states, th.n_actions);
            assert!(check_coverage(&inst.env, th, &other, inst.env.rho()).unwrap().pass);
        }
        let uniform = PolicyParams::zeros(1, 4);
        let env = StaticEnv::new(crate::mdp::TabularTables::new(1, 4, vec![1.0; 4], vec![0.0; 4]).unwrap(), 0.5, vec![1.0])
            .unwrap();
        let r = check_entropy_bound(&env, &uniform).unwrap();
        assert!(r.residual.abs() < 1e-15 && r.pass);
    }
}
