//! Exact identities: the performative performance difference in its three
//! forms, the gradient theorem, and occupancy/advantage sanity checks.

use super::{best_provider, LemmaReport};
use crate::envs::PerformativeEnv;
use crate::error::Result;
use crate::gradients::{performative_value, theorem2_gradient};
use crate::mdp::{exact_solution, ExactSolution, StochasticPolicy, TabularTables};
use crate::policy::{softmax, PolicyParams};

pub(crate) fn instance_label(env: &dyn PerformativeEnv) -> String {
    let kind = env.describe().get("type").and_then(|t| t.as_str()).unwrap_or("env").to_string();
    format!("{kind} |S|={} |A|={} gamma={}", env.n_states(), env.n_actions(), env.gamma())
}

/// `Σ d(s,a) [(r − r') + γ (P − P')ᵀ V]`.
fn shift_term(d: &ExactSolution, t: &TabularTables, t2: &TabularTables, v: &[f64], gamma: f64) -> f64 {
    let (n, na) = (t.n_states, t.n_actions);
    let mut acc = 0.0;
    for s in 0..n {
        for a in 0..na {
            let w = d.occupancy.at(s, a);
            if w == 0.0 {
                continue;
            }
            let dp: f64 = (0..n).map(|x| (t.p(s, a, x) - t2.p(s, a, x)) * v[x]).sum();
            acc += w * (t.r(s, a) - t2.r(s, a) + gamma * dp);
        }
    }
    acc
}

/// `Σ d(s,a) (A(s,a) + bias)`.
fn advantage_term(d: &ExactSolution, adv: &[f64], bias: f64) -> f64 {
    d.occupancy.d.iter().zip(adv).map(|(w, a)| w * (a + bias)).sum()
}

/// The three forms with an additive bias on every advantage entry. A nonzero
/// bias breaks the identity, which lets callers confirm the check is sensitive.
pub fn check_performance_difference_biased(
    env: &dyn PerformativeEnv,
    theta: &PolicyParams,
    theta_prime: &PolicyParams,
    bias: f64,
) -> Result<LemmaReport> {
    let gamma = env.gamma();
    let rho = env.rho();
    let (t, t2) = (env.induce(theta)?, env.induce(theta_prime)?);
    let (pi, pi2): (StochasticPolicy, StochasticPolicy) = (softmax(theta)?, softmax(theta_prime)?);
    // `agent_env`: agent policy first, inducing policy second.
    let pi_pi = exact_solution(&t, &pi, gamma, rho)?;
    let pi2_pi2 = exact_solution(&t2, &pi2, gamma, rho)?;
    let pi_pi2 = exact_solution(&t2, &pi, gamma, rho)?;
    let pi2_pi = exact_solution(&t, &pi2, gamma, rho)?;

    let lhs = pi_pi.value_rho - pi2_pi2.value_rho;
    let c = 1.0 / (1.0 - gamma);
    let forms = [
        c * (advantage_term(&pi_pi2, &pi2_pi2.adv, bias) + shift_term(&pi_pi2, &t, &t2, &pi_pi.v, gamma)),
        c * (advantage_term(&pi_pi2, &pi2_pi2.adv, bias) + shift_term(&pi_pi, &t, &t2, &pi_pi2.v, gamma)),
        c * (advantage_term(&pi_pi, &pi2_pi.adv, bias) + shift_term(&pi2_pi2, &t, &t2, &pi2_pi.v, gamma)),
    ];
    let (worst, rhs) = forms.iter().map(|f| ((lhs - f).abs(), *f)).fold((0.0, forms[0]), |m, x| if x.0 > m.0 { x } else { m });
    let note = format!("forms: {:.3e} {:.3e} {:.3e}", forms[0], forms[1], forms[2]);
    Ok(LemmaReport::equality_with_residual("performance-difference", &instance_label(env), lhs, rhs, worst, 1e-8)
        .with_note(note))
}

/// Performative performance difference between `θ` and `θ'`, all three forms.
/// The residual is the worst of the three.
pub fn check_performance_difference(
    env: &dyn PerformativeEnv,
    theta: &PolicyParams,
    theta_prime: &PolicyParams,
) -> Result<LemmaReport> {
    check_performance_difference_biased(env, theta, theta_prime, 0.0)
}

/// Central differences of the exact (soft) value with one Richardson step:
/// `(4 D(h/2) − D(h)) / 3`, accurate to `O(h⁴)`.
pub fn richardson_gradient(env: &dyn PerformativeEnv, theta: &PolicyParams, lambda: f64, h: f64) -> Result<Vec<f64>> {
    let n = theta.dim();
    let mut e = vec![0.0; n];
    let mut g = vec![0.0; n];
    for k in 0..n {
        e[k] = 1.0;
        let mut d = [0.0; 2];
        for (i, step) in [h, h / 2.0].into_iter().enumerate() {
            let vp = performative_value(env, &theta.offset(&e, step), lambda)?;
            let vm = performative_value(env, &theta.offset(&e, -step), lambda)?;
            d[i] = (vp - vm) / (2.0 * step);
        }
        e[k] = 0.0;
        g[k] = (4.0 * d[1] - d[0]) / 3.0;
    }
    Ok(g)
}

/// Exact expectation form of the gradient against finite differences; the
/// residual is the largest per-coordinate relative error.
pub fn check_gradient_theorem(env: &dyn PerformativeEnv, theta: &PolicyParams, lambda: f64) -> Result<LemmaReport> {
    let exact = theorem2_gradient(env, theta, lambda, best_provider(env))?;
    let fd = richardson_gradient(env, theta, lambda, 1e-3)?;
    let residual = exact.iter().zip(&fd).map(|(a, b)| (a - b).abs() / b.abs().max(1e-6)).fold(0.0, f64::max);
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let label = if lambda > 0.0 { "gradient-theorem-soft" } else { "gradient-theorem" };
    Ok(LemmaReport::equality_with_residual(label, &instance_label(env), norm(&exact), norm(&fd), residual, 1e-5))
}

/// `|Σ d − 1|` for the deployed policy's own occupancy.
pub fn check_occupancy_normalization(env: &dyn PerformativeEnv, theta: &PolicyParams) -> Result<LemmaReport> {
    let sol = exact_solution(&env.induce(theta)?, &softmax(theta)?, env.gamma(), env.rho())?;
    let total: f64 = sol.occupancy.d.iter().sum();
    Ok(LemmaReport::equality("occupancy-normalization", &instance_label(env), total, 1.0, 1e-10))
}

/// `max_s |Σ_a π(a|s) A(s,a)|`.
pub fn check_advantage_zero_mean(env: &dyn PerformativeEnv, theta: &PolicyParams) -> Result<LemmaReport> {
    let pi = softmax(theta)?;
    let sol = exact_solution(&env.induce(theta)?, &pi, env.gamma(), env.rho())?;
    let na = env.n_actions();
    let worst = (0..env.n_states())
        .map(|s| (0..na).map(|a| pi.pi(s, a) * sol.adv[s * na + a]).sum::<f64>().abs())
        .fold(0.0, f64::max);
    Ok(LemmaReport::equality("advantage-zero-mean", &instance_label(env), worst, 0.0, 1e-10))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{ExpFamilyConfig, ExpFamilyEnv, StaticEnv};
    use crate::mdp::tests::random_tables;
    use crate::verify::generate_instances;

    fn theta(n: usize, na: usize, seed: u64) -> PolicyParams {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        PolicyParams::new(n, na, (0..n * na).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identical_policies_give_zero() {
        let env = ExpFamilyEnv::new(ExpFamilyConfig::with_defaults(3, 2, 0.9, 1.0, 0.5)).unwrap();
        let th = theta(3, 2, 1);
        let r = check_performance_difference(&env, &th, &th).unwrap();
        assert_eq!(r.lhs, 0.0);
        assert!(r.residual <= 1e-12 && r.pass);
    }

    #[test]
    fn static_env_reduces_to_classical_lemma() {
        let env = StaticEnv::new(random_tables(3, 2, 4), 0.8, vec![0.2, 0.3, 0.5]).unwrap();
        let (a, b) = (theta(3, 2, 2), theta(3, 2, 3));
        let r = check_performance_difference(&env, &a, &b).unwrap();
        assert!(r.residual <= 1e-9, "{r:?}");
        // The shift terms vanish, so the classical form alone matches.
        let pi = softmax(&a).unwrap();
        let pi2 = softmax(&b).unwrap();
        let t = env.induce(&a).unwrap();
        let s1 = exact_solution(&t, &pi, 0.8, env.rho()).unwrap();
        let s2 = exact_solution(&t, &pi2, 0.8, env.rho()).unwrap();
        let classical = advantage_term(&s1, &s2.adv, 0.0) / 0.2;
        assert!((s1.value_rho - s2.value_rho - classical).abs() <= 1e-9);
    }

    #[test]
    fn all_forms_hold_on_random_instances() {
        for inst in generate_instances(11, 50) {
            let (n, na) = (inst.env.config.n_states, inst.env.config.n_actions);
            let r = check_performance_difference(&inst.env, &inst.thetas[0], &theta(n, na, inst.seed ^ 7)).unwrap();
            assert!(r.residual <= 1e-8, "{r:?}");
        }
    }

    #[test]
    fn biased_advantage_is_detected() {
        let env = ExpFamilyEnv::new(ExpFamilyConfig::with_defaults(2, 2, 0.9, 1.0, 0.5)).unwrap();
        let r = check_performance_difference_biased(&env, &theta(2, 2, 5), &theta(2, 2, 6), 1e-3).unwrap();
        assert!(!r.pass);
        // Every form carries the bias with weight 1/(1−γ).
        assert!((r.residual - 1e-2).abs() < 1e-8);
    }

    #[test]
    fn gradient_theorem_matches_differences() {
        for inst in generate_instances(3, 10) {
            for lambda in [0.0, 0.5] {
                let r = check_gradient_theorem(&inst.env, &inst.thetas[0], lambda).unwrap();
                assert!(r.pass, "{r:?}");
            }
        }
    }

    #[test]
    fn bandit_gradient_has_classical_closed_form() {
        let t = TabularTables::new(1, 2, vec![1.0, 1.0], vec![1.0, 0.2]).unwrap();
        let env = StaticEnv::new(t, 0.9, vec![1.0]).unwrap();
        let th = PolicyParams::new(1, 2, vec![0.4, -0.3]).unwrap();
        let g = richardson_gradient(&env, &th, 0.0, 1e-3).unwrap();
        let p = softmax(&th).unwrap();
        // dV/dθ_a = π(a)(r_a − Σ π r)/(1−γ)
        let mean = p.pi(0, 0) * 1.0 + p.pi(0, 1) * 0.2;
        for (a, r) in [1.0, 0.2].into_iter().enumerate() {
            assert!((g[a] - p.pi(0, a) * (r - mean) / 0.1).abs() < 1e-10);
        }
        assert!(check_gradient_theorem(&env, &th, 0.0).unwrap().pass);
    }

    #[test]
    fn occupancy_and_advantage_sanity() {
        for inst in generate_instances(5, 10) {
            assert!(check_occupancy_normalization(&inst.env, &inst.thetas[0]).unwrap().pass);
            assert!(check_advantage_zero_mean(&inst.env, &inst.thetas[0]).unwrap().pass);
        }
    }
}
