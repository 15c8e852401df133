//! Softmax policy parametrization, sampling, entropy and the score function.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PepgError, Result};
use crate::mdp::{StochasticPolicy, ZERO_PROB_GUARD};

/// Logits `θ[s][a]` of a softmax policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub n_states: usize,
    pub n_actions: usize,
    pub theta: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        PolicyParams { n_states, n_actions, theta: vec![0.0; n_states * n_actions] }
    }

    pub fn new(n_states: usize, n_actions: usize, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != n_states * n_actions {
            return Err(PepgError::Dimension(format!(
                "theta has {} entries, expected {}",
                theta.len(),
                n_states * n_actions
            )));
        }
        Ok(PolicyParams { n_states, n_actions, theta })
    }

    /// Logits reproducing a strictly positive policy (`θ = log π`).
    pub fn from_policy(policy: &StochasticPolicy) -> Result<Self> {
        let mut theta = Vec::with_capacity(policy.probs.len());
        for (i, &p) in policy.probs.iter().enumerate() {
            if p <= ZERO_PROB_GUARD {
                return Err(PepgError::ZeroProbability { state: i / policy.n_actions, action: i % policy.n_actions });
            }
            theta.push(p.ln());
        }
        Ok(PolicyParams { n_states: policy.n_states, n_actions: policy.n_actions, theta })
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.theta[s * self.n_actions + a]
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    /// `self + step · direction`.
    pub fn offset(&self, direction: &[f64], step: f64) -> PolicyParams {
        let theta = self.theta.iter().zip(direction).map(|(t, d)| t + step * d).collect();
        PolicyParams { n_states: self.n_states, n_actions: self.n_actions, theta }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax(params: &PolicyParams) -> Result<StochasticPolicy> {
    if let Some(i) = params.theta.iter().position(|x| !x.is_finite()) {
        return Err(PepgError::NonFinite(format!("theta entry {i}")));
    }
    let na = params.n_actions;
    let mut probs = vec![0.0; params.theta.len()];
    for s in 0..params.n_states {
        let row = &params.theta[s * na..(s + 1) * na];
        softmax_row(row, &mut probs[s * na..(s + 1) * na]);
    }
    Ok(StochasticPolicy { n_states: params.n_states, n_actions: na, probs })
}

/// Softmax of one row of logits into `out`.
pub fn softmax_row(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().fold(f64::NEG_INFINITY, |m, x| m.max(*x));
    let mut z = 0.0;
    for (o, x) in out.iter_mut().zip(logits) {
        *o = (x - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Non-zero block of `∂ log π(a|s) / ∂θ`: the row `s` entries `1[a=a'] − π(a'|s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub state: usize,
    pub values: Vec<f64>,
}

/// Score `∇_θ log π_θ(a|s)`; non-zero only on row `s`.
pub fn log_policy_score(params: &PolicyParams, s: usize, a: usize) -> Result<ScoreRow> {
    if s >= params.n_states || a >= params.n_actions {
        return Err(PepgError::Index(format!("({s}, {a}) outside {}x{}", params.n_states, params.n_actions)));
    }
    let na = params.n_actions;
    let mut values = vec![0.0; na];
    softmax_row(&params.theta[s * na..(s + 1) * na], &mut values);
    for v in values.iter_mut() {
        *v = -*v;
    }
    values[a] += 1.0;
    Ok(ScoreRow { state: s, values })
}

/// Draws an action from `π(·|s)` by inverse-CDF sampling.
pub fn sample_action<R: Rng + ?Sized>(policy: &StochasticPolicy, s: usize, rng: &mut R) -> usize {
    sample_index(policy.row(s), rng)
}

/// Inverse-CDF draw from a probability vector.
#[inline]
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Entropy `−Σ_a π(a|s) log π(a|s)` of one state's action distribution.
pub fn policy_entropy(policy: &StochasticPolicy, s: usize) -> Result<f64> {
    if s >= policy.n_states {
        return Err(PepgError::Index(format!("state {s}")));
    }
    let mut h = 0.0;
    for (a, &p) in policy.row(s).iter().enumerate() {
        if p <= ZERO_PROB_GUARD {
            return Err(PepgError::ZeroProbability { state: s, action: a });
        }
        h -= p * p.ln();
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_logits_are_uniform() {
        let pi = softmax(&PolicyParams::zeros(3, 4)).unwrap();
        assert!(pi.probs.iter().all(|p| (*p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn hand_evaluated_two_thirds() {
        let pi = softmax(&PolicyParams::new(1, 2, vec![2f64.ln(), 0.0]).unwrap()).unwrap();
        assert!((pi.probs[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((pi.probs[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(softmax(&PolicyParams::new(1, 2, vec![f64::NAN, 0.0]).unwrap()).is_err());
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let pi = softmax(&PolicyParams::new(1, 3, vec![1000.0, 999.0, -1000.0]).unwrap()).unwrap();
        assert!(pi.probs.iter().all(|p| p.is_finite()));
        assert!((pi.probs.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_score() {
        let sc = log_policy_score(&PolicyParams::zeros(2, 2), 1, 0).unwrap();
        assert_eq!(sc.state, 1);
        assert_eq!(sc.values, vec![0.5, -0.5]);
        assert!(log_policy_score(&PolicyParams::zeros(2, 2), 2, 0).is_err());
    }

    #[test]
    fn score_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let theta: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let params = PolicyParams::new(2, 3, theta).unwrap();
        let h = 1e-6;
        for s in 0..2 {
            for a in 0..3 {
                let sc = log_policy_score(&params, s, a).unwrap();
                for s2 in 0..2 {
                    for a2 in 0..3 {
                        let mut e = vec![0.0; 6];
                        e[s2 * 3 + a2] = 1.0;
                        let lp = softmax(&params.offset(&e, h)).unwrap().pi(s, a).ln();
                        let lm = softmax(&params.offset(&e, -h)).unwrap().pi(s, a).ln();
                        let fd = (lp - lm) / (2.0 * h);
                        let an = if s2 == s { sc.values[a2] } else { 0.0 };
                        assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn point_mass_sampling() {
        let pi = StochasticPolicy::new(1, 4, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..1000).all(|_| sample_action(&pi, 0, &mut rng) == 0));
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let pi = StochasticPolicy::uniform(1, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sample_action(&pi, 0, &mut rng)] += 1;
        }
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * 0.25).abs() <= 3.0 * sigma);
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let pi = StochasticPolicy::new(1, 3, vec![0.2, 0.3, 0.5]).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..200).map(|_| sample_action(&pi, 0, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }

    #[test]
    fn entropy_examples() {
        let u = StochasticPolicy::uniform(1, 4);
        assert!((policy_entropy(&u, 0).unwrap() - 4f64.ln()).abs() < 1e-12);
        let near = softmax(&PolicyParams::new(1, 3, vec![20.0, 0.0, 0.0]).unwrap()).unwrap();
        assert!(policy_entropy(&near, 0).unwrap() < 1e-3);
        let p = StochasticPolicy::new(1, 2, vec![2.0 / 3.0, 1.0 / 3.0]).unwrap();
        assert!((policy_entropy(&p, 0).unwrap() - 0.6365142).abs() < 1e-6);
        let z = StochasticPolicy::new(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(policy_entropy(&z, 0).is_err());
    }

    proptest! {
        #[test]
        fn shift_invariance(row in prop::collection::vec(-30.0f64..30.0, 1..6), c in -50.0f64..50.0) {
            let n = row.len();
            let a = softmax(&PolicyParams::new(1, n, row.clone()).unwrap()).unwrap();
            let b = softmax(&PolicyParams::new(1, n, row.iter().map(|x| x + c).collect()).unwrap()).unwrap();
            for i in 0..n {
                prop_assert!((a.probs[i] - b.probs[i]).abs() <= 1e-14);
            }
        }

        #[test]
        fn score_properties(row in prop::collection::vec(-5.0f64..5.0, 2..6)) {
            let n = row.len();
            let params = PolicyParams::new(1, n, row).unwrap();
            let pi = softmax(&params).unwrap();
            let mut mean = vec![0.0; n];
            for a in 0..n {
                let sc = log_policy_score(&params, 0, a).unwrap();
                prop_assert!(sc.values.iter().sum::<f64>().abs() <= 1e-12);
                for (m, v) in mean.iter_mut().zip(&sc.values) {
                    *m += pi.pi(0, a) * v;
                }
            }
            prop_assert!(mean.iter().all(|m| m.abs() <= 1e-10));
        }

        #[test]
        fn entropy_bounds(row in prop::collection::vec(-8.0f64..8.0, 1..7)) {
            let n = row.len();
            let pi = softmax(&PolicyParams::new(1, n, row).unwrap()).unwrap();
            let h = policy_entropy(&pi, 0).unwrap();
            prop_assert!(h >= -1e-15 && h <= (n as f64).ln() + 1e-12);
        }
    }
}
