//! Loan-approval toy with a performative population mean.
//!
//! Applicants `x ~ N(μ, σ²)`; the bank grants with probability `σ(k(x − θ))`.
//! The population mean responds to the grant rate through
//! `μ ← (1−β)μ + β f(g(θ, μ))`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{PepgError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoanConfig {
    pub sigma: f64,
    /// Repayment sensitivity.
    pub gamma_rep: f64,
    /// Repayment calibration constant.
    pub c: f64,
    pub reward: f64,
    pub loss: f64,
    /// Sigmoid steepness of the grant policy.
    pub k: f64,
    /// Performative strength.
    pub beta: f64,
    /// Bound of the feedback map `f`.
    pub m: f64,
    pub mu0: f64,
    pub quadrature_nodes: usize,
}

impl Default for LoanConfig {
    fn default() -> Self {
        LoanConfig {
            sigma: 1.0,
            gamma_rep: 2.0,
            c: 0.0,
            reward: 1.0,
            loss: 1.5,
            k: 4.0,
            beta: 0.5,
            m: 1.0,
            mu0: 0.0,
            quadrature_nodes: 64,
        }
    }
}

#[inline]
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Nodes and weights for `E_{z~N(0,1)}[h(z)] ≈ Σ w_i h(z_i)` (Golub–Welsch).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        let b = (i as f64).sqrt();
        j[(i, i - 1)] = b;
        j[(i - 1, i)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> =
        (0..n).map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2))).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    (pairs.iter().map(|p| p.0).collect(), pairs.iter().map(|p| p.1 / total).collect())
}

/// Equilibrium search result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Equilibrium {
    pub mu: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Loan model with a precomputed quadrature rule.
#[derive(Debug, Clone)]
pub struct LoanModel {
    pub config: LoanConfig,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl LoanModel {
    pub fn new(config: LoanConfig) -> Result<Self> {
        if !(config.sigma > 0.0) {
            return Err(PepgError::config("sigma", "must be positive"));
        }
        if !(0.0..=1.0).contains(&config.beta) {
            return Err(PepgError::config("beta", "must lie in [0, 1]"));
        }
        if !(config.k > 0.0) {
            return Err(PepgError::config("k", "must be positive"));
        }
        if !(config.m >= 0.0) {
            return Err(PepgError::config("m", "must be non-negative"));
        }
        if config.quadrature_nodes < 64 {
            return Err(PepgError::config("quadrature_nodes", "use at least 64 nodes"));
        }
        let (nodes, weights) = gauss_hermite(config.quadrature_nodes);
        Ok(LoanModel { config, nodes, weights })
    }

    /// Grant probability `π_θ(x) = σ(k(x − θ))`.
    #[inline]
    pub fn grant_prob(&self, theta: f64, x: f64) -> f64 {
        logistic(self.config.k * (x - theta))
    }

    #[inline]
    pub fn repay_prob(&self, x: f64) -> f64 {
        logistic(self.config.gamma_rep * x - self.config.c)
    }

    /// Expected payoff `u(x)` of granting to `x`.
    #[inline]
    pub fn payoff(&self, x: f64) -> f64 {
        let p = self.repay_prob(x);
        p * self.config.reward - (1.0 - p) * self.config.loss
    }

    /// Feedback map `f(g) = M(2g − 1)`.
    #[inline]
    pub fn feedback(&self, g: f64) -> f64 {
        self.config.m * (2.0 * g - 1.0)
    }

    fn expect(&self, mu: f64, h: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(z, w)| w * h(mu + self.config.sigma * z)).sum()
    }

    /// `U(θ, μ) = E[π_θ(x) u(x)]`.
    pub fn utility(&self, theta: f64, mu: f64) -> f64 {
        self.expect(mu, |x| self.grant_prob(theta, x) * self.payoff(x))
    }

    /// `g(θ, μ) = E[π_θ(x)]`.
    pub fn grant_rate(&self, theta: f64, mu: f64) -> f64 {
        self.expect(mu, |x| self.grant_prob(theta, x))
    }

    /// `(∂g/∂θ, ∂g/∂μ)`.
    pub fn grant_rate_partials(&self, theta: f64, mu: f64) -> (f64, f64) {
        let k = self.config.k;
        let d = self.expect(mu, |x| {
            let p = self.grant_prob(theta, x);
            k * p * (1.0 - p)
        });
        (-d, d)
    }

    /// One step of the performative mean dynamics.
    pub fn step_mean(&self, theta: f64, mu: f64) -> f64 {
        let b = self.config.beta;
        (1.0 - b) * mu + b * self.feedback(self.grant_rate(theta, mu))
    }

    /// Fixed-point iteration from `μ₀` until `|Δμ| ≤ 1e−10` or `10⁵` steps.
    pub fn equilibrium_mean(&self, theta: f64) -> Equilibrium {
        let mut mu = self.config.mu0;
        if self.config.beta == 0.0 {
            return Equilibrium { mu, converged: true, iterations: 0 };
        }
        for it in 1..=100_000 {
            let next = self.step_mean(theta, mu);
            let delta = (next - mu).abs();
            mu = next;
            if delta <= 1e-10 {
                return Equilibrium { mu, converged: true, iterations: it };
            }
        }
        Equilibrium { mu, converged: false, iterations: 100_000 }
    }

    /// `dμ*/dθ` by implicit differentiation of `μ = f(g(θ, μ))`.
    pub fn equilibrium_derivative(&self, theta: f64, mu: f64) -> f64 {
        if self.config.beta == 0.0 {
            return 0.0;
        }
        let (g_theta, g_mu) = self.grant_rate_partials(theta, mu);
        let fp = 2.0 * self.config.m;
        fp * g_theta / (1.0 - fp * g_mu)
    }

    /// `U(θ, μ*(θ))`.
    pub fn equilibrium_utility(&self, theta: f64) -> Result<f64> {
        let eq = self.equilibrium_mean(theta);
        if !eq.converged {
            return Err(PepgError::NoConvergence(format!("loan equilibrium at θ = {theta}")));
        }
        Ok(self.utility(theta, eq.mu))
    }

    /// `θ^ERM = argmax_θ U(θ, μ₀)`.
    pub fn theta_erm(&self) -> f64 {
        maximize_1d(|t| self.utility(t, self.config.mu0), -6.0, 6.0)
    }

    /// `θ^Perf = argmax_θ U(θ, μ*(θ))`.
    pub fn theta_perf(&self) -> Result<f64> {
        let bad = std::cell::Cell::new(false);
        let t = maximize_1d(
            |t| match self.equilibrium_utility(t) {
                Ok(u) => u,
                Err(_) => {
                    bad.set(true);
                    f64::NEG_INFINITY
                }
            },
            -6.0,
            6.0,
        );
        if bad.get() {
            return Err(PepgError::NoConvergence("loan equilibrium during θ^Perf search".into()));
        }
        Ok(t)
    }
}

/// Grid search on 241 points followed by golden-section refinement.
pub fn maximize_1d(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let n = 240;
    let step = (hi - lo) / n as f64;
    let (mut best_i, mut best_v) = (0usize, f64::NEG_INFINITY);
    for i in 0..=n {
        let v = f(lo + step * i as f64);
        if v > best_v {
            best_v = v;
            best_i = i;
        }
    }
    let mut a = lo + step * best_i.saturating_sub(1) as f64;
    let mut b = (lo + step * (best_i + 1) as f64).min(hi);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > 1e-10 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    let mid = 0.5 * (a + b);
    if f(mid) >= best_v {
        mid
    } else {
        lo + step * best_i as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn model() -> LoanModel {
        LoanModel::new(LoanConfig::default()).unwrap()
    }

    #[test]
    fn quadrature_moments() {
        let (x, w) = gauss_hermite(64);
        let m = |p: i32| x.iter().zip(&w).map(|(x, w)| w * x.powi(p)).sum::<f64>();
        assert!((m(0) - 1.0).abs() < 1e-12);
        assert!(m(1).abs() < 1e-12);
        assert!((m(2) - 1.0).abs() < 1e-10);
        assert!((m(4) - 3.0).abs() < 1e-9);
        assert!((m(6) - 15.0).abs() < 1e-8);
    }

    #[test]
    fn symmetric_payoff_gives_zero_utility() {
        let cfg = LoanConfig { gamma_rep: 0.0, c: 0.0, reward: 1.0, loss: 1.0, ..LoanConfig::default() };
        let m = LoanModel::new(cfg).unwrap();
        for (t, mu) in [(0.0, 0.0), (1.3, -0.7), (-2.0, 1.5)] {
            assert!(m.utility(t, mu).abs() < 1e-14);
        }
    }

    #[test]
    fn strict_threshold_grants_nothing() {
        assert!(model().utility(60.0, 0.0).abs() < 1e-12);
    }

    #[test]
    fn utility_matches_monte_carlo() {
        let m = model();
        let (theta, mu) = (0.3, -0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let normal = Normal::new(mu, 1.0).unwrap();
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let x: f64 = normal.sample(&mut rng);
            let v = m.grant_prob(theta, x) * m.payoff(x);
            s += v;
            s2 += v * v;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((m.utility(theta, mu) - mean).abs() <= 3.0 * se);
    }

    #[test]
    fn no_performativity_keeps_mean() {
        let m = LoanModel::new(LoanConfig { beta: 0.0, mu0: 0.4, ..LoanConfig::default() }).unwrap();
        assert_eq!(m.equilibrium_mean(1.0).mu, 0.4);
    }

    #[test]
    fn constant_feedback_fixed_point() {
        // M = 0 makes f ≡ 0.
        let m = LoanModel::new(LoanConfig { m: 0.0, mu0: 1.0, beta: 0.3, ..LoanConfig::default() }).unwrap();
        let eq = m.equilibrium_mean(0.5);
        assert!(eq.converged);
        assert!(eq.mu.abs() < 1e-9);
    }

    #[test]
    fn equilibrium_derivative_matches_finite_difference() {
        let m = model();
        for theta in [-1.0, 0.0, 0.7] {
            let mu = m.equilibrium_mean(theta).mu;
            let h = 1e-4;
            let fd = (m.equilibrium_mean(theta + h).mu - m.equilibrium_mean(theta - h).mu) / (2.0 * h);
            let an = m.equilibrium_derivative(theta, mu);
            assert!((fd - an).abs() < 1e-5, "{fd} vs {an}");
        }
    }

    #[test]
    fn performative_optimum_beats_erm() {
        let m = model();
        let te = m.theta_erm();
        let tp = m.theta_perf().unwrap();
        assert!(m.equilibrium_utility(tp).unwrap() > m.equilibrium_utility(te).unwrap());
    }

    #[test]
    fn erm_equals_perf_without_feedback() {
        let m = LoanModel::new(LoanConfig { beta: 0.0, ..LoanConfig::default() }).unwrap();
        assert!((m.theta_erm() - m.theta_perf().unwrap()).abs() < 1e-6);
    }

    #[test]
    fn maximize_quadratic() {
        let t = maximize_1d(|x| -(x - 1.234).powi(2), -5.0, 5.0);
        assert!((t - 1.234).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn mean_dynamics_stay_bounded(theta in -4.0f64..4.0, mu0 in -3.0f64..3.0, beta in 0.0f64..1.0) {
            let m = LoanModel::new(LoanConfig { beta, mu0, ..LoanConfig::default() }).unwrap();
            let (lo, hi) = (mu0.min(-m.config.m), mu0.max(m.config.m));
            let mut mu = mu0;
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            for _ in 0..50 {
                let t = theta + rng.random_range(-0.5..0.5);
                mu = m.step_mean(t, mu);
                prop_assert!(mu >= lo - 1e-12 && mu <= hi + 1e-12);
            }
        }
    }
}
