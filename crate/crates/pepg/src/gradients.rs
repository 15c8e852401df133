//! Performative policy gradient: trajectory estimator, environment-gradient
//! providers and exact oracles.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{EnvGradTables, PerformativeEnv};
use crate::error::{PepgError, Result};
use crate::mdp::{exact_solution, soft_tables, StochasticPolicy, TabularTables, ZERO_PROB_GUARD};
use crate::policy::{sample_index, softmax, PolicyParams};

/// Truncation horizon `T = ⌈log(ε(1−γ)/R_max) / log γ⌉`, at least 1.
pub fn horizon(gamma: f64, r_max: f64, eps_tail: f64) -> usize {
    if gamma <= 0.0 || r_max <= 0.0 {
        return 1;
    }
    let t = ((eps_tail * (1.0 - gamma) / r_max).ln() / gamma.ln()).ceil();
    if t.is_finite() && t >= 1.0 {
        t as usize
    } else {
        1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub s: usize,
    pub a: usize,
    pub s_next: usize,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub gamma: f64,
}

impl Trajectory {
    /// `Σ_t γ^t r_t`.
    pub fn discounted_return(&self) -> f64 {
        let mut g = 0.0;
        for st in self.steps.iter().rev() {
            g = st.r + self.gamma * g;
        }
        g
    }

    /// Discounted reward-to-go of the soft reward `r_t − λ log π(a_t|s_t)`.
    pub fn reward_to_go(&self, policy: &StochasticPolicy, lambda: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.steps.len()];
        let mut g = 0.0;
        for (t, st) in self.steps.iter().enumerate().rev() {
            let r = if lambda > 0.0 { st.r - lambda * policy.pi(st.s, st.a).ln() } else { st.r };
            g = r + self.gamma * g;
            out[t] = g;
        }
        out
    }
}

/// Samples one trajectory of length `horizon` in fixed tables.
pub fn rollout<R: Rng + ?Sized>(
    tables: &TabularTables,
    policy: &StochasticPolicy,
    rho: &[f64],
    gamma: f64,
    horizon: usize,
    rng: &mut R,
) -> Trajectory {
    let mut steps = Vec::with_capacity(horizon);
    let mut s = sample_index(rho, rng);
    for _ in 0..horizon {
        let a = sample_index(policy.row(s), rng);
        let s_next = sample_index(tables.row(s, a), rng);
        steps.push(Step { s, a, s_next, r: tables.r(s, a) });
        s = s_next;
    }
    Trajectory { steps, gamma }
}

/// Independent stream for trajectory `index` under a batch seed.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Induces the environment once at `θ` and samples `count` trajectories in it.
pub fn collect_trajectories(
    env: &dyn PerformativeEnv,
    theta: &PolicyParams,
    count: usize,
    horizon: usize,
    seed: u64,
) -> Result<(TabularTables, Vec<Trajectory>)> {
    let tables = env.induce(theta)?;
    let policy = softmax(theta)?;
    let trajs = sample_batch(&tables, &policy, env.rho(), env.gamma(), count, horizon, seed)?;
    Ok((tables, trajs))
}

/// Samples `count` trajectories in fixed tables, one rng stream per trajectory.
pub fn sample_batch(
    tables: &TabularTables,
    policy: &StochasticPolicy,
    rho: &[f64],
    gamma: f64,
    count: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if count == 0 || horizon == 0 {
        return Err(PepgError::config("trajectories", "count and horizon must be at least 1"));
    }
    Ok((0..count)
        .into_par_iter()
        .map(|i| rollout(tables, policy, rho, gamma, horizon, &mut stream_rng(seed, i as u64)))
        .collect())
}

/// Tabular value fit: mean reward-to-go per visited state; other states keep `previous`.
pub fn fit_value(trajs: &[Trajectory], policy: &StochasticPolicy, lambda: f64, previous: &[f64]) -> Vec<f64> {
    let n = previous.len();
    let mut sum = vec![0.0; n];
    let mut cnt = vec![0usize; n];
    for tr in trajs {
        for (st, g) in tr.steps.iter().zip(tr.reward_to_go(policy, lambda)) {
            sum[st.s] += g;
            cnt[st.s] += 1;
        }
    }
    (0..n).map(|s| if cnt[s] > 0 { sum[s] / cnt[s] as f64 } else { previous[s] }).collect()
}

/// `Â_{i,t} = G_{i,t} − V̂(s_t)` per trajectory.
pub fn advantage_estimates(trajs: &[Trajectory], v_hat: &[f64], policy: &StochasticPolicy, lambda: f64) -> Vec<Vec<f64>> {
    trajs
        .iter()
        .map(|tr| tr.reward_to_go(policy, lambda).iter().zip(&tr.steps).map(|(g, st)| g - v_hat[st.s]).collect())
        .collect()
}

/// Source of `∂log P/∂θ` and `∂r/∂θ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GradProvider {
    Analytic,
    FiniteDifference { h: f64 },
    Directional { k: usize, h: f64, seed: u64 },
    Zero,
}

impl GradProvider {
    pub fn finite_difference() -> Self {
        GradProvider::FiniteDifference { h: 1e-5 }
    }
    pub fn directional(k: usize, seed: u64) -> Self {
        GradProvider::Directional { k, h: 1e-5, seed }
    }
}

/// Environment Jacobian resolved for one `θ`, contracted with weights on demand.
pub enum EnvJacobian<'a> {
    Tables(EnvGradTables),
    Analytic { env: &'a dyn PerformativeEnv, theta: &'a PolicyParams, tables: &'a TabularTables },
    Zero(usize),
}

impl EnvJacobian<'_> {
    pub fn resolve<'a>(
        env: &'a dyn PerformativeEnv,
        theta: &'a PolicyParams,
        tables: &'a TabularTables,
        provider: GradProvider,
    ) -> Result<EnvJacobian<'a>> {
        Ok(match provider {
            GradProvider::Zero => EnvJacobian::Zero(theta.dim()),
            GradProvider::Analytic => {
                if !env.has_analytic_gradient() {
                    return Err(PepgError::Unsupported("environment has no analytic gradient".into()));
                }
                EnvJacobian::Analytic { env, theta, tables }
            }
            GradProvider::FiniteDifference { h } => EnvJacobian::Tables(env_grad_fd(env, theta, EnvGradMode::Full, h)?),
            GradProvider::Directional { k, h, seed } => {
                EnvJacobian::Tables(env_grad_fd(env, theta, EnvGradMode::Directional { k, seed }, h)?)
            }
        })
    }

    /// `(Σ W ∂log P/∂θ, Σ U ∂r/∂θ)`.
    pub fn vjp(&self, w_logp: &[f64], w_r: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            EnvJacobian::Zero(n) => Ok((vec![0.0; *n], vec![0.0; *n])),
            EnvJacobian::Tables(t) => Ok(t.vjp(w_logp, w_r)),
            EnvJacobian::Analytic { env, theta, tables } => {
                env.analytic_vjp(theta, tables, w_logp, w_r).expect("checked at resolve")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorOptions {
    /// Apply `γ^t` inside the sum.
    pub discount_weights: bool,
    /// Compute per-trajectory estimates for standard errors.
    pub per_trajectory: bool,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        EstimatorOptions { discount_weights: true, per_trajectory: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub g: Vec<f64>,
    pub policy_term_norm: f64,
    pub transition_term_norm: f64,
    pub reward_term_norm: f64,
    /// Per-coordinate standard error across trajectories, when requested.
    pub stderr: Option<Vec<f64>>,
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

struct Accum {
    policy: Vec<f64>,
    entropy: Vec<f64>,
    w: Vec<f64>,
    u: Vec<f64>,
}

impl Accum {
    fn new(np: usize, nw: usize, nu: usize) -> Self {
        Accum { policy: vec![0.0; np], entropy: vec![0.0; np], w: vec![0.0; nw], u: vec![0.0; nu] }
    }
}

#[allow(clippy::too_many_arguments)]
fn accumulate(
    acc: &mut Accum,
    tr: &Trajectory,
    adv: &[f64],
    policy: &StochasticPolicy,
    n_states: usize,
    lambda: f64,
    discount: bool,
    scale: f64,
) {
    let na = policy.n_actions;
    let mut w_t = scale;
    for (st, &a_hat) in tr.steps.iter().zip(adv) {
        let row = policy.row(st.s);
        let base = st.s * na;
        for b in 0..na {
            let score = if b == st.a { 1.0 - row[b] } else { -row[b] };
            acc.policy[base + b] += w_t * a_hat * score;
            if lambda > 0.0 {
                acc.entropy[base + b] -= w_t * lambda * score;
            }
        }
        acc.w[(st.s * na + st.a) * n_states + st.s_next] += w_t * a_hat;
        acc.u[st.s * na + st.a] += w_t;
        if discount {
            w_t *= tr.gamma;
        }
    }
}

/// Eq.-(7)-style estimate `(1/I) Σ_i Σ_t γ^t [Â(∇log π + ∇log P) + ∇r̃]`.
#[allow(clippy::too_many_arguments)]
pub fn pepg_gradient(
    env: &dyn PerformativeEnv,
    theta: &PolicyParams,
    tables: &TabularTables,
    trajs: &[Trajectory],
    adv: &[Vec<f64>],
    provider: GradProvider,
    lambda: f64,
    opts: EstimatorOptions,
) -> Result<GradientEstimate> {
    if trajs.is_empty() || trajs.len() != adv.len() {
        return Err(PepgError::Dimension("trajectory and advantage batches differ".into()));
    }
    let (n, na) = (env.n_states(), env.n_actions());
    if theta.n_states != n || theta.n_actions != na {
        return Err(PepgError::Dimension("theta shape does not match environment".into()));
    }
    let policy = softmax(theta)?;
    let jac = EnvJacobian::resolve(env, theta, tables, provider)?;
    let np = n * na;
    let inv = 1.0 / trajs.len() as f64;

    let mut total = Accum::new(np, n * na * n, np);
    let mut stderr = None;
    if opts.per_trajectory {
        let mut sum = vec![0.0; np];
        let mut sum2 = vec![0.0; np];
        for (tr, a) in trajs.iter().zip(adv) {
            let mut one = Accum::new(np, n * na * n, np);
            accumulate(&mut one, tr, a, &policy, n, lambda, opts.discount_weights, 1.0);
            let (gp, gr) = jac.vjp(&one.w, &one.u)?;
            for k in 0..np {
                let gk = one.policy[k] + one.entropy[k] + gp[k] + gr[k];
                sum[k] += gk;
                sum2[k] += gk * gk;
            }
            for (t, o) in [(&mut total.policy, &one.policy), (&mut total.entropy, &one.entropy)] {
                for (x, y) in t.iter_mut().zip(o) {
                    *x += inv * y;
                }
            }
            for (x, y) in total.w.iter_mut().zip(&one.w) {
                *x += inv * y;
            }
            for (x, y) in total.u.iter_mut().zip(&one.u) {
                *x += inv * y;
            }
        }
        let m = trajs.len() as f64;
        stderr = Some(
            (0..np)
                .map(|k| {
                    let mean = sum[k] / m;
                    let var = (sum2[k] / m - mean * mean).max(0.0) * m / (m - 1.0).max(1.0);
                    (var / m).sqrt()
                })
                .collect(),
        );
    } else {
        for (tr, a) in trajs.iter().zip(adv) {
            accumulate(&mut total, tr, a, &policy, n, lambda, opts.discount_weights, inv);
        }
    }
    let (gp, gr) = jac.vjp(&total.w, &total.u)?;
    let reward_term: Vec<f64> = gr.iter().zip(&total.entropy).map(|(a, b)| a + b).collect();
    let g: Vec<f64> = (0..np).map(|k| total.policy[k] + gp[k] + reward_term[k]).collect();
    if g.iter().any(|x| !x.is_finite()) {
        return Err(PepgError::NonFinite("gradient estimate".into()));
    }
    Ok(GradientEstimate {
        policy_term_norm: l2_norm(&total.policy),
        transition_term_norm: l2_norm(&gp),
        reward_term_norm: l2_norm(&reward_term),
        g,
        stderr,
    })
}

/// Exact (soft) performative value `Ṽ^{π_θ}_{π_θ}(ρ)`.
pub fn performative_value(env: &dyn PerformativeEnv, theta: &PolicyParams, lambda: f64) -> Result<f64> {
    let tables = env.induce(theta)?;
    value_in_tables(&tables, theta, env.gamma(), env.rho(), lambda)
}

/// Exact (soft) value of `softmax(θ)` in fixed tables.
pub fn value_in_tables(tables: &TabularTables, theta: &PolicyParams, gamma: f64, rho: &[f64], lambda: f64) -> Result<f64> {
    let policy = softmax(theta)?;
    let t = if lambda > 0.0 { soft_tables(tables, &policy, lambda)? } else { tables.clone() };
    let v = crate::mdp::solve_value(&t, &policy, gamma)?;
    Ok(crate::mdp::expected_value(&v, rho))
}

/// Central differences of the exact performative value.
pub fn exact_gradient_fd(env: &dyn PerformativeEnv, theta: &PolicyParams, lambda: f64, h: f64) -> Result<Vec<f64>> {
    let n = theta.dim();
    let mut e = vec![0.0; n];
    let mut g = vec![0.0; n];
    for k in 0..n {
        e[k] = 1.0;
        let vp = performative_value(env, &theta.offset(&e, h), lambda)?;
        let vm = performative_value(env, &theta.offset(&e, -h), lambda)?;
        e[k] = 0.0;
        g[k] = (vp - vm) / (2.0 * h);
    }
    Ok(g)
}

/// Exact expectation form of the performative gradient theorem:
/// `1/(1−γ) Σ d(s,a)[A ∇log π + γ Σ_{s'} P V(s') ∇log P + ∇r]` with soft `V, A` when `λ > 0`.
pub fn theorem2_gradient(
    env: &dyn PerformativeEnv,
    theta: &PolicyParams,
    lambda: f64,
    provider: GradProvider,
) -> Result<Vec<f64>> {
    let tables = env.induce(theta)?;
    let policy = softmax(theta)?;
    let gamma = env.gamma();
    let t = if lambda > 0.0 { soft_tables(&tables, &policy, lambda)? } else { tables.clone() };
    let sol = exact_solution(&t, &policy, gamma, env.rho())?;
    let (n, na) = (env.n_states(), env.n_actions());
    let c = 1.0 / (1.0 - gamma);
    let mut w = vec![0.0; n * na * n];
    let mut u = vec![0.0; n * na];
    let mut g = vec![0.0; n * na];
    for s in 0..n {
        for a in 0..na {
            let d = sol.occupancy.at(s, a);
            g[s * na + a] = c * d * sol.adv[s * na + a];
            u[s * na + a] = c * d;
            for s2 in 0..n {
                let p = tables.p(s, a, s2);
                if p > 0.0 {
                    w[(s * na + a) * n + s2] = c * gamma * d * p * sol.v[s2];
                }
            }
        }
    }
    let jac = EnvJacobian::resolve(env, theta, &tables, provider)?;
    let (gp, gr) = jac.vjp(&w, &u)?;
    Ok((0..n * na).map(|k| g[k] + gp[k] + gr[k]).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EnvGradMode {
    Full,
    /// `k` random orthonormal directions with least-squares reconstruction.
    Directional { k: usize, seed: u64 },
}

/// Numeric derivative tables of the induced environment.
pub fn env_grad_fd(env: &dyn PerformativeEnv, theta: &PolicyParams, mode: EnvGradMode, h: f64) -> Result<EnvGradTables> {
    let (n, na) = (env.n_states(), env.n_actions());
    let np = theta.dim();
    let base = env.induce(theta)?;
    let dirs: Vec<Vec<f64>> = match mode {
        EnvGradMode::Full => (0..np)
            .map(|k| {
                let mut e = vec![0.0; np];
                e[k] = 1.0;
                e
            })
            .collect(),
        EnvGradMode::Directional { k, seed } => random_orthonormal(np, k.clamp(1, np), seed),
    };
    let rows_p = n * na * n;
    let rows_r = n * na;
    // Directional derivatives, one column per direction.
    let mut dp = vec![0.0; rows_p * dirs.len()];
    let mut dr = vec![0.0; rows_r * dirs.len()];
    let kd = dirs.len();
    for (j, u) in dirs.iter().enumerate() {
        let tp = env.induce(&theta.offset(u, h))?;
        let tm = env.induce(&theta.offset(u, -h))?;
        for i in 0..rows_p {
            if base.transition[i] > ZERO_PROB_GUARD && tp.transition[i] > 0.0 && tm.transition[i] > 0.0 {
                dp[i * kd + j] = (tp.transition[i].ln() - tm.transition[i].ln()) / (2.0 * h);
            }
        }
        for i in 0..rows_r {
            dr[i * kd + j] = (tp.reward[i] - tm.reward[i]) / (2.0 * h);
        }
    }
    let mut out = EnvGradTables::zeros(n, na, np);
    for i in 0..rows_p {
        if base.transition[i] <= ZERO_PROB_GUARD {
            let s = i / (na * n);
            out.zero_entries.push((s, (i / n) % na, i % n));
            continue;
        }
        let row = &mut out.dlogp[i * np..(i + 1) * np];
        for (j, u) in dirs.iter().enumerate() {
            let c = dp[i * kd + j];
            if c != 0.0 {
                for (x, y) in row.iter_mut().zip(u) {
                    *x += c * y;
                }
            }
        }
    }
    for i in 0..rows_r {
        let row = &mut out.dr[i * np..(i + 1) * np];
        for (j, u) in dirs.iter().enumerate() {
            let c = dr[i * kd + j];
            if c != 0.0 {
                for (x, y) in row.iter_mut().zip(u) {
                    *x += c * y;
                }
            }
        }
    }
    Ok(out)
}

/// `k` orthonormal vectors in `R^n` from Gaussian draws (QR).
pub fn random_orthonormal(n: usize, k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = DMatrix::<f64>::from_fn(n, k, |_, _| rng.sample(StandardNormal));
    let q = m.qr().q();
    (0..k).map(|j| q.column(j).iter().copied().collect()).collect()
}
