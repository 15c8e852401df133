//! Stability-seeking baselines: repeated retraining and delayed mixed retraining.
//!
//! Both freeze induced environments and solve them with entropy-regularized value
//! iteration; the deployed logits are `Q_soft / λ_base`.

use super::pepg::{mean_return, rollout_horizon, Deployed, EnvSequence};
use super::{derive_seed, Algorithm, Clock, RunRecord, RunRow, TrainConfig};
use crate::envs::{EnvSpec, PerformativeEnv};
use crate::error::{PepgError, Result};
use crate::gradients::{l2_norm, sample_batch};
use crate::mdp::TabularTables;
use crate::policy::PolicyParams;

const TAG_BATCH: u64 = 1;
const TAG_ESTIMATE: u64 = 3;
/// Pseudo-count of the reference model in empirical estimates.
const PRIOR_COUNT: f64 = 1.0;
const SOFT_VI_TOL: f64 = 1e-13;
const SOFT_VI_MAX_ITER: usize = 200_000;

/// Soft-optimal Q of fixed tables: `Q = r + γ P V`, `V = λ log Σ_a exp(Q/λ)`.
/// `warm` seeds `V`; the result has the layout `[s][a]`.
pub fn soft_value_iteration(tables: &TabularTables, gamma: f64, lambda: f64, warm: Option<&[f64]>) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, na) = (tables.n_states, tables.n_actions);
    let mut v = warm.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
    let mut q = vec![0.0; n * na];
    for _ in 0..SOFT_VI_MAX_ITER {
        for s in 0..n {
            for a in 0..na {
                let row = tables.row(s, a);
                let ev: f64 = row.iter().zip(&v).map(|(p, x)| p * x).sum();
                q[s * na + a] = tables.r(s, a) + gamma * ev;
            }
        }
        let mut delta = 0.0f64;
        for s in 0..n {
            let qs = &q[s * na..(s + 1) * na];
            let m = qs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let nv = m + lambda * qs.iter().map(|x| ((x - m) / lambda).exp()).sum::<f64>().ln();
            delta = delta.max((nv - v[s]).abs());
            v[s] = nv;
        }
        if !delta.is_finite() {
            return Err(PepgError::NonFinite("soft value iteration".into()));
        }
        if delta <= SOFT_VI_TOL * (1.0 - gamma) {
            return Ok((q, v));
        }
    }
    Err(PepgError::NoConvergence(format!("soft value iteration after {SOFT_VI_MAX_ITER} sweeps")))
}

/// Initial logits: uniform, or on gridworlds `log((1−ε)·uniform + ε·shortest path)`.
pub fn baseline_init(spec: &EnvSpec, env: &dyn PerformativeEnv, config: &TrainConfig) -> Result<PolicyParams> {
    let (n, na) = (env.n_states(), env.n_actions());
    let Some(grid) = spec.build_gridworld(0)? else {
        return Ok(PolicyParams::zeros(n, na));
    };
    let eps = config.epsilon_init;
    let moves = grid.shortest_path_moves();
    let mut theta = Vec::with_capacity(n * na);
    for m in moves {
        for a in 0..na {
            let p = (1.0 - eps) / na as f64 + if a == m { eps } else { 0.0 };
            // ε = 1 puts zero mass off the path; keep logits finite.
            theta.push(p.max(1e-12).ln());
        }
    }
    PolicyParams::new(n, na, theta)
}

struct Logger<'a> {
    config: &'a TrainConfig,
    record: RunRecord,
    clock: Clock,
    horizon: usize,
}

impl Logger<'_> {
    fn push(&mut self, k: usize, env: &dyn PerformativeEnv, cur: &Deployed, next: &Deployed) -> Result<()> {
        let trajs = sample_batch(
            &cur.tables,
            &cur.policy,
            env.rho(),
            env.gamma(),
            self.config.trajectories,
            self.horizon,
            derive_seed(self.config.seed, TAG_BATCH, k as u64),
        )?;
        let step: Vec<f64> = next.theta.theta.iter().zip(&cur.theta.theta).map(|(a, b)| a - b).collect();
        self.record.rows.push(RunRow {
            iteration: k,
            seed: self.config.seed,
            algo: self.record.algo.clone(),
            mc_return: mean_return(&trajs),
            exact_value: cur.value,
            stability_l2: next.occupancy.l2_distance(&cur.occupancy),
            grad_norm: l2_norm(&step),
            wall_ms: self.clock.elapsed_ms(),
        });
        Ok(())
    }
}

fn logits(q: &[f64], lambda: f64, n: usize, na: usize) -> Result<PolicyParams> {
    PolicyParams::new(n, na, q.iter().map(|x| x / lambda).collect())
}

/// Repeated retraining: solve the environment induced by the deployed policy, deploy, repeat.
/// The `grad_norm` column holds the norm of the logit update.
pub fn run_repeated_retraining(spec: &EnvSpec, config: &TrainConfig) -> Result<RunRecord> {
    mixed_retraining(spec, config, Algorithm::RpoFs, 1, 1, f64::INFINITY, 0)
}

/// Delayed mixed retraining: every `delay` rounds, solve the weighted mixture of the
/// last `window` environment estimates, weights `v^{-age}`. Each round's estimate is
/// built from `batch` trajectories; `batch = 0` uses the exact induced tables.
pub fn run_mdrr(spec: &EnvSpec, config: &TrainConfig) -> Result<RunRecord> {
    mixed_retraining(spec, config, Algorithm::Mdrr, config.delay, config.window, config.memory_weight, config.batch)
}

fn mixed_retraining(
    spec: &EnvSpec,
    config: &TrainConfig,
    algo: Algorithm,
    delay: usize,
    window: usize,
    memory_weight: f64,
    batch: usize,
) -> Result<RunRecord> {
    config.validate()?;
    let envs = EnvSequence::new(spec, config)?;
    let base = envs.base();
    let (n, na, gamma) = (base.n_states(), base.n_actions(), base.gamma());
    let mut log = Logger {
        config,
        record: RunRecord { algo: algo.to_string(), seed: config.seed, rows: Vec::new(), final_theta: Vec::new(), aborted: None },
        clock: Clock::start(config.timing),
        horizon: rollout_horizon(base, config),
    };
    let theta0 = baseline_init(spec, base, config)?;
    let mut cur = envs.with(0, |e| Deployed::new(e, theta0))?;
    let mut history: Vec<TabularTables> = Vec::new();
    let mut v_warm: Option<Vec<f64>> = None;
    let prior = if batch > 0 { Some(base.induce(&PolicyParams::zeros(n, na))?) } else { None };

    for k in 0..config.iterations {
        let estimate = match &prior {
            None => cur.tables.clone(),
            Some(prior) => envs.with(k, |e| {
                let trajs = sample_batch(
                    &cur.tables,
                    &cur.policy,
                    e.rho(),
                    gamma,
                    batch,
                    log.horizon,
                    derive_seed(config.seed, TAG_ESTIMATE, k as u64),
                )?;
                empirical_tables(&trajs, prior)
            })?,
        };
        history.push(estimate);
        if history.len() > window {
            history.remove(0);
        }
        let next_theta = if (k + 1) % delay == 0 {
            let mixed = mixture(&history, memory_weight)?;
            match soft_value_iteration(&mixed, gamma, config.lambda_base, v_warm.as_deref()) {
                Ok((q, v)) => {
                    v_warm = Some(v);
                    logits(&q, config.lambda_base, n, na)?
                }
                Err(e) => {
                    log.record.aborted = Some(format!("iteration {k}: {e}"));
                    break;
                }
            }
        } else {
            cur.theta.clone()
        };
        let next = match envs.with(k + 1, |e| Deployed::new(e, next_theta)) {
            Ok(d) => d,
            Err(e) => {
                log.record.aborted = Some(format!("iteration {k}: {e}"));
                break;
            }
        };
        envs.with(k, |e| log.push(k, e, &cur, &next))?;
        cur = next;
    }
    log.record.final_theta = cur.theta.theta;
    Ok(log.record)
}

/// Count-based model: `(counts + α P_prior)/(n + α)` per row; rewards are the
/// observed means shrunk toward the prior the same way.
fn empirical_tables(trajs: &[crate::gradients::Trajectory], prior: &TabularTables) -> Result<TabularTables> {
    let (n, na) = (prior.n_states, prior.n_actions);
    let mut counts = vec![0.0; n * na * n];
    let mut visits = vec![0.0; n * na];
    let mut rsum = vec![0.0; n * na];
    for st in trajs.iter().flat_map(|t| &t.steps) {
        let sa = st.s * na + st.a;
        counts[sa * n + st.s_next] += 1.0;
        visits[sa] += 1.0;
        rsum[sa] += st.r;
    }
    let mut p = prior.transition.clone();
    let mut r = prior.reward.clone();
    for sa in 0..n * na {
        let total = visits[sa] + PRIOR_COUNT;
        for s2 in 0..n {
            let i = sa * n + s2;
            p[i] = (counts[i] + PRIOR_COUNT * p[i]) / total;
        }
        r[sa] = (rsum[sa] + PRIOR_COUNT * r[sa]) / total;
    }
    TabularTables::new(n, na, p, r)
}

/// Weighted average of tables, newest last, weight `v^{-age}`.
fn mixture(history: &[TabularTables], v: f64) -> Result<TabularTables> {
    let newest = history.last().expect("non-empty history");
    if history.len() == 1 || v.is_infinite() {
        return Ok(newest.clone());
    }
    let weights: Vec<f64> = (0..history.len()).map(|i| v.powi(-((history.len() - 1 - i) as i32))).collect();
    let total: f64 = weights.iter().sum();
    let mut p = vec![0.0; newest.transition.len()];
    let mut r = vec![0.0; newest.reward.len()];
    for (t, w) in history.iter().zip(&weights) {
        let w = w / total;
        p.iter_mut().zip(&t.transition).for_each(|(x, y)| *x += w * y);
        r.iter_mut().zip(&t.reward).for_each(|(x, y)| *x += w * y);
    }
    TabularTables::new(newest.n_states, newest.n_actions, p, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{ExpFamilyConfig, GridworldConfig, StaticConfig};
    use crate::mdp::exact_solution;
    use crate::policy::softmax;

    fn chain() -> EnvSpec {
        // Two states, two actions: action 1 moves to state 1 which pays.
        EnvSpec::Static(StaticConfig {
            n_states: 2,
            n_actions: 2,
            transition: vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0],
            reward: vec![0.0, 0.0, 0.0, 1.0],
            gamma: 0.9,
            rho: vec![1.0, 0.0],
        })
    }

    #[test]
    fn soft_vi_satisfies_soft_bellman() {
        let t = crate::mdp::tests::random_tables(4, 3, 3);
        let (q, v) = soft_value_iteration(&t, 0.9, 0.5, None).unwrap();
        for s in 0..4 {
            let lse = 0.5 * (0..3).map(|a| (q[s * 3 + a] / 0.5).exp()).sum::<f64>().ln();
            assert!((lse - v[s]).abs() < 1e-10);
        }
        // The soft-optimal policy's soft value equals V.
        let theta = logits(&q, 0.5, 4, 3).unwrap();
        let pol = softmax(&theta).unwrap();
        let soft = crate::mdp::soft_tables(&t, &pol, 0.5).unwrap();
        let sol = exact_solution(&soft, &pol, 0.9, &[0.25; 4]).unwrap();
        for s in 0..4 {
            assert!((sol.v[s] - v[s]).abs() < 1e-9);
        }
    }

    #[test]
    fn static_env_stabilizes_after_one_round() {
        let cfg = TrainConfig { algorithm: Algorithm::RpoFs, iterations: 5, trajectories: 4, ..TrainConfig::default() };
        let rec = run_repeated_retraining(&chain(), &cfg).unwrap();
        assert!(rec.rows[0].stability_l2 > 0.0);
        assert!(rec.rows[1..].iter().all(|r| r.stability_l2 <= 1e-12));
    }

    #[test]
    fn mdrr_reduces_to_retraining() {
        let env = EnvSpec::Expfam(ExpFamilyConfig::with_defaults(3, 2, 0.9, 1.0, 0.5));
        let base = TrainConfig { iterations: 15, trajectories: 4, seed: 9, ..TrainConfig::default() };
        let rr = run_repeated_retraining(&env, &TrainConfig { algorithm: Algorithm::RpoFs, ..base.clone() }).unwrap();
        let md = run_mdrr(&env, &TrainConfig { algorithm: Algorithm::Mdrr, delay: 1, window: 1, batch: 0, ..base }).unwrap();
        assert_eq!(rr.final_theta, md.final_theta);
        for (a, b) in rr.rows.iter().zip(&md.rows) {
            assert_eq!(a.exact_value, b.exact_value);
            assert_eq!(a.stability_l2, b.stability_l2);
        }
    }

    #[test]
    fn mdrr_is_static_between_retrains() {
        let env = EnvSpec::Expfam(ExpFamilyConfig::with_defaults(3, 2, 0.9, 1.0, 0.5));
        let cfg = TrainConfig { algorithm: Algorithm::Mdrr, iterations: 12, trajectories: 4, ..TrainConfig::default() };
        let rec = run_mdrr(&env, &cfg).unwrap();
        for r in &rec.rows {
            if (r.iteration + 1) % 3 != 0 {
                assert_eq!(r.stability_l2, 0.0);
            }
        }
        let again = run_mdrr(&env, &cfg).unwrap();
        assert_eq!(rec, again);
    }

    #[test]
    fn retraining_ends_at_soft_best_response() {
        let spec = EnvSpec::Expfam(ExpFamilyConfig::with_defaults(3, 2, 0.9, 1.0, 0.5));
        let cfg = TrainConfig { algorithm: Algorithm::RpoFs, iterations: 60, trajectories: 4, ..TrainConfig::default() };
        let rec = run_repeated_retraining(&spec, &cfg).unwrap();
        let env = spec.build().unwrap();
        let theta = PolicyParams::new(3, 2, rec.final_theta).unwrap();
        let pol = softmax(&theta).unwrap();
        let tables = env.induce(&theta).unwrap();
        let (q, _) = soft_value_iteration(&tables, 0.9, cfg.lambda_base, None).unwrap();
        let best = softmax(&logits(&q, cfg.lambda_base, 3, 2).unwrap()).unwrap();
        let gap = pol.probs.iter().zip(&best.probs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap <= 1e-6, "policy moves by {gap} under one more best response");
    }

    #[test]
    fn gridworld_init_prefers_shortest_path() {
        let spec = EnvSpec::Gridworld(GridworldConfig::default());
        let env = spec.build().unwrap();
        let theta = baseline_init(&spec, env.as_ref(), &TrainConfig::default()).unwrap();
        let pol = softmax(&theta).unwrap();
        // Start cell: path goes down or right, each gets 0.125 + 0.5.
        let row = pol.row(0);
        assert!((row.iter().cloned().fold(0.0, f64::max) - 0.625).abs() < 1e-12);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
