//! Performative policy gradient and its performativity-oblivious ablation.

use super::{derive_seed, Algorithm, Clock, RunRecord, RunRow, TrainConfig};
use crate::envs::{EnvSpec, PerformativeEnv};
use crate::error::{PepgError, Result};
use crate::gradients::{
    advantage_estimates, exact_gradient_fd, fit_value, horizon, l2_norm, pepg_gradient, sample_batch,
    theorem2_gradient, EstimatorOptions, GradProvider,
};
use crate::mdp::{exact_solution, OccupancyMeasure, StochasticPolicy, TabularTables};
use crate::policy::{softmax, PolicyParams};

const TAG_BATCH: u64 = 1;
pub(crate) const TAG_PERTURB: u64 = 2;

/// Environment for each iteration: fixed, or re-perturbed per iteration.
pub(crate) struct EnvSequence {
    spec: EnvSpec,
    seed: u64,
    resample: bool,
    fixed: Box<dyn PerformativeEnv>,
}

impl EnvSequence {
    pub fn new(spec: &EnvSpec, config: &TrainConfig) -> Result<Self> {
        let resample = config.resample_perturbation && matches!(spec, EnvSpec::Gridworld(_));
        Ok(EnvSequence { spec: spec.clone(), seed: config.seed, resample, fixed: spec.build()? })
    }

    pub fn base(&self) -> &dyn PerformativeEnv {
        self.fixed.as_ref()
    }

    pub fn at(&self, k: usize) -> Result<Box<dyn PerformativeEnv>> {
        if self.resample {
            let env = self.spec.build_gridworld(derive_seed(self.seed, TAG_PERTURB, k as u64))?.expect("gridworld");
            Ok(Box::new(env))
        } else {
            self.spec.build()
        }
    }

    /// Borrow for the fixed case, owned build for the resampling case.
    pub fn with<T>(&self, k: usize, f: impl FnOnce(&dyn PerformativeEnv) -> Result<T>) -> Result<T> {
        if self.resample {
            f(self.at(k)?.as_ref())
        } else {
            f(self.fixed.as_ref())
        }
    }
}

/// Deployed policy evaluated exactly in its own induced environment.
pub(crate) struct Deployed {
    pub theta: PolicyParams,
    pub policy: StochasticPolicy,
    pub tables: TabularTables,
    pub occupancy: OccupancyMeasure,
    pub value: f64,
}

impl Deployed {
    pub fn new(env: &dyn PerformativeEnv, theta: PolicyParams) -> Result<Self> {
        let policy = softmax(&theta)?;
        let tables = env.induce(&theta)?;
        let sol = exact_solution(&tables, &policy, env.gamma(), env.rho())?;
        Ok(Deployed { theta, policy, tables, occupancy: sol.occupancy, value: sol.value_rho })
    }
}

pub(crate) fn rollout_horizon(env: &dyn PerformativeEnv, config: &TrainConfig) -> usize {
    config.horizon.unwrap_or_else(|| horizon(env.gamma(), env.r_max().max(1e-12), config.eps_tail))
}

/// Mean discounted (unregularized) return of a batch.
pub(crate) fn mean_return(trajs: &[crate::gradients::Trajectory]) -> f64 {
    trajs.iter().map(|t| t.discounted_return()).sum::<f64>() / trajs.len() as f64
}

/// Algorithm 2 with a constant step size; `λ > 0` gives the regularized variant.
pub fn run_pepg(env: &EnvSpec, config: &TrainConfig) -> Result<RunRecord> {
    run_gradient_loop(env, config, config.provider)
}

/// Algorithm 1: the same loop with the environment gradient switched off.
pub fn run_vanilla_pg(env: &EnvSpec, config: &TrainConfig) -> Result<RunRecord> {
    run_gradient_loop(env, config, GradProvider::Zero)
}

fn run_gradient_loop(spec: &EnvSpec, config: &TrainConfig, provider: GradProvider) -> Result<RunRecord> {
    config.validate()?;
    let envs = EnvSequence::new(spec, config)?;
    let base = envs.base();
    let (n, na) = (base.n_states(), base.n_actions());
    let t_len = rollout_horizon(base, config);
    let algo = if config.algorithm == Algorithm::VanillaPg { Algorithm::VanillaPg } else { config.algorithm };
    let opts = EstimatorOptions { discount_weights: config.discount_weights, per_trajectory: false };
    let clock = Clock::start(config.timing);

    let mut record =
        RunRecord { algo: algo.to_string(), seed: config.seed, rows: Vec::new(), final_theta: Vec::new(), aborted: None };
    let mut cur = envs.with(0, |e| Deployed::new(e, PolicyParams::zeros(n, na)))?;
    let mut v_hat = vec![0.0; n];

    for k in 0..config.iterations {
        let step = envs.with(k, |env| {
            let trajs = sample_batch(
                &cur.tables,
                &cur.policy,
                env.rho(),
                env.gamma(),
                config.trajectories,
                t_len,
                derive_seed(config.seed, TAG_BATCH, k as u64),
            )?;
            let mc = mean_return(&trajs);
            let g = if config.exact_gradient {
                if provider == GradProvider::Zero {
                    theorem2_gradient(env, &cur.theta, config.lambda, GradProvider::Zero)?
                } else {
                    exact_gradient_fd(env, &cur.theta, config.lambda, 1e-5)?
                }
            } else {
                let adv = advantage_estimates(&trajs, &v_hat, &cur.policy, config.lambda);
                let est = pepg_gradient(env, &cur.theta, &cur.tables, &trajs, &adv, provider, config.lambda, opts)?;
                v_hat = fit_value(&trajs, &cur.policy, config.lambda, &v_hat);
                est.g
            };
            Ok((mc, g))
        });
        let (mc, g) = match step {
            Ok(x) => x,
            Err(e @ (PepgError::NonFinite(_) | PepgError::NoConvergence(_) | PepgError::Singular(_))) => {
                record.aborted = Some(format!("iteration {k}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        if g.iter().any(|x| !x.is_finite()) {
            record.aborted = Some(format!("iteration {k}: non-finite gradient"));
            break;
        }
        let next_theta = cur.theta.offset(&g, config.eta);
        let next = match envs.with(k + 1, |e| Deployed::new(e, next_theta)) {
            Ok(d) => d,
            Err(e) => {
                record.aborted = Some(format!("iteration {k}: {e}"));
                break;
            }
        };
        record.rows.push(RunRow {
            iteration: k,
            seed: config.seed,
            algo: record.algo.clone(),
            mc_return: mc,
            exact_value: cur.value,
            stability_l2: next.occupancy.l2_distance(&cur.occupancy),
            grad_norm: l2_norm(&g),
            wall_ms: clock.elapsed_ms(),
        });
        cur = next;
    }
    record.final_theta = cur.theta.theta;
    Ok(record)
}
