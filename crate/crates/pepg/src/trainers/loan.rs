//! REINFORCE on the loan-approval toy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Clock, RunRecord, RunRow};
use crate::envs::{LoanConfig, LoanModel};
use crate::error::{PepgError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoanTrainConfig {
    pub loan: LoanConfig,
    pub steps: usize,
    pub eta: f64,
    pub theta0: f64,
    pub seed: u64,
    /// Add the score of the induced applicant distribution, `(x−μ)/σ² · dμ*/dθ`.
    pub performative: bool,
    /// Decay of the running-mean reward baseline.
    pub baseline_decay: f64,
    pub timing: bool,
}

impl Default for LoanTrainConfig {
    fn default() -> Self {
        LoanTrainConfig {
            loan: LoanConfig::default(),
            steps: 5000,
            eta: 0.05,
            theta0: 0.0,
            seed: 0,
            performative: true,
            baseline_decay: 0.99,
            timing: false,
        }
    }
}

/// Per-step trace plus terminal comparison against the two reference optima.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoanRun {
    pub theta: Vec<f64>,
    pub mu: Vec<f64>,
    pub reward: Vec<f64>,
    pub final_theta: f64,
    pub final_utility: f64,
    pub theta_erm: f64,
    pub theta_perf: f64,
    pub utility_erm: f64,
    pub utility_perf: f64,
    pub record: RunRecord,
}

/// One applicant: draw `x`, grant with `π_θ(x)`, realize the payoff.
fn applicant<R: Rng>(model: &LoanModel, theta: f64, mu: f64, rng: &mut R) -> (f64, bool, f64) {
    let x = mu + model.config.sigma * Normal::new(0.0, 1.0).expect("unit normal").sample(rng);
    let grant = rng.random::<f64>() < model.grant_prob(theta, x);
    let repay = rng.random::<f64>() < model.repay_prob(x);
    let r = match (grant, repay) {
        (false, _) => 0.0,
        (true, true) => model.config.reward,
        (true, false) => -model.config.loss,
    };
    (x, grant, r)
}

/// Sample-based learning loop; `exact_value` holds `U(θ_t, μ*(θ_t))` and
/// `stability_l2` holds `|μ_{t+1} − μ_t|`.
pub fn run_loan_protocol(config: &LoanTrainConfig) -> Result<LoanRun> {
    if config.steps == 0 {
        return Err(PepgError::config("steps", "must be at least 1"));
    }
    if !(config.eta >= 0.0 && config.eta.is_finite()) {
        return Err(PepgError::config("eta", "must be finite and non-negative"));
    }
    let model = LoanModel::new(config.loan.clone())?;
    let k = model.config.k;
    let sigma2 = model.config.sigma.powi(2);
    let algo = if config.performative { "loan-pepg" } else { "loan-pg" };
    let clock = Clock::start(config.timing);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut theta, mut mu, mut baseline) = (config.theta0, model.config.mu0, 0.0);
    let mut run = LoanRun {
        theta: Vec::with_capacity(config.steps),
        mu: Vec::with_capacity(config.steps),
        reward: Vec::with_capacity(config.steps),
        final_theta: 0.0,
        final_utility: 0.0,
        theta_erm: model.theta_erm(),
        theta_perf: model.theta_perf()?,
        utility_erm: 0.0,
        utility_perf: 0.0,
        record: RunRecord { algo: algo.into(), seed: config.seed, rows: Vec::new(), final_theta: Vec::new(), aborted: None },
    };
    for t in 0..config.steps {
        let (x, grant, r) = applicant(&model, theta, mu, &mut rng);
        let p = model.grant_prob(theta, x);
        let mut score = if grant { -k * (1.0 - p) } else { k * p };
        if config.performative {
            score += (x - mu) / sigma2 * model.equilibrium_derivative(theta, mu);
        }
        let g = (r - baseline) * score;
        baseline = config.baseline_decay * baseline + (1.0 - config.baseline_decay) * r;
        if !g.is_finite() {
            run.record.aborted = Some(format!("step {t}: non-finite gradient"));
            break;
        }
        let next_mu = model.step_mean(theta, mu);
        run.record.rows.push(RunRow {
            iteration: t,
            seed: config.seed,
            algo: algo.into(),
            mc_return: r,
            exact_value: model.equilibrium_utility(theta)?,
            stability_l2: (next_mu - mu).abs(),
            grad_norm: g.abs(),
            wall_ms: clock.elapsed_ms(),
        });
        run.theta.push(theta);
        run.mu.push(mu);
        run.reward.push(r);
        theta += config.eta * g;
        mu = next_mu;
    }
    run.final_theta = theta;
    run.final_utility = model.equilibrium_utility(theta)?;
    run.utility_erm = model.equilibrium_utility(run.theta_erm)?;
    run.utility_perf = model.equilibrium_utility(run.theta_perf)?;
    run.record.final_theta = vec![theta];
    Ok(run)
}

/// Mean realized payoff of a fixed threshold deployed for `steps` rounds after
/// `burn_in` rounds of population dynamics. Equal seeds give common random numbers.
pub fn deploy_fixed(model: &LoanModel, theta: f64, steps: usize, burn_in: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mu = model.config.mu0;
    let mut total = 0.0;
    for t in 0..burn_in + steps {
        let (_, _, r) = applicant(model, theta, mu, &mut rng);
        if t >= burn_in {
            total += r;
        }
        mu = model.step_mean(theta, mu);
    }
    total / steps as f64
}
