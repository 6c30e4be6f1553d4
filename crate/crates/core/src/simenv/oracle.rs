//! Reference policy computed with full access to the simulator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{generate_dataset, Environment};
use crate::actor::ActorConfig;
use crate::error::{Error, Result};
use crate::optim::{bfgs_maximize, OptimOptions};
use crate::policy::{stochasticity_fraction, PolicyFeatureMap, PolicyParams};
use crate::rng::substream;
use crate::trajectory::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleOptions {
    /// Rollout length and burn-in of the common-random-number objective.
    pub horizon: usize,
    pub burn_in: usize,
    /// Individuals and horizon of the behavior-policy sample on which the
    /// stochasticity constraint is checked.
    pub constraint_individuals: usize,
    pub constraint_horizon: usize,
    /// Penalty per unit of constraint violation; `None` uses 100 times the
    /// mean absolute reward of the behavior sample.
    pub penalty: Option<f64>,
    /// Optimizer settings; the finite-difference step is larger than the
    /// actor's because the rollout objective is only piecewise smooth.
    pub optim: OptimOptions,
    pub seed: u64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            horizon: 10_000,
            burn_in: 1_000,
            constraint_individuals: 200,
            constraint_horizon: 25,
            penalty: None,
            optim: OptimOptions {
                gradient_step: 2e-2,
                n_restarts: 4,
                ..OptimOptions::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub policy: PolicyParams,
    /// Penalized objective at the optimum.
    pub objective: f64,
    /// Common-random-number average reward at the optimum.
    pub eta: f64,
    /// Stochasticity fraction on the behavior sample.
    pub fraction: f64,
}

/// Average of expected rewards along one rollout driven by a fixed random
/// stream, so nearby parameters see the same noise.
fn crn_average_reward<E: Environment + ?Sized>(env: &E, policy: &PolicyParams, opts: &OracleOptions) -> Result<f64> {
    let mut rng = substream(opts.seed, 1);
    let mut s = env.initial_state(&mut rng);
    let mut total = 0.0;
    for t in 0..opts.horizon {
        let p1 = policy.action_probability(&s, true, 1)?;
        if t >= opts.burn_in {
            total += (1.0 - p1) * env.mean_reward(&s, 0) + p1 * env.mean_reward(&s, 1);
        }
        let u: f64 = rng.random();
        let a = usize::from(u < p1);
        s = env.step(&s, a, &mut rng).0;
    }
    Ok(total / (opts.horizon - opts.burn_in) as f64)
}

/// Maximizes the simulated average reward minus an exact penalty on the
/// stochasticity constraint, the latter measured on fresh behavior-policy
/// trajectories.
pub fn oracle_policy<E: Environment + ?Sized>(
    env: &E,
    pf: &PolicyFeatureMap,
    cfg: &ActorConfig,
    opts: &OracleOptions,
) -> Result<OracleResult> {
    if pf.n_actions != 2 {
        return Err(Error::Unsupported("the oracle handles binary actions only".into()));
    }
    if opts.burn_in >= opts.horizon {
        return Err(Error::Config("oracle burn_in must be smaller than horizon".into()));
    }
    cfg.validate(2)?;
    let sample: Dataset = generate_dataset(
        env,
        opts.constraint_individuals,
        opts.constraint_horizon,
        &mut substream(opts.seed, 2),
    )?;
    let penalty = match opts.penalty {
        Some(c) => c,
        None => {
            let steps: Vec<f64> = sample.steps().map(|s| s.reward.abs()).collect();
            100.0 * steps.iter().sum::<f64>() / steps.len() as f64
        }
    };
    let target = 1.0 - cfg.alpha;
    let evaluate = |theta: &[f64]| -> Result<(f64, f64, f64)> {
        let policy = PolicyParams::new(theta.to_vec(), pf.clone())?;
        let eta = crn_average_reward(env, &policy, opts)?;
        let fraction = stochasticity_fraction(&policy, &sample, cfg.p0)?;
        Ok((eta - penalty * (target - fraction).max(0.0), eta, fraction))
    };
    let objective = |theta: &[f64]| evaluate(theta).map(|v| v.0).unwrap_or(f64::NAN);

    let q = pf.n_params();
    let mut starts = vec![vec![0.0; q]];
    if pf.intercept {
        // just inside the constraint at both ends
        for p in [cfg.p0 * 1.2, 1.0 - cfg.p0 * 1.2] {
            let mut t = vec![0.0; q];
            t[0] = (p / (1.0 - p)).ln();
            starts.push(t);
        }
    }
    if let Some(t) = &cfg.theta_init {
        starts.push(t.clone());
    }
    let mut best: Option<(Vec<f64>, f64)> = None;
    for (k, start) in starts.iter().enumerate() {
        let o = OptimOptions {
            seed: opts.optim.seed.wrapping_add(k as u64),
            n_restarts: if k == 0 { opts.optim.n_restarts } else { 1 },
            ..opts.optim.clone()
        };
        let r = bfgs_maximize(&objective, start, &o)?;
        if best.as_ref().is_none_or(|b| r.value > b.1) {
            best = Some((r.x, r.value));
        }
    }
    let (theta, objective) = best.expect("at least one start");
    let (_, eta, fraction) = evaluate(&theta)?;
    Ok(OracleResult {
        policy: PolicyParams::new(theta, pf.clone())?,
        objective,
        eta,
        fraction,
    })
}
