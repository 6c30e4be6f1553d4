//! The actor: penalized maximization of the critic's value estimate, and the
//! outer loop that raises the penalty until the learned policy is
//! sufficiently stochastic.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::critic::{CriticEngine, CriticFit, CriticOptions};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::optim::{bfgs_maximize, OptimOptions, OptimResult};
use crate::policy::{stochasticity_fraction, PolicyFeatureMap, PolicyParams};
use crate::trajectory::Dataset;

/// How the penalty increment `Δ` is derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum DeltaRule {
    /// A fixed increment.
    Fixed(f64),
    /// `factor * (|J(0)| + 1)`.
    ValueScale(f64),
    /// `factor * (|J(0)| + 1) / trace(Σ)`, which makes `λ_a θ^T Σ θ` and
    /// `J` comparable whatever the size of the penalty matrix.
    NormalizedValueScale(f64),
}

impl Default for DeltaRule {
    fn default() -> Self {
        DeltaRule::NormalizedValueScale(0.1)
    }
}

/// When the critic penalty `λ_c` is cross-validated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSelection {
    /// Once per penalty round at the round's starting policy, then frozen
    /// for the whole BFGS run.
    #[default]
    PerRound,
    /// At every objective evaluation.
    EveryCall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActorConfig {
    /// Minimum action probability.
    pub p0: f64,
    /// Allowed fraction of decision points outside `[p0, 1 - p0]`.
    pub alpha: f64,
    pub lambda_a_min: f64,
    pub delta: DeltaRule,
    pub optim: OptimOptions,
    pub max_penalty_rounds: usize,
    pub critic: CriticOptions,
    pub lambda_selection: LambdaSelection,
    /// Starting policy parameters; zeros when absent.
    pub theta_init: Option<Vec<f64>>,
}

impl Default for ActorConfig {
    fn default() -> Self {
        ActorConfig {
            p0: 0.05,
            alpha: 0.05,
            lambda_a_min: 0.0,
            delta: DeltaRule::default(),
            optim: OptimOptions::default(),
            max_penalty_rounds: 100,
            critic: CriticOptions::default(),
            lambda_selection: LambdaSelection::default(),
            theta_init: None,
        }
    }
}

impl ActorConfig {
    pub fn validate(&self, n_actions: usize) -> Result<()> {
        if !(self.p0 > 0.0 && self.p0 < 1.0 / n_actions as f64) {
            return Err(Error::Config(format!("p0 = {} must lie in (0, 1/K) with K = {n_actions}", self.p0)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha = {} must lie in (0, 1)", self.alpha)));
        }
        if !(self.lambda_a_min >= 0.0 && self.lambda_a_min.is_finite()) {
            return Err(Error::Config("lambda_a_min must be finite and >= 0".into()));
        }
        let d = match self.delta {
            DeltaRule::Fixed(x) | DeltaRule::ValueScale(x) | DeltaRule::NormalizedValueScale(x) => x,
        };
        if !(d > 0.0 && d.is_finite()) {
            return Err(Error::Config(format!("penalty increment must be positive, got {d}")));
        }
        if self.max_penalty_rounds == 0 {
            return Err(Error::Config("max_penalty_rounds must be at least 1".into()));
        }
        self.optim.validate()
    }
}

/// Penalty matrix of the actor, `P_n Σ_t φ(S_t) φ(S_t)^T` (block diagonal
/// over the non-reference actions when there are more than two).
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaMatrix {
    pub sigma: DMatrix<f64>,
}

impl SigmaMatrix {
    pub fn quadratic(&self, theta: &[f64]) -> f64 {
        let t = DVector::from_column_slice(theta);
        t.dot(&(&self.sigma * &t))
    }
}

pub fn compute_sigma(d: &Dataset, pf: &PolicyFeatureMap) -> SigmaMatrix {
    let q = pf.state_features();
    let mut s = DMatrix::zeros(q, q);
    let mut phi = Vec::with_capacity(q);
    for step in d.steps() {
        pf.phi_into(&step.state, &mut phi);
        for i in 0..q {
            for j in 0..q {
                s[(i, j)] += phi[i] * phi[j];
            }
        }
    }
    s /= d.n_individuals().max(1) as f64;
    let blocks = pf.n_actions.saturating_sub(1).max(1);
    let mut sigma = DMatrix::zeros(q * blocks, q * blocks);
    for b in 0..blocks {
        sigma.view_mut((b * q, b * q), (q, q)).copy_from(&s);
    }
    SigmaMatrix { sigma }
}

/// `J(θ) - λ_a θ^T Σ θ`.
pub fn penalized_objective<F>(theta: &[f64], lambda_a: f64, sigma: &SigmaMatrix, critic_fn: F) -> Result<f64>
where
    F: FnOnce(&[f64]) -> Result<f64>,
{
    let j = critic_fn(theta)?;
    if lambda_a == 0.0 {
        return Ok(j);
    }
    Ok(j - lambda_a * sigma.quadratic(theta))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorStep {
    pub policy: PolicyParams,
    /// Penalized objective at the returned parameters.
    pub objective: f64,
    /// `J` at the returned parameters.
    pub value: f64,
    pub lambda_c: f64,
    pub optim: OptimResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub lambda_a: f64,
    pub lambda_c: f64,
    pub objective: f64,
    pub value: f64,
    pub fraction: f64,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorCriticResult {
    pub policy: PolicyParams,
    pub trace: Vec<RoundRecord>,
    pub delta: f64,
    pub sigma: SigmaMatrix,
    /// Critic fit (cross-validated `λ_c`) at the returned policy.
    pub fit: CriticFit,
    /// Largest relative normal-equation residual over every critic solve.
    pub max_relative_residual: f64,
    pub critic_solves: usize,
}

/// Actor bound to one dataset: the critic factorizations and `Σ` are built
/// once and shared by every penalty round.
pub struct Actor {
    engine: CriticEngine,
    pf: PolicyFeatureMap,
    sigma: SigmaMatrix,
    cfg: ActorConfig,
    gated: bool,
}

impl Actor {
    pub fn new(d: &Dataset, fm: &FeatureMap, pf: &PolicyFeatureMap, cfg: &ActorConfig) -> Result<Actor> {
        if pf.n_actions != d.n_actions {
            return Err(Error::Config(format!(
                "policy has {} actions but the dataset has {}",
                pf.n_actions, d.n_actions
            )));
        }
        cfg.validate(d.n_actions)?;
        let engine = CriticEngine::new(d, fm)?.with_folds(cfg.critic.folds, cfg.critic.fold_seed)?;
        Ok(Actor {
            engine,
            pf: pf.clone(),
            sigma: compute_sigma(d, pf),
            cfg: cfg.clone(),
            gated: d.has_gating(),
        })
    }

    pub fn with_sigma(mut self, sigma: SigmaMatrix) -> Result<Actor> {
        let q = self.pf.n_params();
        if sigma.sigma.nrows() != q || sigma.sigma.ncols() != q {
            return Err(Error::DimensionMismatch {
                expected: q,
                got: sigma.sigma.nrows(),
            });
        }
        self.sigma = sigma;
        Ok(self)
    }

    pub fn sigma(&self) -> &SigmaMatrix {
        &self.sigma
    }

    pub fn engine(&self) -> &CriticEngine {
        &self.engine
    }

    pub fn policy(&self, theta: &[f64]) -> Result<PolicyParams> {
        Ok(PolicyParams::new(theta.to_vec(), self.pf.clone())?.gated(self.gated))
    }

    /// `J(θ)` with `λ_c` fixed, or cross-validated when `lambda_c` is `None`.
    pub fn value(&self, theta: &[f64], lambda_c: Option<f64>) -> Result<CriticFit> {
        let p = self.policy(theta)?;
        match lambda_c {
            Some(l) => self.engine.fit(&p, l),
            None => self.engine.critic(&p, &self.cfg.critic.lambda_grid),
        }
    }

    fn select_lambda(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.engine.cross_validate(&self.policy(theta)?, &self.cfg.critic.lambda_grid)?.0)
    }

    /// Penalty increment implied by the configured rule.
    pub fn delta(&self) -> Result<f64> {
        let j_scale = || -> Result<f64> {
            let theta0 = vec![0.0; self.pf.n_params()];
            Ok(self.value(&theta0, None)?.value(self.cfg.critic.value_estimate).abs() + 1.0)
        };
        let delta = match self.cfg.delta {
            DeltaRule::Fixed(x) => x,
            DeltaRule::ValueScale(f) => f * j_scale()?,
            DeltaRule::NormalizedValueScale(f) => {
                let tr = self.sigma.sigma.trace();
                if !(tr > 0.0) {
                    return Err(Error::Numerical("penalty matrix has zero trace".into()));
                }
                f * j_scale()? / tr
            }
        };
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::Numerical(format!("penalty increment {delta} is not positive")));
        }
        Ok(delta)
    }

    /// Maximizes `J(θ) - λ_a θ^T Σ θ` from `start`. `seed` drives the
    /// random restarts.
    pub fn step(&self, lambda_a: f64, start: &[f64], seed: u64) -> Result<ActorStep> {
        let lambda_c = match self.cfg.lambda_selection {
            LambdaSelection::PerRound => Some(self.select_lambda(start)?),
            LambdaSelection::EveryCall => None,
        };
        let which = self.cfg.critic.value_estimate;
        let objective = |theta: &[f64]| -> f64 {
            penalized_objective(theta, lambda_a, &self.sigma, |t| Ok(self.value(t, lambda_c)?.value(which)))
                .unwrap_or(f64::NAN)
        };
        let opts = OptimOptions {
            seed,
            ..self.cfg.optim.clone()
        };
        let optim = bfgs_maximize(&objective, start, &opts)?;
        let fit = self.value(&optim.x, lambda_c)?;
        Ok(ActorStep {
            policy: self.policy(&optim.x)?,
            objective: optim.value,
            value: fit.value(which),
            lambda_c: fit.lambda_c,
            optim,
        })
    }

    /// The full penalty loop.
    pub fn run(&self) -> Result<ActorCriticResult> {
        let d = self.engine.dataset();
        let delta = self.delta()?;
        let mut theta = match &self.cfg.theta_init {
            Some(t) if t.len() == self.pf.n_params() => t.clone(),
            Some(t) => {
                return Err(Error::DimensionMismatch {
                    expected: self.pf.n_params(),
                    got: t.len(),
                })
            }
            None => vec![0.0; self.pf.n_params()],
        };
        let mut trace: Vec<RoundRecord> = Vec::new();
        let target = 1.0 - self.cfg.alpha;
        for round in 0..self.cfg.max_penalty_rounds {
            let lambda_a = self.cfg.lambda_a_min + round as f64 * delta;
            let step = self.step(lambda_a, &theta, self.cfg.optim.seed.wrapping_add(round as u64))?;
            let fraction = stochasticity_fraction(&step.policy, d, self.cfg.p0)?;
            theta = step.policy.theta.clone();
            trace.push(RoundRecord {
                round,
                lambda_a,
                lambda_c: step.lambda_c,
                objective: step.objective,
                value: step.value,
                fraction,
                theta: theta.clone(),
            });
            if fraction >= target {
                let fit = self.value(&theta, None)?;
                return Ok(ActorCriticResult {
                    policy: step.policy,
                    trace,
                    delta,
                    sigma: self.sigma.clone(),
                    fit,
                    max_relative_residual: self.engine.stats().max_relative_residual(),
                    critic_solves: self.engine.stats().solves(),
                });
            }
        }
        Err(Error::PenaltyRoundsExceeded {
            rounds: self.cfg.max_penalty_rounds,
            trace: trace.iter().map(|r| (r.lambda_a, r.value, r.fraction)).collect(),
        })
    }
}

/// One actor step on `d` at penalty `λ_a`, starting from `θ = 0`.
pub fn actor_step(
    d: &Dataset,
    fm: &FeatureMap,
    pf: &PolicyFeatureMap,
    lambda_a: f64,
    sigma: &SigmaMatrix,
    cfg: &ActorConfig,
) -> Result<ActorStep> {
    let actor = Actor::new(d, fm, pf, cfg)?.with_sigma(sigma.clone())?;
    let start = cfg.theta_init.clone().unwrap_or_else(|| vec![0.0; pf.n_params()]);
    actor.step(lambda_a, &start, cfg.optim.seed)
}

/// Batch off-policy actor-critic: returns the learned policy and the
/// per-round trace.
pub fn run_actor_critic(d: &Dataset, fm: &FeatureMap, pf: &PolicyFeatureMap, cfg: &ActorConfig) -> Result<ActorCriticResult> {
    Actor::new(d, fm, pf, cfg)?.run()
}

/// Writes the trace as CSV with columns `round, lambda_a, lambda_c,
/// objective, J, fraction`.
pub fn write_trace_csv<W: Write>(trace: &[RoundRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Error::Numerical(format!("writing trace: {e}"));
    out.write_record(["round", "lambda_a", "lambda_c", "objective", "J", "fraction"]).map_err(io)?;
    for r in trace {
        out.write_record([
            r.round.to_string(),
            r.lambda_a.to_string(),
            r.lambda_c.to_string(),
            r.objective.to_string(),
            r.value.to_string(),
            r.fraction.to_string(),
        ])
        .map_err(io)?;
    }
    out.flush().map_err(|e| Error::Numerical(format!("writing trace: {e}")))?;
    Ok(())
}
