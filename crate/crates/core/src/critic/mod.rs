//! Off-policy batch estimation of the average reward `η` and the
//! differential-value weights `v` of a target policy.
//!
//! With `z_t = (1, f_t)` and importance weights `ρ_t = π(A_t|S_t)/μ(A_t|S_t)`,
//! the empirical estimating equations read `b̂ - Â (η, v) = 0` where
//!
//! ```text
//! Â = P_n[ Σ_t ρ_t z_t (1, f_t - f_{t+1})^T ]
//! b̂ = P_n[ Σ_t ρ_t z_t R_{t+1} ]
//! ```
//!
//! and `P_n` averages over individuals. The critic minimizes
//! `‖b̂ - Â(η, v)‖² + λ_c ‖v‖²`, i.e. solves
//! `(Â^T Â + λ_c Ĩ)(η, v) = Â^T b̂` with `Ĩ = diag(0, 1, ..., 1)`; the
//! average reward is never penalized. `λ_c` is chosen by k-fold cross
//! validation over individuals.
//!
//! Two solvers are provided. [`assemble_system`] + [`solve_penalized`] form
//! the `(p+1) x (p+1)` system explicitly. [`CriticEngine`] solves the same
//! problem in the row space of the data, whose size is bounded by the number
//! of transitions rather than the number of features; the actor uses it.

mod engine;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use engine::{fold_assignment, CriticEngine, SolveStats};

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::linalg::{check_finite, solve_spd};
use crate::policy::PolicyParams;
use crate::trajectory::Dataset;

/// Default cross-validation grid: 1e-6, 1e-5, ..., 1e2.
pub fn default_lambda_grid() -> Vec<f64> {
    (-6..=2).map(|e| 10f64.powi(e)).collect()
}

/// Residual tolerance of the penalized normal equations, relative to
/// `1 + ‖Â^T b̂‖`.
pub const RESIDUAL_TOLERANCE: f64 = 1e-8;

/// Which quantity is reported as the policy value `J(θ)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueEstimate {
    /// `J(θ) = η̂`.
    #[default]
    AverageReward,
    /// `J(θ) = P_n[Σ_t ρ_t (R_{t+1} + v̂^T f_{t+1} - v̂^T f_t)]`.
    EmpiricalSum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticOptions {
    pub lambda_grid: Vec<f64>,
    pub folds: usize,
    pub fold_seed: u64,
    pub value_estimate: ValueEstimate,
}

impl Default for CriticOptions {
    fn default() -> Self {
        CriticOptions {
            lambda_grid: default_lambda_grid(),
            folds: 2,
            fold_seed: 0,
            value_estimate: ValueEstimate::AverageReward,
        }
    }
}

/// Explicit critic system `(Â, b̂)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticSystem {
    pub a_hat: DMatrix<f64>,
    pub b_hat: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticFit {
    pub eta_hat: f64,
    pub v_hat: Vec<f64>,
    pub lambda_c: f64,
    /// `‖(Â^T Â + λ_c Ĩ)(η̂, v̂) - Â^T b̂‖`.
    pub residual_norm: f64,
    /// `‖Â^T b̂‖`.
    pub rhs_norm: f64,
    pub condition_estimate: f64,
    pub cv_table: Vec<(f64, f64)>,
    /// `P_n[Σ_t ρ_t (R_{t+1} - v̂^T (f_t - f_{t+1}))]`.
    pub empirical_value: f64,
}

impl CriticFit {
    pub fn relative_residual(&self) -> f64 {
        self.residual_norm / (1.0 + self.rhs_norm)
    }

    pub fn residual_ok(&self) -> bool {
        self.relative_residual() <= RESIDUAL_TOLERANCE
    }

    pub fn value(&self, which: ValueEstimate) -> f64 {
        match which {
            ValueEstimate::AverageReward => self.eta_hat,
            ValueEstimate::EmpiricalSum => self.empirical_value,
        }
    }

    /// JSON summary; `v̂` is included only on request since it may be long.
    pub fn to_json(&self, include_v: bool) -> Result<String> {
        let mut value = serde_json::to_value(self).map_err(|e| Error::Numerical(e.to_string()))?;
        if !include_v {
            if let Some(obj) = value.as_object_mut() {
                obj.remove("v_hat");
            }
        }
        serde_json::to_string_pretty(&value).map_err(|e| Error::Numerical(e.to_string()))
    }
}

/// Per-transition design: centered features now and next, rewards, and the
/// step each row came from.
pub(crate) struct Design {
    pub rows: Vec<(usize, usize)>,
    pub f_now: DMatrix<f64>,
    pub f_next: DMatrix<f64>,
    pub reward: DVector<f64>,
}

impl Design {
    pub fn new(d: &Dataset, fm: &FeatureMap) -> Result<Design> {
        if fm.state_dim() != d.state_dim {
            return Err(Error::DimensionMismatch {
                expected: d.state_dim,
                got: fm.state_dim(),
            });
        }
        let mut rows = Vec::new();
        let mut now = Vec::new();
        let mut next = Vec::new();
        let mut reward = Vec::new();
        for (i, tr) in d.trajectories.iter().enumerate() {
            for (t, step, s_next) in tr.transitions() {
                rows.push((i, t));
                now.push(step.state.as_slice());
                next.push(s_next);
                reward.push(step.reward);
            }
        }
        Ok(Design {
            rows,
            f_now: fm.evaluate_rows(now)?,
            f_next: fm.evaluate_rows(next)?,
            reward: DVector::from_vec(reward),
        })
    }

}

/// Importance weight `π(A_t|S_t) / μ(A_t|S_t)` of every transition row.
pub(crate) fn transition_weights(rows: &[(usize, usize)], d: &Dataset, policy: &PolicyParams) -> Result<DVector<f64>> {
    let mut probs = vec![0.0; policy.n_actions()];
    let mut phi = Vec::new();
    let mut w = DVector::zeros(rows.len());
    for (r, &(i, t)) in rows.iter().enumerate() {
        let step = &d.trajectories[i].steps[t];
        policy.feature_map.phi_into(&step.state, &mut phi);
        policy.probabilities_from_phi(&phi, step.available, &mut probs)?;
        w[r] = probs[step.action] / step.behavior_prob;
    }
    Ok(w)
}

/// Forms `Â` and `b̂` explicitly.
pub fn assemble_system(d: &Dataset, policy: &PolicyParams, fm: &FeatureMap) -> Result<CriticSystem> {
    let design = Design::new(d, fm)?;
    let rho = transition_weights(&design.rows, d, policy)?;
    let n = d.n_individuals() as f64;
    let (rows, p) = (design.f_now.nrows(), design.f_now.ncols());
    let mut zw = DMatrix::zeros(rows, p + 1);
    let mut delta = DMatrix::zeros(rows, p + 1);
    for r in 0..rows {
        zw[(r, 0)] = rho[r];
        delta[(r, 0)] = 1.0;
        for c in 0..p {
            zw[(r, c + 1)] = rho[r] * design.f_now[(r, c)];
            delta[(r, c + 1)] = design.f_now[(r, c)] - design.f_next[(r, c)];
        }
    }
    let zwt = zw.transpose();
    let a_hat = (&zwt * delta) / n;
    let b_hat = (&zwt * &design.reward) / n;
    check_finite(&a_hat, "critic matrix")?;
    Ok(CriticSystem { a_hat, b_hat })
}

/// Solves `(Â^T Â + λ_c Ĩ)(η, v) = Â^T b̂`.
pub fn solve_penalized(sys: &CriticSystem, lambda_c: f64) -> Result<CriticFit> {
    if !(lambda_c >= 0.0 && lambda_c.is_finite()) {
        return Err(Error::Config(format!("lambda_c = {lambda_c} must be finite and >= 0")));
    }
    let at = sys.a_hat.transpose();
    let mut m = &at * &sys.a_hat;
    for i in 1..m.nrows() {
        m[(i, i)] += lambda_c;
    }
    let rhs = &at * &sys.b_hat;
    let sol = solve_spd(&m, &rhs, lambda_c > 0.0).ok_or(Error::SingularSystem { lambda: lambda_c })?;
    let residual_norm = (&m * &sol.x - &rhs).norm();
    Ok(CriticFit {
        eta_hat: sol.x[0],
        v_hat: sol.x.iter().skip(1).copied().collect(),
        lambda_c,
        residual_norm,
        rhs_norm: rhs.norm(),
        condition_estimate: sol.condition,
        cv_table: Vec::new(),
        // the empirical-sum value is the first estimating equation evaluated at (0, v̂)
        empirical_value: sys.b_hat[0] - sys.a_hat.row(0).columns(1, sys.a_hat.ncols() - 1).dot(&sol.x.rows(1, sol.x.len() - 1).transpose()),
    })
}

/// Chooses `λ_c` from `grid` by `k`-fold cross validation over individuals.
pub fn cross_validate_lambda(
    d: &Dataset,
    policy: &PolicyParams,
    fm: &FeatureMap,
    grid: &[f64],
    k: usize,
    fold_seed: u64,
) -> Result<(f64, Vec<(f64, f64)>)> {
    let engine = CriticEngine::new(d, fm)?.with_folds(k, fold_seed)?;
    engine.cross_validate(policy, grid)
}

/// Full critic: cross-validated `λ_c`, then the penalized solve. The returned
/// `eta_hat` is `J(θ)`.
pub fn critic(policy: &PolicyParams, d: &Dataset, fm: &FeatureMap) -> Result<CriticFit> {
    critic_with(policy, d, fm, &CriticOptions::default())
}

pub fn critic_with(policy: &PolicyParams, d: &Dataset, fm: &FeatureMap, opts: &CriticOptions) -> Result<CriticFit> {
    let engine = CriticEngine::new(d, fm)?.with_folds(opts.folds, opts.fold_seed)?;
    engine.critic(policy, &opts.lambda_grid)
}
