//! Generative environments, behavior-policy data generation, rollout
//! evaluation and reference policies.
//!
//! [`SimConfig`] is the burden model: a `p1`-dimensional state whose third
//! component accumulates treatment burden and lowers the reward by
//! `τ S_3`. [`TwoStateMdp`] is a tiny chain with closed-form answers used
//! for testing.

mod experiment;
mod oracle;
mod twostate;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{constant_policy as fixed_treatment, PolicyFeatureMap, PolicyParams};
use crate::rng::substream;
use crate::trajectory::{Dataset, Step, Trajectory};

pub use experiment::{
    monte_carlo_experiment, ExperimentConfig, PolicyKind, ResultRow, ResultsTable, Scale, Scenario, SummaryRow,
};
pub use oracle::{oracle_policy, OracleOptions, OracleResult};
pub use twostate::TwoStateMdp;

/// A simulator with binary actions.
pub trait Environment: Sync {
    fn state_dim(&self) -> usize;

    fn state_names(&self) -> Vec<String> {
        Dataset::default_state_names(self.state_dim())
    }

    fn initial_state(&self, rng: &mut dyn rand::RngCore) -> Vec<f64>;

    /// Samples `(next_state, reward)` after taking `action` in `state`.
    fn step(&self, state: &[f64], action: usize, rng: &mut dyn rand::RngCore) -> (Vec<f64>, f64);

    /// `E[reward | state, action]`.
    fn mean_reward(&self, state: &[f64], action: usize) -> f64;

    /// Probability that the behavior policy takes action 1.
    fn behavior_probability(&self) -> f64;
}

/// How the treatment effect enters the reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardForm {
    /// `10 + 0.25 S_1 A (0.04 + 0.02 S_1 + 0.02 S_2) - τ S_3 + noise`
    #[default]
    Product,
    /// `10 + 0.25 S_1 + A (0.04 + 0.02 S_1 + 0.02 S_2) - τ S_3 + noise`
    Additive,
}

/// The burden model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// State dimension; components 4 and up are noise.
    pub p1: usize,
    /// Reward lost per unit of burden.
    pub tau: f64,
    /// Behavior probability of treating.
    pub mu1: f64,
    pub reward_form: RewardForm,
    /// Multiplier on the treatment term of the reward (1 in the model; 0
    /// gives a treatment-free variant).
    pub treatment_scale: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            p1: 3,
            tau: 0.4,
            mu1: 0.6,
            reward_form: RewardForm::Product,
            treatment_scale: 1.0,
            noise_sd: 0.16,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p1 < 3 {
            return Err(Error::Config(format!("state dimension p1 = {} violates p1 >= 3", self.p1)));
        }
        if !(self.mu1 > 0.0 && self.mu1 < 1.0) {
            return Err(Error::Config(format!("behavior probability mu1 = {} must lie in (0, 1)", self.mu1)));
        }
        if !self.tau.is_finite() || !self.treatment_scale.is_finite() || !(self.noise_sd >= 0.0) {
            return Err(Error::Config("tau, treatment_scale and noise_sd must be finite (noise_sd >= 0)".into()));
        }
        Ok(())
    }

    fn treatment_effect(&self, s: &[f64]) -> f64 {
        let inner = 0.04 + 0.02 * s[0] + 0.02 * s[1];
        match self.reward_form {
            RewardForm::Product => 0.25 * s[0] * inner,
            RewardForm::Additive => inner,
        }
    }

    fn base_reward(&self, s: &[f64]) -> f64 {
        match self.reward_form {
            RewardForm::Product => 10.0 - self.tau * s[2],
            RewardForm::Additive => 10.0 + 0.25 * s[0] - self.tau * s[2],
        }
    }
}

fn normal(rng: &mut dyn rand::RngCore) -> f64 {
    StandardNormal.sample(rng)
}

impl Environment for SimConfig {
    fn state_dim(&self) -> usize {
        self.p1
    }

    /// `Normal(0, AR(0.5))`, generated as a stationary AR(1) sequence across
    /// coordinates.
    fn initial_state(&self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        let innov = (1.0f64 - 0.25).sqrt();
        let mut s = Vec::with_capacity(self.p1);
        let mut prev = normal(rng);
        s.push(prev);
        for _ in 1..self.p1 {
            prev = 0.5 * prev + innov * normal(rng);
            s.push(prev);
        }
        s
    }

    fn step(&self, s: &[f64], action: usize, rng: &mut dyn rand::RngCore) -> (Vec<f64>, f64) {
        let xi: Vec<f64> = (0..=self.p1).map(|_| normal(rng)).collect();
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        let a = action as f64;
        let reward = self.mean_reward(s, action) + self.noise_sd * xi[self.p1];
        let mut next = Vec::with_capacity(self.p1);
        next.push(0.5 * s[0] + 2.0 * xi[0]);
        next.push(0.25 * s[1] + 0.125 * a + 2.0 * xi[1]);
        next.push(if action == 1 { 0.9 * s[2] + 0.1 * s[2] * u1 + u2 } else { 0.9 * s[2] });
        for j in 3..self.p1 {
            next.push(0.25 * s[j] + xi[j]);
        }
        (next, reward)
    }

    fn mean_reward(&self, s: &[f64], action: usize) -> f64 {
        let base = self.base_reward(s);
        if action == 1 {
            base + self.treatment_scale * self.treatment_effect(s)
        } else {
            base
        }
    }

    fn behavior_probability(&self) -> f64 {
        self.mu1
    }
}

/// Draws `S_0` of the burden model.
pub fn initial_state(cfg: &SimConfig, rng: &mut dyn rand::RngCore) -> Vec<f64> {
    cfg.initial_state(rng)
}

/// One transition of the burden model.
pub fn step(cfg: &SimConfig, state: &[f64], action: usize, rng: &mut dyn rand::RngCore) -> (Vec<f64>, f64) {
    cfg.step(state, action, rng)
}

/// `n` trajectories of `T + 1` decision points under the behavior policy,
/// each with its terminal state.
pub fn generate_dataset<E: Environment + ?Sized>(env: &E, n: usize, horizon: usize, rng: &mut dyn rand::RngCore) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    let mu1 = env.behavior_probability();
    let trajectories = (0..n)
        .map(|i| {
            let mut s = env.initial_state(rng);
            let mut steps = Vec::with_capacity(horizon + 1);
            for _ in 0..=horizon {
                let u: f64 = rng.random();
                let action = usize::from(u < mu1);
                let (next, reward) = env.step(&s, action, rng);
                steps.push(Step {
                    state: std::mem::replace(&mut s, next),
                    available: true,
                    action,
                    reward,
                    behavior_prob: if action == 1 { mu1 } else { 1.0 - mu1 },
                });
            }
            Trajectory {
                id: format!("{}", i + 1),
                steps,
                terminal_state: Some(s),
            }
        })
        .collect();
    Dataset::new(trajectories, 2, env.state_names())
}

/// Length and burn-in of an evaluation rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutSpec {
    pub horizon: usize,
    pub burn_in: usize,
    pub seed: u64,
}

impl Default for RolloutSpec {
    fn default() -> Self {
        RolloutSpec {
            horizon: 10_000,
            burn_in: 1_000,
            seed: 0,
        }
    }
}

impl RolloutSpec {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.horizon {
            return Err(Error::Config(format!(
                "burn_in ({}) must be smaller than horizon ({})",
                self.burn_in, self.horizon
            )));
        }
        Ok(())
    }
}

/// Average reward with a batch-means standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutEstimate {
    pub eta: f64,
    pub std_error: f64,
}

const BATCHES: usize = 30;

/// Simulates one trajectory under `policy` and averages the rewards after
/// the burn-in.
pub fn evaluate_average_reward<E: Environment + ?Sized>(env: &E, policy: &PolicyParams, spec: &RolloutSpec) -> Result<f64> {
    Ok(evaluate_with_error(env, policy, spec)?.eta)
}

pub fn evaluate_with_error<E: Environment + ?Sized>(env: &E, policy: &PolicyParams, spec: &RolloutSpec) -> Result<RolloutEstimate> {
    spec.validate()?;
    let mut rng = substream(spec.seed, 0);
    let mut s = env.initial_state(&mut rng);
    let kept = spec.horizon - spec.burn_in;
    let mut rewards = Vec::with_capacity(kept);
    for t in 0..spec.horizon {
        let a = policy.sample_action(&s, true, &mut rng)?;
        let (next, r) = env.step(&s, a, &mut rng);
        if t >= spec.burn_in {
            rewards.push(r);
        }
        s = next;
    }
    let eta = rewards.iter().sum::<f64>() / kept as f64;
    let b = BATCHES.min(kept);
    let size = kept / b;
    let means: Vec<f64> = (0..b)
        .map(|k| rewards[k * size..(k + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let m = means.iter().sum::<f64>() / b as f64;
    let var = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (b.max(2) - 1) as f64;
    Ok(RolloutEstimate {
        eta,
        std_error: (var / b as f64).sqrt(),
    })
}

/// Always treat.
pub fn constant_policy(pf: &PolicyFeatureMap) -> PolicyParams {
    fixed_treatment(pf.clone())
}

/// Policy map over the first `q` state components plus an intercept.
pub fn leading_columns(q: usize) -> PolicyFeatureMap {
    PolicyFeatureMap::new(true, (0..q).collect())
}
