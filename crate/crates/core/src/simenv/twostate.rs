use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Environment;

/// Two-state chain. The next state is 1 with probability `p_treated` after
/// action 1 and `p_untreated` after action 0; the reward is the current
/// state plus `bonus` when action 1 is taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStateMdp {
    pub p_treated: f64,
    pub p_untreated: f64,
    pub bonus: f64,
    /// Behavior probability of action 1.
    pub mu1: f64,
}

impl Default for TwoStateMdp {
    fn default() -> Self {
        TwoStateMdp {
            p_treated: 0.8,
            p_untreated: 0.2,
            bonus: 0.0,
            mu1: 0.5,
        }
    }
}

impl TwoStateMdp {
    /// Exact average reward of the policy treating with probability `pi1[s]`
    /// in state `s`.
    pub fn exact_average_reward(&self, pi1: [f64; 2]) -> f64 {
        let up = |s: usize| pi1[s] * self.p_treated + (1.0 - pi1[s]) * self.p_untreated;
        // stationary law of the induced chain: P(1) = up(0) / (1 - up(1) + up(0))
        let one = up(0) / (1.0 - up(1) + up(0));
        let dist = [1.0 - one, one];
        (0..2).map(|s| dist[s] * (s as f64 + self.bonus * pi1[s])).sum()
    }
}

impl Environment for TwoStateMdp {
    fn state_dim(&self) -> usize {
        1
    }

    fn initial_state(&self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        vec![if rng.random::<bool>() { 1.0 } else { 0.0 }]
    }

    fn step(&self, state: &[f64], action: usize, rng: &mut dyn rand::RngCore) -> (Vec<f64>, f64) {
        let up = if action == 1 { self.p_treated } else { self.p_untreated };
        let u: f64 = rng.random();
        (vec![if u < up { 1.0 } else { 0.0 }], self.mean_reward(state, action))
    }

    fn mean_reward(&self, state: &[f64], action: usize) -> f64 {
        state[0] + if action == 1 { self.bonus } else { 0.0 }
    }

    fn behavior_probability(&self) -> f64 {
        self.mu1
    }
}
