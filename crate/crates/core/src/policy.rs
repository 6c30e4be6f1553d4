//! Parameterized stochastic policies.
//!
//! A policy scores each non-reference action with a linear logit
//! `θ_a^T φ(s)`; action 0 (no treatment) is the reference with logit 0, so
//! the binary case is the logistic policy `π_θ(1|s) = σ(θ^T φ(s))` with
//! `σ(u) = 1 / (1 + e^{-u})`. With this sign, `θ = (0.45, -0.42, 0.63)` on
//! features `(1, deltacontrol, burden)` gives treatment probabilities 0.746 at
//! `(1, 0, 1)` and 0.507 at `(1, 1, 0)`.
//!
//! A gated policy only treats at available decision points; when treatment is
//! unavailable it takes action 0 with probability one.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{Dataset, Step};

/// Maps a state to the policy features `φ(s)`: an optional intercept followed
/// by selected state components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyFeatureMap {
    pub intercept: bool,
    /// State components used as features, in order.
    pub columns: Vec<usize>,
    /// One name per feature (intercept first when present).
    pub names: Vec<String>,
    pub n_actions: usize,
}

impl PolicyFeatureMap {
    /// Binary-action map over the given state columns, named `s{j+1}`.
    pub fn new(intercept: bool, columns: Vec<usize>) -> Self {
        let names = columns.iter().map(|j| format!("s{}", j + 1)).collect();
        Self::with_names(intercept, columns, names, 2)
    }

    /// `names` lists the column names only; "intercept" is prepended.
    pub fn with_names(intercept: bool, columns: Vec<usize>, names: Vec<String>, n_actions: usize) -> Self {
        let mut all = Vec::with_capacity(names.len() + 1);
        if intercept {
            all.push("intercept".to_string());
        }
        all.extend(names);
        PolicyFeatureMap {
            intercept,
            columns,
            names: all,
            n_actions,
        }
    }

    /// Map whose columns are looked up by name in the dataset header.
    pub fn from_column_names(d: &Dataset, intercept: bool, names: &[String]) -> Result<Self> {
        let columns = names
            .iter()
            .map(|n| {
                d.column_index(n)
                    .ok_or_else(|| Error::Config(format!("policy column '{n}' not found in dataset header")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::with_names(intercept, columns, names.to_vec(), d.n_actions))
    }

    /// Features per non-reference action.
    pub fn state_features(&self) -> usize {
        self.columns.len() + usize::from(self.intercept)
    }

    /// Length of θ: one block of state features per non-reference action.
    pub fn n_params(&self) -> usize {
        self.state_features() * (self.n_actions - 1)
    }

    pub fn phi_into(&self, state: &[f64], out: &mut Vec<f64>) {
        out.clear();
        if self.intercept {
            out.push(1.0);
        }
        out.extend(self.columns.iter().map(|&j| state[j]));
    }

    pub fn phi(&self, state: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.state_features());
        self.phi_into(state, &mut out);
        out
    }

    fn check_state(&self, state: &[f64]) -> Result<()> {
        match self.columns.iter().max() {
            Some(&j) if j >= state.len() => Err(Error::DimensionMismatch {
                expected: j + 1,
                got: state.len(),
            }),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub theta: Vec<f64>,
    pub feature_map: PolicyFeatureMap,
    pub gated_by_availability: bool,
    /// When set, the policy deterministically takes this action wherever it
    /// is allowed to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_action: Option<usize>,
}

#[inline]
pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

impl PolicyParams {
    pub fn new(theta: Vec<f64>, feature_map: PolicyFeatureMap) -> Result<Self> {
        if theta.len() != feature_map.n_params() {
            return Err(Error::DimensionMismatch {
                expected: feature_map.n_params(),
                got: theta.len(),
            });
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::Config("policy parameters must be finite".into()));
        }
        Ok(PolicyParams {
            theta,
            feature_map,
            gated_by_availability: false,
            fixed_action: None,
        })
    }

    /// The uniform policy `θ = 0`.
    pub fn zeros(feature_map: PolicyFeatureMap) -> Self {
        PolicyParams {
            theta: vec![0.0; feature_map.n_params()],
            feature_map,
            gated_by_availability: false,
            fixed_action: None,
        }
    }

    pub fn gated(mut self, gated: bool) -> Self {
        self.gated_by_availability = gated;
        self
    }

    pub fn with_theta(&self, theta: &[f64]) -> Self {
        PolicyParams {
            theta: theta.to_vec(),
            ..self.clone()
        }
    }

    pub fn n_actions(&self) -> usize {
        self.feature_map.n_actions
    }

    /// Action probabilities given precomputed features, written into `out`.
    pub fn probabilities_from_phi(&self, phi: &[f64], available: bool, out: &mut [f64]) -> Result<()> {
        let k = self.n_actions();
        out.iter_mut().for_each(|p| *p = 0.0);
        if self.gated_by_availability && !available {
            out[0] = 1.0;
            return Ok(());
        }
        if let Some(a) = self.fixed_action {
            out[a] = 1.0;
            return Ok(());
        }
        let q = phi.len();
        if k == 2 {
            let u: f64 = self.theta.iter().zip(phi).map(|(t, f)| t * f).sum();
            if !u.is_finite() {
                return Err(Error::NonFinite { point: self.theta.clone() });
            }
            let p1 = sigmoid(u);
            out[0] = 1.0 - p1;
            out[1] = p1;
            return Ok(());
        }
        out[0] = 0.0;
        for (a, o) in out.iter_mut().enumerate().take(k).skip(1) {
            let block = &self.theta[(a - 1) * q..a * q];
            *o = block.iter().zip(phi).map(|(t, f)| t * f).sum();
            if !o.is_finite() {
                return Err(Error::NonFinite { point: self.theta.clone() });
            }
        }
        let m = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for p in out.iter_mut() {
            *p = (*p - m).exp();
            z += *p;
        }
        out.iter_mut().for_each(|p| *p /= z);
        Ok(())
    }

    pub fn probabilities(&self, state: &[f64], available: bool) -> Result<Vec<f64>> {
        self.feature_map.check_state(state)?;
        let phi = self.feature_map.phi(state);
        let mut out = vec![0.0; self.n_actions()];
        self.probabilities_from_phi(&phi, available, &mut out)?;
        Ok(out)
    }

    /// `π_θ(action | state)`.
    pub fn action_probability(&self, state: &[f64], available: bool, action: usize) -> Result<f64> {
        if action >= self.n_actions() {
            return Err(Error::Config(format!(
                "action {action} outside {{0,...,{}}}",
                self.n_actions() - 1
            )));
        }
        Ok(self.probabilities(state, available)?[action])
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, state: &[f64], available: bool, rng: &mut R) -> Result<usize> {
        let probs = self.probabilities(state, available)?;
        Ok(draw(&probs, rng.random::<f64>()))
    }

    /// `ρ = π_θ(A_t|S_t) / μ(A_t|S_t)`.
    pub fn importance_weight(&self, step: &Step) -> Result<f64> {
        Ok(self.action_probability(&step.state, step.available, step.action)? / step.behavior_prob)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&PolicyJson::from(self)).map_err(|e| Error::Numerical(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<PolicyParams> {
        let raw: PolicyJson = serde_json::from_str(s).map_err(|e| Error::parse(None, None, e.to_string()))?;
        let theta: Vec<f64> = raw.coefficients.iter().map(|c| c.value).collect();
        let names: Vec<String> = raw.coefficients.iter().map(|c| c.name.clone()).collect();
        let per_action = raw.columns.len() + usize::from(raw.intercept);
        if raw.n_actions < 2 || theta.len() != per_action * (raw.n_actions - 1) {
            return Err(Error::parse(None, None, "coefficient count does not match features"));
        }
        let fm = PolicyFeatureMap {
            intercept: raw.intercept,
            columns: raw.columns,
            names: names[..per_action].iter().map(|n| strip_action(n)).collect(),
            n_actions: raw.n_actions,
        };
        let mut p = PolicyParams::new(theta, fm)?;
        p.gated_by_availability = raw.gated_by_availability;
        p.fixed_action = raw.fixed_action;
        Ok(p)
    }
}

fn strip_action(name: &str) -> String {
    match name.rsplit_once('@') {
        Some((base, _)) => base.to_string(),
        None => name.to_string(),
    }
}

/// Index of the first action whose cumulative probability exceeds `u`.
pub(crate) fn draw(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (a, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return a;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

#[derive(Serialize, Deserialize)]
struct Coefficient {
    name: String,
    value: f64,
}

#[derive(Serialize, Deserialize)]
struct PolicyJson {
    n_actions: usize,
    intercept: bool,
    columns: Vec<usize>,
    gated_by_availability: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fixed_action: Option<usize>,
    coefficients: Vec<Coefficient>,
}

impl From<&PolicyParams> for PolicyJson {
    fn from(p: &PolicyParams) -> Self {
        let fm = &p.feature_map;
        let q = fm.state_features();
        let coefficients = p
            .theta
            .iter()
            .enumerate()
            .map(|(i, v)| Coefficient {
                name: if fm.n_actions == 2 {
                    fm.names[i % q].clone()
                } else {
                    format!("{}@{}", fm.names[i % q], i / q + 1)
                },
                value: *v,
            })
            .collect();
        PolicyJson {
            n_actions: fm.n_actions,
            intercept: fm.intercept,
            columns: fm.columns.clone(),
            gated_by_availability: p.gated_by_availability,
            fixed_action: p.fixed_action,
            coefficients,
        }
    }
}

/// The minimum over actions of the fraction of decision points at which the
/// action's probability lies in `[p0, 1 - p0]`. When the data contain
/// unavailable points only available points are counted.
pub fn stochasticity_fraction(p: &PolicyParams, d: &Dataset, p0: f64) -> Result<f64> {
    let k = p.n_actions();
    if !(p0 > 0.0 && p0 < 1.0 / k as f64) {
        return Err(Error::Config(format!("p0 = {p0} must lie in (0, 1/K)")));
    }
    let only_available = d.has_gating();
    let mut inside = vec![0usize; k];
    let mut counted = 0usize;
    let mut probs = vec![0.0; k];
    let mut phi = Vec::new();
    for s in d.steps() {
        if only_available && !s.available {
            continue;
        }
        p.feature_map.phi_into(&s.state, &mut phi);
        p.probabilities_from_phi(&phi, s.available, &mut probs)?;
        counted += 1;
        for (c, pr) in inside.iter_mut().zip(&probs) {
            if *pr >= p0 && *pr <= 1.0 - p0 {
                *c += 1;
            }
        }
    }
    if counted == 0 {
        return Err(Error::InvalidData("no available decision points".into()));
    }
    Ok(inside.into_iter().min().unwrap_or(0) as f64 / counted as f64)
}

/// Always treat: `π(1|s) = 1`.
pub fn constant_policy(feature_map: PolicyFeatureMap) -> PolicyParams {
    PolicyParams {
        fixed_action: Some(1),
        ..PolicyParams::zeros(feature_map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::Trajectory;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table_policy() -> PolicyParams {
        let fm = PolicyFeatureMap::with_names(true, vec![0, 1], vec!["deltacontrol".into(), "burden".into()], 2);
        PolicyParams::new(vec![0.45, -0.42, 0.63], fm).unwrap()
    }

    fn data(states: Vec<Vec<f64>>, avail: Vec<bool>) -> Dataset {
        let dim = states[0].len();
        let steps = states
            .into_iter()
            .zip(avail)
            .map(|(s, a)| Step {
                state: s,
                available: a,
                action: 0,
                reward: 0.0,
                behavior_prob: if a { 0.5 } else { 1.0 },
            })
            .collect();
        Dataset::new(
            vec![Trajectory {
                id: "0".into(),
                steps,
                terminal_state: None,
            }],
            2,
            Dataset::default_state_names(dim),
        )
        .unwrap()
    }

    #[test]
    fn table_arithmetic() {
        let p = table_policy();
        let a = p.action_probability(&[0.0, 1.0], true, 1).unwrap();
        let b = p.action_probability(&[1.0, 0.0], true, 1).unwrap();
        assert!((a - 0.7465).abs() < 1e-3, "{a}");
        assert!((b - 0.5075).abs() < 1e-3, "{b}");
        assert_eq!(format!("{a:.2}"), "0.75");
        assert_eq!(format!("{b:.2}"), "0.51");
    }

    #[test]
    fn zero_theta_uniform() {
        let p = PolicyParams::zeros(PolicyFeatureMap::new(true, vec![0]));
        assert_eq!(p.probabilities(&[3.0], true).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn gating_forces_no_treatment() {
        let p = table_policy().gated(true);
        assert_eq!(p.probabilities(&[0.0, 1.0], false).unwrap(), vec![1.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..1000).all(|_| p.sample_action(&[0.0, 1.0], false, &mut rng).unwrap() == 0));
        let forced = Step {
            state: vec![0.0, 1.0],
            available: false,
            action: 0,
            reward: 0.0,
            behavior_prob: 1.0,
        };
        assert_eq!(p.importance_weight(&forced).unwrap(), 1.0);
    }

    #[test]
    fn sampling_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let uniform = PolicyParams::zeros(PolicyFeatureMap::new(true, vec![]));
        let n = 1_000_000;
        let hits = (0..n).filter(|_| uniform.sample_action(&[], true, &mut rng).unwrap() == 1).count();
        assert!((hits as f64 / n as f64 - 0.5).abs() < 0.002);

        let p = table_policy();
        let target = p.action_probability(&[0.0, 1.0], true, 1).unwrap();
        let hits = (0..n).filter(|_| p.sample_action(&[0.0, 1.0], true, &mut rng).unwrap() == 1).count();
        assert!((hits as f64 / n as f64 - target).abs() < 0.002);
    }

    #[test]
    fn weights() {
        let p = table_policy();
        let mut s = Step {
            state: vec![0.0, 1.0],
            available: true,
            action: 1,
            reward: 0.0,
            behavior_prob: 0.6,
        };
        let pi = p.action_probability(&s.state, true, 1).unwrap();
        assert!((p.importance_weight(&s).unwrap() - pi / 0.6).abs() < 1e-15);
        assert!((pi / 0.6 - 1.2442).abs() < 1e-3);
        s.behavior_prob = pi;
        assert!((p.importance_weight(&s).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fraction_examples() {
        // logits chosen so that π(1|s) = {0.02, 0.5, 0.9, 0.97}
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let states: Vec<Vec<f64>> = [0.02, 0.5, 0.9, 0.97].iter().map(|&p| vec![logit(p)]).collect();
        let d = data(states, vec![true; 4]);
        let p = PolicyParams::new(vec![1.0], PolicyFeatureMap::new(false, vec![0])).unwrap();
        assert_eq!(stochasticity_fraction(&p, &d, 0.05).unwrap(), 0.5);

        let uniform = PolicyParams::zeros(PolicyFeatureMap::new(false, vec![0]));
        assert_eq!(stochasticity_fraction(&uniform, &d, 0.05).unwrap(), 1.0);
        let steep = PolicyParams::new(vec![10.0], PolicyFeatureMap::new(true, vec![])).unwrap();
        assert_eq!(stochasticity_fraction(&steep, &d, 0.05).unwrap(), 0.0);
        assert_eq!(stochasticity_fraction(&constant_policy(PolicyFeatureMap::new(true, vec![])), &d, 0.05).unwrap(), 0.0);
        assert!(stochasticity_fraction(&uniform, &d, 0.5).is_err());
    }

    #[test]
    fn fraction_counts_available_only() {
        let d = data(vec![vec![0.0], vec![0.0], vec![0.0]], vec![true, false, true]);
        let p = PolicyParams::zeros(PolicyFeatureMap::new(true, vec![])).gated(true);
        assert_eq!(stochasticity_fraction(&p, &d, 0.05).unwrap(), 1.0);
        let none = data(vec![vec![0.0], vec![0.0]], vec![false, false]);
        assert!(stochasticity_fraction(&p, &none, 0.05).is_err());
    }

    #[test]
    fn constant_policy_always_treats() {
        let c = constant_policy(PolicyFeatureMap::new(true, vec![0]));
        assert_eq!(c.action_probability(&[123.0], true, 1).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!((0..100).all(|_| c.sample_action(&[-4.0], true, &mut rng).unwrap() == 1));
    }

    #[test]
    fn json_keeps_names() {
        let p = table_policy().gated(true);
        let js = p.to_json().unwrap();
        assert!(js.contains("\"deltacontrol\"") && js.contains("\"burden\"") && js.contains("\"intercept\""));
        assert_eq!(PolicyParams::from_json(&js).unwrap(), p);

        let fm = PolicyFeatureMap::with_names(true, vec![0], vec!["x".into()], 3);
        let three = PolicyParams::new(vec![0.1, 0.2, 0.3, 0.4], fm).unwrap();
        assert_eq!(PolicyParams::from_json(&three.to_json().unwrap()).unwrap(), three);
    }

    #[test]
    fn non_finite_logit_errors() {
        let p = PolicyParams::new(vec![1e308], PolicyFeatureMap::new(false, vec![0])).unwrap();
        assert!(p.action_probability(&[1e308], true, 1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn probabilities_sum_to_one(theta in prop::collection::vec(-5.0f64..5.0, 4), s in prop::collection::vec(-3.0f64..3.0, 2)) {
            let fm = PolicyFeatureMap::with_names(true, vec![0], vec!["x".into()], 3);
            let p = PolicyParams::new(theta, fm).unwrap();
            let probs = p.probabilities(&s, true).unwrap();
            prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for a in 0..3 {
                let step = Step { state: s.clone(), available: true, action: a, reward: 0.0, behavior_prob: 0.3 };
                let w = p.importance_weight(&step).unwrap();
                prop_assert!((0.0..=1.0 / 0.3 + 1e-12).contains(&w));
            }
        }

        #[test]
        fn binary_symmetry(theta in prop::collection::vec(-5.0f64..5.0, 2), s in -3.0f64..3.0, d in 0.0f64..2.0) {
            let fm = PolicyFeatureMap::new(true, vec![0]);
            let p = PolicyParams::new(theta.clone(), fm.clone()).unwrap();
            let neg = PolicyParams::new(theta.iter().map(|t| -t).collect(), fm.clone()).unwrap();
            let a = p.probabilities(&[s], true).unwrap();
            let b = neg.probabilities(&[s], true).unwrap();
            prop_assert!((a[0] - b[1]).abs() < 1e-12 && (a[1] - b[0]).abs() < 1e-12);
            // monotone in the logit
            let up = PolicyParams::new(vec![theta[0] + d, theta[1]], fm).unwrap();
            prop_assert!(up.probabilities(&[s], true).unwrap()[1] >= a[1]);
            // behaviour-weighted importance weights sum to one
            let mu = [0.35, 0.65];
            let total: f64 = (0..2).map(|k| mu[k] * (a[k] / mu[k])).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
