//! Monte Carlo experiments over replicated training sets.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{constant_policy, evaluate_average_reward, generate_dataset, leading_columns, oracle_policy, OracleOptions, RolloutSpec, SimConfig};
use crate::actor::{run_actor_critic, ActorConfig};
use crate::error::{Error, Result};
use crate::features::{build_feature_map, DEFAULT_PRUNE_THRESHOLD};
use crate::policy::{PolicyFeatureMap, PolicyParams};
use crate::rng::{derive_seed, stream_id, substream};

/// The simulation scenarios. The sweep variable is `τ` for `S1`, the state
/// dimension for `S2` and `S3`, and the (1-based) state component left out
/// of the policy for `S4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    S1,
    S2,
    S3,
    S4,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::S1, Scenario::S2, Scenario::S3, Scenario::S4];

    pub fn sweep_name(self) -> &'static str {
        match self {
            Scenario::S1 => "tau",
            Scenario::S2 | Scenario::S3 => "p1",
            Scenario::S4 => "omitted",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Scenario> {
        match s.to_ascii_uppercase().as_str() {
            "S1" => Ok(Scenario::S1),
            "S2" => Ok(Scenario::S2),
            "S3" => Ok(Scenario::S3),
            "S4" => Ok(Scenario::S4),
            _ => Err(Error::Config(format!("unknown scenario '{s}'; valid scenarios are S1, S2, S3, S4"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// 20 replications over a reduced sweep.
    Desk,
    /// 100 replications over the full sweep.
    Full,
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Scale> {
        match s.to_ascii_lowercase().as_str() {
            "desk" => Ok(Scale::Desk),
            "full" => Ok(Scale::Full),
            _ => Err(Error::Config(format!("unknown scale '{s}'; valid scales are desk, full"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub sweep: Vec<f64>,
    pub replications: usize,
    /// Individuals per training set.
    pub n: usize,
    /// Last decision point index of each training trajectory.
    pub horizon: usize,
    pub seed: u64,
    /// Base simulator; the sweep overrides `tau` or `p1`.
    pub sim: SimConfig,
    pub actor: ActorConfig,
    pub rollout: RolloutSpec,
    pub oracle: OracleOptions,
    /// Cap on concurrent replications; `None` uses every core.
    pub jobs: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::preset(Scenario::S1, Scale::Desk)
    }
}

impl ExperimentConfig {
    pub fn preset(scenario: Scenario, scale: Scale) -> ExperimentConfig {
        let sweep = match (scenario, scale) {
            (Scenario::S1, Scale::Desk) => vec![0.2, 0.4, 0.6],
            (Scenario::S1, Scale::Full) => (0..=8).map(|k| 0.2 + 0.05 * k as f64).collect(),
            (Scenario::S2 | Scenario::S3, Scale::Desk) => vec![3.0, 6.0, 10.0],
            (Scenario::S2 | Scenario::S3, Scale::Full) => (3..=10).map(f64::from).collect(),
            (Scenario::S4, _) => vec![1.0, 2.0, 3.0],
        };
        let mut actor = ActorConfig::default();
        if scale == Scale::Desk {
            actor.optim.n_restarts = 3;
        }
        ExperimentConfig {
            scenario,
            sweep,
            replications: if scale == Scale::Desk { 20 } else { 100 },
            n: 25,
            horizon: 25,
            seed: 0,
            sim: SimConfig::default(),
            actor,
            rollout: RolloutSpec::default(),
            oracle: OracleOptions::default(),
            jobs: None,
        }
    }

    /// Simulator and policy class at one sweep value.
    pub fn setting(&self, value: f64) -> Result<(SimConfig, PolicyFeatureMap)> {
        let mut sim = self.sim.clone();
        let as_index = |v: f64| -> Result<usize> {
            if v.fract() != 0.0 || v < 1.0 {
                return Err(Error::Config(format!("sweep value {v} is not a positive integer")));
            }
            Ok(v as usize)
        };
        let pf = match self.scenario {
            Scenario::S1 => {
                sim.tau = value;
                leading_columns(3)
            }
            Scenario::S2 => {
                sim.p1 = as_index(value)?;
                leading_columns(3)
            }
            Scenario::S3 => {
                sim.p1 = as_index(value)?;
                leading_columns(sim.p1)
            }
            Scenario::S4 => {
                let omit = as_index(value)?;
                if omit > 3 {
                    return Err(Error::Config(format!("S4 omits one of components 1..3, got {omit}")));
                }
                PolicyFeatureMap::new(true, (0..3).filter(|&j| j + 1 != omit).collect())
            }
        };
        sim.validate()?;
        Ok((sim, pf))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Learned,
    Const,
    Oracle,
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyKind::Learned => "learned",
            PolicyKind::Const => "const",
            PolicyKind::Oracle => "oracle",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scenario: Scenario,
    pub sweep_value: f64,
    pub replication: usize,
    pub policy_kind: PolicyKind,
    pub eta: f64,
}

/// Per-replication diagnostics of the learned policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationInfo {
    pub sweep_value: f64,
    pub replication: usize,
    pub rounds: usize,
    pub delta: f64,
    pub lambda_a: Vec<f64>,
    pub fraction: f64,
    pub theta: Vec<f64>,
    pub max_relative_residual: f64,
    pub critic_solves: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub sweep_value: f64,
    pub replication: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub sweep_value: f64,
    pub policy_kind: PolicyKind,
    pub count: usize,
    pub mean: f64,
    pub std_dev: f64,
    pub p5: f64,
    pub p95: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
    pub diagnostics: Vec<ReplicationInfo>,
    pub failures: Vec<Failure>,
    /// Oracle parameters per sweep value.
    pub oracle_theta: Vec<(f64, Vec<f64>)>,
}

fn quantile(sorted: &[f64], prob: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl ResultsTable {
    pub fn etas(&self, sweep_value: f64, kind: PolicyKind) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.sweep_value == sweep_value && r.policy_kind == kind)
            .map(|r| r.eta)
            .collect()
    }

    /// Mean, standard deviation and 5th/95th percentiles per sweep value and
    /// policy kind.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut keys: Vec<(f64, PolicyKind)> = Vec::new();
        for r in &self.rows {
            if !keys.contains(&(r.sweep_value, r.policy_kind)) {
                keys.push((r.sweep_value, r.policy_kind));
            }
        }
        keys.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        keys.into_iter()
            .map(|(v, k)| {
                let mut e = self.etas(v, k);
                e.sort_by(f64::total_cmp);
                let m = e.len() as f64;
                let mean = e.iter().sum::<f64>() / m;
                let var = if e.len() > 1 {
                    e.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0)
                } else {
                    0.0
                };
                SummaryRow {
                    sweep_value: v,
                    policy_kind: k,
                    count: e.len(),
                    mean,
                    std_dev: var.sqrt(),
                    p5: quantile(&e, 0.05),
                    p95: quantile(&e, 0.95),
                }
            })
            .collect()
    }

    /// One row per replication and policy kind.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::Numerical(format!("writing results: {e}"));
        out.write_record(["scenario", "sweep_value", "replication", "policy_kind", "eta"]).map_err(err)?;
        for r in &self.rows {
            out.write_record([
                r.scenario.to_string(),
                r.sweep_value.to_string(),
                r.replication.to_string(),
                r.policy_kind.to_string(),
                r.eta.to_string(),
            ])
            .map_err(err)?;
        }
        out.flush().map_err(|e| Error::Numerical(format!("writing results: {e}")))
    }

    pub fn write_summary_csv<W: Write>(&self, scenario: Scenario, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let err = |e: csv::Error| Error::Numerical(format!("writing summary: {e}"));
        out.write_record(["scenario", "sweep_value", "policy_kind", "count", "mean", "std_dev", "p5", "p95"])
            .map_err(err)?;
        for s in self.summary() {
            out.write_record([
                scenario.to_string(),
                s.sweep_value.to_string(),
                s.policy_kind.to_string(),
                s.count.to_string(),
                s.mean.to_string(),
                s.std_dev.to_string(),
                s.p5.to_string(),
                s.p95.to_string(),
            ])
            .map_err(err)?;
        }
        out.flush().map_err(|e| Error::Numerical(format!("writing summary: {e}")))
    }
}

struct RepOutcome {
    rows: Vec<ResultRow>,
    info: Option<ReplicationInfo>,
    failure: Option<Failure>,
}

fn run_replication(
    exp: &ExperimentConfig,
    point: usize,
    rep: usize,
    oracle: &PolicyParams,
) -> Result<RepOutcome> {
    let value = exp.sweep[point];
    let (sim, pf) = exp.setting(value)?;
    let row = |kind, eta| ResultRow {
        scenario: exp.scenario,
        sweep_value: value,
        replication: rep,
        policy_kind: kind,
        eta,
    };
    let eval_spec = RolloutSpec {
        seed: derive_seed(exp.seed, stream_id(point as u64, rep as u64, 1)),
        ..exp.rollout.clone()
    };
    let mut rows = vec![
        row(PolicyKind::Const, evaluate_average_reward(&sim, &constant_policy(&pf), &eval_spec)?),
        row(PolicyKind::Oracle, evaluate_average_reward(&sim, oracle, &eval_spec)?),
    ];

    let started = Instant::now();
    let learned = (|| -> Result<(PolicyParams, ReplicationInfo)> {
        let mut rng = substream(exp.seed, stream_id(point as u64, rep as u64, 0));
        let d = generate_dataset(&sim, exp.n, exp.horizon, &mut rng)?;
        let fm = build_feature_map(&d, DEFAULT_PRUNE_THRESHOLD)?;
        let mut actor = exp.actor.clone();
        actor.optim.seed = derive_seed(exp.seed, stream_id(point as u64, rep as u64, 2));
        let res = run_actor_critic(&d, &fm, &pf, &actor)?;
        let last = res.trace.last().expect("non-empty trace");
        let info = ReplicationInfo {
            sweep_value: value,
            replication: rep,
            rounds: res.trace.len(),
            delta: res.delta,
            lambda_a: res.trace.iter().map(|r| r.lambda_a).collect(),
            fraction: last.fraction,
            theta: res.policy.theta.clone(),
            max_relative_residual: res.max_relative_residual,
            critic_solves: res.critic_solves,
            seconds: 0.0,
        };
        Ok((res.policy, info))
    })();
    match learned {
        Ok((policy, mut info)) => {
            info.seconds = started.elapsed().as_secs_f64();
            rows.insert(0, row(PolicyKind::Learned, evaluate_average_reward(&sim, &policy, &eval_spec)?));
            Ok(RepOutcome {
                rows,
                info: Some(info),
                failure: None,
            })
        }
        Err(e) => Ok(RepOutcome {
            rows,
            info: None,
            failure: Some(Failure {
                sweep_value: value,
                replication: rep,
                message: e.to_string(),
            }),
        }),
    }
}

/// Runs every replication of every sweep value. A replication whose
/// learning step fails is recorded and skipped; more than 20% failures is
/// an error.
pub fn monte_carlo_experiment(exp: &ExperimentConfig) -> Result<ResultsTable> {
    if exp.replications == 0 || exp.sweep.is_empty() {
        return Ok(ResultsTable::default());
    }
    exp.rollout.validate()?;
    for &v in &exp.sweep {
        exp.setting(v)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(exp.jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        let oracles: Vec<PolicyParams> = (0..exp.sweep.len())
            .into_par_iter()
            .map(|point| {
                let (sim, _) = exp.setting(exp.sweep[point])?;
                let opts = OracleOptions {
                    seed: derive_seed(exp.seed, stream_id(point as u64, 0, 3)),
                    ..exp.oracle.clone()
                };
                Ok(oracle_policy(&sim, &leading_columns(3), &exp.actor, &opts)?.policy)
            })
            .collect::<Result<_>>()?;

        let tasks: Vec<(usize, usize)> = (0..exp.sweep.len())
            .flat_map(|p| (0..exp.replications).map(move |r| (p, r)))
            .collect();
        let outcomes: Vec<RepOutcome> = tasks
            .par_iter()
            .map(|&(p, r)| run_replication(exp, p, r, &oracles[p]))
            .collect::<Result<_>>()?;

        let mut table = ResultsTable {
            oracle_theta: exp.sweep.iter().copied().zip(oracles.iter().map(|o| o.theta.clone())).collect(),
            ..ResultsTable::default()
        };
        for o in outcomes {
            table.rows.extend(o.rows);
            table.diagnostics.extend(o.info);
            table.failures.extend(o.failure);
        }
        if table.failures.len() * 5 > tasks.len() {
            return Err(Error::Numerical(format!(
                "{} of {} replications failed; first failure: {}",
                table.failures.len(),
                tasks.len(),
                table.failures[0].message
            )));
        }
        Ok(table)
    })
}
