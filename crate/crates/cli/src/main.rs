mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use batchac::actor::{run_actor_critic, write_trace_csv};
use batchac::error::{Error, Result};
use batchac::features::build_feature_map;
use batchac::policy::PolicyParams;
use batchac::rng::{derive_seed, substream};
use batchac::simenv::{
    evaluate_with_error, generate_dataset, monte_carlo_experiment, ExperimentConfig, RolloutSpec, Scale, Scenario,
};
use batchac::trajectory::{load_dataset, save_dataset, DataFormat, Dataset};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use config::RunConfig;
use manifest::{io_err, Outputs};

/// Batch off-policy actor-critic for stochastic treatment policies.
#[derive(Parser)]
#[command(name = "batchac", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Maximum concurrent replications or restarts.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory; overrides the file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a training set under the behavior policy.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = ["csv", "json"])]
        format: Option<String>,
    },
    /// Learn a policy from a dataset.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Estimate the average reward of a saved policy by simulation.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Policy JSON written by `train`.
        #[arg(long)]
        policy: PathBuf,
    },
    /// Run a Monte Carlo experiment.
    Reproduce {
        /// S1, S2, S3 or S4.
        scenario: String,
        /// desk or full.
        #[arg(default_value = "desk")]
        scale: String,
        /// Replications per sweep value; overrides the preset.
        #[arg(long)]
        replications: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Unsupported(_) => 1,
        Error::Io { .. } | Error::Parse { .. } | Error::InvalidData(_) | Error::DimensionMismatch { .. } => 2,
        Error::SingularSystem { .. }
        | Error::NonFinite { .. }
        | Error::LineSearchFailed
        | Error::PenaltyRoundsExceeded { .. }
        | Error::Numerical(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::PenaltyRoundsExceeded { trace, .. } = &e {
                for (lambda, j, frac) in trace {
                    eprintln!("  lambda_a = {lambda:.6e}  J = {j:.6}  fraction = {frac:.4}");
                }
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate { common, format } => simulate(&common, format.as_deref()),
        Command::Train { common } => train(&common),
        Command::Evaluate { common, policy } => evaluate(&common, &policy),
        Command::Reproduce {
            scenario,
            scale,
            replications,
            common,
        } => reproduce(&common, &scenario, &scale, replications),
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    if common.jobs.is_some() {
        cfg.jobs = common.jobs;
    }
    if let Some(sim) = &cfg.sim {
        sim.validate()?;
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn install_jobs(jobs: Option<usize>) {
    if let Some(j) = jobs {
        // only the first call in a process can configure the global pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
}

fn simulated_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let sim = cfg
        .model()
        .ok_or_else(|| Error::Config("simulation needs a [sim] section".into()))?;
    sim.validate()?;
    generate_dataset(&sim, cfg.data.individuals, cfg.data.horizon, &mut substream(cfg.seed, 0))
}

fn simulate(common: &Common, format: Option<&str>) -> Result<()> {
    let mut cfg = resolve(common)?;
    if let Some(f) = format {
        cfg.data.format = Some(if f == "json" { DataFormat::Json } else { DataFormat::Csv });
    }
    let d = simulated_dataset(&cfg)?;
    let mut out = Outputs::new(&out_dir(&cfg))?;
    let (name, fmt) = match cfg.data.format.unwrap_or(DataFormat::Csv) {
        DataFormat::Csv => ("dataset.csv", DataFormat::Csv),
        DataFormat::Json => ("dataset.json", DataFormat::Json),
    };
    let path = out.path(name);
    save_dataset(&d, &path, fmt)?;
    out.record(path.clone());
    let manifest = out.finish("simulate", cfg.seed, &cfg, &cfg.hash())?;
    println!("wrote {} ({} individuals) and {}", path.display(), d.n_individuals(), manifest.display());
    Ok(())
}

fn training_data(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data.path {
        Some(p) => {
            let d = load_dataset(p, cfg.data_format(p))?;
            let report = d.validate();
            if !report.passed() {
                return Err(Error::InvalidData(format!("{}:\n{report}", p.display())));
            }
            Ok(d)
        }
        None => simulated_dataset(cfg),
    }
}

#[derive(Serialize)]
struct TrainSummary {
    eta_hat: f64,
    lambda_c: f64,
    rounds: usize,
    final_lambda_a: f64,
    fraction: f64,
    penalty_increment: f64,
    max_relative_residual: f64,
    critic_solves: usize,
}

fn train(common: &Common) -> Result<()> {
    let cfg = resolve(common)?;
    install_jobs(cfg.jobs);
    let d = training_data(&cfg)?;
    let fm = build_feature_map(&d, cfg.features.prune_threshold)?;
    let pf = cfg.policy_map(&d)?;
    let mut actor = cfg.actor.clone();
    actor.optim.seed = derive_seed(cfg.seed, 1);
    actor.critic.fold_seed = derive_seed(cfg.seed, 2);
    let res = run_actor_critic(&d, &fm, &pf, &actor)?;

    let mut out = Outputs::new(&out_dir(&cfg))?;
    out.write("policy.json", (res.policy.to_json()? + "\n").as_bytes())?;
    out.write("critic.json", (res.fit.to_json(false)? + "\n").as_bytes())?;
    out.write("features.json", (fm.to_json()? + "\n").as_bytes())?;
    let mut trace = Vec::new();
    write_trace_csv(&res.trace, &mut trace)?;
    out.write("trace.csv", &trace)?;
    let last = res.trace.last().expect("trace is never empty");
    let summary = TrainSummary {
        eta_hat: res.fit.eta_hat,
        lambda_c: res.fit.lambda_c,
        rounds: res.trace.len(),
        final_lambda_a: last.lambda_a,
        fraction: last.fraction,
        penalty_increment: res.delta,
        max_relative_residual: res.max_relative_residual,
        critic_solves: res.critic_solves,
    };
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Numerical(e.to_string()))?;
    out.write("summary.json", (text + "\n").as_bytes())?;
    out.finish("train", cfg.seed, &cfg, &cfg.hash())?;

    println!("features: {}  rounds: {}  fraction: {:.3}", fm.dim(), res.trace.len(), last.fraction);
    for (name, v) in res.policy.feature_map.names.iter().zip(&res.policy.theta) {
        println!("  {name:>16} {v:+.4}");
    }
    println!("estimated average reward {:.4}", res.fit.eta_hat);
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    eta: f64,
    std_error: f64,
    horizon: usize,
    burn_in: usize,
}

fn evaluate(common: &Common, policy_path: &Path) -> Result<()> {
    let cfg = resolve(common)?;
    let sim = cfg.model().ok_or_else(|| {
        Error::Unsupported(
            "evaluation against a recorded dataset is not supported: rollouts need a generative model ([sim] section)"
                .into(),
        )
    })?;
    let text = std::fs::read_to_string(policy_path).map_err(|e| io_err(policy_path, e))?;
    let policy = PolicyParams::from_json(&text)?;
    let spec = RolloutSpec {
        seed: derive_seed(cfg.seed, 3),
        ..cfg.rollout.clone()
    };
    let est = evaluate_with_error(&sim, &policy, &spec)?;
    let report = EvalReport {
        eta: est.eta,
        std_error: est.std_error,
        horizon: spec.horizon,
        burn_in: spec.burn_in,
    };
    let mut out = Outputs::new(&out_dir(&cfg))?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Numerical(e.to_string()))?;
    out.write("eta.json", (json + "\n").as_bytes())?;
    out.finish("evaluate", cfg.seed, &cfg, &cfg.hash())?;
    println!("eta = {:.4} (se {:.4})", est.eta, est.std_error);
    Ok(())
}

/// Overlays the keys of `patch` on `base`, recursing into tables.
fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

fn experiment_config(common: &Common, scenario: Scenario, scale: Scale) -> Result<ExperimentConfig> {
    let mut exp = ExperimentConfig::preset(scenario, scale);
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let patch: toml::Table =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        let mut value = serde_json::to_value(&exp).map_err(|e| Error::Numerical(e.to_string()))?;
        let patch = serde_json::to_value(patch).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut value, patch);
        exp = serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        // the scenario comes from the command line
        exp.scenario = scenario;
    }
    if let Some(s) = common.seed {
        exp.seed = s;
    }
    if common.jobs.is_some() {
        exp.jobs = common.jobs;
    }
    Ok(exp)
}

fn reproduce(common: &Common, scenario: &str, scale: &str, replications: Option<usize>) -> Result<()> {
    let scenario: Scenario = scenario.parse()?;
    let scale: Scale = scale.parse()?;
    let mut exp = experiment_config(common, scenario, scale)?;
    if let Some(r) = replications {
        exp.replications = r;
    }
    let table = monte_carlo_experiment(&exp)?;
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let mut out = Outputs::new(&dir)?;
    let mut buf = Vec::new();
    table.write_csv(&mut buf)?;
    out.write(&format!("results_{scenario}.csv"), &buf)?;
    let mut buf = Vec::new();
    table.write_summary_csv(scenario, &mut buf)?;
    out.write(&format!("summary_{scenario}.csv"), &buf)?;
    let diag = serde_json::json!({
        "oracle_theta": table.oracle_theta,
        "replications": table.diagnostics,
        "failures": table.failures,
    });
    let text = serde_json::to_string_pretty(&diag).map_err(|e| Error::Numerical(e.to_string()))?;
    out.write(&format!("diagnostics_{scenario}.json"), (text + "\n").as_bytes())?;
    let hash = {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(serde_json::to_vec(&exp).expect("config serializes")))
    };
    out.finish("reproduce", exp.seed, &exp, &hash)?;

    println!("{:>8} {:>8} {:>6} {:>9} {:>9}", exp.scenario.sweep_name(), "policy", "count", "mean", "sd");
    for s in table.summary() {
        println!(
            "{:>8} {:>8} {:>6} {:>9.4} {:>9.4}",
            s.sweep_value, s.policy_kind, s.count, s.mean, s.std_dev
        );
    }
    if !table.failures.is_empty() {
        eprintln!("{} replications failed; see the diagnostics file", table.failures.len());
    }
    Ok(())
}
