//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails. Set `ACCEPTANCE_QUICK=1` to skip the
//! two Monte Carlo experiments (they take the better part of two hours on
//! one core).

use std::time::Instant;

use batchac::actor::{actor_step, compute_sigma, run_actor_critic, ActorConfig};
use batchac::critic::{assemble_system, critic, solve_penalized, CriticEngine, CriticSystem, RESIDUAL_TOLERANCE};
use batchac::features::{build_feature_map, BasisFunction, FeatureMap, Hinge, KnotGrid, Orientation};
use batchac::optim::{bfgs_maximize, finite_diff_gradient, OptimOptions};
use batchac::policy::{stochasticity_fraction, PolicyFeatureMap, PolicyParams};
use batchac::rng::substream;
use batchac::simenv::{
    evaluate_with_error, generate_dataset, leading_columns, monte_carlo_experiment, step, ExperimentConfig, PolicyKind,
    ResultsTable, RolloutSpec, Scale, Scenario, SimConfig, TwoStateMdp,
};
use batchac::trajectory::Dataset;
use nalgebra::{DMatrix, DVector};

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
    seconds: f64,
}

/// Residuals `‖(ÂᵀÂ + λĨ)x − Âᵀb̂‖ / (1 + ‖Âᵀb̂‖)` seen by criteria 2 to 8.
#[derive(Default)]
struct Hygiene {
    worst: f64,
    solves: usize,
}

impl Hygiene {
    fn add(&mut self, rel: f64, solves: usize) {
        self.worst = self.worst.max(rel);
        self.solves += solves;
    }
}

fn run(id: usize, name: &'static str, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let t = Instant::now();
    let (pass, detail) = f();
    let o = Outcome {
        id,
        name,
        pass,
        detail,
        seconds: t.elapsed().as_secs_f64(),
    };
    report(&o);
    o
}

fn report(o: &Outcome) {
    println!(
        "[{}] {:>2}. {} ({:.1}s): {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.id,
        o.name,
        o.seconds,
        o.detail
    );
}

fn state_indicator_map(d: &Dataset) -> FeatureMap {
    let grid = KnotGrid { knots: vec![vec![0.0]] };
    let h = Hinge {
        dim: 0,
        knot: 0,
        orientation: Orientation::Plus,
    };
    FeatureMap::with_basis(grid, vec![BasisFunction::Singleton(h)], d).unwrap()
}

fn relative_residual(fit: &batchac::critic::CriticFit) -> f64 {
    fit.residual_norm / (1.0 + fit.rhs_norm)
}

fn uniform() -> PolicyParams {
    PolicyParams::zeros(PolicyFeatureMap::new(true, vec![]))
}

fn table_one() -> (bool, String) {
    let pf = PolicyFeatureMap::with_names(true, vec![0, 1], vec!["deltacontrol".into(), "burden".into()], 2);
    let p = PolicyParams::new(vec![0.45, -0.42, 0.63], pf).unwrap();
    let a = p.action_probability(&[0.0, 1.0], true, 1).unwrap();
    let b = p.action_probability(&[1.0, 0.0], true, 1).unwrap();
    let pass = (a - 0.746).abs() <= 1e-3 && (b - 0.507).abs() <= 1e-3;
    (pass, format!("pi(1|0,1) = {a:.4}, pi(1|1,0) = {b:.4}"))
}

fn two_state_critic(h: &mut Hygiene) -> (bool, String) {
    let mdp = TwoStateMdp::default();
    let want = mdp.exact_average_reward([0.5, 0.5]);
    let d = generate_dataset(&mdp, 2000, 50, &mut substream(101, 0)).unwrap();
    let fm = state_indicator_map(&d);
    let fit = solve_penalized(&assemble_system(&d, &uniform(), &fm).unwrap(), 1e-8).unwrap();
    h.add(relative_residual(&fit), 1);
    let err = (fit.eta_hat - want).abs();
    (err <= 0.02, format!("eta_hat = {:.4}, exact = {want:.4}, error {err:.4}", fit.eta_hat))
}

fn off_policy(h: &mut Hygiene) -> (bool, String) {
    let mdp = TwoStateMdp {
        mu1: 0.6,
        ..TwoStateMdp::default()
    };
    let d = generate_dataset(&mdp, 2000, 50, &mut substream(102, 0)).unwrap();
    let fm = state_indicator_map(&d);
    let fit = solve_penalized(&assemble_system(&d, &uniform(), &fm).unwrap(), 1e-8).unwrap();
    h.add(relative_residual(&fit), 1);
    let spec = RolloutSpec {
        horizon: 200_000,
        burn_in: 1_000,
        seed: 7,
    };
    let on = evaluate_with_error(&mdp, &uniform(), &spec).unwrap();
    let err = (fit.eta_hat - on.eta).abs();
    (
        err <= 0.03,
        format!("critic {:.4} vs on-policy rollout {:.4} (se {:.4}), gap {err:.4}", fit.eta_hat, on.eta, on.std_error),
    )
}

fn burden() -> (bool, String) {
    let cfg = SimConfig::default();
    let mut rng = substream(103, 0);
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for s3 in [0.0, 1.0, 3.0] {
        let s = [0.2, -0.4, s3];
        for a in [1usize, 0] {
            let xs: Vec<f64> = (0..100_000).map(|_| step(&cfg, &s, a, &mut rng).0[2]).collect();
            let n = xs.len() as f64;
            let m = xs.iter().sum::<f64>() / n;
            let se = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
            let want = if a == 1 { 0.95 * s3 + 0.5 } else { 0.9 * s3 };
            if a == 0 {
                // deterministic branch
                ok &= xs.iter().all(|x| (x - want).abs() <= 1e-12);
                continue;
            }
            let z = (m - want).abs() / se;
            ok &= z <= 3.0;
            worst = worst.max(z);
        }
    }
    (ok, format!("treated: largest deviation {worst:.2} standard errors; untreated: exact 0.9 decay"))
}

fn penalty_loop(h: &mut Hygiene) -> (bool, String) {
    let mdp = TwoStateMdp {
        bonus: 1.0,
        ..TwoStateMdp::default()
    };
    let d = generate_dataset(&mdp, 200, 25, &mut substream(104, 0)).unwrap();
    let fm = state_indicator_map(&d);
    let pf = PolicyFeatureMap::new(true, vec![0]);
    let mut notes = Vec::new();
    let mut ok = true;
    for p0 in [0.05, 0.4] {
        let cfg = ActorConfig {
            p0,
            alpha: 0.05,
            ..ActorConfig::default()
        };
        match run_actor_critic(&d, &fm, &pf, &cfg) {
            Ok(res) => {
                h.add(res.max_relative_residual, res.critic_solves);
                let frac = stochasticity_fraction(&res.policy, &d, 0.05).unwrap();
                let own = res.trace.last().unwrap().fraction;
                let arithmetic = res
                    .trace
                    .iter()
                    .enumerate()
                    .all(|(k, r)| (r.lambda_a - (cfg.lambda_a_min + k as f64 * res.delta)).abs() <= 1e-12);
                ok &= frac >= 0.95 && own >= 1.0 - cfg.alpha && arithmetic && res.trace.len() <= 100;
                notes.push(format!(
                    "p0 = {p0}: {} rounds, fraction {own:.3}, arithmetic {arithmetic}",
                    res.trace.len()
                ));
            }
            Err(e) => {
                ok = false;
                notes.push(format!("p0 = {p0}: {e}"));
            }
        }
    }
    (ok, notes.join("; "))
}

fn shrinkage(h: &mut Hygiene) -> (bool, String) {
    let mdp = TwoStateMdp::default();
    let small = generate_dataset(&mdp, 2000, 50, &mut substream(101, 0)).unwrap();
    let sys = assemble_system(&small, &uniform(), &state_indicator_map(&small)).unwrap();
    let frozen = solve_penalized(&sys, 1e9).unwrap();
    h.add(relative_residual(&frozen), 1);
    let v_small = frozen.v_hat.iter().map(|x| x * x).sum::<f64>().sqrt();

    let sim = SimConfig::default();
    let d = generate_dataset(&sim, 25, 25, &mut substream(105, 0)).unwrap();
    let fm = build_feature_map(&d, 0.8).unwrap();
    let pf = leading_columns(3);
    let engine = CriticEngine::new(&d, &fm).unwrap();
    let p = PolicyParams::new(vec![-1.0, 0.2, 0.1, -0.3], pf.clone()).unwrap();
    let fit = engine.fit(&p, 1e9).unwrap();
    h.add(engine.stats().max_relative_residual(), engine.stats().solves());
    let v_norm = fit.v_hat.iter().map(|x| x * x).sum::<f64>().sqrt();

    let sigma = compute_sigma(&d, &pf);
    let mut cfg = ActorConfig::default();
    cfg.optim.n_restarts = 3;
    let step = actor_step(&d, &fm, &pf, 1e6, &sigma, &cfg).unwrap();
    let theta_norm = step.policy.theta.iter().map(|x| x * x).sum::<f64>().sqrt();
    (
        v_small <= 1e-6 && theta_norm <= 1e-2,
        format!(
            "|v| = {v_small:.1e} at lambda_c = 1e9 on the two-state system ({v_norm:.1e} on burden data with p = {}); \
             |theta| = {theta_norm:.1e} at lambda_a = 1e6",
            fm.dim()
        ),
    )
}

fn optimizer() -> (bool, String) {
    let mut notes = Vec::new();
    let mut ok = true;
    let q = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, -0.3, 0.5, 1.0, 0.2, -0.3, 0.2, 3.0]);
    let quad = |x: &[f64]| {
        let v = DVector::from_column_slice(x);
        v.dot(&(&q * &v))
    };
    let mut worst: f64 = 0.0;
    for x in [[0.3, -1.2, 2.0], [1.0, 1.0, 1.0], [-4.0, 0.5, 0.1]] {
        let g = finite_diff_gradient(&quad, &x, 1e-4).unwrap();
        let exact = 2.0 * &q * DVector::from_column_slice(&x);
        let rel = (DVector::from_vec(g) - &exact).norm() / exact.norm();
        worst = worst.max(rel);
    }
    ok &= worst <= 1e-6;
    notes.push(format!("gradient rel. error {worst:.1e}"));

    let a = [1.0, -2.0, 3.0];
    let concave = |x: &[f64]| -x.iter().zip(&a).map(|(x, a)| (x - a).powi(2)).sum::<f64>();
    let r = bfgs_maximize(&concave, &[0.0; 3], &OptimOptions::default()).unwrap();
    let dist = r.x.iter().zip(&a).map(|(x, a)| (x - a).abs()).fold(0.0, f64::max);
    ok &= dist <= 1e-5 && r.value.abs() <= 1e-9;
    notes.push(format!("quadratic |x - a| {dist:.1e}"));

    let wells = |x: &[f64]| -(x[0] * x[0] - 1.0).powi(2) - x[1] * x[1];
    let opts = OptimOptions {
        n_restarts: 5,
        seed: 9,
        ..OptimOptions::default()
    };
    let r = bfgs_maximize(&wells, &[0.1, 0.5], &opts).unwrap();
    ok &= r.value.abs() <= 1e-6;
    notes.push(format!("double well f* {:.1e}", r.value));

    let rosen = |x: &[f64]| -((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2));
    let opts = OptimOptions {
        n_restarts: 1,
        max_iterations: 200,
        ..OptimOptions::default()
    };
    let r = bfgs_maximize(&rosen, &[-1.2, 1.0], &opts).unwrap();
    ok &= r.value >= -1e-6 && r.restarts[0].iterations <= 200;
    notes.push(format!("Rosenbrock f* {:.1e} in {} iterations", r.value, r.restarts[0].iterations));
    (ok, notes.join(", "))
}

/// η̂ from explicit raw feature matrices, centered on the data. The data
/// come from the behavior policy and so does the target, so every weight
/// is one.
fn eta_from_raw(d: &Dataset, fm: &FeatureMap, shift: f64, lambda: f64) -> f64 {
    let p = fm.dim();
    let raw = |s: &[f64]| -> Vec<f64> { fm.raw(s).unwrap().iter().map(|x| x + shift).collect() };
    let all: Vec<Vec<f64>> = d.states().map(raw).collect();
    let mut mean = vec![0.0; p];
    for r in &all {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x / all.len() as f64;
        }
    }
    let mut z_rows = Vec::new();
    let mut w_rows = Vec::new();
    let mut reward = Vec::new();
    for tr in &d.trajectories {
        for (_, s, next) in tr.transitions() {
            let now = raw(&s.state);
            let nx = raw(next);
            let mut z = vec![1.0];
            let mut w = vec![1.0];
            for j in 0..p {
                z.push(now[j] - mean[j]);
                w.push((now[j] - mean[j]) - (nx[j] - mean[j]));
            }
            z_rows.push(z);
            w_rows.push(w);
            reward.push(s.reward);
        }
    }
    let rows = reward.len();
    let z = DMatrix::from_fn(rows, p + 1, |i, j| z_rows[i][j]);
    let w = DMatrix::from_fn(rows, p + 1, |i, j| w_rows[i][j]);
    let n = d.n_individuals() as f64;
    let a = z.transpose() * w / n;
    let b = z.transpose() * DVector::from_vec(reward) / n;
    solve_penalized(&CriticSystem { a_hat: a, b_hat: b }, lambda).unwrap().eta_hat
}

fn shift_invariance() -> (bool, String) {
    let sim = SimConfig::default();
    let d = generate_dataset(&sim, 25, 25, &mut substream(106, 0)).unwrap();
    let fm = build_feature_map(&d, 0.8).unwrap();
    let logit = (sim.mu1 / (1.0 - sim.mu1)).ln();
    let mu = PolicyParams::new(vec![logit, 0.0, 0.0, 0.0], leading_columns(3)).unwrap();
    let lambda = critic(&mu, &d, &fm).unwrap().lambda_c;
    let base = eta_from_raw(&d, &fm, 0.0, lambda);
    let gap = (base - eta_from_raw(&d, &fm, 7.3, lambda)).abs();
    (gap <= 1e-8, format!("shift gap {gap:.1e} at the selected lambda_c = {lambda:.0e}"))
}

fn summarize(t: &ResultsTable, v: f64, kind: PolicyKind) -> (f64, f64, usize) {
    let e = t.etas(v, kind);
    let n = e.len() as f64;
    let m = e.iter().sum::<f64>() / n;
    let var = e.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, var, e.len())
}

fn experiment(scenario: Scenario, sweep: Vec<f64>, seed: u64) -> Result<ResultsTable, String> {
    let mut exp = ExperimentConfig::preset(scenario, Scale::Desk);
    exp.sweep = sweep;
    exp.seed = seed;
    monte_carlo_experiment(&exp).map_err(|e| e.to_string())
}

fn record_experiment(t: &ResultsTable, h: &mut Hygiene, fractions: &mut Vec<f64>) {
    for r in &t.diagnostics {
        h.add(r.max_relative_residual, r.critic_solves);
        fractions.push(r.fraction);
    }
}

fn print_table(t: &ResultsTable, label: &str) {
    println!("    {label}: sweep, policy, count, mean, sd, p5, p95");
    for s in t.summary() {
        println!(
            "      {:>5} {:>8} {:>3} {:>8.4} {:>7.4} {:>8.4} {:>8.4}",
            s.sweep_value, s.policy_kind, s.count, s.mean, s.std_dev, s.p5, s.p95
        );
    }
    if !t.failures.is_empty() {
        println!("    {} failed replications", t.failures.len());
    }
}

fn main() {
    let quick = std::env::var("ACCEPTANCE_QUICK").is_ok_and(|v| v == "1");
    let mut h = Hygiene::default();
    let mut out = vec![
        run(1, "policy probability arithmetic", table_one),
        run(2, "critic matches the exact two-state value", || two_state_critic(&mut h)),
    ];
    out.push(run(3, "off-policy critic matches on-policy rollout", || off_policy(&mut h)));
    out.push(run(4, "burden dynamics", burden));
    let loop_outcome = run(5, "penalty loop contract", || penalty_loop(&mut h));
    out.push(run(6, "shrinkage limits", || shrinkage(&mut h)));
    out.push(run(9, "optimizer verification", optimizer));

    let mut fractions = Vec::new();
    let mut s1_point = None;
    if quick {
        println!("[SKIP]  7. S1 desk experiment (ACCEPTANCE_QUICK=1)");
        println!("[SKIP]  8. S2 desk experiment (ACCEPTANCE_QUICK=1)");
    } else {
        out.push(run(7, "S1 at desk scale", || match experiment(Scenario::S1, vec![0.2, 0.4, 0.6], 2024) {
            Ok(t) => {
                print_table(&t, "S1");
                record_experiment(&t, &mut h, &mut fractions);
                let mut ok = t.failures.is_empty();
                let mut notes = Vec::new();
                for tau in [0.2, 0.4, 0.6] {
                    let (l, _, _) = summarize(&t, tau, PolicyKind::Learned);
                    let (c, _, _) = summarize(&t, tau, PolicyKind::Const);
                    let (o, _, _) = summarize(&t, tau, PolicyKind::Oracle);
                    if tau >= 0.4 {
                        ok &= l >= c;
                    }
                    ok &= l >= o - 0.5;
                    notes.push(format!("tau {tau}: learned {l:.3}, const {c:.3}, oracle {o:.3}"));
                }
                s1_point = Some(t);
                (ok, notes.join("; "))
            }
            Err(e) => (false, e),
        }));
        out.push(run(8, "S2 at desk scale", || {
            // p1 = 3 with four policy parameters is the S1 setting at tau = 0.4
            let base = s1_point.as_ref().map(|t| summarize(t, 0.4, PolicyKind::Learned));
            match (base, experiment(Scenario::S2, vec![10.0], 2025)) {
                (Some((m3, v3, n3)), Ok(t)) => {
                    print_table(&t, "S2");
                    record_experiment(&t, &mut h, &mut fractions);
                    let (m10, v10, n10) = summarize(&t, 10.0, PolicyKind::Learned);
                    let se = (v3 / n3 as f64 + v10 / n10 as f64).sqrt();
                    let gap = (m10 - m3).abs();
                    (
                        gap <= 2.0 * se && t.failures.is_empty(),
                        format!("p1 = 3: {m3:.3} (n {n3}), p1 = 10: {m10:.3} (n {n10}), gap {gap:.3} vs 2 se {:.3}", 2.0 * se),
                    )
                }
                (None, _) => (false, "the p1 = 3 arm (S1 at tau = 0.4) did not run".into()),
                (_, Err(e)) => (false, e),
            }
        }));
    }

    // the loop contract also covers every experiment run
    let mut loop_outcome = loop_outcome;
    if !fractions.is_empty() {
        let low = fractions.iter().copied().fold(1.0, f64::min);
        loop_outcome.pass &= low >= 0.95;
        loop_outcome.detail += &format!("; {} experiment runs, lowest fraction {low:.3}", fractions.len());
    }
    out.push(loop_outcome);

    out.push(run(10, "numerical hygiene", || {
        let (shift_ok, shift) = shift_invariance();
        (
            h.worst <= RESIDUAL_TOLERANCE && shift_ok,
            format!("worst relative residual {:.1e} over {} solves; {shift}", h.worst, h.solves),
        )
    }));

    out.sort_by_key(|o| o.id);
    println!();
    println!("acceptance summary");
    for o in &out {
        report(o);
    }
    let failed = out.iter().filter(|o| !o.pass).count();
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
