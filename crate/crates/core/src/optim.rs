//! BFGS maximization with central finite-difference gradients and random
//! restarts.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimOptions {
    pub max_iterations: usize,
    /// Relative finite-difference step: `h_i = step * (1 + |x_i|)`.
    pub gradient_step: f64,
    /// Threshold on the sup-norm of the gradient and on the relative change
    /// of the objective between iterations.
    pub convergence_tol: f64,
    pub n_restarts: usize,
    /// Standard deviation of the random perturbation of restart points.
    pub restart_scale: f64,
    pub seed: u64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions {
            max_iterations: 200,
            gradient_step: 1e-4,
            convergence_tol: 1e-6,
            n_restarts: 10,
            restart_scale: 1.0,
            seed: 0,
        }
    }
}

impl OptimOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || self.n_restarts == 0 {
            return Err(Error::Config("max_iterations and n_restarts must be at least 1".into()));
        }
        for (name, v) in [
            ("gradient_step", self.gradient_step),
            ("convergence_tol", self.convergence_tol),
            ("restart_scale", self.restart_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Outcome of one BFGS run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartReport {
    pub start: Vec<f64>,
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the run produced no usable iterate: non-finite objective at
    /// the start, or no acceptable first step.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub restarts: Vec<RestartReport>,
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_gradient<F>(f: &F, x: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64 + ?Sized,
{
    let mut probe = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let h = step * (1.0 + x[i].abs());
        probe[i] = x[i] + h;
        let up = f(&probe);
        if !up.is_finite() {
            return Err(Error::NonFinite { point: probe });
        }
        probe[i] = x[i] - h;
        let down = f(&probe);
        if !down.is_finite() {
            return Err(Error::NonFinite { point: probe });
        }
        probe[i] = x[i];
        g.push((up - down) / (2.0 * h));
    }
    Ok(g)
}

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;

/// Maximizes `f` by BFGS from `x0` and from `n_restarts - 1` perturbed
/// starts; returns the best final iterate.
pub fn bfgs_maximize<F>(f: &F, x0: &[f64], opts: &OptimOptions) -> Result<OptimResult>
where
    F: Fn(&[f64]) -> f64 + Sync + ?Sized,
{
    opts.validate()?;
    let mut rng = substream(opts.seed, 0);
    let starts: Vec<Vec<f64>> = (0..opts.n_restarts)
        .map(|k| {
            if k == 0 {
                x0.to_vec()
            } else {
                x0.iter()
                    .map(|v| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        v + opts.restart_scale * z
                    })
                    .collect()
            }
        })
        .collect();
    let restarts: Vec<RestartReport> = starts.into_par_iter().map(|s| bfgs_run(f, s, opts)).collect();
    let best = restarts
        .iter()
        .filter(|r| r.failure.is_none())
        .fold(None::<&RestartReport>, |b, r| match b {
            Some(b) if b.value >= r.value => Some(b),
            _ => Some(r),
        });
    match best {
        Some(b) => Ok(OptimResult {
            x: b.x.clone(),
            value: b.value,
            restarts: restarts.clone(),
        }),
        None => Err(Error::LineSearchFailed),
    }
}

fn bfgs_run<F>(f: &F, start: Vec<f64>, opts: &OptimOptions) -> RestartReport
where
    F: Fn(&[f64]) -> f64 + ?Sized,
{
    let n = start.len();
    let neg = |x: &[f64]| -f(x);
    let fail = |msg: String, start: &Vec<f64>| RestartReport {
        start: start.clone(),
        x: start.clone(),
        value: f64::NEG_INFINITY,
        iterations: 0,
        converged: false,
        failure: Some(msg),
    };

    let mut x = DVector::from_vec(start.clone());
    let mut fx = neg(x.as_slice());
    if !fx.is_finite() {
        return fail(format!("non-finite objective at start {start:?}"), &start);
    }
    let mut g = match finite_diff_gradient(&neg, x.as_slice(), opts.gradient_step) {
        Ok(g) => DVector::from_vec(g),
        Err(e) => return fail(e.to_string(), &start),
    };
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut iterations = 0;
    let mut converged = false;
    let mut small_changes = 0;

    while iterations < opts.max_iterations {
        if g.amax() <= opts.convergence_tol {
            converged = true;
            break;
        }
        let mut dir = -(&h * &g);
        let mut slope = g.dot(&dir);
        if !(slope < 0.0) {
            h = DMatrix::identity(n, n);
            dir = -g.clone();
            slope = -g.norm_squared();
        }
        let mut alpha = if iterations == 0 { (1.0 / g.norm()).min(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial = &x + alpha * &dir;
            let ft = neg(trial.as_slice());
            if ft.is_finite() && ft <= fx + ARMIJO * alpha * slope {
                accepted = Some((trial, ft));
                break;
            }
            alpha *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            if iterations == 0 {
                return fail("no acceptable first step".into(), &start);
            }
            break;
        };
        let g_new = match finite_diff_gradient(&neg, x_new.as_slice(), opts.gradient_step) {
            Ok(g) => DVector::from_vec(g),
            Err(_) => {
                // keep the accepted point; its gradient is unusable
                x = x_new;
                fx = f_new;
                iterations += 1;
                break;
            }
        };
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if iterations == 0 {
                h *= sy / y.norm_squared();
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H+ = H - ρ(s yᵀH + H y sᵀ) + (ρ² yᵀHy + ρ) s sᵀ
            h -= rho * (&s * hy.transpose() + &hy * s.transpose());
            h += (rho * rho * yhy + rho) * (&s * s.transpose());
        }
        let change = fx - f_new;
        x = x_new;
        g = g_new;
        fx = f_new;
        iterations += 1;
        if change <= opts.convergence_tol * (1.0 + fx.abs()) {
            small_changes += 1;
            if small_changes >= 2 {
                converged = true;
                break;
            }
        } else {
            small_changes = 0;
        }
    }
    RestartReport {
        start,
        x: x.iter().copied().collect(),
        value: -fx,
        iterations,
        converged,
        failure: None,
    }
}
