//! Row-space critic solver.
//!
//! The residual `b̂ - Â x` equals `Z^T W (R - D x) / n`, where `Z` stacks the
//! rows `z_t`, `D` stacks `(1, f_t - f_{t+1})` and `W = diag(ρ)`. Hence
//! `‖b̂ - Â x‖² = u^T G u` with `u = W (R - D x) / n` and `G = Z Z^T`, and
//! the part of `v` orthogonal to the row space of `Δ = F_t - F_{t+1}` only
//! adds to the penalty. Factoring `G = L_G L_G^T` and `Δ Δ^T = L_Δ L_Δ^T`
//! once per dataset (both are policy-independent) turns every solve into a
//! ridge problem whose size is the rank of the data, not the number of
//! features. `v` is recovered as `Δ^T L_Δ (L_Δ^T L_Δ)^{-1} w`.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{transition_weights, CriticFit, Design};
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::linalg::{gram, pivoted_cholesky, solve_spd};
use crate::policy::PolicyParams;
use crate::trajectory::Dataset;

/// Pivot threshold of the rank-revealing factorizations, relative to the
/// largest diagonal entry.
const RANK_TOL: f64 = 1e-13;

/// Splits `n` individuals into `k` folds after a seeded shuffle.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Config(format!("cross validation needs k >= 2 folds, got {k}")));
    }
    if n < k {
        return Err(Error::Config(format!("{n} individuals cannot be split into {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (pos, i) in idx.into_iter().enumerate() {
        folds[pos % k].push(i);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Factorized training subset.
struct Subset {
    rows: Vec<usize>,
    n_individuals: usize,
    /// `L_G^T`, rank x rows.
    z_factor_t: DMatrix<f64>,
    /// `L_Δ`, rows x rank.
    d_factor: DMatrix<f64>,
    /// `L_Δ (L_Δ^T L_Δ)^{-1}`, rows x rank.
    d_coef: DMatrix<f64>,
    full_rank: bool,
}

struct Fold {
    train: Subset,
    val_rows: Vec<usize>,
    val_individuals: usize,
}

/// Running record of every solve's relative normal-equation residual.
#[derive(Debug, Default)]
pub struct SolveStats {
    solves: AtomicUsize,
    max_relative_residual: AtomicU64,
}

impl SolveStats {
    fn record(&self, rel: f64) {
        self.solves.fetch_add(1, Ordering::Relaxed);
        let mut cur = self.max_relative_residual.load(Ordering::Relaxed);
        while rel > f64::from_bits(cur) || rel.is_nan() {
            match self.max_relative_residual.compare_exchange(cur, rel.to_bits(), Ordering::Relaxed, Ordering::Relaxed)
            {
                Ok(_) => break,
                Err(x) => cur = x,
            }
        }
    }

    pub fn solves(&self) -> usize {
        self.solves.load(Ordering::Relaxed)
    }

    pub fn max_relative_residual(&self) -> f64 {
        f64::from_bits(self.max_relative_residual.load(Ordering::Relaxed))
    }
}

/// Critic bound to one dataset and feature map; reusable across policies.
pub struct CriticEngine {
    dataset: Dataset,
    rows: Vec<(usize, usize)>,
    reward: DVector<f64>,
    /// `F_t - F_{t+1}`, transitions x features.
    /// `(f - f')ᵀ`, one column per transition.
    delta_t: DMatrix<f64>,
    kernel: Kernel,
    rows_of: Vec<Vec<usize>>,
    full: Subset,
    folds: Vec<Fold>,
    stats: SolveStats,
}

/// Reduced normal equations of one subset for one policy.
struct Finished {
    v: Vec<f64>,
    residual: f64,
    rhs: f64,
    empirical_value: f64,
}

struct Reduced {
    rhs: DVector<f64>,
    gram: DMatrix<f64>,
    rho: DVector<f64>,
}

impl CriticEngine {
    pub fn new(d: &Dataset, fm: &FeatureMap) -> Result<Self> {
        let Design {
            rows,
            f_now,
            f_next,
            reward,
        } = Design::new(d, fm)?;
        if rows.is_empty() {
            return Err(Error::InvalidData("dataset has no usable transitions".into()));
        }
        let delta = &f_now - f_next;
        let kernel = if f_now.ncols() + 1 < f_now.nrows() {
            Kernel::Features { f_t: f_now.transpose() }
        } else {
            let mut gram_z = &f_now * f_now.transpose();
            gram_z.add_scalar_mut(1.0);
            let gram_d = &delta * delta.transpose();
            Kernel::Gram { gram_z, gram_d }
        };
        let mut rows_of = vec![Vec::new(); d.n_individuals()];
        for (r, &(i, _)) in rows.iter().enumerate() {
            rows_of[i].push(r);
        }
        let mut engine = CriticEngine {
            dataset: d.clone(),
            rows,
            reward,
            delta_t: delta.transpose(),
            kernel,
            rows_of,
            full: Subset::empty(),
            folds: Vec::new(),
            stats: SolveStats::default(),
        };
        let all: Vec<usize> = (0..d.n_individuals()).collect();
        engine.full = engine.subset(&all)?;
        Ok(engine)
    }

    /// Forces the dense Gram kernel; lets tests compare both paths.
    #[cfg(test)]
    pub(crate) fn dense(mut self) -> Result<Self> {
        if let Kernel::Features { f_t } = &self.kernel {
            let mut gram_z = f_t.tr_mul(f_t);
            gram_z.add_scalar_mut(1.0);
            let gram_d = self.delta_t.tr_mul(&self.delta_t);
            self.kernel = Kernel::Gram { gram_z, gram_d };
            let all: Vec<usize> = (0..self.dataset.n_individuals()).collect();
            self.full = self.subset(&all)?;
        }
        Ok(self)
    }

    /// Seeded k-fold split of the individuals.
    pub fn with_folds(self, k: usize, seed: u64) -> Result<Self> {
        let folds = fold_assignment(self.dataset.n_individuals(), k, seed)?;
        self.with_fold_sets(folds)
    }

    /// Explicit folds, each a list of individual indices.
    pub fn with_fold_sets(mut self, folds: Vec<Vec<usize>>) -> Result<Self> {
        if folds.len() < 2 {
            return Err(Error::Config("cross validation needs at least two folds".into()));
        }
        let mut built = Vec::with_capacity(folds.len());
        for (k, val) in folds.iter().enumerate() {
            if val.is_empty() {
                return Err(Error::Config(format!("fold {k} is empty")));
            }
            let train: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != k)
                .flat_map(|(_, f)| f.iter().copied())
                .collect();
            built.push(Fold {
                train: self.subset(&train)?,
                val_rows: val.iter().flat_map(|&i| self.rows_of[i].iter().copied()).collect(),
                val_individuals: val.len(),
            });
        }
        self.folds = built;
        Ok(self)
    }

    pub fn feature_dim(&self) -> usize {
        self.delta_t.nrows()
    }

    pub fn n_transitions(&self) -> usize {
        self.rows.len()
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn stats(&self) -> &SolveStats {
        &self.stats
    }

    fn subset(&self, individuals: &[usize]) -> Result<Subset> {
        let rows: Vec<usize> = individuals.iter().flat_map(|&i| self.rows_of[i].iter().copied()).collect();
        if rows.is_empty() {
            return Err(Error::InvalidData("subset has no transitions".into()));
        }
        let (z_factor_t, d_factor) = match &self.kernel {
            Kernel::Gram { gram_z, gram_d } => {
                let g = gram_z.select_rows(&rows).select_columns(&rows);
                let h = gram_d.select_rows(&rows).select_columns(&rows);
                (pivoted_cholesky(&g, RANK_TOL).transpose(), pivoted_cholesky(&h, RANK_TOL))
            }
            Kernel::Features { f_t } => {
                let z = f_t.select_columns(&rows).insert_row(0, 1.0).transpose();
                let d = self.delta_t.select_columns(&rows).transpose();
                (thin_factor(&z).transpose(), thin_factor(&d))
            }
        };
        let d_coef = if d_factor.ncols() == 0 {
            d_factor.clone()
        } else {
            let ltl = d_factor.transpose() * &d_factor;
            let inv = ltl
                .cholesky()
                .ok_or_else(|| Error::Numerical("row-space factor is not of full column rank".into()))?
                .inverse();
            &d_factor * inv
        };
        let p = self.feature_dim();
        let full_rank = d_factor.ncols() == p && z_factor_t.nrows() == p + 1;
        Ok(Subset {
            rows,
            n_individuals: individuals.len(),
            z_factor_t,
            d_factor,
            d_coef,
            full_rank,
        })
    }

    fn reduce(&self, s: &Subset, rho_all: &DVector<f64>) -> Reduced {
        let n = s.n_individuals as f64;
        let m = s.rows.len();
        let r = s.d_factor.ncols();
        let rho = DVector::from_iterator(m, s.rows.iter().map(|&i| rho_all[i]));
        let w = &rho / n;
        let mut y = DMatrix::zeros(m, r + 1);
        y.set_column(0, &w);
        for c in 0..r {
            y.column_mut(c + 1).zip_zip_apply(&s.d_factor.column(c), &w, |out, l, wk| *out = wk * l);
        }
        let target = DVector::from_iterator(m, s.rows.iter().zip(w.iter()).map(|(&row, wk)| wk * self.reward[row]));
        let e = &s.z_factor_t * y;
        let target = &s.z_factor_t * target;
        let gram = gram(&e);
        let rhs = e.transpose() * target;
        Reduced { rhs, gram, rho }
    }

    fn solve_reduced(&self, s: &Subset, red: &Reduced, lambda: f64) -> Result<(DVector<f64>, f64)> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("lambda_c = {lambda} must be finite and >= 0")));
        }
        if lambda == 0.0 && !s.full_rank {
            return Err(Error::SingularSystem { lambda });
        }
        let mut m = red.gram.clone();
        for i in 1..m.nrows() {
            m[(i, i)] += lambda;
        }
        let sol = solve_spd(&m, &red.rhs, lambda > 0.0).ok_or(Error::SingularSystem { lambda })?;
        Ok((sol.x, sol.condition))
    }

    /// Recovers `v` and checks the normal equations of the full problem.
    ///
    /// With `u = W (R - η - Δ v) / n` and `Z̃ = (1, F_t)`, the residual
    /// `(Â^T Â + λĨ)(η, v) - Â^T b̂` equals `(-1^T q, Δ^T (λβ - q))` with
    /// `q = W Z̃ Z̃^T u / n` and `v = Δ^T β`, and `Â^T b̂ = (1^T s, Δ^T s)` with
    /// `s = W Z̃ Z̃^T W R / n²`. The products with `Δ^T` are taken against
    /// the feature matrix itself, so the check does not rely on the
    /// truncated factors used by the solve.
    fn finish(&self, s: &Subset, rho: &DVector<f64>, eta: f64, w: &DVector<f64>, lambda: f64) -> Finished {
        let n = s.n_individuals as f64;
        let m = s.rows.len();
        let full = m == self.n_transitions();
        let reward = DVector::from_iterator(m, s.rows.iter().map(|&r| self.reward[r]));
        let beta = &s.d_coef * w;
        let dv = &s.d_factor * w;
        let u = (&reward - dv.add_scalar(eta)).component_mul(rho) / n;
        let wr = reward.component_mul(rho);
        let mut gz = DMatrix::zeros(m, 2);
        gz.set_column(0, &u);
        gz.set_column(1, &wr);
        let gz = self.kernel.apply_z(&s.rows, full, &gz);
        let q = gz.column(0).component_mul(rho) / n;
        let sv = gz.column(1).component_mul(rho) / (n * n);
        let mut cols = DMatrix::zeros(m, 3);
        cols.set_column(0, &beta);
        cols.set_column(1, &(lambda * &beta - &q));
        cols.set_column(2, &sv);
        let prods = if full {
            &self.delta_t * &cols
        } else {
            self.delta_t.select_columns(&s.rows) * &cols
        };
        let residual = (q.sum().powi(2) + prods.column(1).norm_squared()).sqrt();
        let rhs = (sv.sum().powi(2) + prods.column(2).norm_squared()).sqrt();
        Finished {
            v: prods.column(0).iter().copied().collect(),
            residual,
            rhs,
            // P_n[Σ ρ (R - Δv)]
            empirical_value: rho.dot(&(&reward - &dv)) / n,
        }
    }

    fn fit_subset(&self, s: &Subset, rho_all: &DVector<f64>, lambda: f64) -> Result<CriticFit> {
        let red = self.reduce(s, rho_all);
        let (x, condition) = self.solve_reduced(s, &red, lambda)?;
        let eta = x[0];
        if !eta.is_finite() {
            return Err(Error::Numerical("critic produced a non-finite average reward".into()));
        }
        let w = x.rows(1, x.len() - 1).into_owned();
        let done = self.finish(s, &red.rho, eta, &w, lambda);
        self.stats.record(done.residual / (1.0 + done.rhs));
        Ok(CriticFit {
            eta_hat: eta,
            v_hat: done.v,
            lambda_c: lambda,
            residual_norm: done.residual,
            rhs_norm: done.rhs,
            condition_estimate: condition,
            cv_table: Vec::new(),
            empirical_value: done.empirical_value,
        })
    }

    pub fn weights(&self, policy: &PolicyParams) -> Result<DVector<f64>> {
        transition_weights(&self.rows, &self.dataset, policy)
    }

    /// Penalized solve on the whole dataset at a fixed `λ_c`.
    pub fn fit(&self, policy: &PolicyParams, lambda: f64) -> Result<CriticFit> {
        let rho = self.weights(policy)?;
        self.fit_subset(&self.full, &rho, lambda)
    }

    /// Summed held-out score `‖b̂_val - Â_val (η, v)‖²` for every grid value;
    /// returns the minimizer (ties go to the larger `λ`) and the table.
    pub fn cross_validate(&self, policy: &PolicyParams, grid: &[f64]) -> Result<(f64, Vec<(f64, f64)>)> {
        if grid.is_empty() {
            return Err(Error::Config("lambda grid is empty".into()));
        }
        if let Some(bad) = grid.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return Err(Error::Config(format!("lambda grid value {bad} must be finite and >= 0")));
        }
        if self.folds.is_empty() {
            return Err(Error::Config("engine has no folds; call with_folds first".into()));
        }
        let rho = self.weights(policy)?;
        let mut scores = vec![0.0; grid.len()];
        let mut scale = 0.0;
        for fold in &self.folds {
            let red = self.reduce(&fold.train, &rho);
            let n_val = fold.val_individuals as f64;
            let val_target: DVector<f64> = DVector::from_iterator(
                fold.val_rows.len(),
                fold.val_rows.iter().map(|&r| rho[r] * self.reward[r] / n_val),
            );
            let mv = fold.val_rows.len();
            let mut sols = Vec::with_capacity(grid.len());
            let mut betas = DMatrix::zeros(fold.train.rows.len(), grid.len());
            for (j, &lambda) in grid.iter().enumerate() {
                let (x, _) = self.solve_reduced(&fold.train, &red, lambda)?;
                let w = x.rows(1, x.len() - 1).into_owned();
                betas.set_column(j, &(&fold.train.d_coef * &w));
                sols.push(x[0]);
            }
            let dvs = self.kernel.cross_d(&self.delta_t, &fold.val_rows, &fold.train.rows, &betas);
            let mut us = DMatrix::zeros(mv, grid.len() + 1);
            us.set_column(0, &val_target);
            for (j, eta) in sols.iter().enumerate() {
                for (k, &r) in fold.val_rows.iter().enumerate() {
                    us[(k, j + 1)] = rho[r] * (self.reward[r] - eta - dvs[(k, j)]) / n_val;
                }
            }
            let gus = self.kernel.apply_z(&fold.val_rows, false, &us);
            scale += us.column(0).dot(&gus.column(0));
            for (j, score) in scores.iter_mut().enumerate() {
                *score += us.column(j + 1).dot(&gus.column(j + 1));
            }
        }
        let table: Vec<(f64, f64)> = grid.iter().copied().zip(scores.iter().copied()).collect();
        let best = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let tie = best + 1e-12 * scale;
        let lambda = table
            .iter()
            .filter(|(_, s)| *s <= tie)
            .map(|(l, _)| *l)
            .fold(f64::NEG_INFINITY, f64::max);
        Ok((lambda, table))
    }

    /// Cross-validated `λ_c` followed by the full-data solve.
    pub fn critic(&self, policy: &PolicyParams, grid: &[f64]) -> Result<CriticFit> {
        let (lambda, table) = self.cross_validate(policy, grid)?;
        let mut fit = self.fit(policy, lambda)?;
        fit.cv_table = table;
        Ok(fit)
    }
}

/// Row-space products `Z̃ Z̃ᵀ` and `Δ Δᵀ`, held as dense Gram matrices when
/// features outnumber transitions and applied through the features otherwise.
enum Kernel {
    Gram { gram_z: DMatrix<f64>, gram_d: DMatrix<f64> },
    Features { f_t: DMatrix<f64> },
}

impl Kernel {
    /// `G[rows, rows] x`.
    fn apply_z(&self, rows: &[usize], full: bool, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Kernel::Gram { gram_z, .. } if full => gram_z * x,
            Kernel::Gram { gram_z, .. } => gram_z.select_rows(rows).select_columns(rows) * x,
            Kernel::Features { f_t } => {
                let f = if full {
                    std::borrow::Cow::Borrowed(f_t)
                } else {
                    std::borrow::Cow::Owned(f_t.select_columns(rows))
                };
                let mut out = f.tr_mul(&(&*f * x));
                for (mut col, sum) in out.column_iter_mut().zip(x.column_iter().map(|c| c.sum())) {
                    col.add_scalar_mut(sum);
                }
                out
            }
        }
    }

    /// `H[a, b] x`.
    fn cross_d(&self, delta_t: &DMatrix<f64>, a: &[usize], b: &[usize], x: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Kernel::Gram { gram_d, .. } => gram_d.select_rows(a).select_columns(b) * x,
            Kernel::Features { .. } => delta_t.select_columns(a).tr_mul(&(delta_t.select_columns(b) * x)),
        }
    }
}

/// Full-column-rank `L` with `L Lᵀ = X Xᵀ` up to the rank tolerance, from the
/// eigendecomposition of the small Gram `Xᵀ X`.
fn thin_factor(x: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = x.tr_mul(x).symmetric_eigen();
    let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&i| top > 0.0 && eig.eigenvalues[i] > RANK_TOL * top)
        .collect();
    x * eig.eigenvectors.select_columns(&keep)
}

impl Subset {
    fn empty() -> Subset {
        Subset {
            rows: Vec::new(),
            n_individuals: 0,
            z_factor_t: DMatrix::zeros(0, 0),
            d_factor: DMatrix::zeros(0, 0),
            d_coef: DMatrix::zeros(0, 0),
            full_rank: false,
        }
    }
}
