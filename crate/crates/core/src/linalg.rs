//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Rank-revealing (diagonally pivoted) Cholesky factor of a symmetric PSD
/// matrix: returns `L` (n x r, rows in the original order) with
/// `A ≈ L L^T`. Pivoting stops once every remaining Schur-complement
/// diagonal is at most `rel_tol` times the largest diagonal of `A`.
pub fn pivoted_cholesky(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "pivoted_cholesky needs a square matrix");
    let mut diag: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    let max_diag = diag.iter().copied().fold(0.0, f64::max);
    let mut l = DMatrix::<f64>::zeros(n, n);
    if max_diag <= 0.0 {
        return l.columns(0, 0).into_owned();
    }
    let stop = rel_tol * max_diag;
    let mut used = vec![false; n];
    let mut rank = 0;
    for k in 0..n {
        let (j, dj) = diag
            .iter()
            .enumerate()
            .filter(|(i, _)| !used[*i])
            .fold((usize::MAX, f64::NEG_INFINITY), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
        if j == usize::MAX || dj <= stop {
            break;
        }
        used[j] = true;
        let pivot = dj.sqrt();
        // column k = (A[:, j] - L[:, :k] L[j, :k]^T) / pivot
        let mut col = a.column(j).into_owned();
        if k > 0 {
            let lj = l.row(j).columns(0, k).transpose();
            col.gemv(-1.0, &l.columns(0, k), &lj, 1.0);
        }
        col /= pivot;
        for i in 0..n {
            if used[i] && i != j {
                col[i] = 0.0;
            }
        }
        col[j] = pivot;
        for i in 0..n {
            if !used[i] {
                diag[i] -= col[i] * col[i];
            }
        }
        l.set_column(k, &col);
        rank = k + 1;
    }
    l.columns(0, rank).into_owned()
}

const BLOCK: usize = 64;

/// Lower Cholesky factor of a symmetric positive definite matrix, computed
/// blockwise so that most of the work runs on matrix-matrix products.
/// Returns `None` when a pivot is not positive.
pub fn cholesky_lower(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    let mut a = m.clone();
    let mut k = 0;
    while k < n {
        let kb = BLOCK.min(n - k);
        let l11 = a.view((k, k), (kb, kb)).into_owned().cholesky()?.unpack();
        a.view_mut((k, k), (kb, kb)).copy_from(&l11);
        let rest = n - k - kb;
        if rest > 0 {
            let inv_t = l11.solve_lower_triangular(&DMatrix::identity(kb, kb))?.transpose();
            let l21 = a.view((k + kb, k), (rest, kb)) * inv_t;
            a.view_mut((k + kb, k), (rest, kb)).copy_from(&l21);
            // lower triangle of the trailing block only
            let mut j = 0;
            while j < rest {
                let jb = BLOCK.min(rest - j);
                let lower = l21.rows(j, rest - j);
                let top = l21.rows(j, jb).transpose();
                let mut target = a.view_mut((k + kb + j, k + kb + j), (rest - j, jb));
                target.gemm(-1.0, &lower, &top, 1.0);
                j += jb;
            }
        }
        k += kb;
    }
    a.fill_upper_triangle(0.0, 1);
    if a.iter().all(|x| x.is_finite()) {
        Some(a)
    } else {
        None
    }
}

fn cholesky_solve(l: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let y = l.solve_lower_triangular(rhs).expect("non-singular factor");
    l.tr_solve_lower_triangular(&y).expect("non-singular factor")
}

/// Solution of a symmetric positive (semi)definite system together with a
/// condition estimate.
pub struct SpdSolution {
    pub x: DVector<f64>,
    pub condition: f64,
    pub used_fallback: bool,
}

/// Solves `M x = rhs` for symmetric `M` by Cholesky with one step of
/// iterative refinement, falling back to an SVD least-squares solve when the
/// factorization fails. With `allow_singular = false` a failed or hopelessly
/// conditioned factorization is reported as `None`.
pub fn solve_spd(m: &DMatrix<f64>, rhs: &DVector<f64>, allow_singular: bool) -> Option<SpdSolution> {
    if let Some(l) = cholesky_lower(m) {
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..l.nrows() {
            lo = lo.min(l[(i, i)].abs());
            hi = hi.max(l[(i, i)].abs());
        }
        let condition = if lo > 0.0 { (hi / lo).powi(2) } else { f64::INFINITY };
        if allow_singular || condition < 1e14 {
            let mut x = cholesky_solve(&l, rhs);
            let r = rhs - m * &x;
            x += cholesky_solve(&l, &r);
            return Some(SpdSolution {
                x,
                condition,
                used_fallback: false,
            });
        }
        return None;
    }
    if !allow_singular {
        return None;
    }
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let x = svd.solve(rhs, smax * 1e-15).ok()?;
    let smin = svd.singular_values.min();
    Some(SpdSolution {
        x,
        condition: if smin > 0.0 { smax / smin } else { f64::INFINITY },
        used_fallback: true,
    })
}

/// `E^T E`, computing each block column of the lower triangle once and
/// mirroring it.
pub fn gram(e: &DMatrix<f64>) -> DMatrix<f64> {
    let n = e.ncols();
    let mut g = DMatrix::zeros(n, n);
    let mut j = 0;
    while j < n {
        let jb = (2 * BLOCK).min(n - j);
        let left = e.columns(j, n - j).transpose();
        let block = left * e.columns(j, jb);
        g.view_mut((j, j), (n - j, jb)).copy_from(&block);
        j += jb;
    }
    g.fill_upper_triangle_with_lower_triangle();
    g
}

/// `A^T B` through an explicit transpose so the product runs on the blocked
/// GEMM kernel.
pub fn at_b(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.transpose() * b
}

pub fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{what} has non-finite entries")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pivoted_cholesky_recovers_low_rank() {
        let b = DMatrix::from_fn(8, 3, |i, j| ((i * 3 + j * 5) % 7) as f64 - 2.5);
        let a = &b * b.transpose();
        let l = pivoted_cholesky(&a, 1e-12);
        assert_eq!(l.ncols(), 3);
        assert!((&l * l.transpose() - &a).norm() < 1e-10 * a.norm());
    }

    #[test]
    fn pivoted_cholesky_full_rank_and_zero() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let l = pivoted_cholesky(&a, 1e-12);
        assert_eq!(l.ncols(), 2);
        assert!((&l * l.transpose() - &a).norm() < 1e-12);
        assert_eq!(pivoted_cholesky(&DMatrix::zeros(3, 3), 1e-12).ncols(), 0);
    }

    #[test]
    fn blocked_cholesky_matches_definition() {
        let b = DMatrix::from_fn(150, 150, |i, j| (((i * 31 + j * 17) % 23) as f64 - 11.0) / 7.0);
        let mut a = &b * b.transpose();
        for i in 0..150 {
            a[(i, i)] += 1.0;
        }
        let l = cholesky_lower(&a).unwrap();
        assert!((&l * l.transpose() - &a).norm() < 1e-10 * a.norm());
        assert!((0..150).all(|i| (i + 1..150).all(|j| l[(i, j)] == 0.0)));
        let reference = a.clone().cholesky().unwrap().unpack();
        assert!((l - reference).norm() < 1e-9);
        let mut indefinite = DMatrix::identity(70, 70);
        indefinite[(66, 66)] = -1.0;
        assert!(cholesky_lower(&indefinite).is_none());
    }

    #[test]
    fn blocked_gram() {
        let e = DMatrix::from_fn(90, 300, |i, j| ((i * 13 + j * 7) % 19) as f64 - 9.0);
        assert!((gram(&e) - e.transpose() * &e).norm() < 1e-9);
    }

    #[test]
    fn spd_solve_and_singular() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let rhs = DVector::from_vec(vec![3.0, 3.0]);
        let s = solve_spd(&m, &rhs, false).unwrap();
        assert!((s.x[0] - 1.0).abs() < 1e-14 && (s.x[1] - 1.0).abs() < 1e-14);
        assert!((s.condition - 3.0).abs() < 2.0);

        let sing = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(solve_spd(&sing, &rhs, false).is_none());
        let ls = solve_spd(&sing, &DVector::from_vec(vec![2.0, 2.0]), true).unwrap();
        assert!(((&sing * &ls.x)[0] - 2.0).abs() < 1e-10);
    }
}
