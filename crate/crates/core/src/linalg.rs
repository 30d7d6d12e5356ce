//! Small dense least-squares helpers shared by the solvers.

use nalgebra::{DMatrix, SVD};

/// Minimum-norm least-squares solution of `a x = b` via SVD.
pub(crate) fn lstsq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return DMatrix::zeros(a.ncols(), b.ncols());
    }
    let svd = SVD::new(a.clone(), true, true);
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return DMatrix::zeros(a.ncols(), b.ncols());
    }
    let cutoff = smax * 1e-12 * (a.nrows().max(a.ncols()) as f64);
    svd.solve(b, cutoff)
        .unwrap_or_else(|_| DMatrix::zeros(a.ncols(), b.ncols()))
}

/// Weighted ridge solution of `min Σ_t w_t ‖b_t − a_t x‖² + ρ‖x‖²`, solved
/// as an augmented least-squares problem on `√w`-scaled rows.
pub(crate) fn weighted_ridge(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    weights: &[f64],
    rho: f64,
) -> DMatrix<f64> {
    let (m, p) = a.shape();
    let extra = if rho > 0.0 { p } else { 0 };
    let mut aa = DMatrix::zeros(m + extra, p);
    let mut bb = DMatrix::zeros(m + extra, b.ncols());
    for (t, &w) in weights.iter().enumerate() {
        let s = w.sqrt();
        for j in 0..p {
            aa[(t, j)] = s * a[(t, j)];
        }
        for k in 0..b.ncols() {
            bb[(t, k)] = s * b[(t, k)];
        }
    }
    let r = rho.sqrt();
    for j in 0..extra {
        aa[(m + j, j)] = r;
    }
    lstsq(&aa, &bb)
}

/// Euclidean norm of each row of `y − a x`.
pub(crate) fn row_residual_norms(a: &DMatrix<f64>, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Vec<f64> {
    let resid = y - a * x;
    resid.row_iter().map(|r| r.norm()).collect()
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn lstsq_exact_and_rank_deficient() {
        let a = dmatrix![1.0, 0.0; 1.0, 1.0; 1.0, 2.0];
        let b = dmatrix![1.0; 3.0; 5.0];
        let x = lstsq(&a, &b);
        assert!((x[(0, 0)] - 1.0).abs() < 1e-12 && (x[(1, 0)] - 2.0).abs() < 1e-12);
        // duplicated column: minimum-norm split
        let a = dmatrix![1.0, 1.0; 2.0, 2.0];
        let b = dmatrix![2.0; 4.0];
        let x = lstsq(&a, &b);
        assert!((x[(0, 0)] - 1.0).abs() < 1e-12 && (x[(1, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_ridge_ignores_zero_weights() {
        let a = dmatrix![1.0; 1.0; 1.0];
        let b = dmatrix![2.0; 2.0; 100.0];
        let x = weighted_ridge(&a, &b, &[1.0, 1.0, 0.0], 1e-12);
        assert!((x[(0, 0)] - 2.0).abs() < 1e-9);
        let x = weighted_ridge(&a, &b, &[1e18, 1e18, 1.0], 1e-8);
        assert!((x[(0, 0)] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn median_even_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
