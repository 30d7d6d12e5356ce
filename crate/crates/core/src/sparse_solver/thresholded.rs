use nalgebra::{DMatrix, DVector};

use super::SolverConfig;
use crate::dictionary::DesignMatrix;
use crate::error::{Error, Result};
use crate::linalg::lstsq;

/// Sequential thresholded least squares, one output column at a time.
///
/// Alternates least squares on the current support with removal of every
/// term whose contribution `|w_j| · ‖φ_j‖` falls below `lambda_w`, until the
/// support stops changing. Returns raw-unit coefficients `p × n`.
pub fn solve_coefficient_sparse(
    phi_sub: &DesignMatrix,
    ybar_sub: &DMatrix<f64>,
    cfg: &SolverConfig,
) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    if phi_sub.rows() == 0 {
        return Err(Error::EmptyRows);
    }
    if ybar_sub.nrows() != phi_sub.rows() {
        return Err(Error::DimensionMismatch(format!(
            "design has {} rows, targets have {}",
            phi_sub.rows(),
            ybar_sub.nrows()
        )));
    }
    let raw = phi_sub.denormalized();
    let p = raw.cols();
    let lambda = cfg.lambda_w_value();
    let scales: Vec<f64> = (0..p).map(|c| raw.values.column(c).norm()).collect();
    let mut normalized = raw.values.clone();
    for (c, &s) in scales.iter().enumerate() {
        if s > 0.0 {
            normalized.column_mut(c).unscale_mut(s);
        }
    }

    let mut w = DMatrix::zeros(p, ybar_sub.ncols());
    for k in 0..ybar_sub.ncols() {
        let target = DMatrix::from_column_slice(raw.rows(), 1, ybar_sub.column(k).as_slice());
        let mut support: Vec<usize> = (0..p).filter(|&c| scales[c] > 0.0).collect();
        let mut coef = DVector::zeros(0);
        for _ in 0..cfg.max_iters.max(p + 1) {
            if support.is_empty() {
                break;
            }
            let fit = lstsq(&normalized.select_columns(&support), &target);
            coef = fit.column(0).into_owned();
            let next: Vec<usize> = support
                .iter()
                .zip(coef.iter())
                .filter(|(_, &c)| c.abs() >= lambda)
                .map(|(&j, _)| j)
                .collect();
            if next == support {
                break;
            }
            support = next;
            coef = DVector::zeros(0);
        }
        if coef.len() != support.len() {
            // support changed on the last pass; refit once
            if !support.is_empty() {
                let fit = lstsq(&normalized.select_columns(&support), &target);
                coef = fit.column(0).into_owned();
            }
        }
        for (&j, &c) in support.iter().zip(coef.iter()) {
            w[(j, k)] = c / scales[j];
        }
        if support.is_empty() && target.amax() > 0.0 {
            tracing::warn!(output = k, "all coefficients thresholded to zero");
        }
    }
    Ok(w)
}
