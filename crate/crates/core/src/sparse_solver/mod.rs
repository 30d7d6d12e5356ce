//! Sparse regression kernels.
//!
//! * [`solve_residual_sparse`]: finds coefficients whose residual matrix is
//!   row-sparse, marking which samples one subsystem explains.
//! * [`solve_coefficient_sparse`]: sequential thresholded least squares on the
//!   explained samples.
//! * [`solve_sparse_logistic`]: ℓ1-penalized sigmoid fit of a switching
//!   predicate.

mod logistic;
mod residual;
mod thresholded;

pub use logistic::{sigmoid, sigmoid_fit_objective, solve_sparse_logistic, LogisticConfig};
pub use residual::{solve_residual_sparse, ResidualSplit};
pub use thresholded::solve_coefficient_sparse;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dictionary::DesignMatrix;
use crate::error::{Error, Result};
use crate::linalg;

/// Tuning shared by the regression kernels.
///
/// `epsilon` and `lambda_w` may be left unset; [`SolverConfig::resolve`] then
/// derives them from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// Residual threshold per output (a row is explained when its residual
    /// norm is at most `epsilon * sqrt(n)`). `None` = 3× the median absolute
    /// residual of an unconstrained least-squares fit.
    #[serde(default)]
    pub epsilon: Option<f64>,
    /// Coefficient threshold on `|w_j| * ‖φ_j‖`. `None` = `epsilon`.
    #[serde(default)]
    pub lambda_w: Option<f64>,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Ridge weight, relative to the largest squared column norm.
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    /// Seed for the random restarts of the residual-sparse search; set from
    /// the run seed rather than the config file.
    #[serde(skip)]
    pub seed: u64,
}

fn default_max_iters() -> usize {
    100
}

fn default_tol() -> f64 {
    1e-10
}

fn default_ridge() -> f64 {
    1e-8
}


impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            epsilon: None,
            lambda_w: None,
            max_iters: default_max_iters(),
            tol: default_tol(),
            ridge: default_ridge(),
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self {
            epsilon: Some(epsilon),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name: &str, reason: &str| {
            Err(Error::InvalidParam {
                name: name.into(),
                reason: reason.into(),
            })
        };
        if let Some(e) = self.epsilon {
            if !(e.is_finite() && e >= 0.0) {
                return bad("epsilon", "must be finite and non-negative");
            }
        }
        if let Some(l) = self.lambda_w {
            if !(l.is_finite() && l >= 0.0) {
                return bad("lambda_w", "must be finite and non-negative");
            }
        }
        if self.max_iters == 0 {
            return bad("max_iters", "must be at least 1");
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return bad("tol", "must be positive");
        }
        if !(self.ridge.is_finite() && self.ridge >= 0.0) {
            return bad("ridge", "must be non-negative");
        }
        Ok(())
    }

    /// Copy with `epsilon` and `lambda_w` filled in from `(phi, ybar)`.
    pub fn resolve(&self, phi: &DesignMatrix, ybar: &DMatrix<f64>) -> Result<SolverConfig> {
        self.validate()?;
        let epsilon = match self.epsilon {
            Some(e) => e,
            None => default_epsilon(phi, ybar),
        };
        Ok(SolverConfig {
            epsilon: Some(epsilon),
            lambda_w: Some(self.lambda_w.unwrap_or(epsilon)),
            ..self.clone()
        })
    }

    pub(crate) fn epsilon_value(&self) -> f64 {
        self.epsilon.unwrap_or(0.0)
    }

    pub(crate) fn lambda_w_value(&self) -> f64 {
        self.lambda_w.unwrap_or_else(|| self.epsilon_value())
    }
}

/// Three times the median absolute residual of the least-squares fit of
/// `ybar` on `phi`, floored at `1e-9 · rms(ybar)`.
pub fn default_epsilon(phi: &DesignMatrix, ybar: &DMatrix<f64>) -> f64 {
    let w = linalg::lstsq(&phi.values, ybar);
    let resid = ybar - &phi.values * w;
    let mut abs: Vec<f64> = resid.iter().map(|v| v.abs()).collect();
    let med = linalg::median(&mut abs);
    let rms = if ybar.is_empty() {
        0.0
    } else {
        ybar.norm() / (ybar.len() as f64).sqrt()
    };
    (3.0 * med).max(1e-9 * rms)
}

/// Noise-scale threshold estimated from short contiguous windows.
///
/// Each non-overlapping window of `max(2p, p + 2)` rows gets its own
/// least-squares fit; most windows lie inside a single mode, so the median
/// of their degrees-of-freedom-corrected residual RMS tracks the in-mode
/// misfit rather than the gap between modes. Returns three times that
/// median, floored at `1e-9 · rms(ybar)`. Falls back to [`default_epsilon`]
/// when there are too few rows for two windows.
pub fn local_epsilon(phi: &DesignMatrix, ybar: &DMatrix<f64>) -> f64 {
    let (m, p) = (phi.rows(), phi.cols());
    let n = ybar.ncols().max(1);
    let len = (2 * p).max(p + 2);
    if m < 2 * len {
        return default_epsilon(phi, ybar);
    }
    let mut rms: Vec<f64> = (0..m / len)
        .map(|k| {
            let rows: Vec<usize> = (k * len..(k + 1) * len).collect();
            let x = phi.values.select_rows(&rows);
            let y = ybar.select_rows(&rows);
            let w = linalg::lstsq(&x, &y);
            let ss = (&y - &x * w).norm_squared();
            (ss / ((len - p) * n) as f64).sqrt()
        })
        .collect();
    let med = linalg::median(&mut rms);
    let scale = ybar.norm() / (ybar.len() as f64).sqrt();
    (3.0 * med).max(1e-9 * scale)
}

/// Minimal-subset fits tried by [`exact_fit_epsilon`].
const EXACT_FIT_TRIES: usize = 300;

/// Threshold for data that some mode fits to rounding precision.
///
/// Fits random `p`-row subsets exactly; a subset whose fit leaves at least
/// `max(2p, m / 20)` rows within `1e-7 · rms(ybar)` reveals a noiseless mode.
/// Its inliers are refitted and three times their residual RMS, floored at
/// `1e-9 · rms(ybar)`, is returned. `None` when no subset qualifies, which is
/// the case for noisy data. Unlike [`local_epsilon`] this does not depend on
/// how long each mode dwells.
pub fn exact_fit_epsilon(phi: &DesignMatrix, ybar: &DMatrix<f64>, seed: u64) -> Option<f64> {
    use rand::seq::index::sample;
    use rand::SeedableRng;

    let (m, p) = (phi.rows(), phi.cols());
    let n = ybar.ncols().max(1);
    let need = (2 * p).max(m.div_ceil(20));
    if p == 0 || m < need.max(p + 1) || ybar.is_empty() {
        return None;
    }
    let scale = ybar.norm() / (ybar.len() as f64).sqrt();
    let tiny = 1e-7 * scale;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e9a1);
    for _ in 0..EXACT_FIT_TRIES {
        let rows = sample(&mut rng, m, p).into_vec();
        let w = linalg::lstsq(&phi.values.select_rows(&rows), &ybar.select_rows(&rows));
        let inliers: Vec<usize> = linalg::row_residual_norms(&phi.values, &w, ybar)
            .into_iter()
            .enumerate()
            .filter(|&(_, r)| r <= tiny)
            .map(|(t, _)| t)
            .collect();
        if inliers.len() < need {
            continue;
        }
        let x = phi.values.select_rows(&inliers);
        let y = ybar.select_rows(&inliers);
        let w = linalg::lstsq(&x, &y);
        let rms = (&y - &x * w).norm() / ((inliers.len() * n) as f64).sqrt();
        return Some((3.0 * rms).max(1e-9 * scale));
    }
    None
}
