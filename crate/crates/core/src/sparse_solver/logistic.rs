use std::collections::HashSet;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dictionary::DesignMatrix;
use crate::error::{Error, Result};

/// Inner-loop limits for [`solve_sparse_logistic`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogisticConfig {
    #[serde(default = "default_outer")]
    pub max_newton_iters: usize,
    #[serde(default = "default_inner")]
    pub max_cd_sweeps: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Backward elimination of terms that do not change weighted training
    /// decisions.
    #[serde(default = "default_prune")]
    pub prune: bool,
}

fn default_outer() -> usize {
    200
}

fn default_inner() -> usize {
    2000
}

fn default_tol() -> f64 {
    1e-9
}

fn default_prune() -> bool {
    true
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            max_newton_iters: default_outer(),
            max_cd_sweeps: default_inner(),
            tol: default_tol(),
            prune: default_prune(),
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Weighted squared sigmoid misfit plus ℓ1 penalty, the objective the
/// transition fit targets: `Σ w_t (target_t − σ(Ψ_t v))² + λ ‖v‖₁`.
pub fn sigmoid_fit_objective(
    psi: &DesignMatrix,
    targets: &[bool],
    weights: &[f64],
    v: &DVector<f64>,
    lambda_v: f64,
) -> f64 {
    let eta = &psi.values * v;
    let fit: f64 = targets
        .iter()
        .zip(weights)
        .zip(eta.iter())
        .map(|((&y, &w), &e)| w * (f64::from(u8::from(y)) - sigmoid(e)).powi(2))
        .sum();
    fit + lambda_v * v.iter().map(|c| c.abs()).sum::<f64>()
}

/// Standardized view of the active (non-constant, non-degenerate) columns.
struct Problem<'a> {
    x: Vec<Vec<f64>>,
    y: &'a [f64],
    w: Vec<f64>,
    intercept: bool,
}

struct Fit {
    b: f64,
    beta: Vec<f64>,
}

impl Problem<'_> {
    fn eta(&self, fit: &Fit) -> Vec<f64> {
        let mut eta = vec![fit.b; self.y.len()];
        for (col, &bj) in self.x.iter().zip(&fit.beta) {
            if bj != 0.0 {
                for (e, &xv) in eta.iter_mut().zip(col) {
                    *e += bj * xv;
                }
            }
        }
        eta
    }

    fn objective(&self, fit: &Fit, lambda: f64) -> f64 {
        let eta = self.eta(fit);
        let loss: f64 = eta
            .iter()
            .zip(self.y)
            .zip(&self.w)
            .map(|((&e, &y), &w)| w * (softplus(e) - y * e))
            .sum();
        loss + lambda * fit.beta.iter().map(|b| b.abs()).sum::<f64>()
    }

    /// Proximal Newton: quadratic model of the weighted log-loss, solved by
    /// coordinate descent with soft-thresholding, then a backtracking step on
    /// the true objective.
    fn solve(&self, lambda: f64, cfg: &LogisticConfig) -> Fit {
        let p = self.x.len();
        let mut fit = Fit {
            b: 0.0,
            beta: vec![0.0; p],
        };
        if self.intercept {
            let pos: f64 = self.y.iter().zip(&self.w).map(|(y, w)| y * w).sum();
            let total: f64 = self.w.iter().sum();
            let rate = (pos / total).clamp(1e-6, 1.0 - 1e-6);
            fit.b = (rate / (1.0 - rate)).ln();
        }
        let mut f_old = self.objective(&fit, lambda);
        for _ in 0..cfg.max_newton_iters {
            let eta = self.eta(&fit);
            let mut h = Vec::with_capacity(eta.len());
            let mut z = Vec::with_capacity(eta.len());
            for ((&e, &y), &w) in eta.iter().zip(self.y).zip(&self.w) {
                let pr = sigmoid(e);
                let curv = (pr * (1.0 - pr)).max(1e-5);
                h.push(w * curv);
                z.push(e + (y - pr) / curv);
            }
            let mut next = Fit {
                b: fit.b,
                beta: fit.beta.clone(),
            };
            // residual of the working response
            let mut r: Vec<f64> = z.iter().zip(&eta).map(|(zv, e)| zv - e).collect();
            let hsum: f64 = h.iter().sum();
            let col_curv: Vec<f64> = self
                .x
                .iter()
                .map(|col| col.iter().zip(&h).map(|(x, hv)| hv * x * x).sum())
                .collect();
            for _ in 0..cfg.max_cd_sweeps {
                let mut max_delta: f64 = 0.0;
                if self.intercept && hsum > 0.0 {
                    let delta = r.iter().zip(&h).map(|(rv, hv)| rv * hv).sum::<f64>() / hsum;
                    if delta != 0.0 {
                        next.b += delta;
                        for rv in r.iter_mut() {
                            *rv -= delta;
                        }
                        max_delta = max_delta.max(delta.abs());
                    }
                }
                for j in 0..p {
                    if col_curv[j] <= 0.0 {
                        continue;
                    }
                    let col = &self.x[j];
                    let grad: f64 = col
                        .iter()
                        .zip(&r)
                        .zip(&h)
                        .map(|((x, rv), hv)| hv * x * rv)
                        .sum::<f64>()
                        + col_curv[j] * next.beta[j];
                    let updated = soft_threshold(grad, lambda) / col_curv[j];
                    let delta = updated - next.beta[j];
                    if delta != 0.0 {
                        for (rv, x) in r.iter_mut().zip(col) {
                            *rv -= delta * x;
                        }
                        next.beta[j] = updated;
                        max_delta = max_delta.max(delta.abs());
                    }
                }
                if max_delta < cfg.tol {
                    break;
                }
            }

            // backtracking on the convex objective
            let proposal = next;
            let mut step = 1.0;
            let mut candidate = Fit {
                b: proposal.b,
                beta: proposal.beta.clone(),
            };
            let mut f_new = self.objective(&candidate, lambda);
            while f_new > f_old && step > 1e-8 {
                step *= 0.5;
                candidate = Fit {
                    b: fit.b + step * (proposal.b - fit.b),
                    beta: fit
                        .beta
                        .iter()
                        .zip(&proposal.beta)
                        .map(|(o, c)| o + step * (c - o))
                        .collect(),
                };
                f_new = self.objective(&candidate, lambda);
            }
            if f_new > f_old {
                break;
            }
            let change = (candidate.b - fit.b)
                .abs()
                .max(
                    candidate
                        .beta
                        .iter()
                        .zip(&fit.beta)
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max),
                );
            let scale = fit.beta.iter().fold(fit.b.abs(), |m, b| m.max(b.abs())).max(1.0);
            let gain = f_old - f_new;
            fit = candidate;
            f_old = f_new;
            if change < cfg.tol * scale || gain <= 1e-13 * f_old.max(1e-300) {
                break;
            }
        }
        fit
    }
}

fn soft_threshold(x: f64, lambda: f64) -> f64 {
    if x > lambda {
        x - lambda
    } else if x < -lambda {
        x + lambda
    } else {
        0.0
    }
}

/// Fits a sparse predicate `Ψ v` whose sigmoid matches binary `targets` on
/// rows with positive `weights`.
///
/// Uses a convex surrogate of the squared sigmoid misfit: weighted logistic
/// loss (normalized by the total weight) with an ℓ1 penalty `lambda_v` on
/// standardized non-constant coefficients and an unpenalized constant term.
/// With [`LogisticConfig::prune`], terms are then removed from the most
/// complex down whenever refitting without them keeps every weighted
/// training decision. With both classes present, every fit has its constant
/// recentred along the fitted direction to minimize the weighted
/// misclassification. The returned `v` is in raw dictionary units; its scale
/// carries no meaning beyond the sign of `Ψ v`.
pub fn solve_sparse_logistic(
    psi: &DesignMatrix,
    targets: &[bool],
    weights: &[f64],
    lambda_v: f64,
    cfg: &LogisticConfig,
) -> Result<DVector<f64>> {
    let m = psi.rows();
    if targets.len() != m || weights.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "Ψ has {m} rows, {} targets, {} weights",
            targets.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidInput("weights must be finite and non-negative".into()));
    }
    if !(lambda_v.is_finite() && lambda_v >= 0.0) {
        return Err(Error::InvalidParam {
            name: "lambda_v".into(),
            reason: "must be finite and non-negative".into(),
        });
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::EmptyRows);
    }
    let raw = psi.denormalized();
    check_expressible(&raw, targets, weights)?;

    let all: Vec<usize> = (0..raw.cols()).collect();
    let fit = |columns: &[usize]| {
        calibrate_offset(&raw, fit_columns(&raw, targets, weights, lambda_v, columns, cfg), targets, weights)
    };
    let mut v = fit(&all);
    if cfg.prune {
        let errors = |v: &DVector<f64>| misclassified(&raw, targets, weights, v);
        let mut best_err = errors(&v);
        let constant = raw.library.constant_index();
        let mut active: Vec<usize> = all.clone();
        for j in (0..raw.cols()).rev() {
            if Some(j) == constant || !active.contains(&j) {
                continue;
            }
            let trial: Vec<usize> = active.iter().copied().filter(|&c| c != j).collect();
            if trial.is_empty() {
                continue;
            }
            let candidate = fit(&trial);
            let err = errors(&candidate);
            if err <= best_err {
                active = trial;
                v = candidate;
                best_err = err;
            }
        }
    }
    Ok(v)
}

/// Moves the constant of `v` to the cut along `Ψ v` with the least weighted
/// misclassification, centred in the widest gap among equally good cuts.
/// The penalized fit leans toward the heavier class; this restores a
/// max-margin offset. `v` is returned unchanged without a constant column or
/// when one class is absent.
fn calibrate_offset(psi: &DesignMatrix, mut v: DVector<f64>, targets: &[bool], weights: &[f64]) -> DVector<f64> {
    let Some(c) = psi.library.constant_index() else {
        return v;
    };
    let col = psi.values.column(c);
    if col[0] == 0.0 || col.iter().any(|&x| x != col[0]) {
        return v;
    }
    let mut scored: Vec<(f64, bool, f64)> = (0..psi.rows())
        .filter(|&r| weights[r] > 0.0)
        .map(|r| ((psi.values.row(r) * &v)[0] - v[c] * col[r], targets[r], weights[r]))
        .collect();
    if !(scored.iter().any(|s| s.1) && scored.iter().any(|s| !s.1)) {
        return v;
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    // cut k predicts positive for scored[k..]
    let mut err: f64 = scored.iter().filter(|s| !s.1).map(|s| s.2).sum();
    let tol = 1e-12 * scored.iter().map(|s| s.2).sum::<f64>();
    let n = scored.len();
    let mut best: Option<(f64, f64, f64)> = None;
    for k in 0..=n {
        if k > 0 {
            let (_, positive, w) = scored[k - 1];
            err += if positive { w } else { -w };
        }
        if k > 0 && k < n && scored[k].0 == scored[k - 1].0 {
            continue;
        }
        let (gap, cut) = match k {
            0 => (0.0, scored[0].0 - 1.0),
            k if k == n => (0.0, scored[n - 1].0 + 1.0),
            k => (scored[k].0 - scored[k - 1].0, 0.5 * (scored[k].0 + scored[k - 1].0)),
        };
        let better = match best {
            None => true,
            Some((e, g, _)) => err < e - tol || (err <= e + tol && gap > g),
        };
        if better {
            best = Some((err, gap, cut));
        }
    }
    let (_, _, cut) = best.expect("at least one cut");
    v[c] = -cut / col[0];
    v
}

/// Positive-weight rows whose decision disagrees with the target, weighted.
pub(crate) fn misclassified(
    psi: &DesignMatrix,
    targets: &[bool],
    weights: &[f64],
    v: &DVector<f64>,
) -> f64 {
    let eta = &psi.values * v;
    eta.iter()
        .zip(targets)
        .zip(weights)
        .filter(|((&e, &y), &w)| w > 0.0 && (e >= 0.0) != y)
        .map(|(_, &w)| w)
        .sum()
}

fn check_expressible(psi: &DesignMatrix, targets: &[bool], weights: &[f64]) -> Result<()> {
    let key = |t: usize| -> Vec<u64> { psi.values.row(t).iter().map(|v| v.to_bits()).collect() };
    let negatives: HashSet<Vec<u64>> = (0..targets.len())
        .filter(|&t| weights[t] > 0.0 && !targets[t])
        .map(key)
        .collect();
    let mut positives = (0..targets.len()).filter(|&t| weights[t] > 0.0 && targets[t]).peekable();
    if negatives.is_empty() || positives.peek().is_none() {
        return Ok(());
    }
    if positives.all(|t| negatives.contains(&key(t))) {
        return Err(Error::NotExpressible);
    }
    Ok(())
}

fn fit_columns(
    psi: &DesignMatrix,
    targets: &[bool],
    weights: &[f64],
    lambda_v: f64,
    columns: &[usize],
    cfg: &LogisticConfig,
) -> DVector<f64> {
    let total: f64 = weights.iter().sum();
    let w: Vec<f64> = weights.iter().map(|wt| wt / total).collect();
    let y: Vec<f64> = targets.iter().map(|&t| f64::from(u8::from(t))).collect();
    let constant = psi.library.constant_index().filter(|c| columns.contains(c));
    let intercept = constant.is_some();

    let mut x = Vec::new();
    let mut map = Vec::new();
    for &j in columns {
        if Some(j) == constant {
            continue;
        }
        let col = psi.values.column(j);
        let mean = if intercept {
            col.iter().zip(&w).map(|(v, wt)| v * wt).sum::<f64>()
        } else {
            0.0
        };
        let var: f64 = col.iter().zip(&w).map(|(v, wt)| wt * (v - mean).powi(2)).sum();
        let sd = var.sqrt();
        if sd.is_nan() || sd <= 0.0 || sd < 1e-12 * mean.abs() {
            continue;
        }
        x.push(col.iter().map(|v| (v - mean) / sd).collect::<Vec<f64>>());
        map.push((j, mean, sd));
    }
    let problem = Problem {
        x,
        y: &y,
        w,
        intercept,
    };
    let fit = problem.solve(lambda_v, cfg);

    let mut v = DVector::zeros(psi.cols());
    let mut offset = fit.b;
    for (&(j, mean, sd), &b) in map.iter().zip(&fit.beta) {
        v[j] = b / sd;
        offset -= b * mean / sd;
    }
    if let Some(c) = constant {
        v[c] = offset;
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::{DictionarySpec, TimeSeries};
    use nalgebra::DMatrix;

    fn design(spec: &DictionarySpec, points: &[Vec<f64>]) -> DesignMatrix {
        let n = points[0].len();
        let flat: Vec<f64> = points.iter().flatten().copied().collect();
        let data = TimeSeries::autonomous(DMatrix::from_row_slice(points.len(), n, &flat), 1.0).unwrap();
        let rows: Vec<usize> = (0..points.len()).collect();
        spec.library(n, 0).unwrap().design(&data, &rows).unwrap()
    }

    fn decisions(psi: &DesignMatrix, v: &DVector<f64>) -> Vec<bool> {
        (&psi.values * v).iter().map(|&e| e >= 0.0).collect()
    }

    #[test]
    fn one_dimensional_threshold() {
        let points: Vec<Vec<f64>> = (0..41).map(|i| vec![19.0 + 0.1 * i as f64]).collect();
        let targets: Vec<bool> = points.iter().map(|p| p[0] >= 21.0 - 1e-9).collect();
        let psi = design(&DictionarySpec::affine(), &points);
        let v = solve_sparse_logistic(&psi, &targets, &vec![1.0; 41], 1e-4, &Default::default()).unwrap();
        assert_eq!(decisions(&psi, &v), targets);
        assert!(v[1] > 0.0);
        let boundary = -v[0] / v[1];
        assert!((20.9..21.0).contains(&boundary), "boundary {boundary}");
    }

    #[test]
    fn heavy_class_weights_keep_the_margin_centred() {
        let points: Vec<Vec<f64>> = (0..41).map(|i| vec![19.0 + 0.1 * i as f64]).collect();
        let targets: Vec<bool> = points.iter().map(|p| p[0] >= 22.5 - 1e-9).collect();
        let weights: Vec<f64> = targets.iter().map(|&b| if b { 40.0 } else { 1.0 }).collect();
        let psi = design(&DictionarySpec::affine(), &points);
        let v = solve_sparse_logistic(&psi, &targets, &weights, 1e-4, &Default::default()).unwrap();
        assert_eq!(decisions(&psi, &v), targets);
        assert!((-v[0] / v[1] - 22.45).abs() < 1e-9);
    }

    #[test]
    fn all_negative_targets_give_negative_bias() {
        let points: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 * 0.3]).collect();
        let psi = design(&DictionarySpec::affine(), &points);
        let v = solve_sparse_logistic(&psi, &[false; 20], &[1.0; 20], 0.01, &Default::default()).unwrap();
        assert_eq!(v[1], 0.0);
        assert!(v[0] < -5.0);
        assert!((&psi.values * &v).iter().all(|&e| sigmoid(e) < 0.5));
    }

    #[test]
    fn planar_rule_support() {
        let mut points = Vec::new();
        for i in 0..15 {
            for j in 0..15 {
                points.push(vec![-1.0 + 0.2 * i as f64 + 0.013, -1.0 + 0.2 * j as f64 + 0.007]);
            }
        }
        let truth = |p: &[f64]| p[0] + p[1] >= 1.0;
        let targets: Vec<bool> = points.iter().map(|p| truth(p)).collect();
        let psi = design(&DictionarySpec::polynomial(2), &points);
        // keep [1, y1, y2, y1*y2]
        let psi = DesignMatrix {
            values: psi.values.select_columns(&[0, 1, 2, 4]),
            library: psi.library.select(&[0, 1, 2, 4]),
            column_scales: None,
            dropped: vec![],
        };
        let v = solve_sparse_logistic(&psi, &targets, &vec![1.0; points.len()], 1e-4, &Default::default()).unwrap();
        assert_eq!(v[3], 0.0, "v = {v}");
        assert!(v[0] < 0.0 && v[1] > 0.0 && v[2] > 0.0);
        assert_eq!(decisions(&psi, &v), targets);
        // held-out grid
        for i in 0..40 {
            for j in 0..40 {
                let p = [-1.0 + 0.05 * i as f64 + 0.021, -1.0 + 0.05 * j as f64 + 0.017];
                if (p[0] + p[1] - 1.0).abs() < 0.15 {
                    continue;
                }
                let eta = v[0] + v[1] * p[0] + v[2] * p[1];
                assert_eq!(eta >= 0.0, truth(&p), "at {p:?}");
            }
        }
        // normalized to unit slope the direction is close to [-1, 1, 1]
        let s = v[1].max(v[2]);
        assert!((v[1] / s - 1.0).abs() < 0.1 && (v[2] / s - 1.0).abs() < 0.1);
        assert!((v[0] / s + 1.0).abs() < 0.1);
    }

    #[test]
    fn identical_features_are_not_expressible() {
        let points = vec![vec![1.0], vec![2.0], vec![1.0], vec![2.0]];
        let psi = design(&DictionarySpec::affine(), &points);
        let err = solve_sparse_logistic(&psi, &[true, true, false, false], &[1.0; 4], 0.01, &Default::default());
        assert!(matches!(err, Err(Error::NotExpressible)));
    }

    #[test]
    fn zero_weight_rows_have_no_influence() {
        let points: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64 * 0.1]).collect();
        let targets: Vec<bool> = points.iter().map(|p| p[0] >= 1.5).collect();
        let weights: Vec<f64> = (0..30).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect();
        let psi = design(&DictionarySpec::affine(), &points);
        let a = solve_sparse_logistic(&psi, &targets, &weights, 1e-3, &Default::default()).unwrap();
        let mut flipped = targets.clone();
        let mut moved = points.clone();
        for i in (0..30).step_by(3) {
            flipped[i] = !flipped[i];
            moved[i][0] = 100.0 - moved[i][0];
        }
        let psi_b = design(&DictionarySpec::affine(), &moved);
        let b = solve_sparse_logistic(&psi_b, &flipped, &weights, 1e-3, &Default::default()).unwrap();
        assert!((&a - &b).amax() < 1e-9 * a.amax().max(1.0));
    }

    #[test]
    fn objective_reports_squared_misfit() {
        let points = vec![vec![0.0], vec![1.0]];
        let psi = design(&DictionarySpec::affine(), &points);
        let v = DVector::from_vec(vec![0.0, 0.0]);
        let f = sigmoid_fit_objective(&psi, &[true, false], &[1.0, 1.0], &v, 0.5);
        assert!((f - 0.5).abs() < 1e-15);
    }
}
