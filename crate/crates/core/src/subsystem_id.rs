//! Peeling of subsystems: the mode explaining the most remaining samples is
//! extracted first, its sparse dynamics fitted, and the search repeated on
//! what is left.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dictionary::{DesignMatrix, DictionarySpec, Library, TimeSeries};
use crate::error::{Error, Result};
use crate::linalg::row_residual_norms;
use crate::sparse_solver::{
    exact_fit_epsilon, local_epsilon, solve_coefficient_sparse, solve_residual_sparse, SolverConfig,
};

/// Label carried by rows that no mode explains.
pub const UNASSIGNED: usize = 0;

/// Bounds on the peeling loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Limits {
    #[serde(default = "default_max_modes")]
    pub max_modes: usize,
    #[serde(default = "default_min_segment")]
    pub min_segment: usize,
    /// Max-norm distance below which two modes are merged; derived from
    /// epsilon and the column scales when absent.
    #[serde(default)]
    pub tol_merge: Option<f64>,
}

fn default_max_modes() -> usize {
    10
}

fn default_min_segment() -> usize {
    3
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_modes: default_max_modes(),
            min_segment: default_min_segment(),
            tol_merge: None,
        }
    }
}

impl Limits {
    pub fn validate(&self) -> Result<()> {
        if self.max_modes == 0 {
            return Err(Error::InvalidParam {
                name: "max_modes".into(),
                reason: "must be at least 1".into(),
            });
        }
        if self.min_segment == 0 {
            return Err(Error::InvalidParam {
                name: "min_segment".into(),
                reason: "must be at least 1".into(),
            });
        }
        if let Some(t) = self.tol_merge {
            if !(t.is_finite() && t >= 0.0) {
                return Err(Error::InvalidParam {
                    name: "tol_merge".into(),
                    reason: "must be non-negative".into(),
                });
            }
        }
        Ok(())
    }
}

/// One mode's dynamics `y(t+1) = Φ(y(t), u(t)) · W`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsystemModel {
    /// Mode index, starting at 1.
    pub id: usize,
    /// Raw-unit coefficients, one row per library term and one column per output.
    pub coefficients: DMatrix<f64>,
    pub library: Library,
    /// Transition rows assigned to this mode, ascending.
    pub fit_rows: Vec<usize>,
}

impl SubsystemModel {
    pub fn term_names(&self) -> &[String] {
        self.library.names()
    }

    pub fn n_outputs(&self) -> usize {
        self.coefficients.ncols()
    }

    /// Next output predicted from the current sample.
    pub fn predict(&self, y: &[f64], u: &[f64]) -> Vec<f64> {
        let row = self.library.evaluate(y, u);
        (0..self.coefficients.ncols())
            .map(|k| {
                row.iter()
                    .zip(self.coefficients.column(k).iter())
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    /// Predictions for every row of a raw design matrix over the same library.
    pub fn predict_rows(&self, phi: &DesignMatrix) -> DMatrix<f64> {
        &phi.denormalized().values * &self.coefficients
    }

    /// `(term, output)` positions of the nonzero coefficients.
    pub fn support(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.coefficients.nrows() {
            for c in 0..self.coefficients.ncols() {
                if self.coefficients[(r, c)] != 0.0 {
                    out.push((r, c));
                }
            }
        }
        out
    }
}

/// Mode label for every transition row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segmentation {
    /// `labels[t]` is the mode active from sample `t` to `t + 1`, or
    /// [`UNASSIGNED`].
    pub labels: Vec<usize>,
    /// Number of modes.
    pub k: usize,
}

impl Segmentation {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows carrying no mode.
    pub fn unassigned(&self) -> Vec<usize> {
        rows_with(&self.labels, UNASSIGNED)
    }

    /// Rows assigned to `mode`.
    pub fn rows_of(&self, mode: usize) -> Vec<usize> {
        rows_with(&self.labels, mode)
    }

    pub fn counts(&self) -> Vec<usize> {
        (1..=self.k).map(|k| self.labels.iter().filter(|&&l| l == k).count()).collect()
    }
}

fn rows_with(labels: &[usize], mode: usize) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == mode)
        .map(|(t, _)| t)
        .collect()
}

/// Everything [`identify_subsystems`] produces.
#[derive(Clone, Debug)]
pub struct Identification {
    pub models: Vec<SubsystemModel>,
    pub segmentation: Segmentation,
    /// Solver settings with epsilon and lambda_w filled in.
    pub config: SolverConfig,
    pub tol_merge: f64,
    /// Peels performed before reclassification.
    pub peels: usize,
    pub warnings: Vec<String>,
}

impl Identification {
    /// Row residual threshold `epsilon · sqrt(n)`.
    pub fn threshold(&self) -> f64 {
        let n = self.models.first().map_or(1, |m| m.n_outputs());
        self.config.epsilon_value() * (n as f64).sqrt()
    }
}

const MAX_ROUNDS: usize = 25;

/// Splits `data` into subsystems over the dictionary `spec`.
///
/// When `cfg.epsilon` is unset it comes from [`exact_fit_epsilon`] if some
/// mode is fitted to rounding precision, else from [`local_epsilon`]. Rows whose best mode still misses by more than
/// `epsilon · sqrt(n)` are left [`UNASSIGNED`].
pub fn identify_subsystems(
    data: &TimeSeries,
    spec: &DictionarySpec,
    cfg: &SolverConfig,
    limits: &Limits,
) -> Result<Identification> {
    cfg.validate()?;
    limits.validate()?;
    let m = data.transitions();
    if m == 0 {
        return Err(Error::EmptyRows);
    }
    let rows: Vec<usize> = (0..m).collect();
    let full = spec.library(data.n_outputs(), data.n_inputs())?.design(data, &rows)?;
    let phi = crate::dictionary::drop_zero_columns(full);
    let ybar = data.targets(&rows);
    identify_on_design(&phi, &ybar, cfg, limits)
}

/// [`identify_subsystems`] on a prebuilt raw design matrix.
pub fn identify_on_design(
    phi: &DesignMatrix,
    ybar: &DMatrix<f64>,
    cfg: &SolverConfig,
    limits: &Limits,
) -> Result<Identification> {
    cfg.validate()?;
    limits.validate()?;
    let phi = phi.denormalized();
    let (m, p, n) = (phi.rows(), phi.cols(), ybar.ncols());
    if m == 0 {
        return Err(Error::EmptyRows);
    }
    if ybar.nrows() != m {
        return Err(Error::DimensionMismatch(format!(
            "design has {m} rows, targets have {}",
            ybar.nrows()
        )));
    }
    if m < p + limits.min_segment {
        return Err(Error::InvalidInput(format!(
            "{m} transitions cannot support {p} terms plus a {}-sample mode",
            limits.min_segment
        )));
    }
    let epsilon = cfg
        .epsilon
        .or_else(|| exact_fit_epsilon(&phi, ybar, cfg.seed))
        .unwrap_or_else(|| local_epsilon(&phi, ybar));
    let cfg = SolverConfig {
        epsilon: Some(epsilon),
        lambda_w: Some(cfg.lambda_w.unwrap_or(epsilon)),
        ..cfg.clone()
    };
    let thr = epsilon * (n as f64).sqrt();
    let tol_merge = limits.tol_merge.unwrap_or_else(|| {
        let smallest = (0..p)
            .map(|c| phi.values.column(c).norm())
            .fold(f64::INFINITY, f64::min);
        10.0 * epsilon / smallest
    });
    // a mode needs more rows than terms, or any p rows would fit exactly
    let min_peel = limits.min_segment.max(p + 1);
    let mut warnings = Vec::new();

    let mut models: Vec<SubsystemModel> = Vec::new();
    let mut remaining: Vec<usize> = (0..m).collect();
    let mut peels = 0;
    while !remaining.is_empty() {
        // rows an existing mode already explains need no new mode
        if !models.is_empty() {
            let best = best_residuals(&models, &phi, ybar, &remaining);
            remaining = remaining
                .iter()
                .zip(&best)
                .filter(|(_, &r)| r > thr)
                .map(|(&t, _)| t)
                .collect();
            if remaining.is_empty() {
                break;
            }
        }
        if remaining.len() < min_peel {
            note(
                &mut warnings,
                format!("{} trailing rows explained by no mode", remaining.len()),
            );
            break;
        }
        if models.len() == limits.max_modes {
            let best = best_residuals(&models, &phi, ybar, &remaining);
            let mean = best.iter().sum::<f64>() / best.len() as f64;
            let max = best.iter().copied().fold(0.0, f64::max);
            return Err(Error::ModeBudgetExhausted {
                max_modes: limits.max_modes,
                remaining: remaining.len(),
                mean_residual: mean,
                max_residual: max,
            });
        }
        let sub = phi.select_rows(&remaining);
        let ysub = ybar.select_rows(&remaining);
        let split = match solve_residual_sparse(&sub, &ysub, &cfg) {
            Ok(s) => s,
            Err(Error::NoConsensus) => {
                note(
                    &mut warnings,
                    format!("no consensus among {} remaining rows", remaining.len()),
                );
                break;
            }
            Err(e) => return Err(e),
        };
        peels += 1;
        let explained: Vec<usize> = split.explained_rows().iter().map(|&i| remaining[i]).collect();
        if explained.len() < min_peel {
            note(
                &mut warnings,
                format!(
                    "{} remaining rows admit no mode of at least {min_peel} samples",
                    remaining.len()
                ),
            );
            break;
        }
        let model = fit_mode(models.len() + 1, &phi, ybar, &explained, &cfg, thr)?;
        let taken: BTreeSet<usize> = model.fit_rows.iter().copied().collect();
        if taken.len() < min_peel {
            note(
                &mut warnings,
                format!("sparse refit of peel {peels} kept only {} rows", taken.len()),
            );
            break;
        }
        remaining.retain(|t| !taken.contains(t));
        models.push(model);
    }
    if models.is_empty() {
        return Err(Error::NoConsensus);
    }

    let (models, segmentation) =
        reclassify(models, &phi, ybar, &cfg, thr, tol_merge, limits.min_segment, &mut warnings)?;
    let unassigned = segmentation.unassigned().len();
    if unassigned > 0 {
        note(&mut warnings, format!("{unassigned} rows left unassigned"));
    }
    Ok(Identification {
        models,
        segmentation,
        config: cfg,
        tol_merge,
        peels,
        warnings,
    })
}

fn note(warnings: &mut Vec<String>, message: String) {
    tracing::warn!("{message}");
    warnings.push(message);
}

/// Sparse fit on `rows`, keeping the rows the sparse model still explains.
fn fit_mode(
    id: usize,
    phi: &DesignMatrix,
    ybar: &DMatrix<f64>,
    rows: &[usize],
    cfg: &SolverConfig,
    thr: f64,
) -> Result<SubsystemModel> {
    let sub = phi.select_rows(rows);
    let ysub = ybar.select_rows(rows);
    let w = solve_coefficient_sparse(&sub, &ysub, cfg)?;
    let resid = row_residual_norms(&sub.values, &w, &ysub);
    let fit_rows = rows
        .iter()
        .zip(&resid)
        .filter(|(_, &r)| r <= thr)
        .map(|(&t, _)| t)
        .collect();
    Ok(SubsystemModel {
        id,
        coefficients: w,
        library: phi.library.clone(),
        fit_rows,
    })
}

fn best_residuals(
    models: &[SubsystemModel],
    phi: &DesignMatrix,
    ybar: &DMatrix<f64>,
    rows: &[usize],
) -> Vec<f64> {
    let x = phi.values.select_rows(rows);
    let y = ybar.select_rows(rows);
    let mut best = vec![f64::INFINITY; rows.len()];
    for model in models {
        for (b, r) in best.iter_mut().zip(row_residual_norms(&x, &model.coefficients, &y)) {
            *b = b.min(r);
        }
    }
    best
}

/// Alternates merging, global relabeling and refitting until the labels
/// settle, then renumbers modes by descending size.
#[allow(clippy::too_many_arguments)]
fn reclassify(
    mut models: Vec<SubsystemModel>,
    phi: &DesignMatrix,
    ybar: &DMatrix<f64>,
    cfg: &SolverConfig,
    thr: f64,
    tol_merge: f64,
    min_segment: usize,
    warnings: &mut Vec<String>,
) -> Result<(Vec<SubsystemModel>, Segmentation)> {
    let mut labels: Vec<usize> = Vec::new();
    for _ in 0..MAX_ROUNDS {
        models = merge_equivalent(models, tol_merge);
        let next = classify_within(&models, phi, ybar, thr);
        let settled = next == labels;
        labels = next;
        let mut refit = Vec::with_capacity(models.len());
        let mut dropped = false;
        for model in &models {
            let rows = rows_with(&labels, model.id);
            if rows.len() < min_segment {
                dropped = true;
                continue;
            }
            refit.push(fit_mode(model.id, phi, ybar, &rows, cfg, thr)?);
        }
        if refit.is_empty() {
            return Err(Error::NoConsensus);
        }
        let unchanged = !dropped
            && refit
                .iter()
                .zip(&models)
                .all(|(a, b)| a.coefficients == b.coefficients);
        models = refit;
        if settled && unchanged {
            break;
        }
        if dropped {
            labels.clear();
        }
    }
    let final_labels = classify_within(&models, phi, ybar, thr);
    if final_labels != labels {
        note(warnings, "relabeling did not settle; using the last pass".into());
    }
    Ok(renumber(models, final_labels))
}

/// Argmin labels, with rows missed by every mode left unassigned.
fn classify_within(
    models: &[SubsystemModel],
    phi: &DesignMatrix,
    ybar: &DMatrix<f64>,
    thr: f64,
) -> Vec<usize> {
    let seg = classify_rows(models, phi, ybar);
    let best = best_residuals(models, phi, ybar, &(0..phi.rows()).collect::<Vec<_>>());
    seg.labels
        .iter()
        .zip(best)
        .map(|(&l, r)| if r <= thr { l } else { UNASSIGNED })
        .collect()
}

fn renumber(models: Vec<SubsystemModel>, labels: Vec<usize>) -> (Vec<SubsystemModel>, Segmentation) {
    let mut order: Vec<(usize, SubsystemModel)> = models
        .into_iter()
        .map(|mut model| {
            model.fit_rows = rows_with(&labels, model.id);
            (model.fit_rows.len(), model)
        })
        .collect();
    // stable: equal counts keep peel order
    order.sort_by_key(|&(count, _)| std::cmp::Reverse(count));
    let mut map = vec![UNASSIGNED; order.iter().map(|(_, m)| m.id).max().unwrap_or(0) + 1];
    let models: Vec<SubsystemModel> = order
        .into_iter()
        .enumerate()
        .map(|(i, (_, mut model))| {
            map[model.id] = i + 1;
            model.id = i + 1;
            model
        })
        .collect();
    let labels = labels.iter().map(|&l| map[l]).collect();
    let k = models.len();
    (models, Segmentation { labels, k })
}

/// Assigns every row to the mode with the smallest row residual norm.
///
/// Residuals within `1e-12` relative of each other tie; ties go to the mode
/// with more fit rows, then to the lower id.
pub fn classify_rows(models: &[SubsystemModel], phi: &DesignMatrix, ybar: &DMatrix<f64>) -> Segmentation {
    let raw = phi.denormalized();
    let residuals: Vec<Vec<f64>> = models
        .iter()
        .map(|model| row_residual_norms(&raw.values, &model.coefficients, ybar))
        .collect();
    let labels = (0..raw.rows())
        .map(|t| {
            let mut best = 0;
            for k in 1..models.len() {
                let (a, b) = (residuals[k][t], residuals[best][t]);
                let tie = (a - b).abs() <= 1e-12 * a.max(b);
                if a < b && !tie
                    || tie && prefer(&models[k], &models[best])
                {
                    best = k;
                }
            }
            models.get(best).map_or(UNASSIGNED, |m| m.id)
        })
        .collect();
    Segmentation {
        labels,
        k: models.len(),
    }
}

fn prefer(a: &SubsystemModel, b: &SubsystemModel) -> bool {
    (a.fit_rows.len(), std::cmp::Reverse(a.id)) > (b.fit_rows.len(), std::cmp::Reverse(b.id))
}

/// Merges modes whose coefficient matrices differ by less than `tol_merge`
/// in max-norm.
///
/// The surviving mode keeps the lower position and the coefficients of the
/// member with more fit rows; fit rows are unioned.
pub fn merge_equivalent(models: Vec<SubsystemModel>, tol_merge: f64) -> Vec<SubsystemModel> {
    let mut out: Vec<SubsystemModel> = Vec::with_capacity(models.len());
    for model in models {
        let target = out.iter_mut().find(|kept| {
            kept.coefficients.shape() == model.coefficients.shape()
                && (&kept.coefficients - &model.coefficients).amax() < tol_merge
        });
        match target {
            Some(kept) => {
                if model.fit_rows.len() > kept.fit_rows.len() {
                    kept.coefficients = model.coefficients.clone();
                }
                let rows: BTreeSet<usize> =
                    kept.fit_rows.iter().chain(&model.fit_rows).copied().collect();
                kept.fit_rows = rows.into_iter().collect();
            }
            None => out.push(model),
        }
    }
    out
}
