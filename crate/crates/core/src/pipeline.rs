//! End-to-end discovery: subsystems, then transitions, with the coefficient
//! threshold chosen on held-out data.

use serde::{Deserialize, Serialize};

use crate::dictionary::{DictionarySpec, TimeSeries};
use crate::error::{Error, Result};
use crate::hybrid_sim::{relative_error_ratio, HybridModel};
use crate::online_monitor::MonitorConfig;
use crate::sparse_solver::SolverConfig;
use crate::subsystem_id::{identify_subsystems, Identification, Limits, UNASSIGNED};
use crate::transition_id::{infer_transitions, TransitionConfig, TransitionSet};

/// Fraction of transitions used for training during the threshold sweep.
pub const TRAIN_FRACTION: f64 = 0.8;

/// Every tunable of a run. Omitted fields take their documented defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Dictionary for the subsystem dynamics.
    #[serde(default)]
    pub dictionary: DictionarySpec,
    /// Dictionary for the switching predicates.
    #[serde(default)]
    pub psi_dictionary: DictionarySpec,
    #[serde(default)]
    pub solver: SolverConfig,
    /// Candidate coefficient thresholds; empty = use `solver.lambda_w` as given.
    #[serde(default)]
    pub lambda_grid: Vec<f64>,
    #[serde(default)]
    pub limits: Limits,
    #[serde(default)]
    pub transitions: TransitionConfig,
    #[serde(default)]
    pub monitor: MonitorConfig,
    /// Seeds the solver's random restarts and synthetic noise.
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    /// Solver configuration with the run seed applied.
    pub fn seeded_solver(&self) -> SolverConfig {
        SolverConfig {
            seed: self.seed,
            ..self.solver.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        self.limits.validate()?;
        if let Some(bad) = self.lambda_grid.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(Error::InvalidParam {
                name: "lambda_grid".into(),
                reason: format!("{bad} is not a finite non-negative threshold"),
            });
        }
        Ok(())
    }
}

/// Held-out score of one threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda_w: f64,
    /// Modes found on the training part; 0 when identification failed.
    pub k: usize,
    /// Percent one-step error on the held-out part; infinite on failure.
    pub holdout_error: f64,
}

/// Output of [`discover`].
#[derive(Clone, Debug)]
pub struct Discovery {
    pub model: HybridModel,
    pub identification: Identification,
    pub transitions: TransitionSet,
    /// One entry per grid value, in grid order; empty without a grid.
    pub sweep: Vec<SweepPoint>,
    pub chosen_lambda: Option<f64>,
}

/// Identifies subsystems and transitions on `data`.
///
/// With a non-empty `lambda_grid`, each threshold is fitted on the first
/// [`TRAIN_FRACTION`] of the transitions and scored by the one-step error on
/// the rest, with modes tracked by the learned rules. The lowest error wins;
/// ties go to the larger threshold. The winner is refitted on all data.
pub fn discover(data: &TimeSeries, cfg: &RunConfig) -> Result<Discovery> {
    cfg.validate()?;
    if data.transitions() == 0 {
        return Err(Error::EmptyRows);
    }
    let mut sweep = Vec::new();
    let mut chosen_lambda = None;
    let mut solver = cfg.seeded_solver();
    if !cfg.lambda_grid.is_empty() {
        let split = (TRAIN_FRACTION * data.transitions() as f64).floor() as usize;
        if split == 0 || split == data.transitions() {
            return Err(Error::InvalidInput(format!(
                "{} transitions are too few to hold out data for the threshold sweep",
                data.transitions()
            )));
        }
        let train = data.slice(0..split + 1);
        let mut best: Option<(f64, f64)> = None;
        for &lambda in &cfg.lambda_grid {
            let point = score_threshold(data, &train, split, lambda, cfg);
            tracing::debug!(lambda, k = point.k, error = point.holdout_error, "threshold sweep");
            let better = match best {
                None => true,
                Some((err, lam)) => {
                    let tie = (point.holdout_error - err).abs() <= 1e-9 * err;
                    if tie { lambda > lam } else { point.holdout_error < err }
                }
            };
            if better && point.holdout_error.is_finite() {
                best = Some((point.holdout_error, lambda));
            }
            sweep.push(point);
        }
        let (_, lambda) = best.ok_or(Error::NoConsensus)?;
        chosen_lambda = Some(lambda);
        solver.lambda_w = Some(lambda);
    }
    let (identification, transitions, model) = fit(data, &solver, cfg)?;
    Ok(Discovery {
        model,
        identification,
        transitions,
        sweep,
        chosen_lambda,
    })
}

fn fit(data: &TimeSeries, solver: &SolverConfig, cfg: &RunConfig) -> Result<(Identification, TransitionSet, HybridModel)> {
    let identification = identify_subsystems(data, &cfg.dictionary, solver, &cfg.limits)?;
    let transitions = infer_transitions(&identification.segmentation, data, &cfg.psi_dictionary, &cfg.transitions)?;
    let model = HybridModel::new(
        identification.models.clone(),
        transitions.rules.clone(),
        cfg.dictionary.clone(),
        cfg.psi_dictionary.clone(),
        data.sample_period,
    )?;
    Ok((identification, transitions, model))
}

fn score_threshold(data: &TimeSeries, train: &TimeSeries, split: usize, lambda: f64, cfg: &RunConfig) -> SweepPoint {
    let solver = SolverConfig {
        lambda_w: Some(lambda),
        ..cfg.seeded_solver()
    };
    let failed = |k| SweepPoint {
        lambda_w: lambda,
        k,
        holdout_error: f64::INFINITY,
    };
    let Ok((ident, _, model)) = fit(train, &solver, cfg) else {
        return failed(0);
    };
    let k = model.k();
    let mode = last_mode(&ident, &model, train);
    let holdout = data.slice(split..data.samples());
    match holdout_error(&model, &holdout, mode) {
        Ok(e) => SweepPoint {
            lambda_w: lambda,
            k,
            holdout_error: e,
        },
        Err(_) => failed(k),
    }
}

/// Mode in force at the first sample after `train`.
fn last_mode(ident: &Identification, model: &HybridModel, train: &TimeSeries) -> usize {
    let t = train.transitions() - 1;
    let label = ident.segmentation.labels[..=t]
        .iter()
        .rev()
        .copied()
        .find(|&l| l != UNASSIGNED)
        .unwrap_or(1);
    model.next_mode(label, &train.output(t), &train.input(t))
}

/// Percent one-step error on `data` with modes tracked by the model's rules from `m0`.
pub fn holdout_error(model: &HybridModel, data: &TimeSeries, m0: usize) -> Result<f64> {
    let modes = model.track_modes(data, m0);
    let mut pred = data.outputs.rows(1, data.transitions()).into_owned();
    for (t, &m) in modes.iter().enumerate() {
        let p = model.subsystems[m - 1].predict(&data.output(t), &data.input(t));
        for (c, v) in p.into_iter().enumerate() {
            pred[(t, c)] = v;
        }
    }
    let truth = data.slice(1..data.samples());
    let approx = TimeSeries::new(pred, truth.inputs.clone(), data.sample_period)?;
    relative_error_ratio(&truth, &approx)
}
