//! Streaming switch detection.
//!
//! A single-mode model predicts each incoming sample. After `miss_limit`
//! consecutive predictions miss by more than `epsilon · sqrt(n)`, a switch is
//! confirmed; once `refit_window` further samples arrive, a new model is fitted
//! on the post-switch rows, matched against the modes seen so far and
//! reported with its coefficient differences.

use std::collections::VecDeque;

use nalgebra::{DMatrix, SVD};
use serde::{Deserialize, Serialize};

use crate::dictionary::{DesignMatrix, Library};
use crate::error::{Error, Result};
use crate::sparse_solver::{solve_coefficient_sparse, SolverConfig};
use crate::subsystem_id::SubsystemModel;

/// Tuning for [`MonitorState`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorConfig {
    /// Consecutive misses that confirm a switch.
    #[serde(default = "default_miss_limit")]
    pub miss_limit: usize,
    /// Transitions in the initial fit; `None` = 5 × dictionary size.
    #[serde(default)]
    pub warmup: Option<usize>,
    /// Post-confirmation transitions added to the refit; `None` =
    /// max(min_segment, 2 × dictionary size).
    #[serde(default)]
    pub refit_window: Option<usize>,
    /// Prediction-error threshold per output; `None` = three times the
    /// warm-up fit's residual RMS.
    #[serde(default)]
    pub epsilon: Option<f64>,
    /// Coefficient max-norm distance for reusing a known mode; `None` =
    /// 10 · epsilon / smallest column norm of the refit rows.
    #[serde(default)]
    pub tol_merge: Option<f64>,
    /// Smallest coefficient change listed in a diff; `None` = the merge tolerance.
    #[serde(default)]
    pub diff_tol: Option<f64>,
}

fn default_miss_limit() -> usize {
    3
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            miss_limit: default_miss_limit(),
            warmup: None,
            refit_window: None,
            epsilon: None,
            tol_merge: None,
            diff_tol: None,
        }
    }
}

/// One changed coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffEntry {
    pub term: String,
    /// Output column, 0-based.
    pub output: usize,
    pub old: f64,
    pub new: f64,
}

impl DiffEntry {
    /// Wire label: the term name for scalar outputs, `y{k}:{term}` otherwise.
    pub fn label(&self, n_outputs: usize) -> String {
        if n_outputs == 1 {
            self.term.clone()
        } else {
            format!("y{}:{}", self.output + 1, self.term)
        }
    }
}

/// Coefficients that changed by more than `diff_tol`, largest change first.
pub fn model_diff(old: &SubsystemModel, new: &SubsystemModel, diff_tol: f64) -> Result<Vec<DiffEntry>> {
    if old.library.names() != new.library.names() || old.coefficients.shape() != new.coefficients.shape() {
        return Err(Error::DictionaryMismatch(format!(
            "[{}] vs [{}]",
            old.library.names().join(", "),
            new.library.names().join(", ")
        )));
    }
    let mut out = Vec::new();
    for r in 0..old.coefficients.nrows() {
        for c in 0..old.coefficients.ncols() {
            let (a, b) = (old.coefficients[(r, c)], new.coefficients[(r, c)]);
            if (a - b).abs() > diff_tol {
                out.push(DiffEntry {
                    term: old.library.names()[r].clone(),
                    output: c,
                    old: a,
                    new: b,
                });
            }
        }
    }
    out.sort_by(|x, y| (y.new - y.old).abs().total_cmp(&(x.new - x.old).abs()));
    Ok(out)
}

/// A confirmed switch.
#[derive(Clone, Debug, PartialEq)]
pub struct SwitchEvent {
    /// Sample index at which the last confirming miss arrived.
    pub detected_at: usize,
    /// Samples from the first miss to confirmation, inclusive.
    pub confirmed_after: usize,
    /// Id of the mode the new dynamics matched, if any.
    pub matched_known_mode: Option<usize>,
    /// Id now tracked; `None` when the refit failed.
    pub mode: Option<usize>,
    /// Changes relative to the previous model; `None` when the refit failed.
    pub model_diff: Option<Vec<DiffEntry>>,
    pub n_outputs: usize,
}

impl SwitchEvent {
    /// One line of JSON: `{"type":"switch","detected_at":…,"confirmed_after":…,"matched_mode":…,"diff":[[term,old,new],…]}`.
    pub fn to_json_line(&self) -> String {
        let diff = self.model_diff.as_ref().map(|d| {
            d.iter()
                .map(|e| serde_json::json!([e.label(self.n_outputs), e.old, e.new]))
                .collect::<Vec<_>>()
        });
        serde_json::json!({
            "type": "switch",
            "detected_at": self.detected_at,
            "confirmed_after": self.confirmed_after,
            "matched_mode": self.matched_known_mode,
            "diff": diff,
        })
        .to_string()
    }
}

/// What the monitor is doing with incoming samples.
#[derive(Clone, Debug, PartialEq)]
pub enum Phase {
    /// Collecting samples for a fit; no predictions yet.
    WarmingUp,
    Tracking,
    /// Switch confirmed; collecting post-switch samples for the refit.
    Refitting {
        detected_at: usize,
        /// Sample index of the first post-switch transition row.
        first_row: usize,
    },
}

/// Owned state of one stream.
#[derive(Clone, Debug)]
pub struct MonitorState {
    library: Library,
    n_outputs: usize,
    cfg: MonitorConfig,
    solver: SolverConfig,
    warmup: usize,
    refit_window: usize,
    epsilon: Option<f64>,
    phase: Phase,
    /// Recent samples `(t, y, u)`, oldest first.
    window: VecDeque<(usize, Vec<f64>, Vec<f64>)>,
    capacity: usize,
    /// Sample index where the current warm-up began.
    warm_start: usize,
    seen: usize,
    consecutive_misses: usize,
    current: Option<SubsystemModel>,
    known_modes: Vec<SubsystemModel>,
}

impl MonitorState {
    /// `library` is the dictionary over the stream's `n_outputs` outputs and its inputs.
    pub fn new(
        library: Library,
        cfg: MonitorConfig,
        solver: SolverConfig,
        min_segment: usize,
    ) -> Result<Self> {
        if cfg.miss_limit == 0 {
            return Err(Error::InvalidParam {
                name: "miss_limit".into(),
                reason: "must be at least 1".into(),
            });
        }
        solver.validate()?;
        let p = library.len();
        let warmup = cfg.warmup.unwrap_or(5 * p).max(1);
        let refit_window = cfg.refit_window.unwrap_or(min_segment.max(2 * p));
        let capacity = warmup.max(cfg.miss_limit + refit_window) + 1;
        Ok(Self {
            n_outputs: library.n_outputs(),
            library,
            epsilon: cfg.epsilon,
            cfg,
            solver,
            warmup,
            refit_window,
            phase: Phase::WarmingUp,
            window: VecDeque::with_capacity(capacity),
            capacity,
            warm_start: 0,
            seen: 0,
            consecutive_misses: 0,
            current: None,
            known_modes: Vec::new(),
        })
    }

    pub fn phase(&self) -> &Phase {
        &self.phase
    }

    pub fn current_model(&self) -> Option<&SubsystemModel> {
        self.current.as_ref()
    }

    pub fn known_modes(&self) -> &[SubsystemModel] {
        &self.known_modes
    }

    pub fn consecutive_misses(&self) -> usize {
        self.consecutive_misses
    }

    pub fn samples_seen(&self) -> usize {
        self.seen
    }

    /// Resolved prediction threshold per output, once warm-up has fixed it.
    pub fn epsilon(&self) -> Option<f64> {
        self.epsilon
    }

    /// Feeds sample `(y, u)`; returns an event when a refit completes.
    pub fn step(&mut self, y: &[f64], u: &[f64]) -> Result<Option<SwitchEvent>> {
        if y.len() != self.n_outputs || u.len() != self.library.n_inputs() {
            return Err(Error::DimensionMismatch(format!(
                "sample has {} outputs and {} inputs, stream has {} and {}",
                y.len(),
                u.len(),
                self.n_outputs,
                self.library.n_inputs()
            )));
        }
        if y.iter().chain(u).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite sample at index {}", self.seen)));
        }
        let t = self.seen;
        self.seen += 1;

        if let (Phase::Tracking, Some(model), Some((_, py, pu))) = (&self.phase, &self.current, self.window.back()) {
            let pred = model.predict(py, pu);
            let err = pred.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if err > self.threshold() {
                self.consecutive_misses += 1;
            } else {
                self.consecutive_misses = 0;
            }
        }
        self.window.push_back((t, y.to_vec(), u.to_vec()));
        if self.window.len() > self.capacity {
            self.window.pop_front();
        }

        match self.phase.clone() {
            Phase::WarmingUp => {
                if t >= self.warm_start + self.warmup {
                    self.finish_warmup();
                }
                Ok(None)
            }
            Phase::Tracking => {
                if self.consecutive_misses == self.cfg.miss_limit {
                    // the first missed sample closes the first post-switch row
                    let first_row = t + 1 - self.cfg.miss_limit - 1;
                    self.phase = Phase::Refitting {
                        detected_at: t,
                        first_row,
                    };
                    self.consecutive_misses = 0;
                }
                Ok(None)
            }
            Phase::Refitting { detected_at, first_row } => {
                if t >= first_row + self.cfg.miss_limit + self.refit_window {
                    return Ok(Some(self.refit(detected_at, first_row)));
                }
                Ok(None)
            }
        }
    }

    fn threshold(&self) -> f64 {
        self.epsilon.unwrap_or(0.0) * (self.n_outputs as f64).sqrt()
    }

    /// Samples with index `≥ from`, as consecutive design rows and targets.
    fn rows_since(&self, from: usize) -> (DesignMatrix, DMatrix<f64>) {
        let samples: Vec<&(usize, Vec<f64>, Vec<f64>)> = self.window.iter().filter(|(t, _, _)| *t >= from).collect();
        let rows = samples.len().saturating_sub(1);
        let p = self.library.len();
        let mut values = DMatrix::zeros(rows, p);
        let mut targets = DMatrix::zeros(rows, self.n_outputs);
        for (r, pair) in samples.windows(2).enumerate() {
            let (_, y, u) = pair[0];
            for (c, v) in self.library.evaluate(y, u).into_iter().enumerate() {
                values[(r, c)] = v;
            }
            for (c, &v) in pair[1].1.iter().enumerate() {
                targets[(r, c)] = v;
            }
        }
        let phi = DesignMatrix {
            values,
            library: self.library.clone(),
            column_scales: None,
            dropped: vec![],
        };
        (phi, targets)
    }

    fn fit(&self, phi: &DesignMatrix, ybar: &DMatrix<f64>, epsilon: f64) -> Result<DMatrix<f64>> {
        let cfg = SolverConfig {
            epsilon: Some(epsilon),
            lambda_w: Some(self.solver.lambda_w.unwrap_or(epsilon)),
            ..self.solver.clone()
        };
        solve_coefficient_sparse(phi, ybar, &cfg)
    }

    fn finish_warmup(&mut self) {
        let (phi, ybar) = self.rows_since(self.warm_start);
        let epsilon = match self.epsilon {
            Some(e) => e,
            None => estimate_epsilon(&phi, &ybar),
        };
        let Ok(w) = self.fit(&phi, &ybar, epsilon) else {
            self.warm_start += 1;
            return;
        };
        self.epsilon = Some(epsilon);
        let model = SubsystemModel {
            id: 0,
            coefficients: w,
            library: self.library.clone(),
            fit_rows: vec![],
        };
        let (id, model) = self.register(model, &phi);
        self.current = Some(SubsystemModel { id, ..model });
        self.phase = Phase::Tracking;
        self.consecutive_misses = 0;
    }

    /// Known mode matching `model`, or `model` stored under a fresh id.
    fn register(&mut self, model: SubsystemModel, phi: &DesignMatrix) -> (usize, SubsystemModel) {
        let tol = self.tol_merge(phi);
        if let Some(known) = self
            .known_modes
            .iter()
            .find(|k| (&k.coefficients - &model.coefficients).amax() < tol)
        {
            return (known.id, known.clone());
        }
        let id = self.known_modes.len() + 1;
        let model = SubsystemModel { id, ..model };
        self.known_modes.push(model.clone());
        (id, model)
    }

    fn tol_merge(&self, phi: &DesignMatrix) -> f64 {
        self.cfg.tol_merge.unwrap_or_else(|| {
            let smallest = (0..phi.cols())
                .map(|c| phi.values.column(c).norm())
                .filter(|&s| s > 0.0)
                .fold(f64::INFINITY, f64::min);
            10.0 * self.epsilon.unwrap_or(0.0) / smallest
        })
    }

    fn refit(&mut self, detected_at: usize, first_row: usize) -> SwitchEvent {
        let (phi, ybar) = self.rows_since(first_row);
        let epsilon = self.epsilon.unwrap_or(0.0);
        let ranked = full_column_rank(&phi.values);
        let fitted = if ranked { self.fit(&phi, &ybar, epsilon).ok() } else { None };
        let mut event = SwitchEvent {
            detected_at,
            confirmed_after: self.cfg.miss_limit,
            matched_known_mode: None,
            mode: None,
            model_diff: None,
            n_outputs: self.n_outputs,
        };
        let Some(w) = fitted else {
            tracing::warn!(detected_at, "refit after switch failed; warming up again");
            self.current = None;
            self.phase = Phase::WarmingUp;
            self.warm_start = first_row;
            return event;
        };
        let before = self.known_modes.len();
        let candidate = SubsystemModel {
            id: 0,
            coefficients: w,
            library: self.library.clone(),
            fit_rows: vec![],
        };
        let (id, model) = self.register(candidate, &phi);
        if self.known_modes.len() == before {
            event.matched_known_mode = Some(id);
        }
        let tol = self.cfg.diff_tol.unwrap_or_else(|| self.tol_merge(&phi));
        if let Some(old) = &self.current {
            event.model_diff = model_diff(old, &model, tol).ok();
        }
        event.mode = Some(id);
        self.current = Some(model);
        self.phase = Phase::Tracking;
        self.consecutive_misses = 0;
        event
    }
}

/// Functional form of [`MonitorState::step`].
pub fn monitor_step(
    mut state: MonitorState,
    y: &[f64],
    u: &[f64],
) -> Result<(MonitorState, Option<SwitchEvent>)> {
    let event = state.step(y, u)?;
    Ok((state, event))
}

/// Three times the degrees-of-freedom-corrected residual RMS of a least-squares
/// fit, floored at `1e-9 · rms(ybar)`.
fn estimate_epsilon(phi: &DesignMatrix, ybar: &DMatrix<f64>) -> f64 {
    let (m, p) = (phi.rows(), phi.cols());
    let w = crate::linalg::lstsq(&phi.values, ybar);
    let ss = (ybar - &phi.values * w).norm_squared();
    let dof = (m.saturating_sub(p) * ybar.ncols()).max(1);
    let scale = ybar.norm() / (ybar.len().max(1) as f64).sqrt();
    (3.0 * (ss / dof as f64).sqrt()).max(1e-9 * scale)
}

fn full_column_rank(a: &DMatrix<f64>) -> bool {
    if a.nrows() < a.ncols() || a.ncols() == 0 {
        return false;
    }
    let s = SVD::new(a.clone(), false, false).singular_values;
    let max = s.max();
    max > 0.0 && s.min() > max * 1e-10
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::DictionarySpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn state(cfg: MonitorConfig) -> MonitorState {
        let lib = DictionarySpec::affine().library(1, 0).unwrap();
        MonitorState::new(lib, cfg, SolverConfig::default(), 3).unwrap()
    }

    /// Runs the scalar stream, collecting events.
    fn run(state: &mut MonitorState, ys: &[f64]) -> Vec<SwitchEvent> {
        ys.iter().filter_map(|&y| state.step(&[y], &[]).unwrap()).collect()
    }

    /// `y(t+1) = 0.99 y(t)` until row `switch`, then `+ 0.3` on top.
    fn two_mode_stream(len: usize, switch: usize) -> Vec<f64> {
        let mut ys = vec![20.0];
        for t in 0..len - 1 {
            let y = ys[t];
            ys.push(if t < switch { 0.99 * y } else { 0.99 * y + 0.3 });
        }
        ys
    }

    #[test]
    fn detects_switch_within_three_samples() {
        let mut s = state(MonitorConfig::default());
        let events = run(&mut s, &two_mode_stream(400, 200));
        assert_eq!(events.len(), 1);
        let e = &events[0];
        assert!((200..=203).contains(&e.detected_at), "detected at {}", e.detected_at);
        assert!(e.confirmed_after >= 1 && e.confirmed_after <= 3);
        assert_eq!(e.matched_known_mode, None);
        let diff = e.model_diff.as_ref().unwrap();
        assert_eq!(diff.len(), 1);
        assert_eq!(diff[0].term, "1");
        assert!(diff[0].old.abs() < 1e-12 && (diff[0].new - 0.3).abs() < 1e-9);
        assert_eq!(
            SwitchEvent {
                model_diff: Some(vec![DiffEntry { term: "1".into(), output: 0, old: 0.0, new: 0.3 }]),
                ..e.clone()
            }
            .to_json_line(),
            format!(r#"{{"confirmed_after":3,"detected_at":{},"diff":[["1",0.0,0.3]],"matched_mode":null,"type":"switch"}}"#, e.detected_at)
        );
    }

    #[test]
    fn constant_dynamics_never_alarm() {
        let mut s = state(MonitorConfig::default());
        assert!(run(&mut s, &vec![5.0; 2000]).is_empty());
        let mut s = state(MonitorConfig::default());
        let ys: Vec<f64> = (0..3000).map(|t| 20.0 * 0.999f64.powi(t)).collect();
        assert!(run(&mut s, &ys).is_empty());
    }

    #[test]
    fn returning_mode_reuses_its_id() {
        let mut ys = vec![20.0];
        for t in 0..599 {
            let y = ys[t];
            let on = (200..400).contains(&t);
            ys.push(if on { 0.99 * y + 0.3 } else { 0.99 * y });
        }
        let mut s = state(MonitorConfig::default());
        let events = run(&mut s, &ys);
        assert_eq!(events.len(), 2);
        assert_eq!(events[0].mode, Some(2));
        assert_eq!(events[1].matched_known_mode, Some(1));
        assert_eq!(s.known_modes().len(), 2);
    }

    #[test]
    fn misses_never_exceed_limit() {
        let mut s = state(MonitorConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut y = 1.0;
        for _ in 0..2000 {
            y = if rng.random_bool(0.5) { 0.5 * y + 1.0 } else { -0.7 * y + 2.0 };
            s.step(&[y], &[]).unwrap();
            assert!(s.consecutive_misses() <= 3);
        }
    }

    #[test]
    fn rank_deficient_refit_warms_up_again() {
        // the post-switch map is constant, so [1, y, y²] sees two distinct states
        let mut ys = vec![20.0];
        for t in 0..199 {
            ys.push(if t < 100 { 0.99 * ys[t] } else { 5.0 });
        }
        let lib = DictionarySpec::polynomial(2).library(1, 0).unwrap();
        let mut s = MonitorState::new(lib, MonitorConfig::default(), SolverConfig::default(), 3).unwrap();
        let events = run(&mut s, &ys);
        assert_eq!(events.len(), 1);
        assert!(events[0].model_diff.is_none() && events[0].mode.is_none());
        assert_eq!(s.phase(), &Phase::Tracking);
    }

    #[test]
    fn diff_rejects_mismatched_dictionaries() {
        let a = SubsystemModel {
            id: 1,
            coefficients: DMatrix::zeros(2, 1),
            library: DictionarySpec::affine().library(1, 0).unwrap(),
            fit_rows: vec![],
        };
        let b = SubsystemModel {
            coefficients: DMatrix::zeros(3, 1),
            library: DictionarySpec::polynomial(2).library(1, 0).unwrap(),
            ..a.clone()
        };
        assert!(matches!(model_diff(&a, &b, 1e-9), Err(Error::DictionaryMismatch(_))));
        assert!(model_diff(&a, &a, 1e-9).unwrap().is_empty());
    }

    #[test]
    fn functional_step_matches_method() {
        let ys = two_mode_stream(300, 150);
        let mut a = state(MonitorConfig::default());
        let mut b = state(MonitorConfig::default());
        for &y in &ys {
            let ea = a.step(&[y], &[]).unwrap();
            let (next, eb) = monitor_step(b, &[y], &[]).unwrap();
            b = next;
            assert_eq!(ea, eb);
        }
    }
}
