//! Forward simulation of hybrid models, synthetic benchmarks with ground
//! truth, and evaluation metrics.

mod benchmarks;

pub use benchmarks::{generate_benchmark, non_identifiable_pair, Benchmark, BenchmarkName, NonIdentifiablePair, BENCHMARKS};

use nalgebra::DMatrix;
use pathfinding::prelude::{kuhn_munkres, Matrix};

use crate::dictionary::{DictionarySpec, TimeSeries};
use crate::error::{Error, Result};
use crate::subsystem_id::{Segmentation, SubsystemModel, UNASSIGNED};
use crate::transition_id::TransitionRule;

/// State norm beyond which a simulation is declared divergent.
pub const DIVERGENCE_GUARD: f64 = 1e12;

/// Subsystems plus the rules that switch between them.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridModel {
    /// Mode `k` is `subsystems[k - 1]`.
    pub subsystems: Vec<SubsystemModel>,
    pub rules: Vec<TransitionRule>,
    pub dictionary_spec: DictionarySpec,
    pub psi_spec: DictionarySpec,
    pub sample_period: f64,
}

impl HybridModel {
    /// Checks that mode ids are `1..=K` in order and every rule joins two of them.
    pub fn new(
        subsystems: Vec<SubsystemModel>,
        rules: Vec<TransitionRule>,
        dictionary_spec: DictionarySpec,
        psi_spec: DictionarySpec,
        sample_period: f64,
    ) -> Result<Self> {
        if subsystems.is_empty() {
            return Err(Error::InvalidInput("a hybrid model needs at least one subsystem".into()));
        }
        for (i, s) in subsystems.iter().enumerate() {
            if s.id != i + 1 {
                return Err(Error::InvalidInput(format!(
                    "subsystem at position {i} has id {}, expected {}",
                    s.id,
                    i + 1
                )));
            }
            if s.coefficients.nrows() != s.library.len() {
                return Err(Error::DimensionMismatch(format!(
                    "subsystem {} has {} coefficient rows for {} terms",
                    s.id,
                    s.coefficients.nrows(),
                    s.library.len()
                )));
            }
        }
        let k = subsystems.len();
        for r in &rules {
            if r.from_mode == 0 || r.from_mode > k || r.to_mode == 0 || r.to_mode > k || r.from_mode == r.to_mode {
                return Err(Error::InvalidInput(format!(
                    "rule {} → {} does not join two of the {k} modes",
                    r.from_mode, r.to_mode
                )));
            }
        }
        if !(sample_period.is_finite() && sample_period > 0.0) {
            return Err(Error::InvalidInput("sample period must be positive".into()));
        }
        Ok(Self {
            subsystems,
            rules,
            dictionary_spec,
            psi_spec,
            sample_period,
        })
    }

    pub fn k(&self) -> usize {
        self.subsystems.len()
    }

    pub fn n_outputs(&self) -> usize {
        self.subsystems[0].n_outputs()
    }

    pub fn n_inputs(&self) -> usize {
        self.subsystems[0].library.n_inputs()
    }

    /// Mode after `mode` at `(y, u)`: the firing outgoing rule with the
    /// largest margin, ties to the lower target; `mode` itself if none fires.
    pub fn next_mode(&self, mode: usize, y: &[f64], u: &[f64]) -> usize {
        let mut best: Option<(f64, usize)> = None;
        for rule in self.rules.iter().filter(|r| r.from_mode == mode) {
            let margin = rule.margin(y, u);
            if margin < 0.0 {
                continue;
            }
            let better = match best {
                None => true,
                Some((m, to)) => margin > m || (margin == m && rule.to_mode < to),
            };
            if better {
                best = Some((margin, rule.to_mode));
            }
        }
        best.map_or(mode, |(_, to)| to)
    }

    /// Mode trace obtained by running the rules along recorded data from `m0`.
    pub fn track_modes(&self, data: &TimeSeries, m0: usize) -> Vec<usize> {
        let mut modes = Vec::with_capacity(data.transitions());
        let mut m = m0;
        for t in 0..data.transitions() {
            modes.push(m);
            m = self.next_mode(m, &data.output(t), &data.input(t));
        }
        modes
    }
}

/// Output of [`simulate`].
#[derive(Clone, Debug, PartialEq)]
pub struct SimResult {
    /// Simulated samples `0..=steps`, fewer when the run diverged.
    pub trajectory: TimeSeries,
    /// Mode active at every sample of `trajectory`.
    pub mode_trace: Vec<usize>,
    /// Samples at which the mode differs from the previous sample.
    pub switch_times: Vec<usize>,
    pub diverged: bool,
}

/// Iterates `y(t+1) = Φ(y(t), u(t)) · W_{m(t)}`, then `m(t+1)` from the
/// outgoing rules of `m(t)`.
///
/// `u` needs at least `steps` rows when the model has inputs; its last row is
/// repeated for the final sample when only `steps` are given. A state with a
/// non-finite entry or norm above [`DIVERGENCE_GUARD`] ends the run and is
/// not recorded.
pub fn simulate(
    model: &HybridModel,
    y0: &[f64],
    m0: usize,
    u: Option<&DMatrix<f64>>,
    steps: usize,
) -> Result<SimResult> {
    let (n, m_in) = (model.n_outputs(), model.n_inputs());
    if y0.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "initial state has {} entries, model has {n} outputs",
            y0.len()
        )));
    }
    if m0 == 0 || m0 > model.k() {
        return Err(Error::InvalidInput(format!("initial mode {m0} outside 1..={}", model.k())));
    }
    if steps == 0 {
        return Err(Error::InvalidParam {
            name: "steps".into(),
            reason: "must be positive".into(),
        });
    }
    let inputs = match u {
        Some(u) if u.ncols() != m_in => {
            return Err(Error::DimensionMismatch(format!(
                "input has {} columns, model expects {m_in}",
                u.ncols()
            )))
        }
        Some(u) if m_in > 0 && u.nrows() < steps => {
            return Err(Error::DimensionMismatch(format!(
                "{} input rows for {steps} steps",
                u.nrows()
            )))
        }
        None if m_in > 0 => {
            return Err(Error::InvalidInput("model has inputs but none were given".into()));
        }
        Some(u) if m_in > 0 => {
            DMatrix::from_fn(steps + 1, m_in, |r, c| u[(r.min(u.nrows() - 1), c)])
        }
        _ => DMatrix::zeros(steps + 1, 0),
    };
    let input = |t: usize| -> Vec<f64> { inputs.row(t).iter().copied().collect() };

    let mut ys: Vec<Vec<f64>> = vec![y0.to_vec()];
    let mut modes = vec![m0];
    let mut diverged = false;
    for t in 0..steps {
        let (y, m) = (&ys[t], modes[t]);
        let u_t = input(t);
        let next = model.subsystems[m - 1].predict(y, &u_t);
        let norm = next.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm > DIVERGENCE_GUARD {
            diverged = true;
            break;
        }
        let m_next = model.next_mode(m, y, &u_t);
        ys.push(next);
        modes.push(m_next);
    }
    let len = ys.len();
    let outputs = DMatrix::from_fn(len, n, |r, c| ys[r][c]);
    let trajectory = TimeSeries::new(outputs, inputs.rows(0, len).into_owned(), model.sample_period)?;
    let switch_times = (1..len).filter(|&t| modes[t] != modes[t - 1]).collect();
    Ok(SimResult {
        trajectory,
        mode_trace: modes,
        switch_times,
        diverged,
    })
}

/// `100 · ‖Y_true − Y_sim‖_F / ‖Y_true‖_F` over the outputs.
pub fn relative_error_ratio(y_true: &TimeSeries, y_sim: &TimeSeries) -> Result<f64> {
    ratio(&y_true.outputs, &y_sim.outputs)
}

fn ratio(truth: &DMatrix<f64>, approx: &DMatrix<f64>) -> Result<f64> {
    if truth.shape() != approx.shape() {
        return Err(Error::DimensionMismatch(format!(
            "shapes {:?} and {:?} differ",
            truth.shape(),
            approx.shape()
        )));
    }
    let denom = truth.norm();
    if denom == 0.0 {
        return Err(Error::UndefinedRatio);
    }
    Ok(100.0 * (truth - approx).norm() / denom)
}

/// One-step predictions `Φ(t) · W_{labels[t]}` for every transition row.
///
/// Rows labeled [`UNASSIGNED`] use whichever mode predicts them best.
pub fn one_step_predictions(
    models: &[SubsystemModel],
    labels: &[usize],
    data: &TimeSeries,
) -> Result<DMatrix<f64>> {
    if labels.len() != data.transitions() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} transitions",
            labels.len(),
            data.transitions()
        )));
    }
    if models.is_empty() {
        return Err(Error::InvalidInput("no subsystems".into()));
    }
    let n = data.n_outputs();
    let mut out = DMatrix::zeros(labels.len(), n);
    for (t, &label) in labels.iter().enumerate() {
        let (y, u) = (data.output(t), data.input(t));
        let pred = if label == UNASSIGNED {
            let target = data.output(t + 1);
            models
                .iter()
                .map(|m| m.predict(&y, &u))
                .min_by(|a, b| dist(a, &target).total_cmp(&dist(b, &target)))
                .expect("models is non-empty")
        } else {
            let model = models.iter().find(|m| m.id == label).ok_or_else(|| {
                Error::InvalidInput(format!("label {label} names no subsystem"))
            })?;
            model.predict(&y, &u)
        };
        for c in 0..n {
            out[(t, c)] = pred[c];
        }
    }
    Ok(out)
}

/// Mode whose one-step prediction lands closest to `y(t+1)` on every row;
/// ties go to the lower id.
pub fn best_fit_labels(models: &[SubsystemModel], data: &TimeSeries) -> Result<Vec<usize>> {
    if models.is_empty() {
        return Err(Error::InvalidInput("no subsystems".into()));
    }
    Ok((0..data.transitions())
        .map(|t| {
            let (y, u, target) = (data.output(t), data.input(t), data.output(t + 1));
            let mut best = (f64::INFINITY, models[0].id);
            for m in models {
                let d = dist(&m.predict(&y, &u), &target);
                if d < best.0 || d == best.0 && m.id < best.1 {
                    best = (d, m.id);
                }
            }
            best.1
        })
        .collect())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// [`relative_error_ratio`] of the one-step predictions against `y(t+1)`.
pub fn one_step_error_ratio(models: &[SubsystemModel], labels: &[usize], data: &TimeSeries) -> Result<f64> {
    let pred = one_step_predictions(models, labels, data)?;
    let rows: Vec<usize> = (0..data.transitions()).collect();
    ratio(&data.targets(&rows), &pred)
}

/// Fraction of rows whose estimated label matches the truth under the best
/// one-to-one relabeling. Unassigned estimates never match.
pub fn segmentation_accuracy(est: &Segmentation, truth: &[usize]) -> Result<f64> {
    if est.labels.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} estimated labels, {} true",
            est.labels.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Ok(1.0);
    }
    let ke = est.labels.iter().copied().max().unwrap_or(0).max(est.k);
    let kt = truth.iter().copied().max().unwrap_or(0);
    let size = ke.max(kt).max(1);
    let mut counts = Matrix::new(size, size, 0i64);
    for (&e, &t) in est.labels.iter().zip(truth) {
        if e != UNASSIGNED && t != UNASSIGNED {
            counts[(e - 1, t - 1)] += 1;
        }
    }
    let (matched, _) = kuhn_munkres(&counts);
    Ok(matched as f64 / truth.len() as f64)
}
