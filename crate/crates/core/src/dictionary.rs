//! Candidate-function libraries evaluated on sampled data.
//!
//! A [`DictionarySpec`] expands into a [`Library`]: an ordered list of basis
//! terms over the signals `y1..yn, u1..um`. Evaluating a library on rows of a
//! [`TimeSeries`] yields a [`DesignMatrix`] whose row `t` depends only on the
//! sample at time `t`.
//!
//! Column order is fixed: constant, linear terms, higher monomials by degree
//! (graded lexicographic in signal index), `sin`/`cos` pairs per signal, then
//! custom terms in declaration order.

use std::fmt;
use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Declarative description of a candidate-function library.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DictionarySpec {
    #[serde(default = "default_order")]
    pub polynomial_order: u32,
    #[serde(default = "default_true")]
    pub include_constant: bool,
    #[serde(default)]
    pub include_trig: bool,
    #[serde(default)]
    pub custom_terms: Vec<CustomTerm>,
}

fn default_order() -> u32 {
    1
}

fn default_true() -> bool {
    true
}

impl Default for DictionarySpec {
    fn default() -> Self {
        Self {
            polynomial_order: 1,
            include_constant: true,
            include_trig: false,
            custom_terms: Vec::new(),
        }
    }
}

impl DictionarySpec {
    /// Affine library `[1, y1..yn, u1..um]`.
    pub fn affine() -> Self {
        Self::default()
    }

    pub fn polynomial(order: u32) -> Self {
        Self {
            polynomial_order: order,
            ..Self::default()
        }
    }

    pub fn with_trig(mut self) -> Self {
        self.include_trig = true;
        self
    }

    /// Expands the spec over `n_outputs` outputs and `n_inputs` inputs.
    pub fn library(&self, n_outputs: usize, n_inputs: usize) -> Result<Library> {
        let signals = n_outputs + n_inputs;
        let mut terms = Vec::new();
        if self.include_constant {
            terms.push(Term::Constant);
        }
        for degree in 1..=self.polynomial_order as usize {
            let mut combo = vec![0usize; degree];
            if signals == 0 {
                break;
            }
            loop {
                terms.push(Term::Monomial(combo.clone()));
                // next combination with replacement, lexicographic
                let Some(pos) = combo.iter().rposition(|&i| i + 1 < signals) else {
                    break;
                };
                let next = combo[pos] + 1;
                for slot in &mut combo[pos..] {
                    *slot = next;
                }
            }
        }
        if self.include_trig {
            for s in 0..signals {
                terms.push(Term::Sin(s));
                terms.push(Term::Cos(s));
            }
        }
        for custom in &self.custom_terms {
            terms.push(custom.resolve(n_outputs, n_inputs)?);
        }
        let mut names: Vec<String> = terms.iter().map(|t| t.name(n_outputs)).collect();
        for (custom, name) in self
            .custom_terms
            .iter()
            .zip(names.iter_mut().skip(terms.len() - self.custom_terms.len()))
        {
            if let Some(given) = &custom.name {
                *name = given.clone();
            }
        }
        for (i, name) in names.iter().enumerate() {
            if names[..i].contains(name) {
                return Err(Error::InvalidInput(format!("duplicate term name `{name}`")));
            }
        }
        Ok(Library {
            terms,
            names,
            n_outputs,
            n_inputs,
        })
    }
}

/// Operators available to custom terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CustomOp {
    Sin,
    Cos,
    Exp,
    Abs,
    Tanh,
    Sigmoid,
    Mul,
    Div,
    Add,
    Sub,
    Max,
    Min,
}

impl CustomOp {
    fn arity(self) -> usize {
        match self {
            CustomOp::Sin
            | CustomOp::Cos
            | CustomOp::Exp
            | CustomOp::Abs
            | CustomOp::Tanh
            | CustomOp::Sigmoid => 1,
            _ => 2,
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            CustomOp::Sin => a.sin(),
            CustomOp::Cos => a.cos(),
            CustomOp::Exp => a.exp(),
            CustomOp::Abs => a.abs(),
            CustomOp::Tanh => a.tanh(),
            CustomOp::Sigmoid => 1.0 / (1.0 + (-a).exp()),
            CustomOp::Mul => a * b,
            CustomOp::Div => a / b,
            CustomOp::Add => a + b,
            CustomOp::Sub => a - b,
            CustomOp::Max => a.max(b),
            CustomOp::Min => a.min(b),
        }
    }

    fn label(self) -> &'static str {
        match self {
            CustomOp::Sin => "sin",
            CustomOp::Cos => "cos",
            CustomOp::Exp => "exp",
            CustomOp::Abs => "abs",
            CustomOp::Tanh => "tanh",
            CustomOp::Sigmoid => "sigmoid",
            CustomOp::Mul => "mul",
            CustomOp::Div => "div",
            CustomOp::Add => "add",
            CustomOp::Sub => "sub",
            CustomOp::Max => "max",
            CustomOp::Min => "min",
        }
    }
}

/// A user-declared unary or binary composition over signals, e.g.
/// `{"op": "abs", "args": ["y1"]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomTerm {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub op: CustomOp,
    pub args: Vec<String>,
}

impl CustomTerm {
    fn resolve(&self, n_outputs: usize, n_inputs: usize) -> Result<Term> {
        if self.args.len() != self.op.arity() {
            return Err(Error::InvalidInput(format!(
                "custom term `{}` expects {} argument(s), got {}",
                self.op.label(),
                self.op.arity(),
                self.args.len()
            )));
        }
        let args = self
            .args
            .iter()
            .map(|a| parse_signal(a, n_outputs, n_inputs))
            .collect::<Result<Vec<_>>>()?;
        Ok(Term::Custom { op: self.op, args })
    }
}

fn parse_signal(name: &str, n_outputs: usize, n_inputs: usize) -> Result<usize> {
    let bad = || Error::InvalidInput(format!("unknown signal `{name}`"));
    let (kind, idx) = name.split_at_checked(1).ok_or_else(bad)?;
    let idx: usize = idx.parse().map_err(|_| bad())?;
    match kind {
        "y" if (1..=n_outputs).contains(&idx) => Ok(idx - 1),
        "u" if (1..=n_inputs).contains(&idx) => Ok(n_outputs + idx - 1),
        _ => Err(bad()),
    }
}

/// Name of signal `index` where outputs occupy `0..n_outputs`.
pub fn signal_name(index: usize, n_outputs: usize) -> String {
    if index < n_outputs {
        format!("y{}", index + 1)
    } else {
        format!("u{}", index - n_outputs + 1)
    }
}

/// One basis function over the concatenated signal vector `[y, u]`.
#[derive(Clone, Debug, PartialEq)]
pub enum Term {
    Constant,
    /// Product of the listed signals (non-decreasing indices, repeats are powers).
    Monomial(Vec<usize>),
    Sin(usize),
    Cos(usize),
    Custom { op: CustomOp, args: Vec<usize> },
}

impl Term {
    pub fn eval(&self, signals: &[f64]) -> f64 {
        match self {
            Term::Constant => 1.0,
            Term::Monomial(idx) => idx.iter().map(|&i| signals[i]).product(),
            Term::Sin(i) => signals[*i].sin(),
            Term::Cos(i) => signals[*i].cos(),
            Term::Custom { op, args } => {
                let a = signals[args[0]];
                let b = args.get(1).map_or(0.0, |&j| signals[j]);
                op.apply(a, b)
            }
        }
    }

    pub fn name(&self, n_outputs: usize) -> String {
        match self {
            Term::Constant => "1".to_string(),
            Term::Monomial(idx) => {
                let mut parts = Vec::new();
                let mut i = 0;
                while i < idx.len() {
                    let run = idx[i..].iter().take_while(|&&j| j == idx[i]).count();
                    let base = signal_name(idx[i], n_outputs);
                    parts.push(if run == 1 { base } else { format!("{base}^{run}") });
                    i += run;
                }
                parts.join("*")
            }
            Term::Sin(i) => format!("sin({})", signal_name(*i, n_outputs)),
            Term::Cos(i) => format!("cos({})", signal_name(*i, n_outputs)),
            Term::Custom { op, args } => {
                let args: Vec<String> = args.iter().map(|&a| signal_name(a, n_outputs)).collect();
                format!("{}({})", op.label(), args.join(","))
            }
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Term::Constant)
    }
}

/// An expanded, ordered set of basis terms.
#[derive(Clone, Debug, PartialEq)]
pub struct Library {
    terms: Vec<Term>,
    names: Vec<String>,
    n_outputs: usize,
    n_inputs: usize,
}

impl Library {
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Index of the constant column, if any.
    pub fn constant_index(&self) -> Option<usize> {
        self.terms.iter().position(Term::is_constant)
    }

    /// Sub-library with the given columns, in the given order.
    pub fn select(&self, columns: &[usize]) -> Library {
        Library {
            terms: columns.iter().map(|&c| self.terms[c].clone()).collect(),
            names: columns.iter().map(|&c| self.names[c].clone()).collect(),
            n_outputs: self.n_outputs,
            n_inputs: self.n_inputs,
        }
    }

    /// Sub-library picked by term name.
    pub fn select_by_name<S: AsRef<str>>(&self, names: &[S]) -> Result<Library> {
        let cols = names
            .iter()
            .map(|n| {
                self.position(n.as_ref())
                    .ok_or_else(|| Error::DictionaryMismatch(format!("no term `{}`", n.as_ref())))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.select(&cols))
    }

    /// Evaluates every term at a single sample.
    pub fn evaluate(&self, y: &[f64], u: &[f64]) -> Vec<f64> {
        let mut signals = Vec::with_capacity(y.len() + u.len());
        signals.extend_from_slice(y);
        signals.extend_from_slice(u);
        self.terms.iter().map(|t| t.eval(&signals)).collect()
    }

    /// Evaluates the library on the given transition rows of `data`.
    pub fn design(&self, data: &TimeSeries, rows: &[usize]) -> Result<DesignMatrix> {
        if data.n_outputs() != self.n_outputs || data.n_inputs() != self.n_inputs {
            return Err(Error::DimensionMismatch(format!(
                "library expects {} outputs / {} inputs, data has {} / {}",
                self.n_outputs,
                self.n_inputs,
                data.n_outputs(),
                data.n_inputs()
            )));
        }
        let mut values = DMatrix::zeros(rows.len(), self.len());
        let mut signals = vec![0.0; self.n_outputs + self.n_inputs];
        for (r, &t) in rows.iter().enumerate() {
            if t >= data.samples() {
                return Err(Error::InvalidInput(format!("row {t} out of range")));
            }
            for (i, s) in signals.iter_mut().enumerate() {
                *s = if i < self.n_outputs {
                    data.outputs[(t, i)]
                } else {
                    data.inputs[(t, i - self.n_outputs)]
                };
            }
            for (c, term) in self.terms.iter().enumerate() {
                let v = term.eval(&signals);
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        term: self.names[c].clone(),
                        row: t,
                    });
                }
                values[(r, c)] = v;
            }
        }
        Ok(DesignMatrix {
            values,
            library: self.clone(),
            column_scales: None,
            dropped: Vec::new(),
        })
    }
}

impl fmt::Display for Library {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}]", self.names.join(", "))
    }
}

/// Uniformly sampled outputs `Y` and inputs `U`, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    pub outputs: DMatrix<f64>,
    pub inputs: DMatrix<f64>,
    pub sample_period: f64,
}

impl TimeSeries {
    pub fn new(outputs: DMatrix<f64>, inputs: DMatrix<f64>, sample_period: f64) -> Result<Self> {
        if outputs.nrows() != inputs.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} output rows vs {} input rows",
                outputs.nrows(),
                inputs.nrows()
            )));
        }
        if !(sample_period.is_finite() && sample_period > 0.0) {
            return Err(Error::InvalidInput(format!(
                "sample period must be positive, got {sample_period}"
            )));
        }
        if outputs.iter().chain(inputs.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("time series contains non-finite values".into()));
        }
        Ok(Self {
            outputs,
            inputs,
            sample_period,
        })
    }

    /// Outputs only, no inputs.
    pub fn autonomous(outputs: DMatrix<f64>, sample_period: f64) -> Result<Self> {
        let rows = outputs.nrows();
        Self::new(outputs, DMatrix::zeros(rows, 0), sample_period)
    }

    /// Number of samples `M + 1`.
    pub fn samples(&self) -> usize {
        self.outputs.nrows()
    }

    /// Number of transitions `M` (rows of a design matrix over the full series).
    pub fn transitions(&self) -> usize {
        self.samples().saturating_sub(1)
    }

    pub fn n_outputs(&self) -> usize {
        self.outputs.ncols()
    }

    pub fn n_inputs(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn output(&self, t: usize) -> Vec<f64> {
        self.outputs.row(t).iter().copied().collect()
    }

    /// Output `k` over all samples.
    pub fn output_column(&self, k: usize) -> Vec<f64> {
        self.outputs.column(k).iter().copied().collect()
    }

    pub fn input(&self, t: usize) -> Vec<f64> {
        self.inputs.row(t).iter().copied().collect()
    }

    /// Next-step targets `y(t+1)` for each transition row `t`.
    pub fn targets(&self, rows: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), self.n_outputs(), |r, c| self.outputs[(rows[r] + 1, c)])
    }

    /// Samples `range` as a new series.
    pub fn slice(&self, range: Range<usize>) -> TimeSeries {
        let len = range.end - range.start;
        TimeSeries {
            outputs: self.outputs.rows(range.start, len).into_owned(),
            inputs: self.inputs.rows(range.start, len).into_owned(),
            sample_period: self.sample_period,
        }
    }
}

/// Dictionary evaluated on data rows, with the term list that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignMatrix {
    pub values: DMatrix<f64>,
    pub library: Library,
    /// Per-column ℓ2 norms recorded by [`normalize_columns`].
    pub column_scales: Option<Vec<f64>>,
    /// Names of identically-zero columns removed during construction.
    pub dropped: Vec<String>,
}

impl DesignMatrix {
    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn term_names(&self) -> &[String] {
        self.library.names()
    }

    /// Rows picked by position.
    pub fn select_rows(&self, rows: &[usize]) -> DesignMatrix {
        DesignMatrix {
            values: self.values.select_rows(rows),
            library: self.library.clone(),
            column_scales: self.column_scales.clone(),
            dropped: self.dropped.clone(),
        }
    }

    /// Undoes [`normalize_columns`] on the matrix values.
    pub fn denormalized(&self) -> DesignMatrix {
        let mut out = self.clone();
        if let Some(scales) = out.column_scales.take() {
            for (c, s) in scales.iter().enumerate() {
                out.values.column_mut(c).scale_mut(*s);
            }
        }
        out
    }

    /// Maps coefficients fitted on the normalized matrix back to raw units.
    pub fn denormalize_coefficients(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.column_scales {
            None => w.clone(),
            Some(scales) => DMatrix::from_fn(w.nrows(), w.ncols(), |r, c| w[(r, c)] / scales[r]),
        }
    }
}

/// Evaluates `spec` on transition rows `rows` (0-based, within `0..M`).
///
/// Identically-zero columns are dropped and listed in
/// [`DesignMatrix::dropped`].
pub fn build_design_matrix(
    data: &TimeSeries,
    spec: &DictionarySpec,
    rows: Range<usize>,
) -> Result<DesignMatrix> {
    if rows.end > data.transitions() {
        return Err(Error::InvalidInput(format!(
            "rows {rows:?} exceed the {} available transitions",
            data.transitions()
        )));
    }
    let library = spec.library(data.n_outputs(), data.n_inputs())?;
    let rows: Vec<usize> = rows.collect();
    let full = library.design(data, &rows)?;
    Ok(drop_zero_columns(full))
}

pub(crate) fn drop_zero_columns(full: DesignMatrix) -> DesignMatrix {
    if full.rows() == 0 {
        return full;
    }
    let (keep, dropped): (Vec<usize>, Vec<usize>) =
        (0..full.cols()).partition(|&c| full.values.column(c).iter().any(|&v| v != 0.0));
    if dropped.is_empty() {
        return full;
    }
    let dropped: Vec<String> = dropped.iter().map(|&c| full.library.names()[c].clone()).collect();
    tracing::warn!(columns = ?dropped, "dropping identically-zero dictionary columns");
    DesignMatrix {
        values: full.values.select_columns(&keep),
        library: full.library.select(&keep),
        column_scales: None,
        dropped,
    }
}

/// Scales every column to unit ℓ2 norm, recording the scales.
pub fn normalize_columns(phi: &DesignMatrix) -> Result<DesignMatrix> {
    let base = phi.denormalized();
    let mut out = base.clone();
    let mut scales = Vec::with_capacity(base.cols());
    for c in 0..base.cols() {
        let norm = base.values.column(c).norm();
        if norm == 0.0 {
            return Err(Error::ZeroColumn {
                term: base.library.names()[c].clone(),
            });
        }
        out.values.column_mut(c).unscale_mut(norm);
        scales.push(norm);
    }
    out.column_scales = Some(scales);
    Ok(out)
}
