//! File formats: data CSV, canonical model documents and truth sidecars.
//!
//! Data files have a header `t,y1..yn[,u1..um]` and one uniformly spaced
//! sample per row. Model documents are JSON with sorted keys, two-space
//! indentation and every float written with 17 significant digits, so that
//! loading and saving a document reproduces it byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::dictionary::{DictionarySpec, TimeSeries};
use crate::error::{Error, Result};
use crate::hybrid_sim::{Benchmark, HybridModel};
use crate::pipeline::RunConfig;
use crate::subsystem_id::SubsystemModel;
use crate::transition_id::TransitionRule;

/// Relative tolerance on the spacing of the `t` column.
pub const SPACING_TOL: f64 = 1e-9;

/// Current [`ModelDocument::schema_version`].
pub const SCHEMA_VERSION: u32 = 1;

/// One parsed data row.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub y: Vec<f64>,
    pub u: Vec<f64>,
}

/// Incremental reader for the data CSV; validates spacing as rows arrive.
pub struct StreamReader<R: Read> {
    records: csv::StringRecordsIntoIter<R>,
    n_outputs: usize,
    n_inputs: usize,
    /// First time stamp and spacing, once known.
    t0: Option<f64>,
    dt: Option<f64>,
    index: usize,
}

impl<R: Read> StreamReader<R> {
    /// Reads and checks the header.
    pub fn new(reader: R) -> Result<Self> {
        let mut csv = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = csv.headers().map_err(csv_error)?.clone();
        if header.is_empty() || header.iter().all(str::is_empty) {
            return Err(Error::EmptyRows);
        }
        let (n_outputs, n_inputs) = parse_header(&header)?;
        Ok(Self {
            records: csv.into_records(),
            n_outputs,
            n_inputs,
            t0: None,
            dt: None,
            index: 0,
        })
    }

    pub fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    /// Spacing of the `t` column, known after two rows.
    pub fn sample_period(&self) -> Option<f64> {
        self.dt
    }

    fn parse(&mut self, record: &csv::StringRecord) -> Result<Sample> {
        let line = record.position().map_or(0, |p| p.line() as usize);
        let width = 1 + self.n_outputs + self.n_inputs;
        if record.len() != width {
            return Err(Error::Parse {
                line,
                message: format!("expected {width} fields, found {}", record.len()),
            });
        }
        let mut values = Vec::with_capacity(width);
        for field in record {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                message: format!("`{field}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("`{field}` is not finite"),
                });
            }
            values.push(v);
        }
        let t = values[0];
        match (self.t0, self.dt) {
            (None, _) => self.t0 = Some(t),
            (Some(t0), None) => {
                if t <= t0 {
                    return Err(Error::Parse {
                        line,
                        message: "t must increase".into(),
                    });
                }
                self.dt = Some(t - t0);
            }
            (Some(t0), Some(dt)) => {
                let expected = t0 + self.index as f64 * dt;
                if (t - expected).abs() > SPACING_TOL * expected.abs().max(dt) {
                    return Err(Error::Parse {
                        line,
                        message: format!("non-uniform sampling: t = {t}, expected {expected}"),
                    });
                }
            }
        }
        self.index += 1;
        Ok(Sample {
            t,
            y: values[1..=self.n_outputs].to_vec(),
            u: values[1 + self.n_outputs..].to_vec(),
        })
    }
}

impl<R: Read> Iterator for StreamReader<R> {
    type Item = Result<Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        let record = self.records.next()?;
        Some(record.map_err(csv_error).and_then(|r| self.parse(&r)))
    }
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line,
            message: format!("{other:?}"),
        },
    }
}

/// Counts `(n_outputs, n_inputs)` from a header `t,y1..yn,u1..um`.
fn parse_header(header: &csv::StringRecord) -> Result<(usize, usize)> {
    let bad = |message: String| Error::Parse { line: 1, message };
    let mut fields = header.iter();
    if fields.next() != Some("t") {
        return Err(bad("first column must be `t`".into()));
    }
    let (mut n, mut m) = (0, 0);
    for name in fields {
        if m == 0 && name == format!("y{}", n + 1) {
            n += 1;
        } else if name == format!("u{}", m + 1) {
            m += 1;
        } else {
            return Err(bad(format!("unexpected column `{name}`; expected y{} or u{}", n + 1, m + 1)));
        }
    }
    if n == 0 {
        return Err(bad("no output columns".into()));
    }
    Ok((n, m))
}

/// Reads a whole data file. At least two samples are required.
pub fn read_csv<R: Read>(reader: R) -> Result<TimeSeries> {
    let mut stream = StreamReader::new(reader)?;
    let (n, m) = (stream.n_outputs(), stream.n_inputs());
    let mut ys = Vec::new();
    let mut us = Vec::new();
    let mut rows = 0;
    for sample in stream.by_ref() {
        let s = sample?;
        ys.extend(s.y);
        us.extend(s.u);
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::EmptyRows);
    }
    let dt = stream
        .sample_period()
        .ok_or_else(|| Error::InvalidInput("a data file needs at least two samples".into()))?;
    TimeSeries::new(
        DMatrix::from_row_slice(rows, n, &ys),
        DMatrix::from_row_slice(rows, m, &us),
        dt,
    )
}

pub fn read_csv_path(path: &Path) -> Result<TimeSeries> {
    read_csv(std::fs::File::open(path)?)
}

/// Writes `data` with time stamps `t0 + k · sample_period`.
pub fn write_csv<W: Write>(writer: W, data: &TimeSeries, t0: f64) -> Result<()> {
    let (n, m) = (data.n_outputs(), data.n_inputs());
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|k| format!("y{k}")));
    header.extend((1..=m).map(|k| format!("u{k}")));
    write_table(writer, &header, (0..data.samples()).map(|t| {
        let mut row = vec![t0 + t as f64 * data.sample_period];
        row.extend(data.output(t));
        row.extend(data.input(t));
        row
    }))
}

/// Writes numeric rows under `header`; floats use the shortest round-trip form.
pub fn write_table<W: Write, I: IntoIterator<Item = Vec<f64>>>(writer: W, header: &[String], rows: I) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(header).map_err(csv_error)?;
    for row in rows {
        csv.write_record(row.iter().map(|v| v.to_string())).map_err(csv_error)?;
    }
    csv.flush()?;
    Ok(())
}

/// Canonical text of a JSON value: sorted keys, two-space indentation,
/// floats as `{:.16e}`, trailing newline.
pub fn to_canonical_json(value: &Value) -> Result<String> {
    let mut out = String::new();
    write_value(&mut out, value, 0)?;
    out.push('\n');
    Ok(out)
}

fn write_value(out: &mut String, value: &Value, depth: usize) -> Result<()> {
    let pad = |out: &mut String, d: usize| out.extend(std::iter::repeat_n("  ", d));
    match value {
        Value::Null | Value::Bool(_) | Value::String(_) => out.push_str(&value.to_string()),
        Value::Number(n) => {
            if let Some(f) = n.as_f64().filter(|_| n.is_f64()) {
                if !f.is_finite() {
                    return Err(Error::InvalidInput("non-finite number in document".into()));
                }
                write!(out, "{f:.16e}").expect("writing to a String cannot fail");
            } else {
                out.push_str(&n.to_string());
            }
        }
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return Ok(());
            }
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                pad(out, depth + 1);
                write_value(out, item, depth + 1)?;
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            pad(out, depth);
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return Ok(());
            }
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push_str("{\n");
            for (i, key) in keys.iter().enumerate() {
                pad(out, depth + 1);
                out.push_str(&Value::String((*key).clone()).to_string());
                out.push_str(": ");
                write_value(out, &map[key.as_str()], depth + 1)?;
                out.push_str(if i + 1 < keys.len() { ",\n" } else { "\n" });
            }
            pad(out, depth);
            out.push('}');
        }
    }
    Ok(())
}

/// Canonical text of any serializable value.
pub fn canonical_string<T: Serialize>(value: &T) -> Result<String> {
    to_canonical_json(&serde_json::to_value(value)?)
}

/// Hex SHA-256 of the canonical configuration text.
pub fn config_hash(cfg: &RunConfig) -> Result<String> {
    Ok(hex::encode(Sha256::digest(canonical_string(cfg)?.as_bytes())))
}

/// Hex SHA-256 over the shape, sample period and raw bits of every value.
pub fn data_fingerprint(data: &TimeSeries) -> String {
    let mut h = Sha256::new();
    for dim in [data.samples(), data.n_outputs(), data.n_inputs()] {
        h.update((dim as u64).to_le_bytes());
    }
    h.update(data.sample_period.to_bits().to_le_bytes());
    for t in 0..data.samples() {
        for v in data.output(t).into_iter().chain(data.input(t)) {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// A term name with its coefficient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermCoeff {
    pub name: String,
    pub coeff: f64,
}

/// Coefficients of one output over the subsystem's full term list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputDoc {
    pub output: String,
    pub terms: Vec<TermCoeff>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsystemDoc {
    pub id: usize,
    /// Rows assigned to this subsystem when it was fitted.
    pub samples: usize,
    pub outputs: Vec<OutputDoc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionDoc {
    pub from: usize,
    pub to: usize,
    pub terms: Vec<TermCoeff>,
    pub accuracy: f64,
    pub flagged: bool,
    /// Rendered predicate; informational, ignored on load.
    pub predicate: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    #[serde(default)]
    pub config_hash: Option<String>,
    #[serde(default)]
    pub data_fingerprint: Option<String>,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

/// Serialized [`HybridModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub schema_version: u32,
    pub n_outputs: usize,
    pub n_inputs: usize,
    pub sample_period: f64,
    pub dictionary: DictionarySpec,
    pub psi_dictionary: DictionarySpec,
    pub subsystems: Vec<SubsystemDoc>,
    pub transitions: Vec<TransitionDoc>,
    pub metadata: Metadata,
}

impl ModelDocument {
    pub fn from_model(model: &HybridModel, metadata: Metadata) -> Self {
        let n = model.n_outputs();
        let subsystems = model
            .subsystems
            .iter()
            .map(|s| SubsystemDoc {
                id: s.id,
                samples: s.fit_rows.len(),
                outputs: (0..n)
                    .map(|k| OutputDoc {
                        output: crate::dictionary::signal_name(k, n),
                        terms: term_coeffs(s.term_names(), s.coefficients.column(k).iter()),
                    })
                    .collect(),
            })
            .collect();
        let transitions = model
            .rules
            .iter()
            .map(|r| TransitionDoc {
                from: r.from_mode,
                to: r.to_mode,
                terms: term_coeffs(r.term_names(), r.v.iter()),
                accuracy: r.training_accuracy,
                flagged: r.flagged,
                predicate: r.predicate_string(6),
            })
            .collect();
        Self {
            schema_version: SCHEMA_VERSION,
            n_outputs: n,
            n_inputs: model.n_inputs(),
            sample_period: model.sample_period,
            dictionary: model.dictionary_spec.clone(),
            psi_dictionary: model.psi_spec.clone(),
            subsystems,
            transitions,
            metadata,
        }
    }

    /// Rebuilds the model; term lists must name terms of the stored dictionaries.
    pub fn to_model(&self) -> Result<HybridModel> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported schema version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let phi_lib = self.dictionary.library(self.n_outputs, self.n_inputs)?;
        let psi_lib = self.psi_dictionary.library(self.n_outputs, self.n_inputs)?;
        let mut subsystems = Vec::with_capacity(self.subsystems.len());
        for s in &self.subsystems {
            if s.outputs.len() != self.n_outputs {
                return Err(Error::DimensionMismatch(format!(
                    "subsystem {} lists {} outputs, document declares {}",
                    s.id,
                    s.outputs.len(),
                    self.n_outputs
                )));
            }
            let names: Vec<&str> = s.outputs[0].terms.iter().map(|t| t.name.as_str()).collect();
            let library = phi_lib.select_by_name(&names)?;
            let mut coefficients = DMatrix::zeros(names.len(), self.n_outputs);
            for (k, out) in s.outputs.iter().enumerate() {
                if !out.terms.iter().map(|t| t.name.as_str()).eq(names.iter().copied()) {
                    return Err(Error::DictionaryMismatch(format!(
                        "subsystem {} output {} lists different terms",
                        s.id, out.output
                    )));
                }
                for (r, t) in out.terms.iter().enumerate() {
                    coefficients[(r, k)] = t.coeff;
                }
            }
            subsystems.push(SubsystemModel {
                id: s.id,
                coefficients,
                library,
                fit_rows: vec![],
            });
        }
        let rules = self
            .transitions
            .iter()
            .map(|r| {
                let names: Vec<&str> = r.terms.iter().map(|t| t.name.as_str()).collect();
                Ok(TransitionRule {
                    from_mode: r.from,
                    to_mode: r.to,
                    v: DVector::from_iterator(names.len(), r.terms.iter().map(|t| t.coeff)),
                    library: psi_lib.select_by_name(&names)?,
                    training_accuracy: r.accuracy,
                    flagged: r.flagged,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        HybridModel::new(
            subsystems,
            rules,
            self.dictionary.clone(),
            self.psi_dictionary.clone(),
            self.sample_period,
        )
    }

    pub fn to_canonical_string(&self) -> Result<String> {
        canonical_string(self)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_canonical_string()?)?;
        Ok(())
    }
}

fn term_coeffs<'a>(names: &[String], coeffs: impl Iterator<Item = &'a f64>) -> Vec<TermCoeff> {
    names
        .iter()
        .zip(coeffs)
        .map(|(name, &coeff)| TermCoeff {
            name: name.clone(),
            coeff,
        })
        .collect()
}

/// Ground truth written next to a generated data file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthDocument {
    pub benchmark: String,
    pub params: BTreeMap<String, f64>,
    pub steps: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// True mode of every transition row.
    pub modes: Vec<usize>,
    pub model: ModelDocument,
}

impl TruthDocument {
    pub fn from_benchmark(b: &Benchmark) -> Self {
        Self {
            benchmark: b.name.as_str().to_string(),
            params: b.params.clone(),
            steps: b.modes.len(),
            noise_std: b.noise_std,
            seed: b.seed,
            modes: b.modes.clone(),
            model: ModelDocument::from_model(&b.truth, Metadata::default()),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, canonical_string(self)?)?;
        Ok(())
    }
}

/// Sidecar path for a data file: `data.csv` → `data.truth.json`.
pub fn truth_path(data_path: &Path) -> std::path::PathBuf {
    data_path.with_extension("truth.json")
}
