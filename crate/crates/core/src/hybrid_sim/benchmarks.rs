//! Synthetic hybrid systems with known generating models.
//!
//! Every generator steps its own native equations, then replays the trace
//! through the ground-truth [`HybridModel`] it returns: each recorded step
//! must match the truth dynamics and each recorded mode the truth rules.
//!
//! All generators use the affine dictionary `[1, y…, u…]` for both the
//! dynamics and the predicates.
//!
//! | name | outputs | inputs | modes | native switching |
//! |---|---|---|---|---|
//! | `thermostat` | 1 | 0 | on, off | off once `y ≥ upper`, on once `y ≤ lower` |
//! | `chua` | 3 | 0 | inner, right, left | region of the next `x` (`x ≥ 1`, `x ≤ −1`) |
//! | `pwa2` | 2 | 1 | two random stable maps | side of a line through the next state |
//! | `relay_hysteresis` | 1 | 1 | on, off | off once `u ≤ lo`, on once `u ≥ hi` |
//! | `grid_switch` | 5 | 2 | closed, line (3,4) open | open once `y3 ≥ hi`, reclose once `y3 ≤ lo` |
//! | `gating_toy` | 2 | 0 | fast, slow | slow once `y2 ≥ g_hi`, fast once `y2 ≤ g_lo` |

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::HybridModel;
use crate::dictionary::{DictionarySpec, TimeSeries};
use crate::error::{Error, Result};
use crate::subsystem_id::SubsystemModel;
use crate::transition_id::{normalize, TransitionRule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkName {
    Thermostat,
    Chua,
    Pwa2,
    RelayHysteresis,
    GridSwitch,
    GatingToy,
}

pub const BENCHMARKS: [BenchmarkName; 6] = [
    BenchmarkName::Thermostat,
    BenchmarkName::Chua,
    BenchmarkName::Pwa2,
    BenchmarkName::RelayHysteresis,
    BenchmarkName::GridSwitch,
    BenchmarkName::GatingToy,
];

impl BenchmarkName {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Thermostat => "thermostat",
            Self::Chua => "chua",
            Self::Pwa2 => "pwa2",
            Self::RelayHysteresis => "relay_hysteresis",
            Self::GridSwitch => "grid_switch",
            Self::GatingToy => "gating_toy",
        }
    }

    /// Parameter names with their defaults.
    pub fn defaults(self) -> BTreeMap<String, f64> {
        let pairs: &[(&str, f64)] = match self {
            Self::Thermostat => &[
                ("a", 0.1),
                ("h", 0.1),
                ("lower", 19.0),
                ("upper", 21.0),
                ("heater", 30.0),
                ("heater_only", 0.0),
                ("y0", 20.0),
                ("initial_on", 1.0),
            ],
            Self::Chua => &[
                ("alpha", 15.6),
                ("beta", 28.0),
                ("m0", -8.0 / 7.0),
                ("m1", -5.0 / 7.0),
                ("h", 0.005),
                ("x0", 0.7),
                ("y0", 0.0),
                ("z0", 0.0),
            ],
            Self::Pwa2 => &[
                ("dim", 2.0),
                ("map_seed", 7.0),
                ("input_gain", 0.5),
                ("offset", 1.5),
                ("y0", 0.3),
            ],
            Self::RelayHysteresis => &[
                ("a", 0.8),
                ("b", 0.2),
                ("c", 0.5),
                ("lo", -0.5),
                ("hi", 0.5),
                ("amplitude", 1.0),
                ("period", 40.0),
                ("jitter", 0.1),
                ("input_seed", 11.0),
            ],
            Self::GridSwitch => &[
                ("h", 0.1),
                ("shunt", 0.5),
                ("lo", 0.55),
                ("hi", 0.9),
                ("period", 60.0),
                ("jitter", 0.3),
                ("input_seed", 13.0),
            ],
            Self::GatingToy => &[
                ("h", 0.1),
                ("k_rise", 1.5),
                ("k_block", 1.0),
                ("k_fast", 2.0),
                ("k_slow", 0.2),
                ("k_leak", 0.5),
                ("g_lo", 0.1),
                ("g_hi", 0.9),
            ],
        };
        pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect()
    }
}

impl fmt::Display for BenchmarkName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchmarkName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BENCHMARKS
            .iter()
            .copied()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::UnknownBenchmark(s.to_string()))
    }
}

/// A generated trace with its ground truth.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub name: BenchmarkName,
    /// Every parameter, defaults included.
    pub params: BTreeMap<String, f64>,
    /// Clean trace plus measurement noise on the outputs.
    pub data: TimeSeries,
    pub clean: TimeSeries,
    pub truth: HybridModel,
    /// Mode of every transition row `0..steps`.
    pub modes: Vec<usize>,
    pub noise_std: f64,
    pub seed: u64,
}

impl Benchmark {
    pub fn initial_mode(&self) -> usize {
        self.modes[0]
    }
}

/// Runs generator `name` for `steps` transitions (`steps + 1` samples).
///
/// Unknown parameter names and out-of-range values are rejected. Gaussian
/// noise with standard deviation `noise_std`, drawn from `seed`, is added to
/// the outputs only.
pub fn generate_benchmark(
    name: BenchmarkName,
    params: &BTreeMap<String, f64>,
    steps: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Benchmark> {
    if steps == 0 {
        return Err(invalid("steps", "must be positive"));
    }
    if !(noise_std.is_finite() && noise_std >= 0.0) {
        return Err(invalid("noise_std", "must be non-negative"));
    }
    let mut all = name.defaults();
    for (k, &v) in params {
        if !all.contains_key(k) {
            return Err(invalid(k, &format!("not a parameter of {name}")));
        }
        if !v.is_finite() {
            return Err(invalid(k, "must be finite"));
        }
        all.insert(k.clone(), v);
    }
    let p = Params(&all);
    let native = match name {
        BenchmarkName::Thermostat => thermostat(&p, steps)?,
        BenchmarkName::Chua => chua(&p, steps)?,
        BenchmarkName::Pwa2 => pwa2(&p, steps)?,
        BenchmarkName::RelayHysteresis => relay(&p, steps)?,
        BenchmarkName::GridSwitch => grid(&p, steps)?,
        BenchmarkName::GatingToy => gating(&p, steps)?,
    };
    let Native {
        ys,
        us,
        modes,
        mut truth,
        sample_period,
    } = native;
    let n = ys[0].len();
    let m_in = us.first().map_or(0, |u| u.len());
    let outputs = DMatrix::from_fn(steps + 1, n, |r, c| ys[r][c]);
    let inputs = DMatrix::from_fn(steps + 1, m_in, |r, c| us[r][c]);
    let clean = TimeSeries::new(outputs, inputs, sample_period)?;
    self_check(name, &truth, &clean, &modes)?;
    for s in &mut truth.subsystems {
        s.fit_rows = (0..steps).filter(|&t| modes[t] == s.id).collect();
    }

    let mut data = clean.clone();
    if noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_std).map_err(|e| invalid("noise_std", &e.to_string()))?;
        for v in data.outputs.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(Benchmark {
        name,
        params: all,
        data,
        clean,
        truth,
        modes: modes[..steps].to_vec(),
        noise_std,
        seed,
    })
}

fn invalid(name: &str, reason: &str) -> Error {
    Error::InvalidParam {
        name: name.to_string(),
        reason: reason.to_string(),
    }
}

struct Params<'a>(&'a BTreeMap<String, f64>);

impl Params<'_> {
    fn get(&self, key: &str) -> f64 {
        self.0[key]
    }

    fn positive(&self, key: &str) -> Result<f64> {
        let v = self.get(key);
        if v > 0.0 {
            Ok(v)
        } else {
            Err(invalid(key, "must be positive"))
        }
    }

    fn flag(&self, key: &str) -> Result<bool> {
        let v = self.get(key);
        if v == 0.0 {
            Ok(false)
        } else if v == 1.0 {
            Ok(true)
        } else {
            Err(invalid(key, "must be 0 or 1"))
        }
    }

    fn seed(&self, key: &str) -> Result<u64> {
        let v = self.get(key);
        if v >= 0.0 && v.fract() == 0.0 && v < 2f64.powi(53) {
            Ok(v as u64)
        } else {
            Err(invalid(key, "must be a non-negative integer"))
        }
    }

    fn ordered(&self, lo: &str, hi: &str) -> Result<(f64, f64)> {
        let (a, b) = (self.get(lo), self.get(hi));
        if a < b {
            Ok((a, b))
        } else {
            Err(invalid(lo, &format!("must be below {hi}")))
        }
    }
}

struct Native {
    ys: Vec<Vec<f64>>,
    us: Vec<Vec<f64>>,
    /// Mode at every sample, `steps + 1` entries.
    modes: Vec<usize>,
    truth: HybridModel,
    sample_period: f64,
}

/// Affine mode `y' = c + A y + B u` over `[1, y…, u…]`.
fn affine_mode(id: usize, c: &[f64], a: &DMatrix<f64>, b: &DMatrix<f64>) -> SubsystemModel {
    let (n, m) = (c.len(), b.ncols());
    let library = DictionarySpec::affine().library(n, m).expect("affine library");
    let coefficients = DMatrix::from_fn(1 + n + m, n, |term, out| match term {
        0 => c[out],
        t if t <= n => a[(out, t - 1)],
        t => b[(out, t - 1 - n)],
    });
    SubsystemModel {
        id,
        coefficients,
        library,
        fit_rows: vec![],
    }
}

/// Rule with raw coefficients `v` over `[1, y…, u…]`.
fn affine_rule(from: usize, to: usize, n: usize, m: usize, v: DVector<f64>) -> TransitionRule {
    let library = DictionarySpec::affine().library(n, m).expect("affine library");
    TransitionRule {
        from_mode: from,
        to_mode: to,
        v: normalize(&library, v),
        library,
        training_accuracy: 1.0,
        flagged: false,
    }
}

/// Rule firing when `g0 + g · y(t+1) ≥ 0`, with `y(t+1)` given by mode `from`.
fn next_state_rule(from: &SubsystemModel, to: usize, g0: f64, g: &[f64]) -> TransitionRule {
    let mut v = &from.coefficients * DVector::from_column_slice(g);
    v[0] += g0;
    let (n, m) = (from.n_outputs(), from.library.n_inputs());
    affine_rule(from.id, to, n, m, v)
}

fn model(subsystems: Vec<SubsystemModel>, rules: Vec<TransitionRule>, h: f64) -> HybridModel {
    HybridModel::new(subsystems, rules, DictionarySpec::affine(), DictionarySpec::affine(), h)
        .expect("generator builds a consistent model")
}

fn self_check(name: BenchmarkName, truth: &HybridModel, data: &TimeSeries, modes: &[usize]) -> Result<()> {
    for t in 0..data.transitions() {
        let (y, u) = (data.output(t), data.input(t));
        let pred = truth.subsystems[modes[t] - 1].predict(&y, &u);
        let next = data.output(t + 1);
        let scale = next.iter().fold(1.0f64, |s, v| s.max(v.abs()));
        if pred.iter().zip(&next).any(|(a, b)| (a - b).abs() > 1e-9 * scale) {
            return Err(Error::InvalidInput(format!(
                "{name} generator disagrees with its truth dynamics at t = {t}"
            )));
        }
        if truth.next_mode(modes[t], &y, &u) != modes[t + 1] {
            return Err(Error::InvalidInput(format!(
                "{name} generator disagrees with its truth rules at t = {t}"
            )));
        }
    }
    Ok(())
}

fn thermostat(p: &Params, steps: usize) -> Result<Native> {
    let (a, h) = (p.positive("a")?, p.positive("h")?);
    if a * h >= 1.0 {
        return Err(invalid("h", "a·h must be below 1"));
    }
    let (lower, upper) = p.ordered("lower", "upper")?;
    let heater = p.get("heater");
    let heater_only = p.flag("heater_only")?;
    let mut on = p.flag("initial_on")?;
    let mut y = p.get("y0");
    // on: ẏ = heater·a − a·y, or heater·a alone; off: ẏ = −a·y
    let on_decay = if heater_only { 1.0 } else { 1.0 - a * h };
    let mut ys = vec![vec![y]];
    let mut modes = vec![];
    for _ in 0..steps {
        modes.push(if on { 1 } else { 2 });
        let next_on = if on { y < upper } else { y <= lower };
        y = if on { on_decay * y + h * heater * a } else { (1.0 - a * h) * y };
        on = next_on;
        ys.push(vec![y]);
    }
    modes.push(if on { 1 } else { 2 });
    let none = DMatrix::zeros(1, 0);
    let truth = model(
        vec![
            affine_mode(1, &[h * heater * a], &DMatrix::from_element(1, 1, on_decay), &none),
            affine_mode(2, &[0.0], &DMatrix::from_element(1, 1, 1.0 - a * h), &none),
        ],
        vec![
            affine_rule(1, 2, 1, 0, DVector::from_column_slice(&[-upper, 1.0])),
            affine_rule(2, 1, 1, 0, DVector::from_column_slice(&[lower, -1.0])),
        ],
        h,
    );
    Ok(Native {
        ys,
        us: vec![vec![]; steps + 1],
        modes,
        truth,
        sample_period: h,
    })
}

fn chua(p: &Params, steps: usize) -> Result<Native> {
    let (alpha, beta, h) = (p.positive("alpha")?, p.positive("beta")?, p.positive("h")?);
    let (m0, m1) = (p.get("m0"), p.get("m1"));
    // f(x) = m1·x + (m0 − m1)/2 · (|x + 1| − |x − 1|), affine on each region
    let region = |x: f64| {
        if x >= 1.0 {
            2
        } else if x <= -1.0 {
            3
        } else {
            1
        }
    };
    let slope = |r: usize| -> (f64, f64) {
        match r {
            1 => (m0, 0.0),
            2 => (m1, m0 - m1),
            _ => (m1, m1 - m0),
        }
    };
    let jacobian = |r: usize| {
        let (s, _) = slope(r);
        DMatrix::from_row_slice(
            3,
            3,
            &[
                1.0 - h * alpha * (1.0 + s),
                h * alpha,
                0.0,
                h,
                1.0 - h,
                h,
                0.0,
                -h * beta,
                1.0,
            ],
        )
    };
    let mut s = [p.get("x0"), p.get("y0"), p.get("z0")];
    let mut ys = vec![s.to_vec()];
    let mut modes = vec![region(s[0])];
    for _ in 0..steps {
        let (x, y, z) = (s[0], s[1], s[2]);
        let (sl, off) = slope(region(x));
        let f = sl * x + off;
        s = [x + h * alpha * (y - x - f), y + h * (x - y + z), z - h * beta * y];
        if s.iter().any(|v| !v.is_finite() || v.abs() > 1e6) {
            return Err(invalid("h", "Chua trajectory diverged; reduce the step"));
        }
        ys.push(s.to_vec());
        modes.push(region(s[0]));
    }
    let none = DMatrix::zeros(3, 0);
    let subsystems: Vec<SubsystemModel> = (1..=3)
        .map(|r| {
            let (_, off) = slope(r);
            affine_mode(r, &[-h * alpha * off, 0.0, 0.0], &jacobian(r), &none)
        })
        .collect();
    let x = [1.0, 0.0, 0.0];
    let neg = [-1.0, 0.0, 0.0];
    // one Euler step cannot cross the inner region, so outer pairs get no rule
    let rules = vec![
        next_state_rule(&subsystems[0], 2, -1.0, &x),
        next_state_rule(&subsystems[0], 3, -1.0, &neg),
        next_state_rule(&subsystems[1], 1, 1.0, &neg),
        next_state_rule(&subsystems[2], 1, 1.0, &x),
    ];
    Ok(Native {
        ys,
        us: vec![vec![]; steps + 1],
        modes,
        truth: model(subsystems, rules, h),
        sample_period: h,
    })
}

fn pwa2(p: &Params, steps: usize) -> Result<Native> {
    let dim = p.get("dim");
    if dim == 1.0 {
        return pwa2_scalar(p, steps);
    }
    if dim != 2.0 {
        return Err(invalid("dim", "must be 1 or 2"));
    }
    let mut maps_rng = ChaCha8Rng::seed_from_u64(p.seed("map_seed")?);
    let gain = p.get("input_gain");
    let offset = p.positive("offset")?;
    let mut input_rng = ChaCha8Rng::seed_from_u64(p.seed("map_seed")?.wrapping_add(1));
    let phi: f64 = maps_rng.random_range(0.0..std::f64::consts::TAU);
    let normal = [phi.cos(), phi.sin()];
    // mode 1 on the side g·y ≥ 0 steers toward the other side, and back
    let mut subsystems = Vec::new();
    for (id, side) in [(1, -1.0), (2, 1.0)] {
        let rho: f64 = maps_rng.random_range(0.5..0.85);
        let theta: f64 = maps_rng.random_range(0.3..1.2);
        let a = DMatrix::from_row_slice(2, 2, &[rho * theta.cos(), -rho * theta.sin(), rho * theta.sin(), rho * theta.cos()]);
        let fixed = DVector::from_column_slice(&[side * offset * normal[0], side * offset * normal[1]]);
        let c = (DMatrix::identity(2, 2) - &a) * fixed;
        let beta: f64 = maps_rng.random_range(0.0..std::f64::consts::TAU);
        let b = DMatrix::from_column_slice(2, 1, &[gain * beta.cos(), gain * beta.sin()]);
        subsystems.push(affine_mode(id, c.as_slice(), &a, &b));
    }
    let side = |y: &[f64]| if normal[0] * y[0] + normal[1] * y[1] >= 0.0 { 1 } else { 2 };
    let y0 = p.get("y0");
    let mut y = vec![y0, -y0];
    let mut us = Vec::with_capacity(steps + 1);
    let mut ys = vec![y.clone()];
    let mut modes = vec![side(&y)];
    for t in 0..steps {
        let u = vec![input_rng.random_range(-1.0..1.0)];
        y = subsystems[modes[t] - 1].predict(&y, &u);
        us.push(u);
        modes.push(side(&y));
        ys.push(y.clone());
    }
    us.push(vec![0.0]);
    let away = [-normal[0], -normal[1]];
    let rules = vec![
        // strictly negative side: g·y < 0 approximated by −g·y ≥ 0
        next_state_rule(&subsystems[0], 2, 0.0, &away),
        next_state_rule(&subsystems[1], 1, 0.0, &normal),
    ];
    Ok(Native {
        ys,
        us,
        modes,
        truth: model(subsystems, rules, 1.0),
        sample_period: 1.0,
    })
}

/// `y ≥ 0 → 0.5y − 1`, `y < 0 → 0.5y + 1`.
fn pwa2_scalar(p: &Params, steps: usize) -> Result<Native> {
    let side = |y: f64| if y >= 0.0 { 1 } else { 2 };
    let half = DMatrix::from_element(1, 1, 0.5);
    let none = DMatrix::zeros(1, 0);
    let subsystems = vec![affine_mode(1, &[-1.0], &half, &none), affine_mode(2, &[1.0], &half, &none)];
    let mut y = p.get("y0");
    let mut ys = vec![vec![y]];
    let mut modes = vec![side(y)];
    for _ in 0..steps {
        y = if y >= 0.0 { 0.5 * y - 1.0 } else { 0.5 * y + 1.0 };
        ys.push(vec![y]);
        modes.push(side(y));
    }
    let rules = vec![
        next_state_rule(&subsystems[0], 2, 0.0, &[-1.0]),
        next_state_rule(&subsystems[1], 1, 0.0, &[1.0]),
    ];
    Ok(Native {
        ys,
        us: vec![vec![]; steps + 1],
        modes,
        truth: model(subsystems, rules, 1.0),
        sample_period: 1.0,
    })
}

/// Periodic excitation with a uniform jitter, one value per sample.
fn excitation(rng: &mut ChaCha8Rng, amplitude: f64, period: f64, phase: f64, jitter: f64, t: usize) -> f64 {
    let wave = (std::f64::consts::TAU * t as f64 / period + phase).sin();
    amplitude * wave + jitter * rng.random_range(-1.0..1.0)
}

fn relay(p: &Params, steps: usize) -> Result<Native> {
    let (a, b, c) = (p.get("a"), p.get("b"), p.get("c"));
    if a.abs() >= 1.0 {
        return Err(invalid("a", "must lie strictly inside (−1, 1)"));
    }
    let (lo, hi) = p.ordered("lo", "hi")?;
    let (amplitude, period) = (p.positive("amplitude")?, p.positive("period")?);
    let jitter = p.get("jitter");
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed("input_seed")?);
    let us: Vec<Vec<f64>> = (0..=steps)
        .map(|t| vec![excitation(&mut rng, amplitude, period, 0.0, jitter, t)])
        .collect();
    let mut on = us[0][0] >= 0.0;
    let mut y = 0.0;
    let mut ys = vec![vec![y]];
    let mut modes = vec![];
    for u in us.iter().take(steps) {
        let u = u[0];
        modes.push(if on { 1 } else { 2 });
        y = a * y + b * u + if on { c } else { -c };
        on = if on { u > lo } else { u >= hi };
        ys.push(vec![y]);
    }
    modes.push(if on { 1 } else { 2 });
    let am = DMatrix::from_element(1, 1, a);
    let bm = DMatrix::from_element(1, 1, b);
    let truth = model(
        vec![affine_mode(1, &[c], &am, &bm), affine_mode(2, &[-c], &am, &bm)],
        vec![
            affine_rule(1, 2, 1, 1, DVector::from_column_slice(&[lo, 0.0, -1.0])),
            affine_rule(2, 1, 1, 1, DVector::from_column_slice(&[-hi, 0.0, 1.0])),
        ],
        1.0,
    );
    Ok(Native {
        ys,
        us,
        modes,
        truth,
        sample_period: 1.0,
    })
}

/// Lines of the 5-node network as `(from, to, admittance)`, nodes 1-based.
pub(crate) const GRID_LINES: [(usize, usize, f64); 6] = [
    (1, 2, 1.0),
    (2, 3, 0.8),
    (3, 4, 1.2),
    (4, 5, 0.9),
    (1, 5, 0.6),
    (2, 4, 0.5),
];

/// The line the protection logic opens.
pub(crate) const GRID_SWITCHED_LINE: (usize, usize) = (3, 4);

/// Network dynamics `y' = (I − h(L + s·I)) y + h·B u`, where `L` is the
/// admittance Laplacian, with or without the switched line.
fn grid_matrix(h: f64, shunt: f64, open: bool) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(5, 5);
    for &(i, j, w) in &GRID_LINES {
        if open && (i, j) == GRID_SWITCHED_LINE {
            continue;
        }
        let (i, j) = (i - 1, j - 1);
        l[(i, i)] += w;
        l[(j, j)] += w;
        l[(i, j)] -= w;
        l[(j, i)] -= w;
    }
    DMatrix::identity(5, 5) - (l + DMatrix::identity(5, 5) * shunt) * h
}

fn grid(p: &Params, steps: usize) -> Result<Native> {
    let h = p.positive("h")?;
    let shunt = p.positive("shunt")?;
    let (lo, hi) = p.ordered("lo", "hi")?;
    let period = p.positive("period")?;
    let jitter = p.get("jitter");
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed("input_seed")?);
    // injections at nodes 1 and 5
    let us: Vec<Vec<f64>> = (0..=steps)
        .map(|t| {
            let a = 1.5 + excitation(&mut rng, 1.0, period, 0.0, jitter, t);
            let b = 1.5 + excitation(&mut rng, 1.0, period * 1.37, 1.0, jitter, t);
            vec![a, b]
        })
        .collect();
    let mut bm = DMatrix::zeros(5, 2);
    bm[(0, 0)] = h;
    bm[(4, 1)] = h;
    let closed = affine_mode(1, &[0.0; 5], &grid_matrix(h, shunt, false), &bm);
    let opened = affine_mode(2, &[0.0; 5], &grid_matrix(h, shunt, true), &bm);
    let mut y = vec![1.0; 5];
    let mut open = false;
    let mut ys = vec![y.clone()];
    let mut modes = vec![];
    for u in us.iter().take(steps) {
        let mode = if open { 2 } else { 1 };
        modes.push(mode);
        let next_open = if open { y[2] > lo } else { y[2] >= hi };
        y = if open { opened.predict(&y, u) } else { closed.predict(&y, u) };
        open = next_open;
        ys.push(y.clone());
    }
    modes.push(if open { 2 } else { 1 });
    let mut trip = DVector::zeros(8);
    trip[0] = -hi;
    trip[3] = 1.0;
    let reclose = DVector::from_fn(8, |i, _| match i {
        0 => lo,
        3 => -1.0,
        _ => 0.0,
    });
    let truth = model(
        vec![closed, opened],
        vec![affine_rule(1, 2, 5, 2, trip), affine_rule(2, 1, 5, 2, reclose)],
        h,
    );
    Ok(Native {
        ys,
        us,
        modes,
        truth,
        sample_period: h,
    })
}

fn gating(p: &Params, steps: usize) -> Result<Native> {
    let h = p.positive("h")?;
    let (k_rise, k_block, k_fast, k_slow, k_leak) = (
        p.positive("k_rise")?,
        p.positive("k_block")?,
        p.positive("k_fast")?,
        p.positive("k_slow")?,
        p.positive("k_leak")?,
    );
    if h * k_fast.max(k_rise).max(k_leak) >= 1.0 {
        return Err(invalid("h", "step too large for the fastest rate"));
    }
    let (g_lo, g_hi) = p.ordered("g_lo", "g_hi")?;
    // fast: v' = k_rise(1 − v) − k_block·g, g' = k_fast(1 − g)
    // slow: v' = −k_leak·v,                  g' = −k_slow·g
    let fast_a = DMatrix::from_row_slice(2, 2, &[1.0 - h * k_rise, -h * k_block, 0.0, 1.0 - h * k_fast]);
    let slow_a = DMatrix::from_row_slice(2, 2, &[1.0 - h * k_leak, 0.0, 0.0, 1.0 - h * k_slow]);
    let none = DMatrix::zeros(2, 0);
    let fast = affine_mode(1, &[h * k_rise, h * k_fast], &fast_a, &none);
    let slow = affine_mode(2, &[0.0, 0.0], &slow_a, &none);
    let mut y = vec![0.0, 0.0];
    let mut fast_on = true;
    let mut ys = vec![y.clone()];
    let mut modes = vec![];
    for _ in 0..steps {
        modes.push(if fast_on { 1 } else { 2 });
        let next_fast = if fast_on { y[1] < g_hi } else { y[1] <= g_lo };
        y = if fast_on { fast.predict(&y, &[]) } else { slow.predict(&y, &[]) };
        fast_on = next_fast;
        ys.push(y.clone());
    }
    modes.push(if fast_on { 1 } else { 2 });
    let truth = model(
        vec![fast, slow],
        vec![
            affine_rule(1, 2, 2, 0, DVector::from_column_slice(&[-g_hi, 0.0, 1.0])),
            affine_rule(2, 1, 2, 0, DVector::from_column_slice(&[g_lo, 0.0, -1.0])),
        ],
        h,
    );
    Ok(Native {
        ys,
        us: vec![vec![]; steps + 1],
        modes,
        truth,
        sample_period: h,
    })
}

/// Two different hybrid models that generate the same trace.
///
/// `switched` has the modes `y ↦ 0.5 y − 1.5` (entered when the next state is
/// non-negative) and `y ↦ 0.5 y + 1.5`; from `y0 = 1` it runs the exact cycle
/// `1, −1, 1, …`. `linear` is the single mode `y ↦ −y`, whose trace from the
/// same start is bit-for-bit identical, so no data from this trajectory
/// distinguishes the two.
#[derive(Clone, Debug)]
pub struct NonIdentifiablePair {
    pub switched: HybridModel,
    pub linear: HybridModel,
    pub y0: f64,
    /// Initial mode of `switched`.
    pub m0: usize,
}

pub fn non_identifiable_pair() -> NonIdentifiablePair {
    let half = DMatrix::from_element(1, 1, 0.5);
    let none = DMatrix::zeros(1, 0);
    let modes = vec![affine_mode(1, &[-1.5], &half, &none), affine_mode(2, &[1.5], &half, &none)];
    let rules = vec![
        next_state_rule(&modes[0], 2, 0.0, &[-1.0]),
        next_state_rule(&modes[1], 1, 0.0, &[1.0]),
    ];
    let linear = vec![affine_mode(1, &[0.0], &DMatrix::from_element(1, 1, -1.0), &none)];
    NonIdentifiablePair {
        switched: model(modes, rules, 1.0),
        linear: model(linear, vec![], 1.0),
        y0: 1.0,
        m0: 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(name: BenchmarkName, steps: usize) -> Benchmark {
        generate_benchmark(name, &BTreeMap::new(), steps, 0.0, 0).unwrap()
    }

    fn share(modes: &[usize], k: usize) -> f64 {
        modes.iter().filter(|&&m| m == k).count() as f64 / modes.len() as f64
    }

    #[test]
    fn every_generator_passes_its_self_check_and_switches() {
        for name in BENCHMARKS {
            let b = run(name, 3000);
            assert_eq!(b.data.samples(), 3001, "{name}");
            assert_eq!(b.modes.len(), 3000);
            for k in 1..=b.truth.k() {
                assert!(share(&b.modes, k) > 0.05, "{name}: mode {k} share {}", share(&b.modes, k));
            }
            let switches = b.modes.windows(2).filter(|w| w[0] != w[1]).count();
            assert!(switches >= 10, "{name}: only {switches} switches");
        }
    }

    #[test]
    fn thermostat_band_and_shares() {
        let b = run(BenchmarkName::Thermostat, 500);
        let ys = b.clean.output_column(0);
        // the switch lags the crossing by one sample, so two steps of overshoot
        assert!(ys.iter().all(|&y| (18.6..=21.2).contains(&y)));
        // closed form: on-stretch grows 30 − y by 1/0.99 per step, off shrinks y by 0.99
        let rise = ((30.0f64 - 19.0) / (30.0 - 21.0)).ln() / -(0.99f64.ln());
        let decay = (21.0f64 / 19.0).ln() / -(0.99f64.ln());
        let expected = rise / (rise + decay);
        assert!((share(&b.modes[50..], 1) - expected).abs() < 0.05);
        let w = &b.truth.subsystems[0].coefficients;
        assert!((w[(0, 0)] - 0.3).abs() < 1e-15 && (w[(1, 0)] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn heater_only_variant() {
        let params = BTreeMap::from([("heater_only".to_string(), 1.0)]);
        let b = generate_benchmark(BenchmarkName::Thermostat, &params, 200, 0.0, 0).unwrap();
        assert_eq!(b.truth.subsystems[0].coefficients[(1, 0)], 1.0);
    }

    #[test]
    fn scalar_pwa_settles_on_period_two_cycle() {
        let params = BTreeMap::from([("dim".to_string(), 1.0)]);
        let b = generate_benchmark(BenchmarkName::Pwa2, &params, 60, 0.0, 0).unwrap();
        let ys = b.clean.output_column(0);
        // fixed points of the composed maps: y = 0.5(0.5y − 1) + 1 gives y = 2/3
        assert!((ys[59].abs() - 2.0 / 3.0).abs() < 1e-9);
        assert!((ys[59] + ys[60]).abs() < 1e-9);
    }

    #[test]
    fn chua_visits_both_scrolls() {
        let b = run(BenchmarkName::Chua, 50_000);
        let entries = |k: usize| b.modes.windows(2).filter(|w| w[0] != k && w[1] == k).count();
        assert!(entries(2) >= 10 && entries(3) >= 10);
        assert!(b.clean.outputs.amax() < 10.0);
    }

    #[test]
    fn chua_step_is_within_a_tenth_percent_of_rk4() {
        let b = run(BenchmarkName::Chua, 20_000);
        let (alpha, beta, m0, m1, h) = (15.6, 28.0, -8.0 / 7.0, -5.0 / 7.0, 0.005);
        let f = |s: [f64; 3]| {
            let fx = m1 * s[0] + 0.5 * (m0 - m1) * ((s[0] + 1.0f64).abs() - (s[0] - 1.0f64).abs());
            [alpha * (s[1] - s[0] - fx), s[0] - s[1] + s[2], -beta * s[1]]
        };
        let add = |s: [f64; 3], k: [f64; 3], c: f64| [s[0] + c * k[0], s[1] + c * k[1], s[2] + c * k[2]];
        let mut worst = 0.0f64;
        for t in 0..20_000 {
            let s = [b.clean.outputs[(t, 0)], b.clean.outputs[(t, 1)], b.clean.outputs[(t, 2)]];
            let k1 = f(s);
            let k2 = f(add(s, k1, h / 2.0));
            let k3 = f(add(s, k2, h / 2.0));
            let k4 = f(add(s, k3, h));
            let rk: Vec<f64> = (0..3).map(|i| s[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect();
            let err: f64 = (0..3).map(|i| (b.clean.outputs[(t + 1, i)] - rk[i]).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = rk.iter().map(|v| v * v).sum::<f64>().sqrt();
            worst = worst.max(err / norm);
        }
        assert!(worst < 1e-3, "worst one-step error {worst}");
    }

    #[test]
    fn grid_modes_differ_only_on_switched_line() {
        let b = run(BenchmarkName::GridSwitch, 100);
        let d = &b.truth.subsystems[0].coefficients - &b.truth.subsystems[1].coefficients;
        let mut changed = Vec::new();
        for r in 0..d.nrows() {
            for c in 0..d.ncols() {
                if d[(r, c)] != 0.0 {
                    changed.push((b.truth.subsystems[0].library.names()[r].clone(), c + 1));
                }
            }
        }
        let expected: Vec<(String, usize)> =
            vec![("y3".into(), 3), ("y3".into(), 4), ("y4".into(), 3), ("y4".into(), 4)];
        assert_eq!(changed, expected);
    }

    #[test]
    fn noise_is_seeded_and_output_only() {
        let a = generate_benchmark(BenchmarkName::RelayHysteresis, &BTreeMap::new(), 200, 0.01, 5).unwrap();
        let b = generate_benchmark(BenchmarkName::RelayHysteresis, &BTreeMap::new(), 200, 0.01, 5).unwrap();
        let c = generate_benchmark(BenchmarkName::RelayHysteresis, &BTreeMap::new(), 200, 0.01, 6).unwrap();
        assert_eq!(a.data, b.data);
        assert_ne!(a.data, c.data);
        assert_eq!(a.data.inputs, a.clean.inputs);
        let std = (&a.data.outputs - &a.clean.outputs).norm() / (201f64).sqrt();
        assert!((std - 0.01).abs() < 0.003);
    }

    #[test]
    fn bad_names_and_params_rejected() {
        assert!(matches!("nope".parse::<BenchmarkName>(), Err(Error::UnknownBenchmark(_))));
        for name in BENCHMARKS {
            assert_eq!(name.as_str().parse::<BenchmarkName>().unwrap(), name);
        }
        let bad = BTreeMap::from([("zeta".to_string(), 1.0)]);
        assert!(generate_benchmark(BenchmarkName::Chua, &bad, 10, 0.0, 0).is_err());
        let bad = BTreeMap::from([("lower".to_string(), 22.0)]);
        assert!(generate_benchmark(BenchmarkName::Thermostat, &bad, 10, 0.0, 0).is_err());
        assert!(generate_benchmark(BenchmarkName::Thermostat, &BTreeMap::new(), 10, -1.0, 0).is_err());
    }

    #[test]
    fn non_identifiable_pair_traces_coincide() {
        let f = non_identifiable_pair();
        let a = crate::hybrid_sim::simulate(&f.switched, &[f.y0], f.m0, None, 200).unwrap();
        let b = crate::hybrid_sim::simulate(&f.linear, &[f.y0], 1, None, 200).unwrap();
        assert_eq!(a.trajectory.outputs, b.trajectory.outputs);
        assert_eq!((f.switched.k(), f.linear.k()), (2, 1));
        assert_eq!(a.switch_times.len(), 200);
    }
}
