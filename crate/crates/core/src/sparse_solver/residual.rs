use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::SolverConfig;
use crate::dictionary::DesignMatrix;
use crate::error::{Error, Result};
use crate::linalg::{lstsq, median, row_residual_norms, weighted_ridge};

/// Outcome of residual-sparse regression.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualSplit {
    /// Least-squares coefficients on the explained rows (raw units, `p × n`).
    pub w: DMatrix<f64>,
    /// `Ȳ − ΦW`, `M × n`.
    pub z: DMatrix<f64>,
    /// `explained[t]` iff `‖Z[t,:]‖ ≤ epsilon · sqrt(n)`.
    pub explained: Vec<bool>,
    pub converged: bool,
    /// Threshold actually used.
    pub epsilon: f64,
}

impl ResidualSplit {
    pub fn explained_rows(&self) -> Vec<usize> {
        self.explained
            .iter()
            .enumerate()
            .filter_map(|(t, &e)| e.then_some(t))
            .collect()
    }

    pub fn explained_count(&self) -> usize {
        self.explained.iter().filter(|&&e| e).count()
    }
}

enum Start {
    /// Ordinary least squares on every row, then continuation on the
    /// smoothing parameter.
    Global,
    /// Exact fit on a subset of rows, trusted as-is.
    Rows(Vec<usize>),
}

struct Candidate {
    w: DMatrix<f64>,
    explained: Vec<bool>,
    count: usize,
    sse: f64,
    converged: bool,
}

const WINDOW_STARTS: usize = 24;
const RANDOM_STARTS: usize = 16;

/// Approximately minimizes the number of nonzero rows of `Z = Ȳ − ΦW`.
///
/// Each start runs iteratively reweighted ℓ1 on the row norms of `Z`
/// (majorize–minimize on `Σ log(‖Z_t‖ + δ)`, ridge-regularized weighted
/// updates). Starts are the global least-squares fit plus exact fits on short
/// contiguous windows and random minimal row subsets; the start that explains
/// the most rows wins, ties going to the smaller explained residual.
pub fn solve_residual_sparse(
    phi: &DesignMatrix,
    ybar: &DMatrix<f64>,
    cfg: &SolverConfig,
) -> Result<ResidualSplit> {
    cfg.validate()?;
    let m = phi.rows();
    if ybar.nrows() != m {
        return Err(Error::DimensionMismatch(format!(
            "design has {m} rows, targets have {}",
            ybar.nrows()
        )));
    }
    if m == 0 {
        return Err(Error::EmptyRows);
    }
    let n = ybar.ncols();
    let raw = phi.denormalized();
    let epsilon = match cfg.epsilon {
        Some(e) => e,
        None => super::default_epsilon(&raw, ybar),
    };
    let thr = epsilon * (n as f64).sqrt();

    // normalize the columns that are nonzero on these rows
    let active: Vec<usize> = (0..raw.cols())
        .filter(|&c| raw.values.column(c).norm() > 0.0)
        .collect();
    let scales: Vec<f64> = active.iter().map(|&c| raw.values.column(c).norm()).collect();
    let mut x = raw.values.select_columns(&active);
    for (c, s) in scales.iter().enumerate() {
        x.column_mut(c).unscale_mut(*s);
    }
    let p = active.len();

    let mut best: Option<Candidate> = None;
    for start in starts(m, p, cfg.seed) {
        if let (Some(b), Start::Rows(rows)) = (&best, &start) {
            if rows.iter().all(|&r| b.explained[r]) {
                continue;
            }
        }
        let cand = run_start(&x, ybar, &start, thr, cfg);
        let better = match &best {
            None => true,
            Some(b) => cand.count > b.count || (cand.count == b.count && cand.sse < b.sse),
        };
        if better {
            best = Some(cand);
        }
    }
    let best = best.expect("at least the global start runs");
    if best.count == 0 {
        return Err(Error::NoConsensus);
    }

    let mut w = DMatrix::zeros(raw.cols(), n);
    for (k, &c) in active.iter().enumerate() {
        for j in 0..n {
            w[(c, j)] = best.w[(k, j)] / scales[k];
        }
    }
    let z = ybar - &raw.values * &w;
    let explained: Vec<bool> = z.row_iter().map(|r| r.norm() <= thr).collect();
    if !explained.iter().any(|&e| e) {
        return Err(Error::NoConsensus);
    }
    if !best.converged {
        tracing::warn!("residual-sparse regression did not converge within max_iters");
    }
    Ok(ResidualSplit {
        w,
        z,
        explained,
        converged: best.converged,
        epsilon,
    })
}

fn starts(m: usize, p: usize, seed: u64) -> Vec<Start> {
    let mut out = vec![Start::Global];
    if p == 0 {
        return out;
    }
    let len = (2 * p).max(p + 2).min(m);
    if len < m {
        let windows = WINDOW_STARTS.min(m / len).max(1);
        for k in 0..windows {
            let begin = if windows == 1 {
                0
            } else {
                k * (m - len) / (windows - 1)
            };
            out.push(Start::Rows((begin..begin + len).collect()));
        }
    }
    let minimal = (p + 1).min(m);
    if minimal < m {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..RANDOM_STARTS {
            let mut rows = sample(&mut rng, m, minimal).into_vec();
            rows.sort_unstable();
            out.push(Start::Rows(rows));
        }
    }
    out
}

fn run_start(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    start: &Start,
    thr: f64,
    cfg: &SolverConfig,
) -> Candidate {
    let floor = thr.max(f64::MIN_POSITIVE);
    let (w0, mut delta) = match start {
        Start::Global => {
            let w = lstsq(x, y);
            let mut r = row_residual_norms(x, &w, y);
            (w, median(&mut r).max(floor))
        }
        Start::Rows(rows) => (lstsq(&x.select_rows(rows), &y.select_rows(rows)), floor),
    };
    let (w, converged) = irls(x, y, w0, &mut delta, floor, cfg);
    refine(x, y, w, thr, converged)
}

fn irls(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    mut w: DMatrix<f64>,
    delta: &mut f64,
    floor: f64,
    cfg: &SolverConfig,
) -> (DMatrix<f64>, bool) {
    for _ in 0..cfg.max_iters {
        let r = row_residual_norms(x, &w, y);
        let weights: Vec<f64> = r
            .iter()
            .map(|&ri| 1.0 / ((ri + *delta) * ri.max(*delta)))
            .collect();
        // columns are unit-norm, so the ridge is `ridge · max‖φ_j‖²`
        let w_new = weighted_ridge(x, y, &weights, cfg.ridge);
        let scale = w.amax().max(1.0);
        let change = (&w_new - &w).amax() / scale;
        w = w_new;
        if change < cfg.tol {
            if *delta <= floor {
                return (w, true);
            }
            *delta = (*delta * 0.1).max(floor);
        }
    }
    (w, false)
}

/// Alternates exact least squares on the explained rows with re-thresholding
/// until the explained set is stable.
fn refine(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    mut w: DMatrix<f64>,
    thr: f64,
    converged: bool,
) -> Candidate {
    let mut explained: Vec<bool> = row_residual_norms(x, &w, y)
        .iter()
        .map(|&r| r <= thr)
        .collect();
    for _ in 0..20 {
        let rows: Vec<usize> = (0..explained.len()).filter(|&t| explained[t]).collect();
        if rows.is_empty() {
            break;
        }
        let w_new = lstsq(&x.select_rows(&rows), &y.select_rows(&rows));
        let next: Vec<bool> = row_residual_norms(x, &w_new, y)
            .iter()
            .map(|&r| r <= thr)
            .collect();
        let next_count = next.iter().filter(|&&e| e).count();
        if next_count < rows.len() {
            // refit lost rows; keep the robust iterate
            break;
        }
        w = w_new;
        if next == explained {
            break;
        }
        explained = next;
    }
    let r = row_residual_norms(x, &w, y);
    let explained: Vec<bool> = r.iter().map(|&ri| ri <= thr).collect();
    let count = explained.iter().filter(|&&e| e).count();
    let sse = r
        .iter()
        .zip(&explained)
        .filter(|(_, &e)| e)
        .map(|(ri, _)| ri * ri)
        .sum();
    Candidate {
        w,
        explained,
        count,
        sse,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::{DictionarySpec, Library, TimeSeries};
    use nalgebra::DMatrix;

    fn affine_design(y: &[f64]) -> DesignMatrix {
        let lib = DictionarySpec::affine().library(1, 0).unwrap();
        let values = DMatrix::from_fn(y.len(), 2, |r, c| if c == 0 { 1.0 } else { y[r] });
        DesignMatrix {
            values,
            library: lib,
            column_scales: None,
            dropped: vec![],
        }
    }

    /// Thermostat trace with Euler step h=0.1, a=0.1; returns (series, on-mode flags).
    fn thermostat(steps: usize) -> (TimeSeries, Vec<bool>) {
        let (a, h) = (0.1, 0.1);
        let mut y = 20.0;
        let mut on = true;
        let mut ys = vec![y];
        let mut modes = Vec::new();
        for _ in 0..steps {
            modes.push(on);
            let next = if on { y + h * (30.0 * a - a * y) } else { y - h * a * y };
            let next_on = if on { y < 21.0 } else { y <= 19.0 };
            y = next;
            on = next_on;
            ys.push(y);
        }
        (TimeSeries::autonomous(DMatrix::from_column_slice(ys.len(), 1, &ys), 0.1).unwrap(), modes)
    }

    fn lib_affine() -> Library {
        DictionarySpec::affine().library(1, 0).unwrap()
    }

    #[test]
    fn single_noiseless_subsystem_is_fully_explained() {
        let ys: Vec<f64> = (0..20).map(|t| (t as f64 * 0.7).sin() * 3.0).collect();
        let phi = affine_design(&ys);
        let ybar = DMatrix::from_fn(20, 1, |r, _| 0.4 - 1.5 * ys[r]);
        let split = solve_residual_sparse(&phi, &ybar, &SolverConfig::with_epsilon(1e-9)).unwrap();
        assert!(split.explained.iter().all(|&e| e));
        assert!(split.z.amax() < 1e-9);
        assert!((split.w[(0, 0)] - 0.4).abs() < 1e-10);
        assert!((split.w[(1, 0)] + 1.5).abs() < 1e-10);
        assert!(split.converged);
    }

    #[test]
    fn thermostat_majority_is_heater_on() {
        let (data, on) = thermostat(500);
        let rows: Vec<usize> = (0..data.transitions()).collect();
        let phi = lib_affine().design(&data, &rows).unwrap();
        let ybar = data.targets(&rows);
        let split = solve_residual_sparse(&phi, &ybar, &SolverConfig::with_epsilon(1e-6)).unwrap();
        assert_eq!(split.explained, on);
        // oracle: least squares on the ground-truth on rows
        let on_rows: Vec<usize> = rows.iter().copied().filter(|&t| on[t]).collect();
        let oracle = lstsq(&phi.values.select_rows(&on_rows), &ybar.select_rows(&on_rows));
        assert!((&split.w - &oracle).amax() < 1e-9);
        assert!((split.w[(0, 0)] - 0.3).abs() < 1e-9);
        assert!((split.w[(1, 0)] - 0.99).abs() < 1e-10);
    }

    #[test]
    fn two_outliers_match_brute_force() {
        let ys = [0.3, -1.2, 2.5, 0.9, -0.4, 1.7, -2.2, 0.05, 1.1, -0.8];
        let outliers = [3usize, 7];
        let targets: Vec<f64> = ys
            .iter()
            .enumerate()
            .map(|(t, y)| 2.0 * y + if outliers.contains(&t) { 5.0 } else { 0.0 })
            .collect();
        let phi = affine_design(&ys);
        let ybar = DMatrix::from_column_slice(10, 1, &targets);

        // brute force: every 2-row outlier set, least squares on the other 8
        let mut best = (f64::INFINITY, (0, 0));
        for i in 0..10 {
            for j in i + 1..10 {
                let keep: Vec<usize> = (0..10).filter(|&t| t != i && t != j).collect();
                let a = phi.values.select_rows(&keep);
                let b = ybar.select_rows(&keep);
                let x = lstsq(&a, &b);
                let sse = (&b - &a * &x).norm_squared();
                if sse < best.0 {
                    best = (sse, (i, j));
                }
            }
        }
        assert_eq!(best.1, (3, 7));

        let split = solve_residual_sparse(&phi, &ybar, &SolverConfig::with_epsilon(1e-8)).unwrap();
        for t in 0..10 {
            if t == best.1 .0 || t == best.1 .1 {
                assert!(!split.explained[t]);
                assert!((split.z[(t, 0)] - 5.0).abs() < 1e-9);
            } else {
                assert!(split.explained[t]);
                assert!(split.z[(t, 0)].abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_mismatched_rows_and_empty() {
        let phi = affine_design(&[1.0, 2.0]);
        let ybar = DMatrix::zeros(3, 1);
        assert!(matches!(
            solve_residual_sparse(&phi, &ybar, &SolverConfig::default()),
            Err(Error::DimensionMismatch(_))
        ));
        let phi = affine_design(&[]);
        assert!(matches!(
            solve_residual_sparse(&phi, &DMatrix::zeros(0, 1), &SolverConfig::default()),
            Err(Error::EmptyRows)
        ));
    }

    #[test]
    fn default_epsilon_is_data_driven() {
        let ys: Vec<f64> = (0..30).map(|t| t as f64 * 0.1).collect();
        let phi = affine_design(&ys);
        let ybar = DMatrix::from_fn(30, 1, |r, _| 1.0 + ys[r]);
        let split = solve_residual_sparse(&phi, &ybar, &SolverConfig::default()).unwrap();
        assert!(split.epsilon > 0.0 && split.epsilon < 1e-6);
        assert!(split.explained.iter().all(|&e| e));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        /// Rows `[1, x1, x2]` with a majority from one affine map, the rest
        /// from another.
        fn mixed_case() -> impl Strategy<Value = (DesignMatrix, DMatrix<f64>, Vec<bool>)> {
            (8usize..60, any::<u64>()).prop_map(|(m, seed)| {
                use rand::Rng;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let inliers = m / 2 + 1 + rng.random_range(0..(m - m / 2 - 1).max(1));
                let inliers = inliers.min(m);
                let mut members = vec![false; m];
                for &i in sample(&mut rng, m, inliers).iter().collect::<Vec<_>>().iter() {
                    members[i] = true;
                }
                let lib = DictionarySpec::affine().library(2, 0).unwrap();
                let values = DMatrix::from_fn(m, 3, |_, c| {
                    if c == 0 {
                        1.0
                    } else {
                        rng.random_range(-2.0..2.0)
                    }
                });
                let wa: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
                let wb: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0) + 2.0).collect();
                let wa = DMatrix::from_column_slice(3, 2, &wa);
                let wb = DMatrix::from_column_slice(3, 2, &wb);
                let mut ybar = DMatrix::zeros(m, 2);
                for t in 0..m {
                    let w = if members[t] { &wa } else { &wb };
                    let row = values.row(t) * w;
                    ybar.row_mut(t).copy_from(&row);
                }
                let phi = DesignMatrix {
                    values,
                    library: lib,
                    column_scales: None,
                    dropped: vec![],
                };
                (phi, ybar, members)
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn majority_rows_recovered_exactly((phi, ybar, members) in mixed_case()) {
                let split = solve_residual_sparse(&phi, &ybar, &SolverConfig::with_epsilon(1e-9)).unwrap();
                prop_assert_eq!(&split.explained, &members);
                let rows: Vec<usize> = (0..members.len()).filter(|&t| members[t]).collect();
                let oracle = lstsq(&phi.values.select_rows(&rows), &ybar.select_rows(&rows));
                prop_assert!((&split.w - &oracle).amax() < 1e-8);
            }

            #[test]
            fn scaling_equivariance((phi, ybar, _m) in mixed_case(), c in 0.01f64..100.0) {
                let cfg = SolverConfig { epsilon: Some(1e-6), lambda_w: Some(1e-6), ..Default::default() };
                let scaled_cfg = SolverConfig { epsilon: Some(1e-6 * c), lambda_w: Some(1e-6 * c), ..Default::default() };
                let a = solve_residual_sparse(&phi, &ybar, &cfg).unwrap();
                let b = solve_residual_sparse(&phi, &(&ybar * c), &scaled_cfg).unwrap();
                prop_assert_eq!(&a.explained, &b.explained);
                prop_assert!((&a.w * c - &b.w).amax() <= 1e-8 * c.max(1.0));
            }
        }
    }
}
