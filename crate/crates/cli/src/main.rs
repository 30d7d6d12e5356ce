//! `hybrid-id`: discover, simulate, monitor and score hybrid dynamical systems.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hybrid_id::format::{
    canonical_string, config_hash, data_fingerprint, read_csv_path, truth_path, write_csv, write_table, Metadata,
    ModelDocument, StreamReader, TruthDocument,
};
use hybrid_id::hybrid_sim::{
    best_fit_labels, generate_benchmark, one_step_error_ratio, one_step_predictions, segmentation_accuracy,
    simulate, BenchmarkName,
};
use hybrid_id::online_monitor::MonitorState;
use hybrid_id::subsystem_id::Segmentation;
use hybrid_id::transition_id::rule_to_string;
use hybrid_id::{discover, Error, RunConfig, TimeSeries};
use nalgebra::DMatrix;

const EXIT_CODES: &str = "\
Exit status:
  0  success
  2  invalid or empty input data (malformed CSV row, non-uniform sampling, dimension mismatch)
  3  invalid configuration or arguments (unknown key, bad parameter, unknown benchmark)
  4  identification failed (no consensus subsystem, mode budget exhausted)
  5  file could not be read or written
  6  model file invalid or incompatible with the data";

#[derive(Parser)]
#[command(name = "hybrid-id", version, about = "Discover hybrid dynamical systems from sampled data")]
#[command(after_help = EXIT_CODES)]
struct Cli {
    /// JSON run configuration; omitted keys take their defaults (see `hybrid-id config`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for randomized restarts and benchmark noise; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file; standard output when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress summaries and warnings.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Identify subsystems and transition rules; writes a model document.
    Identify {
        /// Data CSV with header `t,y1..yn[,u1..um]`.
        data: PathBuf,
    },
    /// Run a model forward; writes `t,y..,u..,mode` rows and reports switch times on stderr.
    Simulate(SimulateArgs),
    /// Stream switch detection; one JSON event per line.
    Monitor {
        /// Data CSV, or `-` for standard input.
        stream: PathBuf,
    },
    /// Generate benchmark data; with `--out data.csv` also writes `data.truth.json`.
    Benchmark(BenchmarkArgs),
    /// Score a model against data; prints metrics JSON.
    Eval {
        model: PathBuf,
        data: PathBuf,
        /// Truth sidecar; defaults to `<data>.truth.json` when present.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Emit `t,y..,fit_y..,mode_label` rows for segmentation plots.
    ///
    /// Row `t` holds sample `t`, the one-step prediction of it from row `t-1`
    /// and the mode used for that prediction.
    Plotdata { model: PathBuf, data: PathBuf },
    /// Print the effective configuration with every default filled in.
    Config,
}

#[derive(Args)]
struct SimulateArgs {
    model: PathBuf,
    /// Initial outputs, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    y0: Vec<f64>,
    /// Initial mode id.
    #[arg(long, default_value_t = 1)]
    m0: usize,
    #[arg(long)]
    steps: usize,
    /// Data CSV whose input columns drive the model (at least `steps` rows).
    #[arg(long)]
    inputs: Option<PathBuf>,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// thermostat, chua, pwa2, relay_hysteresis, grid_switch or gating_toy.
    name: String,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    /// Standard deviation of Gaussian noise added to the outputs.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Generator parameter override `key=value`; repeatable.
    #[arg(long = "param", value_parser = parse_param)]
    params: Vec<(String, f64)>,
}

fn parse_param(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or("expected key=value")?;
    let v: f64 = v.trim().parse().map_err(|_| format!("`{v}` is not a number"))?;
    Ok((k.trim().to_string(), v))
}

/// Error with the exit status it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidInput(_)
            | Error::DimensionMismatch(_)
            | Error::NonFinite { .. }
            | Error::ZeroColumn { .. }
            | Error::EmptyRows
            | Error::Parse { .. }
            | Error::UndefinedRatio => 2,
            Error::InvalidParam { .. } | Error::UnknownBenchmark(_) | Error::Json(_) => 3,
            Error::NoConsensus | Error::ModeBudgetExhausted { .. } | Error::NotExpressible => 4,
            Error::Io(_) => 5,
            Error::DictionaryMismatch(_) => 6,
        };
        Self::new(code, e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Self::new(5, e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { tracing::Level::ERROR } else { tracing::Level::WARN };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(io::stderr)
        .without_time()
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Identify { data } => identify(cli, &cfg, data),
        Command::Simulate(args) => simulate_cmd(cli, args),
        Command::Monitor { stream } => monitor(cli, &cfg, stream),
        Command::Benchmark(args) => benchmark(cli, &cfg, args),
        Command::Eval { model, data, truth } => eval(cli, model, data, truth.as_deref()),
        Command::Plotdata { model, data } => plotdata(cli, model, data),
        Command::Config => emit(cli, canonical_string(&cfg)?.as_bytes()),
    }
}

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        None => RunConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::new(5, format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::new(3, format!("{}: {e}", path.display())))?
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Writer for `--out`, or standard output.
fn output(cli: &Cli) -> CliResult<Box<dyn Write>> {
    Ok(match &cli.out {
        Some(path) => Box::new(BufWriter::new(
            File::create(path).map_err(|e| Failure::new(5, format!("{}: {e}", path.display())))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn emit(cli: &Cli, bytes: &[u8]) -> CliResult<()> {
    let mut w = output(cli)?;
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}

fn read_data(path: &Path) -> CliResult<TimeSeries> {
    read_csv_path(path).map_err(|e| {
        let f = Failure::from(e);
        Failure::new(f.code, format!("{}: {}", path.display(), f.message))
    })
}

fn load_model(path: &Path) -> CliResult<hybrid_id::HybridModel> {
    let bad = |e: Error| match e {
        Error::Io(e) => Failure::new(5, format!("{}: {e}", path.display())),
        e => Failure::new(6, format!("{}: {e}", path.display())),
    };
    ModelDocument::load(path).and_then(|d| d.to_model()).map_err(bad)
}

fn check_compatible(model: &hybrid_id::HybridModel, data: &TimeSeries) -> CliResult<()> {
    if model.n_outputs() != data.n_outputs() || model.n_inputs() != data.n_inputs() {
        return Err(Failure::new(
            6,
            format!(
                "model has {} outputs and {} inputs, data has {} and {}",
                model.n_outputs(),
                model.n_inputs(),
                data.n_outputs(),
                data.n_inputs()
            ),
        ));
    }
    Ok(())
}

fn identify(cli: &Cli, cfg: &RunConfig, path: &Path) -> CliResult<()> {
    let data = read_data(path)?;
    let d = discover(&data, cfg)?;
    let seg = &d.identification.segmentation;
    let error = one_step_error_ratio(&d.model.subsystems, &seg.labels, &data)?;
    let mut metrics = BTreeMap::new();
    metrics.insert("one_step_error_percent".to_string(), error);
    metrics.insert("epsilon".to_string(), d.identification.threshold() / (data.n_outputs() as f64).sqrt());
    metrics.insert("unassigned_rows".to_string(), seg.unassigned().len() as f64);
    if let Some(l) = d.chosen_lambda {
        metrics.insert("lambda_w".to_string(), l);
    }
    let metadata = Metadata {
        config_hash: Some(config_hash(cfg)?),
        data_fingerprint: Some(data_fingerprint(&data)),
        metrics,
    };
    let doc = ModelDocument::from_model(&d.model, metadata);
    emit(cli, doc.to_canonical_string()?.as_bytes())?;
    if !cli.quiet {
        let mut err = io::stderr().lock();
        writeln!(err, "K = {}", d.model.k())?;
        for (id, count) in seg.counts().iter().enumerate() {
            writeln!(err, "  mode {}: {count} rows", id + 1)?;
        }
        if !seg.unassigned().is_empty() {
            writeln!(err, "  unassigned: {} rows", seg.unassigned().len())?;
        }
        for r in &d.model.rules {
            let flag = if r.flagged { " [low confidence]" } else { "" };
            writeln!(err, "{}  (accuracy {:.3}){flag}", rule_to_string(r, 2), r.training_accuracy)?;
        }
        for (i, j) in &d.transitions.omitted {
            writeln!(err, "mode {i} → mode {j}: not expressible in the predicate dictionary")?;
        }
        if let Some(l) = d.chosen_lambda {
            writeln!(err, "lambda_w = {l}")?;
        }
        writeln!(err, "one-step error ratio = {error:.3e} %")?;
    }
    Ok(())
}

fn simulate_cmd(cli: &Cli, args: &SimulateArgs) -> CliResult<()> {
    let model = load_model(&args.model)?;
    let inputs = match (&args.inputs, model.n_inputs()) {
        (_, 0) => None,
        (None, m) => return Err(Failure::new(3, format!("model has {m} inputs; pass --inputs"))),
        (Some(p), _) => Some(read_data(p)?.inputs),
    };
    let r = simulate(&model, &args.y0, args.m0, inputs.as_ref(), args.steps)?;
    let traj = &r.trajectory;
    let mut header = vec!["t".to_string()];
    header.extend((1..=traj.n_outputs()).map(|k| format!("y{k}")));
    header.extend((1..=traj.n_inputs()).map(|k| format!("u{k}")));
    header.push("mode".into());
    let rows = (0..traj.samples()).map(|t| {
        let mut row = vec![t as f64 * traj.sample_period];
        row.extend(traj.output(t));
        row.extend(traj.input(t));
        row.push(r.mode_trace[t] as f64);
        row
    });
    write_table(output(cli)?, &header, rows)?;
    if !cli.quiet {
        let summary = serde_json::json!({"switch_times": r.switch_times, "diverged": r.diverged});
        eprintln!("{summary}");
    }
    Ok(())
}

fn monitor(cli: &Cli, cfg: &RunConfig, path: &Path) -> CliResult<()> {
    let reader: Box<dyn io::Read> = if path == Path::new("-") {
        Box::new(io::stdin().lock())
    } else {
        Box::new(File::open(path).map_err(|e| Failure::new(5, format!("{}: {e}", path.display())))?)
    };
    let stream = StreamReader::new(reader)?;
    let library = cfg.dictionary.library(stream.n_outputs(), stream.n_inputs())?;
    let mut state = MonitorState::new(library, cfg.monitor.clone(), cfg.seeded_solver(), cfg.limits.min_segment)?;
    let mut out = output(cli)?;
    let mut events = 0;
    for sample in stream {
        let s = sample?;
        if let Some(event) = state.step(&s.y, &s.u)? {
            writeln!(out, "{}", event.to_json_line())?;
            out.flush()?;
            events += 1;
        }
    }
    if !cli.quiet {
        eprintln!(
            "{} samples, {events} switch events, {} known modes",
            state.samples_seen(),
            state.known_modes().len()
        );
    }
    Ok(())
}

fn benchmark(cli: &Cli, cfg: &RunConfig, args: &BenchmarkArgs) -> CliResult<()> {
    let name: BenchmarkName = args.name.parse()?;
    let params: BTreeMap<String, f64> = args.params.iter().cloned().collect();
    let b = generate_benchmark(name, &params, args.steps, args.noise, cfg.seed)?;
    let mut w = output(cli)?;
    write_csv(&mut w, &b.data, 0.0)?;
    w.flush()?;
    if let Some(out) = &cli.out {
        TruthDocument::from_benchmark(&b).save(&truth_path(out))?;
    }
    Ok(())
}

fn eval(cli: &Cli, model_path: &Path, data_path: &Path, truth: Option<&Path>) -> CliResult<()> {
    let model = load_model(model_path)?;
    let data = read_data(data_path)?;
    check_compatible(&model, &data)?;
    let labels = best_fit_labels(&model.subsystems, &data)?;
    let mut metrics = serde_json::Map::new();
    metrics.insert(
        "error_ratio_percent".into(),
        one_step_error_ratio(&model.subsystems, &labels, &data)?.into(),
    );
    let sidecar = truth.map(Path::to_path_buf).or_else(|| {
        let p = truth_path(data_path);
        p.exists().then_some(p)
    });
    if let Some(p) = sidecar {
        let t = TruthDocument::load(&p).map_err(|e| Failure::new(6, format!("{}: {e}", p.display())))?;
        let seg = Segmentation {
            labels: labels.clone(),
            k: model.k(),
        };
        metrics.insert("segmentation_accuracy".into(), segmentation_accuracy(&seg, &t.modes)?.into());
    }
    let per_mode: Vec<serde_json::Value> = model
        .subsystems
        .iter()
        .map(|s| {
            let rows: Vec<usize> = (0..labels.len()).filter(|&t| labels[t] == s.id).collect();
            let pred = one_step_predictions(std::slice::from_ref(s), &vec![s.id; labels.len()], &data);
            let ratio = pred.ok().and_then(|p| {
                let truth = data.targets(&rows);
                let approx = DMatrix::from_fn(rows.len(), p.ncols(), |r, c| p[(rows[r], c)]);
                let denom = truth.norm();
                (denom > 0.0).then(|| 100.0 * (truth - approx).norm() / denom)
            });
            serde_json::json!({"mode": s.id, "rows": rows.len(), "error_ratio_percent": ratio})
        })
        .collect();
    metrics.insert("per_mode_fit".into(), per_mode.into());
    let text = canonical_string(&serde_json::Value::Object(metrics))?;
    emit(cli, text.as_bytes())
}

fn plotdata(cli: &Cli, model_path: &Path, data_path: &Path) -> CliResult<()> {
    let model = load_model(model_path)?;
    let data = read_data(data_path)?;
    check_compatible(&model, &data)?;
    let labels = best_fit_labels(&model.subsystems, &data)?;
    let fitted = one_step_predictions(&model.subsystems, &labels, &data)?;
    let n = data.n_outputs();
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|k| format!("y{k}")));
    header.extend((1..=n).map(|k| format!("fit_y{k}")));
    header.push("mode_label".into());
    let rows = (0..data.transitions()).map(|t| {
        let mut row = vec![(t + 1) as f64 * data.sample_period];
        row.extend(data.output(t + 1));
        row.extend(fitted.row(t).iter());
        row.push(labels[t] as f64);
        row
    });
    write_table(output(cli)?, &header, rows)?;
    Ok(())
}
