use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hybrid-id"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a thermostat benchmark and returns its path.
fn thermostat(dir: &Path) -> PathBuf {
    let data = path(dir, "th.csv");
    let o = run(&["benchmark", "thermostat", "--steps", "500", "--out", s(&data)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    data
}

fn identify(dir: &Path, data: &Path, name: &str) -> (PathBuf, String) {
    let model = path(dir, name);
    let o = run(&["identify", s(data), "--out", s(&model)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    (model, String::from_utf8(o.stderr).unwrap())
}

/// Two-mode thermostat-heater stream: `0.99 y`, then `+ 0.3` from row 200.
fn two_mode_stream(dir: &Path) -> PathBuf {
    let mut text = String::from("t,y1\n");
    let mut y: f64 = 20.0;
    for t in 0..400 {
        text.push_str(&format!("{t},{y}\n"));
        y = if t < 200 { 0.99 * y } else { 0.99 * y + 0.3 };
    }
    let p = path(dir, "stream.csv");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn benchmark_writes_steps_plus_one_rows_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let data = thermostat(dir.path());
    let text = std::fs::read_to_string(&data).unwrap();
    assert_eq!(text.lines().count(), 1 + 501);
    assert!(text.starts_with("t,y1\n"));
    let truth: Value = serde_json::from_str(&std::fs::read_to_string(path(dir.path(), "th.truth.json")).unwrap()).unwrap();
    assert_eq!(truth["modes"].as_array().unwrap().len(), 500);
    assert_eq!(truth["benchmark"], "thermostat");
}

#[test]
fn identify_thermostat_reports_rules() {
    let dir = tempfile::tempdir().unwrap();
    let data = thermostat(dir.path());
    let (model, summary) = identify(dir.path(), &data, "model.json");
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&model).unwrap()).unwrap();
    assert_eq!(doc["subsystems"].as_array().unwrap().len(), 2);
    assert_eq!(doc["transitions"].as_array().unwrap().len(), 2);
    assert!(summary.contains("K = 2"), "{summary}");
    assert!(summary.contains("when y1 − 21"), "{summary}");
    assert!(summary.contains("when −y1 + 19"), "{summary}");
}

#[test]
fn identify_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = thermostat(dir.path());
    let (a, _) = identify(dir.path(), &data, "a.json");
    let (b, _) = identify(dir.path(), &data, "b.json");
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn single_mode_data_has_no_transitions() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("t,y1,u1\n");
    let mut y = 1.0;
    for t in 0..200 {
        let u = ((t * 7919) % 13) as f64 / 13.0 - 0.5;
        text.push_str(&format!("{t},{y},{u}\n"));
        y = 0.9 * y + 0.5 * u;
    }
    let data = path(dir.path(), "lin.csv");
    std::fs::write(&data, text).unwrap();
    let (model, _) = identify(dir.path(), &data, "lin.json");
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(model).unwrap()).unwrap();
    assert_eq!(doc["subsystems"].as_array().unwrap().len(), 1);
    assert!(doc["transitions"].as_array().unwrap().is_empty());
}

#[test]
fn input_errors_exit_with_status_two() {
    let dir = tempfile::tempdir().unwrap();
    let empty = path(dir.path(), "empty.csv");
    std::fs::write(&empty, "").unwrap();
    assert_eq!(run(&["identify", s(&empty)]).status.code(), Some(2));

    let bad = path(dir.path(), "bad.csv");
    std::fs::write(&bad, "t,y1\n0,1\n1,2\n2,oops\n").unwrap();
    let o = run(&["identify", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 4"));
}

#[test]
fn config_errors_exit_with_status_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = path(dir.path(), "cfg.json");
    std::fs::write(&cfg, r#"{"solver": {"epsilon": 1e-6}, "mystery": 1}"#).unwrap();
    assert_eq!(run(&["config", "--config", s(&cfg)]).status.code(), Some(3));
    assert_eq!(run(&["benchmark", "lorenz"]).status.code(), Some(3));
    assert_eq!(run(&["benchmark", "thermostat", "--param", "bogus=1"]).status.code(), Some(3));
}

#[test]
fn config_command_materializes_defaults() {
    let o = run(&["config", "--seed", "9"]);
    assert!(o.status.success());
    let cfg: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(cfg["seed"], 9);
    assert_eq!(cfg["monitor"]["miss_limit"], 3);
    assert_eq!(cfg["limits"]["max_modes"], 10);
}

#[test]
fn help_documents_exit_codes() {
    let o = run(&["--help"]);
    let text = String::from_utf8(o.stdout).unwrap();
    for code in ["0  success", "2  invalid", "3  invalid", "4  identification", "5  file", "6  model"] {
        assert!(text.contains(code), "{code}");
    }
}

#[test]
fn eval_round_trip_on_training_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = thermostat(dir.path());
    let (model, _) = identify(dir.path(), &data, "model.json");
    let o = run(&["eval", s(&model), s(&data)]);
    assert!(o.status.success());
    let m: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(m["error_ratio_percent"].as_f64().unwrap() < 1e-9);
    assert_eq!(m["segmentation_accuracy"].as_f64(), Some(1.0));
    assert_eq!(m["per_mode_fit"].as_array().unwrap().len(), 2);
}

#[test]
fn monitor_emits_one_event_on_two_mode_stream() {
    let dir = tempfile::tempdir().unwrap();
    let stream = two_mode_stream(dir.path());
    let o = run(&["monitor", s(&stream)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 1, "{out}");
    let e: Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(e["type"], "switch");
    assert_eq!(e["confirmed_after"], 3);
    assert!((200..=203).contains(&e["detected_at"].as_u64().unwrap()));
    assert_eq!(e["diff"][0][0], "1");
}

#[test]
fn monitor_reads_standard_input() {
    use std::io::Write;
    use std::process::Stdio;
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read(two_mode_stream(dir.path())).unwrap();
    let mut child = bin()
        .args(["monitor", "-"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(&text).unwrap();
    let o = child.wait_with_output().unwrap();
    assert_eq!(String::from_utf8(o.stdout).unwrap().lines().count(), 1);
}

fn read_rows(p: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = std::fs::read_to_string(p).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

#[test]
fn plotdata_labels_follow_switches() {
    let dir = tempfile::tempdir().unwrap();
    let data = thermostat(dir.path());
    let (model, _) = identify(dir.path(), &data, "model.json");
    let plot = path(dir.path(), "plot.csv");
    assert!(run(&["plotdata", s(&model), s(&data), "--out", s(&plot)]).status.success());
    let (header, rows) = read_rows(&plot);
    assert_eq!(header, ["t", "y1", "fit_y1", "mode_label"]);
    assert_eq!(rows.len(), 500);
    let labels: Vec<f64> = rows.iter().map(|r| r[3]).collect();
    assert!(labels.iter().all(|&l| l == 1.0 || l == 2.0));
    assert!(labels.windows(2).filter(|w| w[0] != w[1]).count() > 10);
    for r in &rows {
        assert!((r[1] - r[2]).abs() < 1e-9);
    }
}

#[test]
fn plotdata_constant_label_for_single_mode() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("t,y1\n");
    let mut y: f64 = 3.0;
    for t in 0..100 {
        text.push_str(&format!("{t},{y}\n"));
        y = 0.95 * y + 0.2;
    }
    let data = path(dir.path(), "one.csv");
    std::fs::write(&data, text).unwrap();
    let (model, _) = identify(dir.path(), &data, "one.json");
    let plot = path(dir.path(), "plot.csv");
    assert!(run(&["plotdata", s(&model), s(&data), "--out", s(&plot)]).status.success());
    let (_, rows) = read_rows(&plot);
    assert!(rows.iter().all(|r| r[3] == 1.0));
}

#[test]
fn simulate_writes_trajectory_with_modes() {
    let dir = tempfile::tempdir().unwrap();
    let data = thermostat(dir.path());
    let (model, _) = identify(dir.path(), &data, "model.json");
    let sim = path(dir.path(), "sim.csv");
    let o = run(&["simulate", s(&model), "--y0", "20", "--m0", "1", "--steps", "100", "--out", s(&sim)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = read_rows(&sim);
    assert_eq!(header, ["t", "y1", "mode"]);
    assert_eq!(rows.len(), 101);
    assert!(rows.iter().all(|r| (18.5..21.5).contains(&r[1])));
    let summary: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(summary["diverged"], false);
    assert!(!summary["switch_times"].as_array().unwrap().is_empty());
}

#[test]
fn simulate_needs_inputs_for_driven_models() {
    let dir = tempfile::tempdir().unwrap();
    let data = path(dir.path(), "relay.csv");
    assert!(run(&["benchmark", "relay_hysteresis", "--steps", "300", "--out", s(&data)]).status.success());
    let (model, _) = identify(dir.path(), &data, "relay.json");
    assert_eq!(run(&["simulate", s(&model), "--y0", "0", "--steps", "10"]).status.code(), Some(3));
    let o = run(&["simulate", s(&model), "--y0", "0", "--steps", "10", "--inputs", s(&data)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn eval_rejects_incompatible_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = thermostat(dir.path());
    let (model, _) = identify(dir.path(), &data, "model.json");
    let other = path(dir.path(), "grid.csv");
    assert!(run(&["benchmark", "grid_switch", "--steps", "50", "--out", s(&other)]).status.success());
    assert_eq!(run(&["eval", s(&model), s(&other)]).status.code(), Some(6));
}
