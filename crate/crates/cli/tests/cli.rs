use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fogline::metrics::MetricsSeries;
use fogline::placement::read_moves_csv;
use fogline::report::read_comm_csv;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fogline"))
}

fn reference(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

/// Copies a reference scenario into a scratch directory so it can be edited.
fn copy_scenario(name: &str) -> TempDir {
    let dir = TempDir::new().unwrap();
    for entry in fs::read_dir(reference(name)).unwrap() {
        let entry = entry.unwrap();
        if entry.file_type().unwrap().is_file() {
            fs::copy(entry.path(), dir.path().join(entry.file_name())).unwrap();
        }
    }
    dir
}

fn fogline(scenario: &Path, out: &Path, args: &[&str]) -> Output {
    bin()
        .arg("--scenario")
        .arg(scenario)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn summary_value(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("summary has {key}"))
        .to_string()
}

#[test]
fn validate_accepts_reference_scenarios() {
    let out = TempDir::new().unwrap();
    for name in ["r1", "r2"] {
        let o = fogline(&reference(name).join("scenario.json"), out.path(), &["validate"]);
        assert!(o.status.success(), "{name}: {}", stderr(&o));
    }
}

#[test]
fn simulate_writes_consistent_artifacts() {
    let out = TempDir::new().unwrap();
    let o = fogline(
        &reference("r1").join("scenario.json"),
        out.path(),
        &["--quiet", "simulate"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(o.stdout.is_empty());
    let summary = fs::read_to_string(out.path().join("summary.txt")).unwrap();
    let metrics = MetricsSeries::from_csv(fs::File::open(out.path().join("metrics.csv")).unwrap()).unwrap();
    let t = &metrics.totals;
    assert_eq!(
        summary_value(&summary, "records_injected"),
        t.records_injected().to_string()
    );
    assert_eq!(
        summary_value(&summary, "records_at_sinks"),
        t.records_at_sinks().to_string()
    );
    assert_eq!(summary_value(&summary, "records_in_flight"), "0");
    assert_eq!(summary_value(&summary, "seed"), "11");
    let ch = t.channel("sensors->parse").unwrap();
    assert!(summary.contains(&format!("sent_encoded_bytes {}", ch.bytes_sent_encoded)));
    assert!(fs::read_to_string(out.path().join("plan.txt"))
        .unwrap()
        .contains("parse"));
}

#[test]
fn simulate_is_deterministic_and_seed_sensitive() {
    let scenario = reference("r1").join("scenario.json");
    let run = |seed: &str| {
        let out = TempDir::new().unwrap();
        let o = fogline(&scenario, out.path(), &["--quiet", "--seed", seed, "simulate"]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(out.path().join("metrics.csv")).unwrap()
    };
    assert_eq!(run("5"), run("5"));
    assert_ne!(run("5"), run("6"));
}

#[test]
fn missing_topology_is_an_input_error() {
    let dir = copy_scenario("r1");
    fs::remove_file(dir.path().join("topology.json")).unwrap();
    let o = fogline(
        &dir.path().join("scenario.json"),
        &dir.path().join("out"),
        &["simulate"],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("topology.json"), "{}", stderr(&o));
}

#[test]
fn missing_scenario_argument_is_an_input_error() {
    let o = bin().arg("validate").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_iterations_is_rejected() {
    let dir = copy_scenario("r1");
    fs::write(dir.path().join("optimizer.json"), r#"{"max_iterations": 0}"#).unwrap();
    let doc = fs::read_to_string(dir.path().join("scenario.json")).unwrap();
    let doc = doc.replacen('{', "{\n  \"optimizer\": \"optimizer.json\",", 1);
    fs::write(dir.path().join("scenario.json"), doc).unwrap();
    let o = fogline(
        &dir.path().join("scenario.json"),
        &dir.path().join("out"),
        &["optimize-placement"],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("max_iterations"), "{}", stderr(&o));
}

#[test]
fn optimize_writes_moves_and_placement() {
    let out = TempDir::new().unwrap();
    let o = fogline(
        &reference("r1").join("scenario.json"),
        out.path(),
        &["optimize-placement"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let moves = read_moves_csv(fs::File::open(out.path().join("moves.csv")).unwrap()).unwrap();
    assert!(!moves.is_empty());
    assert!(moves
        .windows(2)
        .all(|w| w[1].total_usd_h_micro < w[0].total_usd_h_micro));
    let placement = fs::read_to_string(out.path().join("final_placement.json")).unwrap();
    let placement = fogline::fabric::Placement::from_json(&placement).unwrap();
    for m in &moves {
        assert_ne!(placement.get(&m.component), Some("cloud"));
    }
    assert!(out.path().join("figure2.csv").exists());
}

#[test]
fn no_headroom_means_header_only_moves() {
    let dir = copy_scenario("r1");
    let topo = fs::read_to_string(dir.path().join("topology.json")).unwrap();
    let topo = topo
        .replace(r#""cpu_units": 2,"#, r#""cpu_units": 1e-9,"#)
        .replace(r#""cpu_units": 4,"#, r#""cpu_units": 1e-9,"#)
        .replace(r#""cpu_units": 8,"#, r#""cpu_units": 1e-9,"#);
    fs::write(dir.path().join("topology.json"), topo).unwrap();
    let out = dir.path().join("out");
    let o = fogline(&dir.path().join("scenario.json"), &out, &["optimize-placement"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(out.join("moves.csv")).unwrap(),
        "iteration,component,from,to,delta_usd_h_micro,total_usd_h_micro,edge_cpu_util\n"
    );
}

#[test]
fn replay_needs_a_changing_schedule() {
    let out = TempDir::new().unwrap();
    let o = fogline(&reference("r1").join("scenario.json"), out.path(), &["replay-comm"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("at least 2 steps"));
}

#[test]
fn replay_shows_the_bandwidth_drop_and_recovery() {
    let out = TempDir::new().unwrap();
    let o = fogline(
        &reference("r2").join("scenario.json"),
        out.path(),
        &["--quiet", "replay-comm"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_comm_csv(fs::File::open(out.path().join("figure3.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 900);
    let at = |t: f64| rows.iter().find(|r| r.t_s == t).unwrap();
    assert_eq!(at(299.0).cap_bits_s, 5e6);
    assert_eq!(at(300.0).cap_bits_s, 2.5e5);
    assert_eq!(at(600.0).cap_bits_s, 5e6);
    assert_ne!(at(299.0).codec, at(300.0).codec);
    let degraded: f64 = rows
        .iter()
        .filter(|r| r.t_s >= 300.0 && r.t_s < 600.0)
        .map(|r| r.sent_bits_s)
        .sum();
    assert!(degraded <= 2.5e5 * 300.0 + 2.0 * 2.5e5 + 1500.0 * 8.0, "{degraded}");
    assert!(rows.iter().any(|r| r.t_s > 300.0 && r.backlog_bytes > 0));
    assert_eq!(rows.last().unwrap().backlog_bytes, 0);
}

#[test]
fn sweep_isolates_each_scenario() {
    let out = TempDir::new().unwrap();
    let o = bin()
        .arg("analyze")
        .arg("--out")
        .arg(out.path())
        .arg("--quiet")
        .arg("--sweep")
        .arg(reference("r1").join("scenario.json"))
        .arg(reference("r2").join("scenario.json"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    for d in ["00-r1", "01-r2"] {
        let text = fs::read_to_string(out.path().join(d).join("analysis.csv")).unwrap();
        assert!(text.starts_with("entity,dimension,usd_per_hour_micro\n"));
    }
}
