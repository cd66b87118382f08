//! End-to-end tests of the command-line interface: exit codes, file
//! layout, manifest integrity, and run-to-run determinism.

use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use tempfile::tempdir;

fn sotar() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sotar"))
}

fn run(args: &[&str], out_dir: &Path) -> Output {
    sotar()
        .args(args)
        .arg("--out")
        .arg(out_dir)
        .output()
        .expect("binary should start")
}

/// Small grid so every test solves in well under a second.
const SMALL: &[&str] = &["--dt", "0.5", "--horizon", "30"];

fn solve_small(out_dir: &Path, psi: &[&str]) {
    let mut args = vec!["solve"];
    args.extend_from_slice(SMALL);
    for spec in psi {
        args.push("--psi");
        args.push(spec);
    }
    let output = run(&args, out_dir);
    assert!(output.status.success(), "{output:?}");
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|byte| format!("{byte:02x}"))
        .collect()
}

#[test]
fn solve_writes_dumps_logs_and_a_manifest() {
    let dir = tempdir().unwrap();
    solve_small(dir.path(), &["1", "0.7"]);
    for name in [
        "solution_psi_1.json",
        "solution_psi_0.7.json",
        "convergence_psi_1.csv",
        "convergence_psi_0.7.csv",
    ] {
        assert!(dir.path().join(name).exists(), "missing {name}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest_solve.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["config"]["command"], "solve");
    assert_eq!(manifest["config"]["network"], "benchmark");
    let outputs = manifest["outputs"].as_array().unwrap();
    assert_eq!(outputs.len(), 4);
    let mut previous = String::new();
    for entry in outputs {
        let path = entry["path"].as_str().unwrap();
        assert!(previous.as_str() < path, "outputs must be sorted by path");
        previous = path.to_string();
        let bytes = fs::read(dir.path().join(path)).unwrap();
        assert_eq!(entry["sha256"].as_str().unwrap(), sha256_hex(&bytes));
    }
}

#[test]
fn manifest_config_reproduces_the_run() {
    let dir_a = tempdir().unwrap();
    let dir_b = tempdir().unwrap();
    solve_small(dir_a.path(), &["0.8"]);
    solve_small(dir_b.path(), &["0.8"]);
    let read = |dir: &Path| {
        serde_json::from_str::<serde_json::Value>(
            &fs::read_to_string(dir.join("manifest_solve.json")).unwrap(),
        )
        .unwrap()
    };
    let manifest_a = read(dir_a.path());
    let manifest_b = read(dir_b.path());
    assert_eq!(manifest_a["config"], manifest_b["config"]);
    assert_eq!(manifest_a["outputs"], manifest_b["outputs"]);
    let reparsed: serde_json::Value =
        serde_json::from_str(&serde_json::to_string(&manifest_a["config"]).unwrap()).unwrap();
    assert_eq!(reparsed, manifest_a["config"]);
}

#[test]
fn malformed_network_file_is_an_input_error() {
    let dir = tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"nodes\": \"many\"").unwrap();
    let output = run(&["solve", "--network", bad.to_str().unwrap()], dir.path());
    assert_eq!(output.status.code(), Some(1));
    assert!(!output.stderr.is_empty());
}

#[test]
fn missing_network_file_is_an_input_error() {
    let dir = tempdir().unwrap();
    let output = run(&["solve", "--network", "no_such_file.json"], dir.path());
    assert_eq!(output.status.code(), Some(1));
    assert!(!output.stderr.is_empty());
}

#[test]
fn non_convergence_exits_two_but_still_writes_the_dump() {
    let dir = tempdir().unwrap();
    let mut args = vec!["solve"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--psi", "1", "--max-iter", "1"]);
    let output = run(&args, dir.path());
    assert_eq!(output.status.code(), Some(2));
    assert!(dir.path().join("solution_psi_1.json").exists());
    assert!(dir.path().join("convergence_psi_1.csv").exists());
    assert!(dir.path().join("manifest_solve.json").exists());
}

#[test]
fn curves_before_solve_is_an_input_error() {
    let dir = tempdir().unwrap();
    let mut args = vec!["curves"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--psi", "1", "--edge", "2,3"]);
    let output = run(&args, dir.path());
    assert_eq!(output.status.code(), Some(1));
    assert!(!output.stderr.is_empty());
}

#[test]
fn realized_time_beyond_the_horizon_is_an_input_error() {
    let dir = tempdir().unwrap();
    solve_small(dir.path(), &["1"]);
    let mut args = vec!["curves"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--psi", "1", "--edge", "2,3", "--y", "31"]);
    let output = run(&args, dir.path());
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn curves_write_one_csv_per_psi_and_a_summary() {
    let dir = tempdir().unwrap();
    solve_small(dir.path(), &["1", "0.7"]);
    let mut args = vec!["curves"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--psi", "1", "--psi", "0.7", "--edge", "2,3", "--y", "9"]);
    let output = run(&args, dir.path());
    assert!(output.status.success(), "{output:?}");
    for name in ["curve_psi_1.csv", "curve_psi_0.7.csv", "summary.csv"] {
        assert!(dir.path().join(name).exists(), "missing {name}");
    }
    let curve = fs::read_to_string(dir.path().join("curve_psi_1.csv")).unwrap();
    let mut lines = curve.lines();
    assert_eq!(lines.next(), Some("t,u,successor"));
    assert_eq!(lines.count(), 61);
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().next(), Some("psi,switch_count,thresholds"));
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn destination_edge_curve_is_constant_one() {
    let dir = tempdir().unwrap();
    solve_small(dir.path(), &["1"]);
    let mut args = vec!["curves"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--psi", "1", "--edge", "24,25", "--y", "9"]);
    let output = run(&args, dir.path());
    assert!(output.status.success(), "{output:?}");
    let curve = fs::read_to_string(dir.path().join("curve_psi_1.csv")).unwrap();
    for line in curve.lines().skip(1) {
        let mut fields = line.split(',');
        fields.next();
        assert_eq!(fields.next(), Some("1"), "line {line:?}");
        assert_eq!(fields.next(), Some(""), "line {line:?}");
    }
}

#[test]
fn simulate_reruns_with_one_seed_are_byte_identical() {
    let dir = tempdir().unwrap();
    solve_small(dir.path(), &["1"]);
    let mut args = vec!["simulate"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&[
        "--psi", "1", "--edge", "2,3", "--y", "9", "--budget", "28", "--trips", "5000", "--seed",
        "11",
    ]);
    let output = run(&args, dir.path());
    assert!(output.status.success(), "{output:?}");
    let first = fs::read(dir.path().join("stats_psi_1.csv")).unwrap();
    let first_manifest = fs::read(dir.path().join("manifest_simulate.json")).unwrap();
    let output = run(&args, dir.path());
    assert!(output.status.success(), "{output:?}");
    assert_eq!(first, fs::read(dir.path().join("stats_psi_1.csv")).unwrap());
    assert_eq!(
        first_manifest,
        fs::read(dir.path().join("manifest_simulate.json")).unwrap()
    );
}

#[test]
fn simulate_covers_every_weight_vector() {
    let dir = tempdir().unwrap();
    solve_small(dir.path(), &["1", "0.8"]);
    let mut args = vec!["simulate"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&[
        "--psi", "1", "--psi", "0.8", "--edge", "2,3", "--y", "9", "--budget", "28", "--trips",
        "500",
    ]);
    let output = run(&args, dir.path());
    assert!(output.status.success(), "{output:?}");
    let manifest: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.path().join("manifest_simulate.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 2);
    for label in ["1", "0.8"] {
        assert!(dir.path().join(format!("stats_psi_{label}.csv")).exists());
    }
}

#[test]
fn simulate_from_the_destination_is_certain() {
    let dir = tempdir().unwrap();
    solve_small(dir.path(), &["1"]);
    let mut args = vec!["simulate"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&[
        "--psi", "1", "--origin", "25", "--budget", "5", "--trips", "200",
    ]);
    let output = run(&args, dir.path());
    assert!(output.status.success(), "{output:?}");
    let stats = fs::read_to_string(dir.path().join("stats_psi_1.csv")).unwrap();
    let row = stats.lines().nth(1).unwrap();
    let fields: Vec<&str> = row.split(',').collect();
    assert_eq!(fields[1], "1");
    assert_eq!(fields[3], "1");
}

#[test]
fn simulate_needs_exactly_one_start() {
    let dir = tempdir().unwrap();
    solve_small(dir.path(), &["1"]);
    let mut args = vec!["simulate"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--psi", "1", "--budget", "20"]);
    let output = run(&args, dir.path());
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn simulate_records_failures_in_the_manifest() {
    let dir = tempdir().unwrap();
    solve_small(dir.path(), &["1"]);
    let mut args = vec!["simulate"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&[
        "--psi", "1", "--origin", "3", "--budget", "28", "--trips", "500", "--fail", "4,5@0",
        "--replan", "subgraph",
    ]);
    let output = run(&args, dir.path());
    assert!(output.status.success(), "{output:?}");
    let manifest: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.path().join("manifest_simulate.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["config"]["fail"][0], "4,5@0");
    assert_eq!(manifest["config"]["replan"], "subgraph");
}

#[test]
fn kernel_dump_rows_are_unit_mass() {
    let dir = tempdir().unwrap();
    let mut args = vec!["dump-kernel"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--edge", "1,2,3"]);
    let output = run(&args, dir.path());
    assert!(output.status.success(), "{output:?}");
    let csv = fs::read_to_string(dir.path().join("kernel_1_2_3.csv")).unwrap();
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("y_idx,0.25,0.75,"));
    let mut rows = 0;
    for line in lines {
        let mut fields = line.split(',');
        let y_idx = fields.next().unwrap();
        let sum: f64 = fields.map(|field| field.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-9, "row {y_idx} sums to {sum}");
        rows += 1;
    }
    assert_eq!(rows, 61);
}

#[test]
fn kernel_dump_rejects_unknown_pairs() {
    let dir = tempdir().unwrap();
    let mut args = vec!["dump-kernel"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--edge", "1,2,25"]);
    let output = run(&args, dir.path());
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn env_out_dir_overrides_the_flag() {
    let env_dir = tempdir().unwrap();
    let flag_dir = tempdir().unwrap();
    let mut args = vec!["solve"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--psi", "1"]);
    let output = sotar()
        .args(&args)
        .arg("--out")
        .arg(flag_dir.path())
        .env("SOTAR_OUT", env_dir.path())
        .output()
        .expect("binary should start");
    assert!(output.status.success(), "{output:?}");
    assert!(env_dir.path().join("solution_psi_1.json").exists());
    assert!(!flag_dir.path().join("solution_psi_1.json").exists());
}

#[test]
fn network_files_round_trip_through_solve() {
    let dir = tempdir().unwrap();
    let net_path = dir.path().join("line.json");
    fs::write(
        &net_path,
        r#"{
  "nodes": 3,
  "destination": 3,
  "pair_covariance": { "default": 0.0 },
  "links": [
    { "tail": 1, "head": 2, "mean": 9.0, "variance": 3.0 },
    { "tail": 2, "head": 3, "mean": 9.0, "variance": 3.0 }
  ]
}
"#,
    )
    .unwrap();
    let output = run(
        &[
            "solve",
            "--network",
            net_path.to_str().unwrap(),
            "--dt",
            "0.5",
            "--horizon",
            "40",
            "--psi",
            "1",
        ],
        dir.path(),
    );
    assert!(output.status.success(), "{output:?}");
    assert!(dir.path().join("solution_psi_1.json").exists());
}
