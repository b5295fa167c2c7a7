use std::path::Path;
use std::process::{Command, Output};

use demand_core::archive::Archive;
use demand_core::synthetic::{synthetic_trips_csv, SyntheticSpec};
use serde_json::Value;

fn demand(workspace: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_demand"))
        .args(args)
        .env("DEMAND_WORKSPACE", workspace)
        .env_remove("DEMAND_LOG")
        .output()
        .expect("binary runs")
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

fn write_trips(dir: &Path) -> std::path::PathBuf {
    let spec = SyntheticSpec {
        trips: 600,
        vehicles: 40,
        days: 5,
        radius_m: 1500.0,
        hotspots: 4,
        ..Default::default()
    };
    let path = dir.join("trips.csv");
    std::fs::write(&path, synthetic_trips_csv(&spec)).unwrap();
    path
}

#[test]
fn estimate_writes_archive_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let trips = write_trips(tmp.path());
    let out_dir = tmp.path().join("run");
    let out = demand(
        tmp.path(),
        &["--threads", "1", "estimate", "--trips", trips.to_str().unwrap(), "--periods", "4", "--seed", "9",
          "--out", out_dir.to_str().unwrap()],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("trips kept       600 of 600 rows"), "{stdout}");

    let archive = Archive::parse(&std::fs::read_to_string(out_dir.join("archive.csv")).unwrap()).unwrap();
    assert_eq!(archive.manifest.periods.count, 4);
    assert!(!archive.rows.is_empty());

    let manifest: Value = serde_json::from_slice(&std::fs::read(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "estimate");
    assert_eq!(manifest["seed"], 9);
    assert_eq!(manifest["threads"], 1);
    assert_eq!(manifest["flags"]["p0"], 0.7);
    assert_eq!(manifest["flags"]["periods"], "4");
    let bytes = std::fs::read(&trips).unwrap();
    assert_eq!(manifest["input"]["sha256"], demand_core::pipeline::sha256_hex(&bytes));
    assert_eq!(manifest["input"]["bytes"], bytes.len());

    let inspect = demand(tmp.path(), &["inspect", out_dir.join("archive.csv").to_str().unwrap(), "--top", "3"]);
    assert!(inspect.status.success(), "{}", String::from_utf8_lossy(&inspect.stderr));
    assert!(!inspect.stdout.is_empty());

    let json = demand(tmp.path(), &["inspect", out_dir.join("archive.csv").to_str().unwrap(), "--period", "1", "--json"]);
    assert!(json.status.success(), "{}", String::from_utf8_lossy(&json.stderr));
    let _: Value = serde_json::from_slice(&json.stdout).expect("inspect --json prints JSON");
}

#[test]
fn default_run_directory_lives_in_workspace() {
    let tmp = tempfile::tempdir().unwrap();
    let trips = write_trips(tmp.path());
    let ws = tmp.path().join("ws");
    let out = demand(&ws, &["estimate", "--trips", trips.to_str().unwrap(), "--periods", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let runs: Vec<_> = std::fs::read_dir(ws.join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 1);
    assert!(runs[0].file_name().unwrap().to_str().unwrap().starts_with("estimate-"));
    assert!(runs[0].join("archive.csv").is_file());
    assert!(runs[0].join("manifest.json").is_file());
}

#[test]
fn missing_input_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = demand(tmp.path(), &["estimate", "--trips", "does-not-exist.csv"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "usage");
    assert!(err["message"].as_str().unwrap().contains("does-not-exist.csv"));
    assert!(!tmp.path().join("runs").exists());
}

#[test]
fn invalid_parameters_list_fields() {
    let tmp = tempfile::tempdir().unwrap();
    let trips = write_trips(tmp.path());
    let out = demand(tmp.path(), &["estimate", "--trips", trips.to_str().unwrap(), "--p0", "1.5", "--cell-width=-3"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    let fields: Vec<&str> = err["fields"].as_array().unwrap().iter().map(|f| f["field"].as_str().unwrap()).collect();
    assert!(fields.contains(&"p0"), "{err}");
    assert!(fields.contains(&"cell_width"), "{err}");
}

#[test]
fn unparseable_arguments_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = demand(tmp.path(), &["estimate", "--p0", "abc"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "usage");
    let help = demand(tmp.path(), &["--help"]);
    assert_eq!(help.status.code(), Some(0));
}

#[test]
fn unreadable_rows_fail_at_runtime() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.csv");
    std::fs::write(&path, "start_time,end_time,start_lat,start_lon,end_lat,end_lon\nyesterday,today,x,y,z,w\n").unwrap();
    let out = demand(tmp.path(), &["estimate", "--trips", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "runtime");
    assert!(err["ingest"].is_object(), "{err}");
}

#[test]
fn sensitivity_fixture_has_zero_row() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("sens");
    let out = demand(
        tmp.path(),
        &["sensitivity", "--fixture", "two-point", "--fixture-days", "8", "--gammas", "0,0.5,1",
          "--out", out_dir.to_str().unwrap()],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().filter(|l| l.trim_start().starts_with(['0', '1'])).count(), 3, "{stdout}");
    assert!(out_dir.join("manifest.json").is_file());
}

#[test]
fn small_experiment_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("exp");
    let out = demand(
        tmp.path(),
        &["--threads", "1", "experiment", "--p-list", "0.2,0.8", "--reps", "2", "--days", "5",
          "--out", out_dir.to_str().unwrap()],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert!(summary.lines().count() >= 3, "{summary}");
    let manifest: Value = serde_json::from_slice(&std::fs::read(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "experiment");
}
