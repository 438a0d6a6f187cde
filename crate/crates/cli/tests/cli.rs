//! End-to-end runs of the binary: option resolution, the documented exit
//! codes, and the files each subcommand leaves behind.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_splinemix")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

/// stderr of a failed run is one JSON record; returns its kind and message.
fn error_record(out: &Output) -> (String, String) {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_else(|| {
        panic!("expected a JSON error record on stderr, got {text:?}");
    });
    let v: serde_json::Value = serde_json::from_str(line)
        .unwrap_or_else(|e| panic!("stderr is not a JSON record ({e}): {line}"));
    (
        v["kind"].as_str().unwrap_or_default().to_string(),
        v["message"].as_str().unwrap_or_default().to_string(),
    )
}

/// Smooth curves with a per-subject shift; enough signal for every fit
/// here to be routine.
fn write_dataset(path: &Path, n_subjects: usize, n_points: usize) {
    let mut rows = String::from("subject_id,t,x\n");
    for s in 0..n_subjects {
        let shift = (s as f64 - n_subjects as f64 / 2.0) * 0.3;
        for j in 0..n_points {
            let t = j as f64 / (n_points - 1) as f64;
            // deterministic ripple stands in for measurement noise
            let wiggle = 0.01 * ((s * 31 + j * 17) % 7) as f64;
            let x = 1.0 + 2.0 * t - 1.5 * t * t + shift * (1.0 + t) + wiggle;
            rows.push_str(&format!("{s},{t},{x}\n"));
        }
    }
    std::fs::write(path, rows).unwrap();
}

#[test]
fn malformed_row_reports_its_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.csv");
    std::fs::write(&data, "subject_id,t,x\na,0.1,1.0\na,0.2,oops\n").unwrap();
    let out = run_in(
        dir.path(),
        &["fit", "--data", "bad.csv", "--m-f", "4", "--m-r", "4"],
    );
    assert_eq!(out.status.code(), Some(3));
    let (kind, message) = error_record(&out);
    assert_eq!(kind, "parse");
    assert!(message.contains("line 3"), "message: {message}");
    assert!(message.contains("oops"), "message: {message}");
}

#[test]
fn missing_required_setting_names_both_spellings() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    write_dataset(&data, 4, 8);
    let out = run_in(dir.path(), &["fit", "--data", "d.csv", "--m-r", "4"]);
    assert_eq!(out.status.code(), Some(3));
    let (kind, message) = error_record(&out);
    assert_eq!(kind, "parse");
    assert!(message.contains("--m-f"), "message: {message}");
    assert!(message.contains("m_f"), "message: {message}");
}

#[test]
fn unknown_configuration_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("fit.toml"), "m_f = 4\nmystery = 1\n").unwrap();
    let out = run_in(dir.path(), &["fit", "--config", "fit.toml"]);
    assert_eq!(out.status.code(), Some(3));
    let (kind, message) = error_record(&out);
    assert_eq!(kind, "parse");
    assert!(message.contains("mystery"), "message: {message}");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["fit", "--mystery", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn rank_deficient_design_is_a_numerical_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("narrow.csv");
    // four distinct observation times cannot carry six basis functions
    write_dataset(&data, 3, 4);
    let out = run_in(
        dir.path(),
        &["fit", "--data", "narrow.csv", "--m-f", "6", "--m-r", "4"],
    );
    assert_eq!(out.status.code(), Some(4));
    let (kind, _) = error_record(&out);
    assert_eq!(kind, "numerical");
}

#[test]
fn observations_outside_the_domain_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    write_dataset(&data, 4, 8);
    let out = run_in(
        dir.path(),
        &[
            "fit",
            "--data",
            "d.csv",
            "--m-f",
            "4",
            "--m-r",
            "4",
            "--domain-min",
            "0.2",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
    let (kind, message) = error_record(&out);
    assert_eq!(kind, "parse");
    assert!(message.contains("outside the domain"), "message: {message}");
}

#[test]
fn fit_writes_report_and_curves() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    write_dataset(&data, 8, 12);
    let out = run_in(
        dir.path(),
        &["fit", "--data", "d.csv", "--m-f", "4", "--m-r", "4"],
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("AIC"), "stdout: {stdout}");

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("fit_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["model"]["m_f"], 4);
    assert_eq!(report["data"]["subjects"], 8);
    assert_eq!(report["data"]["observations"], 96);
    assert!(report["loglik"].as_f64().unwrap().is_finite());
    assert_eq!(report["estimates"]["beta"].as_array().unwrap().len(), 4);
    assert_eq!(report["estimates"]["gamma"].as_array().unwrap().len(), 4);
    assert!(report["criteria"]["aic"].as_f64().unwrap().is_finite());

    let curves = std::fs::read_to_string(dir.path().join("fitted_curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 96);
    assert!(curves.starts_with("subject_id,t,x,fitted,mean\n"));
}

#[test]
fn select_ranks_the_grid_and_writes_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    write_dataset(&data, 10, 14);
    let out = run_in(
        dir.path(),
        &[
            "select",
            "--data",
            "d.csv",
            "--mf-min",
            "4",
            "--mf-max",
            "4",
            "--mr-min",
            "4",
            "--mr-max",
            "5",
            "--max-iter",
            "300",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.contains("chooses") || stdout.contains("no eligible"),
        "stdout: {stdout}"
    );

    let table = std::fs::read_to_string(dir.path().join("criteria_table.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 2);
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("criteria_report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["report"]["records"].as_array().unwrap().len(), 2);
}

#[test]
fn print_config_shows_flags_winning_key_by_key() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("fit.toml"),
        "m_f = 5\nmax_iter = 123\ndata = \"from_file.csv\"\n",
    )
    .unwrap();
    // the data file never has to exist: printing stops before any reading
    let out = run_in(
        dir.path(),
        &[
            "fit",
            "--config",
            "fit.toml",
            "--m-f",
            "4",
            "--print-config",
        ],
    );
    assert_eq!(out.status.code(), Some(0));
    let merged: toml::Value = String::from_utf8_lossy(&out.stdout).parse().unwrap();
    assert_eq!(merged["m_f"].as_integer(), Some(4));
    assert_eq!(merged["max_iter"].as_integer(), Some(123));
    assert_eq!(merged["data"].as_str(), Some("from_file.csv"));
    assert!(merged.get("m_r").is_none());
}

#[test]
fn config_file_alone_can_drive_a_fit() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    write_dataset(&data, 6, 10);
    std::fs::write(
        dir.path().join("fit.toml"),
        "data = \"d.csv\"\nm_f = 4\nm_r = 4\nmax_iter = 400\n",
    )
    .unwrap();
    let out = run_in(dir.path(), &["fit", "--config", "fit.toml"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("fit_report.json").exists());
}

#[test]
fn out_dir_is_created_and_used() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    write_dataset(&data, 6, 10);
    let nested: PathBuf = dir.path().join("reports").join("run1");
    let out = run_in(
        dir.path(),
        &[
            "fit",
            "--data",
            "d.csv",
            "--m-f",
            "4",
            "--m-r",
            "4",
            "--out-dir",
            nested.to_str().unwrap(),
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(nested.join("fit_report.json").exists());
    assert!(nested.join("fitted_curves.csv").exists());
}
