use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn cpdil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpdil")).args(args).output().expect("binary runs")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("cpdil-{}-{name}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn cells_on_the_pair_reports_dimensions() {
    let dir = scratch("cells");
    let cfg = dir.join("pair.json");
    fs::write(&cfg, r#"{"semigroup": {"builtin": "stochastic_pair"}, "grid": {"step": "1/4", "levels": 4}}"#).unwrap();
    let out = cpdil(&["cells", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let csv = fs::read_to_string(dir.join("report.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("# seed="));
    assert_eq!(lines.next().unwrap(), "suite,check_id,paper_anchor,defect,tolerance,pass");
    for d in 3..=6 {
        assert!(csv.lines().any(|l| l.contains("dim/") && l.contains(&format!("={d}")) && l.ends_with("true")), "{csv}");
    }
}

#[test]
fn identical_runs_write_identical_csv() {
    let (a, b) = (scratch("det-a"), scratch("det-b"));
    for dir in [&a, &b] {
        let out = cpdil(&["all", "--seed", "17", "--out", dir.to_str().unwrap()]);
        assert!(out.status.success());
    }
    assert_eq!(fs::read(a.join("report.csv")).unwrap(), fs::read(b.join("report.csv")).unwrap());
    assert!(fs::read_to_string(a.join("report.csv")).unwrap().starts_with("# seed=17\n"));
}

#[test]
fn failing_checks_exit_nonzero() {
    let out = cpdil(&["check-cp", "--tol-scale", "1e-300"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn errors_name_the_line_and_the_horizon() {
    let dir = scratch("errors");
    let bad = dir.join("bad.json");
    fs::write(&bad, "{\n  \"grid\": {\"step\": \"1/4\", \"levls\": 2}\n}\n").unwrap();
    let out = cpdil(&["cells", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2") && err.contains("levls"), "{err}");

    let far = dir.join("far.json");
    fs::write(&far, r#"{"grid": {"step": "1/4", "levels": 2}, "dilate_times": ["3/4"]}"#).unwrap();
    let out = cpdil(&["dilate", "--config", far.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("1/2"));
}
