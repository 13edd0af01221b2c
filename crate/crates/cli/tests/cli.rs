use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn delayobs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_delayobs")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

/// Writes the `problem` object of a fixture as a standalone input file.
fn problem_file(dir: &TempDir, fixture: &str) -> String {
    let text = std::fs::read_to_string(fixtures().join(format!("{fixture}.json"))).unwrap();
    let v: Value = serde_json::from_str(&text).unwrap();
    write_problem(dir, fixture, &v["problem"])
}

fn write_problem(dir: &TempDir, name: &str, v: &Value) -> String {
    let path = dir.path().join(format!("{name}-problem.json"));
    std::fs::write(&path, serde_json::to_string(v).unwrap()).unwrap();
    path.to_str().unwrap().to_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn reproduce_case_one_matches() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let o = delayobs(&["reproduce", "ex1-case1", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("reproduce.json").is_file());
}

#[test]
fn unknown_fixture_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    let o = delayobs(&["reproduce", "no-such-case", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_input_is_a_validation_error() {
    assert_eq!(code(&delayobs(&["design"])), 2);
    assert_eq!(code(&delayobs(&["design", "--input", "/nonexistent/problem.json"])), 2);
}

#[test]
fn design_without_projector_climbs_past_the_minimal_stage() {
    let dir = TempDir::new().unwrap();
    let mut v: Value = serde_json::from_str(
        &std::fs::read_to_string(fixtures().join("ex1-case2.json")).unwrap(),
    )
    .unwrap();
    v["problem"].as_object_mut().unwrap().remove("R");
    let input = write_problem(&dir, "case2", &v["problem"]);
    let out = dir.path().join("out");
    let o = delayobs(&["design", "--input", &input, "--out", out.to_str().unwrap(), "--T", "10"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let design = read_json(&out.join("design.json"));
    let trace = design["ladder_trace"].as_array().unwrap();
    assert_eq!(trace[0]["stage"], "A-minimal");
    let text = trace[0].to_string();
    assert!(text.contains("(i)"), "{text}");
    assert!(out.join("observer.json").is_file());
    assert!(out.join("verification.json").is_file());
}

#[test]
fn roots_of_the_open_loop_plant() {
    let dir = TempDir::new().unwrap();
    let input = problem_file(&dir, "ex1-open-loop");
    let out = dir.path().join("out");
    let o = delayobs(&["roots", "--input", &input, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let roots = read_json(&out.join("roots.json"));
    let found = roots.as_array().unwrap().iter().any(|r| {
        (r["re"].as_f64().unwrap() - 0.2104).abs() < 5e-5 && (r["im"].as_f64().unwrap().abs() - 2.3888).abs() < 5e-5
    });
    assert!(found, "{roots}");
}

#[test]
fn pinned_structure_c_on_an_aligned_plant_is_not_applicable() {
    let dir = TempDir::new().unwrap();
    let input = problem_file(&dir, "ex1-case1");
    let o = delayobs(&["design", "--input", &input, "--stage", "C", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn unstabilizable_plant_reports_no_stabilizer() {
    let dir = TempDir::new().unwrap();
    let v = serde_json::json!({
        "A": [[1]], "A_tau": [[0]], "B": [[1]], "C_tau": [[0]], "tau": 1.0, "H0": [[1]]
    });
    let input = write_problem(&dir, "scalar", &v);
    let o = delayobs(&["design", "--input", &input, "--stage", "B-order-r", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!dir.path().join("observer.json").exists());
}

#[test]
fn design_outputs_are_deterministic() {
    let dir = TempDir::new().unwrap();
    let input = problem_file(&dir, "ex1-case1");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = delayobs(&["design", "--input", &input, "--out", out.to_str().unwrap(), "--T", "10"]);
        assert_eq!(code(&o), 0);
    }
    for name in ["design.json", "verification.json", "observer.json"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn simulate_writes_labelled_columns() {
    let dir = TempDir::new().unwrap();
    let input = problem_file(&dir, "ex1-case1");
    let out = dir.path().join("out");
    let o = delayobs(&["simulate", "--input", &input, "--out", out.to_str().unwrap(), "--T", "2", "--dt", "0.01"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(header, "t,x_1,x_2,w_1,z_1,zhat_1,e_1");
    assert_eq!(csv.lines().count(), 1 + 201);
}

#[test]
fn misaligned_step_is_rejected() {
    let dir = TempDir::new().unwrap();
    let input = problem_file(&dir, "ex1-case1");
    let o = delayobs(&["simulate", "--input", &input, "--dt", "0.3", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}
