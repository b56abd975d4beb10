use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const LINE: &str = r#"
[problem]
horizon = 1.0
diffusion = [["0.5"]]
a_scal = "0.25"
sigma_rob = "1"
f = "1"
psi = "0.5"
h = "x1*(1-x1)"

[domain]
shape = { kind = "interval", a = 0.0, b = 1.0, left = "robin", right = "dirichlet" }
tubular_width = 0.5

[solver]
dt = 4e-3
n_paths = 400
seed = 21
fd_grid = { kind = "line", cells = 100, steps = 200 }

[task]
kind = "compare"
points = [[0.0, 0.5], [0.5, 0.25], [0.2, 0.0]]
"#;

fn run(dir: &Path, config: &str, extra: &[&str]) -> Output {
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_stochrep"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out-dir")
        .arg(dir.join("out"))
        .args(extra)
        .output()
        .unwrap()
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).expect("stderr carries one JSON object")
}

#[test]
fn zero_data_solve_mc_writes_zero_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = LINE
        .replace("f = \"1\"", "f = \"0\"")
        .replace("psi = \"0.5\"", "psi = \"0\"")
        .replace("h = \"x1*(1-x1)\"", "h = \"0\"")
        .replace("kind = \"compare\"", "kind = \"solve-mc\"");
    let out = run(dir.path(), &cfg, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut r = csv::Reader::from_path(dir.path().join("out/field_mc.csv")).unwrap();
    let headers = r.headers().unwrap().clone();
    let mean = headers.iter().position(|h| h == "mean").unwrap();
    let mut n = 0;
    for rec in r.records() {
        assert_eq!(rec.unwrap()[mean].parse::<f64>().unwrap(), 0.0);
        n += 1;
    }
    assert_eq!(n, 3);
    let manifest: Value = serde_json::from_slice(&std::fs::read(dir.path().join("out/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["seed"], 21);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn malformed_config_exits_2_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &LINE.replace("seed = 21", "seed = 21\ncolour = 1"), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["exit_code"], 2);
    assert!(!dir.path().join("out").exists());
}

#[test]
fn failed_assumption_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &LINE.replace("[[\"0.5\"]]", "[[\"x1 - 0.5\"]]"), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "validation");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn task_flag_must_match() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), LINE, &["--task", "invert"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_error_exits_1_with_manifest() {
    let dir = tempfile::tempdir().unwrap();
    // A polar grid on an interval passes validation but the oracle rejects it.
    let cfg = LINE.replace(
        "{ kind = \"line\", cells = 100, steps = 200 }",
        "{ kind = \"polar\", radial = 8, angular = 16, steps = 8 }",
    );
    let out = run(dir.path(), &cfg, &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_json(&out)["message"].as_str().is_some());
    let manifest: Value = serde_json::from_slice(&std::fs::read(dir.path().join("out/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "error");
}

#[test]
fn compare_reports_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), LINE, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rep: Value = serde_json::from_slice(&std::fs::read(dir.path().join("out/compare.json")).unwrap()).unwrap();
    assert_eq!(rep["rows"].as_array().unwrap().len(), 3);
    assert!(rep["max_abs_gap"].as_f64().unwrap() < 0.1);
}

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_name() != "manifest.json")
        .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn artifacts_are_identical_across_worker_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(run(a.path(), LINE, &["--workers", "1"]).status.success());
    assert!(run(b.path(), LINE, &["--workers", "8"]).status.success());
    let (x, y) = (artifacts(&a.path().join("out")), artifacts(&b.path().join("out")));
    assert_eq!(x.len(), 4);
    assert_eq!(x, y);
}

#[test]
fn shipped_configs_parse_and_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = stochrep::config::RunConfig::load(&path).unwrap();
            stochrep::run::prepare(&cfg).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert_eq!(n, 3);
}
