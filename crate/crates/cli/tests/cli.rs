use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn saddle() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_saddle"));
    c.env_remove("SADDLE_SEED");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const QUADRATIC: &str = r#"
hessian = [[-1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]]
center = [0.5, -0.5, 0.25]
x0 = [0.6, -0.4, 0.3]
k = 1
"#;

#[test]
fn direct_search_writes_result_and_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(saddle()
        .args(["sd", "--benchmark", "rosenbrock", "--case", "ii", "--trajectory", "--out"])
        .arg(dir.path()));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&dir.path().join("result.json"));
    assert_eq!(r["index"], 2);
    assert_eq!(r["status"], "converged");
    assert!(r.get("N_s").is_none());
    let n_steps = r["n_steps"].as_u64().unwrap();
    assert_eq!(r["N_f"].as_u64().unwrap(), 5 * n_steps);
    let csv = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "step,x_0,x_1,x_2,x_3,l,residual_infnorm");
    assert_eq!(csv.lines().count() as u64, n_steps + 2);
}

#[test]
fn surrogate_search_finds_index_two_and_logs_subproblems() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(saddle()
        .args(["gpsd", "--benchmark", "rosenbrock", "--case", "ii", "--seed", "7", "--out"])
        .arg(dir.path()));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&dir.path().join("result.json"));
    assert_eq!(r["index"], 2);
    let x: Vec<f64> = serde_json::from_value(r["x_final"].clone()).unwrap();
    assert!(x.iter().all(|v| (v - 1.0).abs() <= 5e-2));
    let log = fs::read_to_string(dir.path().join("subproblems.jsonl")).unwrap();
    let records: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!records.is_empty());
    assert_eq!(records.last().unwrap()["N_f_cumulative"], r["N_f"]);
}

#[test]
fn verify_index_reports_index_four() {
    let out = run(saddle().args(["verify-index", "--benchmark", "rosenbrock", "--case", "iv", "--x", "1,1,1,1"]));
    assert_eq!(code(&out), 0);
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["index"], 4);
    assert_eq!(r["degenerate"], 0);
}

#[test]
fn verify_index_reads_a_result_file() {
    let dir = tempfile::tempdir().unwrap();
    let point = dir.path().join("p.json");
    fs::write(&point, r#"{"x_final": [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]}"#).unwrap();
    let out = run(saddle().args(["verify-index", "--benchmark", "codesign", "--case", "i", "--point"]).arg(&point));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["index"], 1);
}

#[test]
fn unknown_config_key_exits_three_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "benchmark = \"rosenbrock\"\n[gpsd]\nn_sample = 10\n").unwrap();
    let out = run(saddle().arg("sd").arg("--config").arg(&cfg));
    assert_eq!(code(&out), 3);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("gpsd.n_sample"), "{err}");
}

#[test]
fn bad_values_are_config_errors() {
    let out = run(saddle().args(["sd", "--benchmark", "rosenbrock", "--case", "v"]));
    assert_eq!(code(&out), 3);
    let out = run(saddle().args(["sd", "--benchmark", "rosenbrock"]));
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("rosenbrock.case"));
    let out = run(saddle().args(["frobnicate"]));
    assert_eq!(code(&out), 3);
    let out = run(saddle().args(["sd", "--benchmark", "rosenbrock", "--case", "i"]).env("SADDLE_SEED", "abc"));
    assert_eq!(code(&out), 3);
}

#[test]
fn step_budget_exhaustion_exits_two_with_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(saddle()
        .args(["sd", "--benchmark", "codesign", "--case", "ii", "--max-steps", "5", "--out"])
        .arg(dir.path()));
    assert_eq!(code(&out), 2);
    let r = json(&dir.path().join("result.json"));
    assert_eq!(r["status"], "max_steps");
    assert_eq!(r["N_f"], 15);
    assert_eq!(r["N_s"], 15);
}

#[test]
fn repeated_runs_write_identical_results() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let out = run(saddle()
            .args(["gpsd", "--benchmark", "rosenbrock", "--case", "i", "--seed", "3", "--out"])
            .arg(d.path()));
        assert_eq!(code(&out), 0);
    }
    let ra = fs::read(a.path().join("result.json")).unwrap();
    let rb = fs::read(b.path().join("result.json")).unwrap();
    assert_eq!(ra, rb);
}

#[test]
fn custom_quadratic_from_file_converges_to_its_center() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("quad.toml"), QUADRATIC).unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "benchmark = \"custom-file\"\noutput_dir = \"res\"\n[custom]\nfile = \"quad.toml\"\n").unwrap();
    let out = run(saddle().arg("sd").arg("--config").arg(&cfg));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r = json(&dir.path().join("res/result.json"));
    assert_eq!(r["index"], 1);
    let x: Vec<f64> = serde_json::from_value(r["x_final"].clone()).unwrap();
    for (v, c) in x.iter().zip([0.5, -0.5, 0.25]) {
        assert!((v - c).abs() < 1e-3);
    }
}

#[test]
fn seed_precedence_is_flag_then_env_then_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        "benchmark = \"custom\"\nseed = 1\n[custom]\nhessian = [[-1.0, 0.0], [0.0, 2.0]]\ncenter = [0.0, 0.0]\nx0 = [0.0, 0.0]\nk = 1\n[landscape]\nroot = [0.0, 0.0]\n",
    )
    .unwrap();
    let landscape = |extra: &[&str], env: Option<&str>| {
        let mut c = saddle();
        c.arg("landscape").arg("--config").arg(&cfg).arg("--out").arg(dir.path()).args(extra);
        if let Some(s) = env {
            c.env("SADDLE_SEED", s);
        }
        let out = run(&mut c);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    };
    landscape(&[], None);
    assert!(dir.path().join("landscape_custom_1.json").exists());
    landscape(&[], Some("2"));
    assert!(dir.path().join("landscape_custom_2.json").exists());
    landscape(&["--seed", "3"], Some("2"));
    assert!(dir.path().join("landscape_custom_3.json").exists());

    let graph = json(&dir.path().join("landscape_custom_3.json"));
    assert_eq!(graph["nodes"][0]["index"], 1);
    let dot = fs::read_to_string(dir.path().join("landscape_custom_3.dot")).unwrap();
    assert!(dot.starts_with("digraph landscape {"));
}

#[test]
fn landscape_from_a_minimum_is_a_single_node() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        "benchmark = \"custom\"\n[custom]\nhessian = [[1.0, 0.0], [0.0, 2.0]]\ncenter = [0.0, 0.0]\nx0 = [0.0, 0.0]\nk = 0\n",
    )
    .unwrap();
    let out = run(saddle()
        .args(["landscape", "--jobs", "2", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path()));
    // no unstable direction to probe
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let graph = json(&dir.path().join("landscape_custom_0.json"));
    assert_eq!(graph["nodes"].as_array().unwrap().len(), 1);
    assert!(graph["edges"].as_array().unwrap().is_empty());
}

#[test]
fn bench_table_one_passes_every_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(saddle().args(["bench", "table1", "--out"]).arg(dir.path()));
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| l.contains("PASS")).count(), 4, "{text}");
    let rows = json(&dir.path().join("bench_table1.json"));
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 4);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r["paper_value"].as_f64().unwrap(), (i + 1) as f64);
        assert_eq!(r["reproduced_value"], r["paper_value"]);
        assert_eq!(r["pass"], true);
    }
}
