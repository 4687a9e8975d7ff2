use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hydro-dmpc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("hydro-dmpc-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    dir
}

fn check_schema(schema: &str, doc: &Value) {
    let text = fs::read_to_string(root().join("schemas").join(format!("{schema}.schema.json"))).unwrap();
    let schema: Value = serde_json::from_str(&text).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(doc).map(|e| format!("{} at {}", e, e.instance_path())).collect();
    assert!(errors.is_empty(), "{errors:?}");
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn assert_error(o: &Output, code: i32, needle: &str) {
    assert_eq!(o.status.code(), Some(code));
    let err = String::from_utf8(o.stderr.clone()).unwrap();
    let doc: Value = serde_json::from_str(err.trim()).expect("error is JSON");
    check_schema("error", &doc);
    assert!(doc["error"]["message"].as_str().unwrap().contains(needle), "{err}");
}

#[test]
fn demo_solve_is_stationary() {
    let o = run(&["solve"]);
    assert!(o.status.success());
    let doc: Value = serde_json::from_str(&stdout(&o)).unwrap();
    check_schema("solve", &doc);
    assert!(doc["kkt"]["stationarity_residual"].as_f64().unwrap() <= 1e-4);
    assert_eq!(doc["outcome"]["termination"], "tolerance");
}

#[test]
fn fixed_iterations_fix_history_length() {
    let o = run(&["solve", "--fixed-iters", "1000"]);
    assert!(o.status.success());
    let doc: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(doc["outcome"]["dual_history"].as_array().unwrap().len(), 1000);
    assert_eq!(doc["outcome"]["termination"], "fixed_iterations");
}

#[test]
fn centralized_check_matches() {
    let o = run(&["solve", "--centralized-check", "--fixed-iters", "200"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().next(), Some("MATCH"));
}

#[test]
fn bundled_inputs_follow_their_schemas() {
    check_schema("problem", &read_json(&root().join("data/demo_qp.json")));
    check_schema("scenario", &read_json(&root().join("data/scenario_short.json")));
}

#[test]
fn solve_accepts_a_problem_file_and_writes_artifacts() {
    let dir = scratch("solve");
    let demo = root().join("data/demo_qp.json");
    let o = run(&["solve", "--problem", demo.to_str().unwrap(), "--tol", "1e-6", "--out", dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = read_json(&dir.join("solution.json"));
    check_schema("solve", &doc);
    let iterations = doc["outcome"]["iterations"].as_u64().unwrap() as usize;
    let history = fs::read_to_string(dir.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), iterations + 1);
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn malformed_problem_is_a_config_error() {
    let dir = scratch("bad-problem");
    fs::create_dir_all(&dir).unwrap();
    let path = dir.join("bad.json");
    fs::write(&path, "{\"problem\": 3}").unwrap();
    assert_error(&run(&["solve", "--problem", path.to_str().unwrap()]), 2, "problem file");
    assert_error(&run(&["solve", "--problem", dir.join("missing.json").to_str().unwrap()]), 2, "missing.json");
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn unknown_scheme_is_rejected() {
    assert_error(&run(&["simulate", "--scheme", "central"]), 2, "unknown scheme");
    assert_error(&run(&["simulate", "--compare", "some"]), 2, "all");
    assert_error(&run(&["simulate", "--steps", "many"]), 2, "many");
}

#[test]
fn default_reduction_totals_32_states() {
    let o = run(&["reduce"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("total reduced order: 32"));
}

fn reduce_report(order: &str, name: &str) -> Value {
    let dir = scratch(name);
    let o = run(&["reduce", "--order", order, "--out", dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = read_json(&dir.join("reduce_report.json"));
    check_schema("reduce_report", &doc);
    let _ = fs::remove_dir_all(&dir);
    doc
}

#[test]
fn reduction_error_shrinks_with_order() {
    let err = |d: &Value| d["max_step_response_error"].as_f64().unwrap();
    let full = reduce_report("full", "full");
    let four = reduce_report("4", "four");
    let one = reduce_report("1", "one");
    assert!(err(&full) < 1e-6, "{}", err(&full));
    assert!(err(&one) > err(&four));
    assert!(full["total_reduced_order"].as_u64() > four["total_reduced_order"].as_u64());
}

#[test]
fn infeasible_order_is_reported() {
    let o = run(&["reduce", "--order", "9,1,1,1,1,1,1,1"]);
    assert_error(&o, 1, "minimal realization");
    assert_error(&run(&["reduce", "--order", "1,2"]), 2, "orders");
}

#[test]
fn short_simulation_writes_log_and_summary() {
    let dir = scratch("sim");
    let scenario = root().join("data/scenario_short.json");
    let o = run(&["simulate", "--scenario", scenario.to_str().unwrap(), "--steps", "3", "--out", dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("loc-ref-dyn"));
    let csv = fs::read_to_string(dir.join("loc-ref-dyn.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let summary = read_json(&dir.join("summary.json"));
    check_schema("summary", &summary);
    assert_eq!(summary["seed"], 3);
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn comparison_covers_every_scheme() {
    let dir = scratch("compare");
    let o = run(&["simulate", "--compare", "all", "--steps", "2", "--horizon", "4", "--seed", "7", "--out", dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = read_json(&dir.join("summary.json"));
    check_schema("summary", &summary);
    assert_eq!(summary["rows"].as_array().unwrap().len(), 4);
    for scheme in ["global-ref", "loc-ref-stat", "loc-ref-dyn", "decentralized"] {
        assert!(dir.join(format!("{scheme}.csv")).exists(), "{scheme}");
    }
    let _ = fs::remove_dir_all(&dir);
}

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn identical_runs_give_identical_bytes() {
    let cases: [&[&str]; 3] = [
        &["simulate", "--scheme", "global-ref", "--steps", "2", "--horizon", "4", "--seed", "11"],
        &["solve", "--fixed-iters", "300"],
        &["reduce", "--order", "3"],
    ];
    for (n, args) in cases.iter().enumerate() {
        let (a, b) = (scratch(&format!("repro-a{n}")), scratch(&format!("repro-b{n}")));
        for dir in [&a, &b] {
            let mut full: Vec<&str> = args.to_vec();
            full.extend(["--out", dir.to_str().unwrap()]);
            assert!(run(&full).status.success(), "{args:?}");
        }
        let (fa, fb) = (artifacts(&a), artifacts(&b));
        assert!(!fa.is_empty());
        assert!(fa == fb, "{args:?} artifacts differ");
        let _ = fs::remove_dir_all(&a);
        let _ = fs::remove_dir_all(&b);
    }
}
