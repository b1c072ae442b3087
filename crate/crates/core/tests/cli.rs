use std::fs;
use std::process::Command;

use serde_json::Value;

fn tgloop(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_tgloop")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8(out.stdout).unwrap(),
        String::from_utf8(out.stderr).unwrap(),
    )
}

fn json(s: &str) -> Value {
    serde_json::from_str(s).unwrap_or_else(|e| panic!("{e}: {s}"))
}

#[test]
fn find_loop_report() {
    let (code, out, _) = tgloop(&["--model", "cylinder", "find-loop", "--base", "0,0.2", "--vector", "0.9,0.05", "--deck", "T"]);
    assert_eq!(code, 0);
    let r = json(&out);
    assert_eq!(r["provenance"], "certified-by-residual");
    let res = &r["result"];
    for key in ["base", "v", "deck", "residual_norm", "length", "closure_defect", "self_conjugate_det"] {
        assert!(!res[key].is_null(), "missing {key}");
    }
    assert!((res["length"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert_eq!(r["config"]["model"]["name"], "cylinder");
    assert_eq!(r["exit_code"], 0);
}

#[test]
fn no_class_is_a_config_error() {
    let (code, out, err) = tgloop(&["--model", "minkowski2", "find-loop", "--base", "0,0", "--vector", "1,0"]);
    assert_eq!(code, 1);
    assert!(json(&out)["error"]["message"].as_str().unwrap().contains("no loop class available"));
    assert!(err.contains("no loop class available"));
}

#[test]
fn solver_failure_exits_two() {
    let (code, out, _) = tgloop(&[
        "--model", "warped_cylinder", "find-loop", "--base", "0,0.4", "--vector", "1.05,0.1", "--deck", "T", "--max-iter", "1",
    ]);
    assert_eq!(code, 2);
    let r = json(&out);
    assert_eq!(r["error"]["kind"], "no_convergence");
    assert!(r["error"]["best_comp"].is_array());
}

#[test]
fn riemannian_spec_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("riem.json");
    fs::write(
        &spec,
        r#"{"type": "builtin", "name": "flat_quotient", "params": {"metric": [[1, 0], [0, 1]], "generators": [{"A": [[1, 0], [0, 1]], "b": [1, 0]}]}}"#,
    )
    .unwrap();
    let (code, out, _) = tgloop(&["--model", spec.to_str().unwrap(), "classify", "--base", "0,0", "--vector", "1,0"]);
    assert_eq!(code, 1);
    assert_eq!(json(&out)["error"]["kind"], "config");
}

#[test]
fn model_spec_file_with_params() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("w.json");
    fs::write(
        &spec,
        r#"{"type": "builtin", "name": "warped_cylinder", "params": {"omega": "one_plus_eps_x2", "eps": 0.2}}"#,
    )
    .unwrap();
    let (code, out, _) = tgloop(&["--model", spec.to_str().unwrap(), "classify", "--base", "0,0", "--vector", "1,0.5"]);
    assert_eq!(code, 0, "{out}");
    assert_eq!(json(&out)["result"]["character"], "timelike");
}

#[test]
fn run_config_and_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.json");
    let out_path = dir.path().join("report.json");
    fs::write(
        &good,
        format!(
            r#"{{"model": "ads2", "command": {{"name": "conjugate", "base": [0, 0], "vector": [1, 0], "t_end": 7.0}},
                "output": {{"path": "{}"}}}}"#,
            out_path.display()
        ),
    )
    .unwrap();
    let (code, stdout, _) = tgloop(&["run", good.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(stdout.is_empty());
    let r = json(&fs::read_to_string(&out_path).unwrap());
    let pts: Vec<f64> = r["result"]["conjugate_points"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(pts.len(), 2);
    assert!((pts[0] - std::f64::consts::PI).abs() < 1e-4);

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"model": "ads2", "command": {"name": "expmap", "base": [0, 0], "vector": [1, 0]}, "toleranse": {}}"#).unwrap();
    let (code, _, err) = tgloop(&["run", bad.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.contains("toleranse"), "{err}");
}

#[test]
fn dump_and_formats() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("plots/geo.csv");
    let (code, out, _) = tgloop(&[
        "--model", "cylinder", "--dump", dump.to_str().unwrap(), "geodesic", "--base", "0,0", "--vector", "1,0.5", "--samples", "11",
    ]);
    assert_eq!(code, 0);
    let csv = fs::read_to_string(&dump).unwrap();
    assert_eq!(csv.lines().count(), 12);
    assert!(csv.starts_with("t,x0,x1,v0,v1"));
    assert!((json(&out)["result"]["length"].as_f64().unwrap() - 0.75f64.sqrt()).abs() < 1e-9);

    let (code, out, _) = tgloop(&["--model", "ads2", "--format", "csv", "conjugate", "--base", "0,0", "--vector", "1,0", "--t-end", "7"]);
    assert_eq!(code, 0);
    assert!(out.starts_with("t,det\n"));

    let (code, out, _) = tgloop(&[
        "--model", "warped_cylinder", "--format", "jsonl", "hill-climb", "--base", "0,0.4", "--vector", "1.05,0.1", "--deck", "T",
        "--direction", "stretch", "--max-steps", "5",
    ]);
    assert_eq!(code, 2);
    let lines: Vec<Value> = out.lines().map(json).collect();
    assert_eq!(lines.len(), 6);
    assert_eq!(lines[5]["result"]["verdict"], "budget_exhausted");
    assert!(lines[..5].iter().all(|l| l["length"].is_f64()));
}

#[test]
fn reports_are_deterministic() {
    let args = [
        "--model", "cylinder", "--seed", "9", "bounds", "--base", "0,0.1", "--vector", "0.9,0.05", "--deck", "T", "--samples", "6",
    ];
    let (c1, a, _) = tgloop(&args);
    let (c2, b, _) = tgloop(&args);
    assert_eq!((c1, c2), (0, 0));
    assert_eq!(a, b);
    assert_eq!(json(&a)["provenance"], "estimated");
}

#[test]
fn clifford_commands() {
    let (code, out, _) = tgloop(&["--model", "cylinder", "clifford", "--deck", "T"]);
    assert_eq!(code, 0);
    assert_eq!(json(&out)["result"]["clifford"], true);
    let (code, out, _) = tgloop(&[
        "--model", "minkowski2", "clifford", "--deck", r#"{"label": "B", "A": [[1.1276259652063807, 0.5210953054937474], [0.5210953054937474, 1.1276259652063807]], "b": [0, 0]}"#,
    ]);
    assert_eq!(code, 0, "{out}");
    assert_eq!(json(&out)["result"]["clifford"], false);
    let (code, out, _) = tgloop(&["--model", "cylinder", "closed-from-clifford", "--deck", "T^2", "--base", "0.5,0.25"]);
    assert_eq!(code, 0);
    let r = json(&out);
    assert_eq!(r["result"]["closed"], true);
    assert!((r["result"]["length"].as_f64().unwrap() - 2.0).abs() < 1e-12);
}
