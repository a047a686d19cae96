use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use certigrad::diff::{backprop_is, KktWorkspace};
use certigrad::pipeline::Layer;
use certigrad_cli::problem::ProblemFile;
use certigrad_cli::solve::{gradient_block, GradMode, ParamGradient};
use certigrad_experiments::audit::stripped_polynomial;
use certigrad_experiments::poly::{poly_problem, TABLE_COEFFS};
use nalgebra::DVector;
use serde_json::Value;

fn bundled() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("problems/polynomial.json")
}

fn certigrad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_certigrad")).args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "{e}\nstdout: {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

#[test]
fn bundled_polynomial_is_tight_and_certified() {
    let out = certigrad(&["solve", bundled().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = stdout_json(&out);
    assert_eq!(report["command"], "solve");
    assert_eq!(report["schema_version"], "1.0");
    let inst = &report["instances"][0];
    assert_eq!(inst["verdict"], "TightCertified");
    assert!(inst["tightness_ratio"].as_f64().unwrap() > 1e5);
    let x = inst["x"][1].as_f64().unwrap();
    assert!((x + 1.487).abs() < 1e-3, "x* = {x}");
    assert!(inst["gradient"].is_null());
    assert!(report["environment"]["version"].is_string());
}

#[test]
fn bundled_file_matches_library_problem() {
    let file = ProblemFile::read(bundled().to_str().unwrap()).unwrap();
    let q = file.to_qcqp().unwrap();
    let lib = poly_problem(&TABLE_COEFFS);
    assert_eq!(q.q(), lib.q());
    assert_eq!(q.a_all(), lib.a_all());
    for k in 0..7 {
        assert_eq!(q.cost().sensitivity_dense(k), lib.cost().sensitivity_dense(k));
    }
}

#[test]
fn corrupted_triplet_is_a_parse_error_naming_the_entry() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(bundled()).unwrap().replacen("[0, 3, 1.0]", "[0, 7, 1.0]", 1);
    let path = dir.path().join("bad.json");
    std::fs::write(&path, text).unwrap();
    let out = certigrad(&["solve", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("constraints[1].triplets[0]"), "{err}");
    assert!(err.contains("(0, 7)"), "{err}");
    assert!(out.stdout.is_empty());
}

#[test]
fn malformed_json_reports_line_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\n  \"schema_version\": \"1.0\",\n  \"n\": 4,\n  \"homog_index\": oops\n}").unwrap();
    let out = certigrad(&["solve", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 4"), "{err}");
}

#[test]
fn unknown_major_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(bundled()).unwrap().replace("\"1.0\"", "\"2.0\"");
    let path = dir.path().join("v2.json");
    std::fs::write(&path, text).unwrap();
    let out = certigrad(&["solve", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema_version"));
}

#[test]
fn is_gradient_block_matches_library_byte_for_byte() {
    let out = certigrad(&["solve", bundled().to_str().unwrap(), "--grad", "is", "--loss-grad", "0,1,0,0"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = stdout_json(&out);
    let cli_block = serde_json::to_string(&report["instances"][0]["gradient"]).unwrap();

    let file = ProblemFile::read(bundled().to_str().unwrap()).unwrap();
    let q = file.to_qcqp().unwrap();
    let layer = Layer::default();
    let cert = layer.forward(&q).unwrap().cert;
    let ws = KktWorkspace::from_certified(&q, &cert, &layer.backprop).unwrap();
    let one_hot = DVector::from_vec(vec![0.0, 1.0, 0.0, 0.0]);
    let lib = backprop_is(&ws, &one_hot, &layer.backprop).unwrap();
    let theta = lib.chain(&q, 7).unwrap();
    let params = file
        .params
        .iter()
        .zip(theta.iter())
        .map(|(p, &grad)| ParamGradient { name: p.name.clone(), value: p.value, grad })
        .collect();
    let lib_block =
        serde_json::to_string(&serde_json::to_value(gradient_block(GradMode::Is, &lib, params)).unwrap()).unwrap();
    assert_eq!(cli_block, lib_block);
}

#[test]
fn cift_gradient_agrees_with_is() {
    let run = |m: &str| {
        let out = certigrad(&["solve", bundled().to_str().unwrap(), "--grad", m, "--loss-grad", "[0, 1, 0, 0]"]);
        assert_eq!(out.status.code(), Some(0));
        let r = stdout_json(&out);
        r["instances"][0]["gradient"]["params"]
            .as_array()
            .unwrap()
            .iter()
            .map(|p| p["grad"].as_f64().unwrap())
            .collect::<Vec<_>>()
    };
    let (is, cift) = (run("is"), run("cift"));
    for (a, b) in is.iter().zip(&cift) {
        assert!((a - b).abs() <= 1e-6 * (1.0 + a.abs()), "{is:?} vs {cift:?}");
    }
}

#[test]
fn loss_gradient_from_file_and_wrong_length() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("g.txt");
    std::fs::write(&g, "0 1\n0 0\n").unwrap();
    let arg = format!("@{}", g.display());
    let out = certigrad(&["solve", bundled().to_str().unwrap(), "--grad", "is", "--loss-grad", &arg]);
    assert_eq!(out.status.code(), Some(0));
    assert!(!stdout_json(&out)["instances"][0]["gradient"].is_null());

    let out = certigrad(&["solve", bundled().to_str().unwrap(), "--grad", "is", "--loss-grad", "1,2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n = 4"));

    let out = certigrad(&["solve", bundled().to_str().unwrap(), "--grad", "is"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn not_tight_problem_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stripped.json");
    std::fs::write(&path, serde_json::to_string(&ProblemFile::from_qcqp(&stripped_polynomial(), &[])).unwrap())
        .unwrap();
    let out_path = dir.path().join("report.json");
    let out = certigrad(&["solve", path.to_str().unwrap(), "--out", out_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert_eq!(report["instances"][0]["verdict"], "NotTight");
}

#[test]
fn solver_failure_exits_with_three() {
    let out = certigrad(&["solve", bundled().to_str().unwrap(), "--max-iter", "2"]);
    assert_eq!(out.status.code(), Some(3));
    let report = stdout_json(&out);
    assert_eq!(report["instances"][0]["verdict"], "SolverFailure");
    assert_eq!(report["instances"][0]["sdp"]["status"], "MaxIter");
}

#[test]
fn ratio_threshold_flag_changes_the_verdict() {
    let out = certigrad(&["solve", bundled().to_str().unwrap(), "--ratio-threshold", "1e300"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stdout_json(&out)["config"]["ratio_threshold"], 1e300);
}

#[test]
fn problem_file_round_trips_through_the_library() {
    let original = ProblemFile::read(bundled().to_str().unwrap()).unwrap();
    let q = original.to_qcqp().unwrap();
    let written = ProblemFile::from_qcqp(&q, &original.param_names());
    assert_eq!(written, original.normalize());
    let text = serde_json::to_string_pretty(&written).unwrap();
    let reread = ProblemFile::parse(&text, "round-trip").unwrap();
    assert_eq!(reread, written);
    let q2 = reread.to_qcqp().unwrap();
    assert_eq!(q2.q(), q.q());
    assert_eq!(q2.a_all(), q.a_all());
    assert_eq!(q2.redundant_flags(), q.redundant_flags());
}
