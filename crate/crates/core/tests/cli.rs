mod common;

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use vardecomp::decomposition::{decompose, DecomposeConfig};
use vardecomp::model::{Dataset, EffectMode, LinkFunction, OutcomeKind};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vardecomp"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write_csv(ds: &Dataset, path: &Path) {
    let mut text = String::from("outcome,hospital");
    for name in ds.covariate_names() {
        text.push(',');
        text.push_str(name);
    }
    text.push('\n');
    for i in 0..ds.n() {
        text.push_str(&format!("{},{}", ds.outcome()[i], ds.hospital_labels()[ds.hospital()[i]]));
        for v in ds.x(i) {
            text.push_str(&format!(",{v}"));
        }
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn decompose_reports_additive_components() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("toy.csv");
    write_csv(&common::fixture(300, 4, 2, OutcomeKind::Binary, 5), &csv);
    let out = dir.path().join("out.json");
    let o = run(&["decompose", "--input", csv.to_str().unwrap(), "--draws", "30", "--output", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&out);
    let r = &v["result"];
    let sum = r["omega1"].as_f64().unwrap() + r["omega2"].as_f64().unwrap() + r["omega3"].as_f64().unwrap();
    assert!((sum - r["total"].as_f64().unwrap()).abs() < 1e-12);
    assert_eq!(v["config"]["volume_threshold"], 35);
    assert_eq!(r["intervals"]["draws"], 30);
}

#[test]
fn random_effects_path_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("toy.csv");
    let ds = common::fixture(400, 5, 1, OutcomeKind::Binary, 6);
    write_csv(&ds, &csv);
    let out = dir.path().join("out.json");
    let o = run(&[
        "decompose",
        "--input",
        csv.to_str().unwrap(),
        "--effects",
        "random",
        "--link",
        "logit",
        "--no-intervals",
        "--output",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&out);
    let lib = decompose(
        &ds,
        &DecomposeConfig {
            link: Some(LinkFunction::Logit),
            effects: EffectMode::Random,
            ..Default::default()
        },
    )
    .unwrap()
    .result;
    let r = &v["result"];
    assert_eq!(r["effects"], "random");
    assert!(r["intervals"].is_null());
    assert!((r["omega2"].as_f64().unwrap() - lib.omega2).abs() < 1e-12);
    let tau2 = r["outcome_diagnostics"]["tau2"].as_f64().unwrap();
    assert!((tau2 - lib.outcome_diagnostics.tau2.unwrap()).abs() < 1e-12);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("toy.csv");
    write_csv(&common::fixture(100, 3, 1, OutcomeKind::Binary, 2), &csv);
    let c = csv.to_str().unwrap();
    assert_eq!(run(&["decompose", "--input", c, "--hospital-column", "site"]).status.code(), Some(2));
    assert_eq!(run(&["decompose", "--input", c, "--level", "1.5"]).status.code(), Some(2));
    assert_eq!(run(&["decompose", "--input", c, "--output", c]).status.code(), Some(2));
    assert_eq!(run(&["decompose", "--bogus"]).status.code(), Some(2));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "outcome,hospital,x\n1,a,0.5\n0,b,oops\n").unwrap();
    let o = run(&["decompose", "--input", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "data");

    let dup = dir.path().join("dup.csv");
    std::fs::write(&dup, "outcome,hospital,x,x2\n1,a,1,2\n0,a,2,4\n1,b,3,6\n0,b,1,2\n1,b,2,4\n").unwrap();
    let o = run(&["decompose", "--input", dup.to_str().unwrap(), "--no-intervals", "--outcome-kind", "continuous"]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));

    let missing = dir.path().join("nope.csv");
    assert_eq!(run(&["decompose", "--input", missing.to_str().unwrap()]).status.code(), Some(5));
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("toy.csv");
    write_csv(&common::fixture(200, 3, 1, OutcomeKind::Continuous, 8), &csv);
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!("input = {:?}\ndraws = 25\nseed = 5\nresidual-mode = \"distributional\"\n", csv.to_str().unwrap()),
    )
    .unwrap();
    let out = dir.path().join("out.json");
    let o = run(&["decompose", "--config", cfg.to_str().unwrap(), "--seed", "9", "--output", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&out);
    assert_eq!(v["config"]["seed"], 9);
    assert_eq!(v["config"]["draws"], 25);
    assert_eq!(v["config"]["residual_mode"], "distributional");
    assert_eq!(v["config"]["level"], 0.95);

    std::fs::write(&cfg, "drawz = 3\n").unwrap();
    assert_eq!(run(&["decompose", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn oracle_reports_logistic_residual() {
    let o = run(&["oracle", "--m", "4", "--oracle-draws", "20000"]);
    assert!(o.status.success());
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let w3 = v["oracle"]["omega"][2].as_f64().unwrap();
    assert!((w3 - 3.28987).abs() < 1e-5);
    assert_eq!(v["oracle"]["se"][2], 0.0);
}

#[test]
fn meta_on_two_estimates() {
    let dir = tempfile::tempdir().unwrap();
    let est = dir.path().join("est.csv");
    std::fs::write(&est, "hospital,qi,variance\nA,0.1,0.01\nB,0.5,0.01\n").unwrap();
    let o = run(&["meta", "--estimates", est.to_str().unwrap()]);
    assert!(o.status.success());
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((v["meta"]["i2"].as_f64().unwrap() - 0.875).abs() < 1e-12);
    assert!((v["meta"]["q"].as_f64().unwrap() - 8.0).abs() < 1e-10);
}

#[test]
fn simulate_twice_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = vec![];
    for k in 0..2 {
        let json = dir.path().join(format!("s{k}.json"));
        let csv = dir.path().join(format!("s{k}.csv"));
        let reps = dir.path().join(format!("r{k}.csv"));
        let o = run(&[
            "simulate",
            "--n",
            "200",
            "--m",
            "3",
            "--replications",
            "2",
            "--seed",
            "4",
            "--oracle-draws",
            "20000",
            "--output",
            json.to_str().unwrap(),
            "--summary-csv",
            csv.to_str().unwrap(),
            "--replicates-csv",
            reps.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push([json, csv, reps].map(|p| std::fs::read(p).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    let summary = String::from_utf8(outputs[0][1].clone()).unwrap();
    assert!(summary.starts_with("# config: {"));
}
