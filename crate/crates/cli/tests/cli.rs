use std::fs;
use std::path::Path;
use std::process::Command;

fn hte(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_hte")).args(args).output().unwrap();
    assert!(out.status.success(), "hte {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_fit_predict_and_validate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("trial.csv");
    let schema = dir.path().join("schema.json");
    let model = dir.path().join("model.json");
    let pred = dir.path().join("pred.csv");
    fs::write(&schema, r#"{"treatment": "treatment", "outcome": "outcome"}"#).unwrap();

    hte(&["gen-trial", "--n", "600", "--heterogeneous", "--seed", "4", "--out", s(&data)]);
    let text = fs::read_to_string(&data).unwrap();
    assert_eq!(text.lines().count(), 601);
    assert!(text.lines().next().unwrap().ends_with("treatment,outcome"));

    hte(&["fit", "--data", s(&data), "--schema", s(&schema), "--strategy", "hom-ridge", "--out", s(&model)]);
    hte(&["predict", "--model", s(&model), "--data", s(&data), "--out", s(&pred)]);
    let mut rdr = csv::Reader::from_path(&pred).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["row", "risk_control", "risk_treated", "delta"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 600);
    for r in &rows {
        let f = |k: usize| r[k].parse::<f64>().unwrap();
        assert!((f(2) - f(1) - f(3)).abs() < 1e-12);
    }

    let val = dir.path().join("val");
    hte(&[
        "validate", "--data", s(&data), "--schema", s(&schema), "--strategies", "hom-ml,overall", "--bootstrap", "4", "--out", s(&val),
    ]);
    let summary = fs::read_to_string(val.join("bootstrap_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(val.join("te_calibration.csv").exists());
}

#[test]
fn simulate_and_resume_from_a_plan_file() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.json");
    fs::write(
        &plan,
        r#"{"ns": [200], "beta_t_values": [0.0], "heterogeneous": [false], "runs": 2,
            "validation_n": 1000, "strategies": ["overall", "hom-ml"], "base_seed": 9}"#,
    )
    .unwrap();
    let out = dir.path().join("study");
    let first = hte(&["simulate", "--plan", s(&plan), "--out", s(&out)]);
    assert!(first.contains("2 of 2 units complete"));
    let results = fs::read(out.join("results.csv")).unwrap();
    hte(&["simulate", "--plan", s(&plan), "--out", s(&out), "--resume"]);
    assert_eq!(fs::read(out.join("results.csv")).unwrap(), results);
}
