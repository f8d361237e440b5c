use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn shapeflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shapeflow"))
        .args(args)
        .env("SHAPEFLOW_THREADS", "1")
        .output()
        .unwrap()
}

fn code(args: &[&str]) -> i32 {
    shapeflow(args).status.code().unwrap()
}

fn ok(args: &[&str]) {
    let out = shapeflow(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = r#"{"n_subjects": 2, "visits": 3, "subdivisions": 0}"#;

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&["evaluate", "--help"]), 0);
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["evaluate", "--no-such-flag"]), 64);
    assert_eq!(code(&["frobnicate"]), 64);
    assert_eq!(code(&["predict", "--method", "naive"]), 64);
    assert_eq!(code(&["report", "--out", "x"]), 64);
}

#[test]
fn invalid_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let out = dir.path().join("out");
    assert_eq!(code(&["regress", "--observations", p(&missing), "--out", p(&out)]), 2);

    let cfg = dir.path().join("sim.json");
    fs::write(&cfg, TINY).unwrap();
    let cohort = dir.path().join("cohort");
    ok(&["--config", p(&cfg), "simulate", "--out", p(&cohort)]);
    let manifest = cohort.join("subjects/s001/manifest.json");
    let args = ["predict", "--observations", p(&manifest), "--method", "naive+reparam", "--times", "80", "--out", p(&out)];
    assert_eq!(code(&args), 2);
}

#[test]
fn seeded_simulation_is_reproducible_and_naive_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.json");
    fs::write(&cfg, TINY).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["--config", p(&cfg), "--seed", "3", "simulate", "--out", p(&a)]);
    ok(&["--config", p(&cfg), "--seed", "3", "simulate", "--out", p(&b)]);
    for f in ["truth.json", "scores.csv", "subjects/s002/manifest.json", "subjects/s002/visit_2.vtk"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }

    let manifest = a.join("subjects/s001/manifest.json");
    let visits: serde_json::Value = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    let last_age = visits["observations"].as_array().unwrap().last().unwrap()["age"].as_f64().unwrap();
    let pred = dir.path().join("pred");
    let age = last_age.to_string();
    ok(&["predict", "--observations", p(&manifest), "--method", "naive", "--times", &age, "--out", p(&pred)]);
    let eval = dir.path().join("eval.csv");
    ok(&[
        "evaluate",
        "--predictions",
        p(&pred.join("manifest.json")),
        "--observations",
        p(&manifest),
        "--subject",
        "s001",
        "--method",
        "naive",
        "--out",
        p(&eval),
    ]);
    let mut rows = csv::Reader::from_path(&eval).unwrap();
    let headers = rows.headers().unwrap().clone();
    let dice_col = headers.iter().position(|h| h == "dice").unwrap();
    let records: Vec<csv::StringRecord> = rows.records().map(|r| r.unwrap()).collect();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0][dice_col].parse::<f64>().unwrap(), 1.0);

    let warps = dir.path().join("warps.json");
    let warp_cfg = dir.path().join("warp.json");
    fs::write(&warp_cfg, r#"{"curve": {"t_mid": 75.0, "scale": 5.0, "floor": 0.0, "ceiling": 1.0}, "t0": 70.0}"#).unwrap();
    ok(&["--config", p(&warp_cfg), "fit-warp", "--scores", p(&a.join("scores.csv")), "--out", p(&warps)]);
    let fits: serde_json::Value = serde_json::from_str(&fs::read_to_string(&warps).unwrap()).unwrap();
    assert_eq!(fits.as_object().unwrap().len(), 2);
}

#[test]
fn experiment_report_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.json");
    fs::write(
        &cfg,
        r#"{"name": "tiny", "simulation": {"n_subjects": 2, "visits": 3, "subdivisions": 0},
            "experiment": {"methods": ["naive", "exp_parallel+raw"], "learning_visits": 1}}"#,
    )
    .unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["--config", p(&cfg), "--seed", "4", "report", "--out", p(&a)]);
    ok(&["--config", p(&cfg), "--seed", "4", "report", "--out", p(&b)]);
    for f in ["tiny.csv", "tiny_rows.csv", "tiny.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let text = fs::read_to_string(a.join("tiny.txt")).unwrap();
    assert!(text.contains("exp_parallel+raw"));
}

/// The bundled 40-subject experiment against its recorded summary (about 7 minutes).
#[test]
#[ignore = "runs the full bundled experiment"]
fn bundled_experiment_matches_golden_file() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report");
    ok(&["--config", p(&root.join("configs/table2_synthetic.json")), "report", "--out", p(&out)]);
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/table2_synthetic.csv");
    assert_eq!(fs::read_to_string(out.join("table2_synthetic.csv")).unwrap(), fs::read_to_string(golden).unwrap());
}
