use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn motlm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_motlm"))
        .args(args)
        .current_dir(dir)
        .env_remove("MOTLM_SEED")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = motlm(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn data_rows(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count() - 1
}

/// Small clf_case2 table with its ground truth, plus a quickly trained n = 3 model.
fn trained_fixture(dir: &Path) {
    ok(dir, &["generate", "--scenario", "clf_case2", "--seed", "5", "--size", "240", "--out", "d.csv"]);
    ok(
        dir,
        &[
            "train",
            "--data",
            "d.csv",
            "--task",
            "clf",
            "--n",
            "3",
            "--centers-file",
            "d.csv.truth.json",
            "--lambda-primes",
            "1,2",
            "--restarts",
            "2",
            "--max-steps",
            "60",
            "--learning-rate",
            "0.05",
            "--seed",
            "3",
            "--out",
            "m.json",
        ],
    );
}

#[test]
fn generate_default_size_and_byte_identical_reruns() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate", "--scenario", "clf_case1", "--seed", "7", "--out", "a.csv"]);
    ok(dir.path(), &["generate", "--scenario", "clf_case1", "--seed", "7", "--out", "b.csv"]);
    assert_eq!(data_rows(&dir.path().join("a.csv")), 1062);
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_eq!(read("a.csv.truth.json"), read("b.csv.truth.json"));
    let truth = json(&dir.path().join("a.csv.truth.json"));
    assert_eq!(truth["schema_version"], 1);
    let manifest = json(&dir.path().join("a.csv.manifest.json"));
    assert_eq!(manifest["command"], "generate");
    assert_eq!(manifest["seeds"]["data"], 7);
    assert_eq!(manifest["schema_version"], 1);
}

#[test]
fn generate_size_override_and_seed_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate", "--scenario", "reg_case1", "--size", "200", "--seed", "11", "--out", "a.csv"]);
    assert_eq!(data_rows(&dir.path().join("a.csv")), 200);
    let out = Command::new(env!("CARGO_BIN_EXE_motlm"))
        .args(["generate", "--scenario", "reg_case1", "--size", "200", "--out", "b.csv"])
        .current_dir(dir.path())
        .env("MOTLM_SEED", "11")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(std::fs::read(dir.path().join("a.csv")).unwrap(), std::fs::read(dir.path().join("b.csv")).unwrap());
}

#[test]
fn unknown_scenario_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = motlm(dir.path(), &["generate", "--scenario", "clf_case9", "--out", "a.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("a.csv").exists());
}

#[test]
fn train_writes_model_sidecar_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    trained_fixture(dir.path());
    let model = json(&dir.path().join("m.json"));
    assert_eq!(model["schema_version"], 1);
    let sidecar = std::fs::read_to_string(dir.path().join("m.json.lambdas.csv")).unwrap();
    let lines: Vec<&str> = sidecar.lines().collect();
    assert!(lines[0].starts_with("n,lambda_prime,lambda,restarts"));
    assert_eq!(lines.len(), 3);
    assert_eq!(lines.iter().filter(|l| l.ends_with(",true")).count(), 1);
    let manifest = json(&dir.path().join("m.json.manifest.json"));
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seeds"]["master"], 3);
    let hashes = manifest["input_hashes"].as_object().unwrap();
    assert!(hashes.contains_key("d.csv") && hashes.contains_key("d.csv.truth.json"));
    assert!(hashes.values().all(|h| h.as_str().unwrap().len() == 64));
    assert_eq!(manifest["summary"][0]["restarts_executed"], 4);
}

#[test]
fn singleton_grid_runs_ten_restarts_per_locality() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate", "--scenario", "clf_case2", "--seed", "1", "--size", "150", "--out", "d.csv"]);
    ok(
        dir.path(),
        &[
            "train",
            "--data",
            "d.csv",
            "--task",
            "clf",
            "--n",
            "3",
            "--centers-file",
            "d.csv.truth.json",
            "--lambda-primes",
            "1.0",
            "--max-steps",
            "5",
            "--out",
            "m.json",
        ],
    );
    let manifest = json(&dir.path().join("m.json.manifest.json"));
    assert_eq!(manifest["summary"][0]["restarts_executed"], 30);
    assert_eq!(json(&dir.path().join("m.json"))["provenance"]["restarts_executed"], 30);
}

#[test]
fn unknown_centers_with_manhattan_metric_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate", "--scenario", "clf_case1", "--size", "100", "--out", "d.csv"]);
    let out = motlm(
        dir.path(),
        &[
            "train",
            "--data",
            "d.csv",
            "--task",
            "clf",
            "--n",
            "2",
            "--unknown-centers",
            "--metric",
            "manhattan",
            "--out",
            "m.json",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("valid only for the Euclidean metric"));
    assert!(!dir.path().join("m.json").exists());
}

#[test]
fn train_flag_conflicts_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate", "--scenario", "clf_case2", "--size", "100", "--out", "d.csv"]);
    let cases: [&[&str]; 4] = [
        // neither centers nor unknown mode
        &["train", "--data", "d.csv", "--task", "clf", "--n", "2", "--out", "m.json"],
        // sigma without delta
        &[
            "train",
            "--data",
            "d.csv",
            "--task",
            "clf",
            "--n",
            "3",
            "--centers-file",
            "d.csv.truth.json",
            "--sigma",
            "1",
            "--out",
            "m.json",
        ],
        // more localities than centers
        &[
            "train",
            "--data",
            "d.csv",
            "--task",
            "clf",
            "--n",
            "4",
            "--centers-file",
            "d.csv.truth.json",
            "--out",
            "m.json",
        ],
        // missing data file
        &["train", "--data", "nope.csv", "--task", "clf", "--n", "2", "--unknown-centers", "--out", "m.json"],
    ];
    for args in cases {
        assert_eq!(motlm(dir.path(), args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn output_failure_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate", "--scenario", "clf_case2", "--size", "100", "--out", "d.csv"]);
    let out = motlm(
        dir.path(),
        &[
            "train",
            "--data",
            "d.csv",
            "--task",
            "clf",
            "--n",
            "3",
            "--centers-file",
            "d.csv.truth.json",
            "--lambda-primes",
            "1",
            "--restarts",
            "1",
            "--max-steps",
            "5",
            "--out",
            "d.csv/m.json",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn evaluate_on_training_partition_recovers_recorded_risk() {
    let dir = tempfile::tempdir().unwrap();
    trained_fixture(dir.path());
    ok(dir.path(), &["evaluate", "--model", "m.json", "--data", "d.csv", "--split", "train", "--out", "e.json"]);
    let model = json(&dir.path().join("m.json"));
    let metrics = json(&dir.path().join("e.json"));
    for key in ["schema_version", "accuracy", "core", "kl", "lambda", "empirical_risk", "std", "runs"] {
        assert!(metrics.get(key).is_some(), "missing {key}");
    }
    let recorded = model["bound"]["empirical_risk"].as_f64().unwrap();
    let again = metrics["empirical_risk"].as_f64().unwrap();
    assert!((recorded - again).abs() <= 1e-10, "{recorded} vs {again}");
    assert!((metrics["core"].as_f64().unwrap() - model["bound"]["core"].as_f64().unwrap()).abs() <= 1e-10);
    assert_eq!(metrics["lambda"], model["bound"]["lambda"]);
}

#[test]
fn evaluate_test_split_and_full_bound() {
    let dir = tempfile::tempdir().unwrap();
    trained_fixture(dir.path());
    ok(
        dir.path(),
        &[
            "evaluate", "--model", "m.json", "--data", "d.csv", "--split", "test", "--sigma", "0.5", "--delta", "0.05",
            "--out", "e.json",
        ],
    );
    let metrics = json(&dir.path().join("e.json"));
    let acc = metrics["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let full = metrics["full_bound"].as_f64().unwrap();
    let (core, lambda, rows) = (
        metrics["core"].as_f64().unwrap(),
        metrics["lambda"].as_f64().unwrap(),
        metrics["runs"][0]["rows"].as_f64().unwrap(),
    );
    let want = core + (2.0f64 / 0.05).ln() / lambda + lambda * 0.25 / (2.0 * rows);
    assert!((full - want).abs() < 1e-9 * want.abs().max(1.0));
}

#[test]
fn evaluate_reproductions_report_mean_and_std() {
    let dir = tempfile::tempdir().unwrap();
    for r in 0..2 {
        let (d, m) = (format!("d{r}.csv"), format!("m{r}.json"));
        let seed = (20 + r).to_string();
        ok(dir.path(), &["generate", "--scenario", "reg_case1", "--size", "200", "--seed", &seed, "--out", &d]);
        let truth = format!("{d}.truth.json");
        ok(
            dir.path(),
            &[
                "train",
                "--data",
                &d,
                "--task",
                "reg",
                "--n",
                "1",
                "--centers-file",
                &truth,
                "--lambda-primes",
                "1",
                "--restarts",
                "1",
                "--max-steps",
                "40",
                "--seed",
                &seed,
                "--out",
                &m,
            ],
        );
    }
    ok(
        dir.path(),
        &[
            "evaluate",
            "--model",
            "m{r}.json",
            "--data",
            "d{r}.csv",
            "--reproductions",
            "2",
            "--split",
            "test",
            "--out",
            "e.json",
        ],
    );
    let metrics = json(&dir.path().join("e.json"));
    let runs: Vec<f64> = metrics["runs"].as_array().unwrap().iter().map(|r| r["metric"].as_f64().unwrap()).collect();
    assert_eq!(runs.len(), 2);
    let mean = 0.5 * (runs[0] + runs[1]);
    assert!((metrics["r2"].as_f64().unwrap() - mean).abs() < 1e-12);
    assert!((metrics["std"]["r2"].as_f64().unwrap() - 0.5 * (runs[0] - runs[1]).abs()).abs() < 1e-12);

    let out = motlm(
        dir.path(),
        &["evaluate", "--model", "m0.json", "--data", "d0.csv", "--reproductions", "2", "--out", "x.json"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluate_rejects_task_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    trained_fixture(dir.path());
    ok(dir.path(), &["generate", "--scenario", "reg_case1", "--size", "100", "--out", "r.csv"]);
    let out = motlm(dir.path(), &["evaluate", "--model", "m.json", "--data", "r.csv", "--out", "e.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn predict_preserves_rows_and_flags_far_points() {
    let dir = tempfile::tempdir().unwrap();
    trained_fixture(dir.path());
    ok(dir.path(), &["predict", "--model", "m.json", "--data", "d.csv", "--out", "p.csv"]);
    assert_eq!(data_rows(&dir.path().join("p.csv")), data_rows(&dir.path().join("d.csv")));

    std::fs::write(dir.path().join("far.csv"), "x1,x2\n1e6,-1e6\n").unwrap();
    ok(dir.path(), &["predict", "--model", "m.json", "--data", "far.csv", "--out", "far_p.csv"]);
    let text = std::fs::read_to_string(dir.path().join("far_p.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr.headers().unwrap().clone();
    let row = rdr.records().next().unwrap().unwrap();
    let field = |name: &str| row[header.iter().position(|h| h == name).unwrap()].to_owned();
    assert_eq!(field("ambiguous"), "false");
    assert_eq!(field("members"), "");
    assert!(field("prediction") == "1" || field("prediction") == "-1");
}

#[test]
fn predict_flags_disagreeing_overlap() {
    let dir = tempfile::tempdir().unwrap();
    trained_fixture(dir.path());
    // Hand-built model: two wide localities around the origin with opposite constant outputs.
    let mut model = json(&dir.path().join("m.json"));
    let locs = model["deterministic"]["localities"].as_array_mut().unwrap();
    locs.truncate(2);
    for (l, bias) in locs.iter_mut().zip([1.0, -1.0]) {
        l["center"] = serde_json::json!([0.0, 0.0]);
        l["radius"] = serde_json::json!(100.0);
        l["weights"] = serde_json::json!([0.0, 0.0]);
        l["bias"] = serde_json::json!(bias);
    }
    let posterior_locs = model["posterior"]["localities"].as_array_mut().unwrap();
    posterior_locs.truncate(2);
    model["posterior"]["fixed_centers"].as_array_mut().unwrap().truncate(2);
    std::fs::write(dir.path().join("crafted.json"), serde_json::to_string(&model).unwrap()).unwrap();
    std::fs::write(dir.path().join("pt.csv"), "x1,x2\n0.1,0.2\n").unwrap();

    ok(dir.path(), &["predict", "--model", "crafted.json", "--data", "pt.csv", "--out", "p.csv"]);
    let text = std::fs::read_to_string(dir.path().join("p.csv")).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[2], "true", "{text}");
    assert_eq!(row[3], "false");
    assert_eq!(row[4], "0;1");

    ok(
        dir.path(),
        &["predict", "--model", "crafted.json", "--data", "pt.csv", "--overlap-rule", "abstain", "--out", "q.csv"],
    );
    let text = std::fs::read_to_string(dir.path().join("q.csv")).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!((row[1], row[2], row[3]), ("", "true", "true"));
}

#[test]
fn predict_schema_mismatch_reports_columns() {
    let dir = tempfile::tempdir().unwrap();
    trained_fixture(dir.path());
    std::fs::write(dir.path().join("bad.csv"), "x1,z9\n0.1,0.2\n").unwrap();
    let out = motlm(dir.path(), &["predict", "--model", "m.json", "--data", "bad.csv", "--out", "p.csv"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("x2") && err.contains("z9"), "{err}");
}

#[test]
fn sweep_writes_one_model_per_count_and_table() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate", "--scenario", "clf_case1", "--size", "200", "--out", "d.csv"]);
    std::fs::write(dir.path().join("sweep.json"), "[[-1,0],[1,0],[-2,-1]]").unwrap();
    ok(
        dir.path(),
        &[
            "train",
            "--data",
            "d.csv",
            "--task",
            "clf",
            "--sweep-n",
            "1..3",
            "--centers-file",
            "sweep.json",
            "--lambda-primes",
            "1",
            "--restarts",
            "1",
            "--max-steps",
            "20",
            "--out",
            "s.json",
        ],
    );
    for n in 1..=3 {
        assert!(dir.path().join(format!("s.n{n}.json")).exists());
    }
    let table = std::fs::read_to_string(dir.path().join("s.json.sweep.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert!(lines[0].starts_with("n,chosen_lambda_prime,validation_metric,test_metric,core"));
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("3,"));
}

#[test]
fn training_is_independent_of_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate", "--scenario", "clf_case2", "--size", "200", "--out", "d.csv"]);
    for jobs in ["1", "3"] {
        let out = format!("m{jobs}.json");
        ok(
            dir.path(),
            &[
                "train",
                "--data",
                "d.csv",
                "--task",
                "clf",
                "--n",
                "3",
                "--centers-file",
                "d.csv.truth.json",
                "--lambda-primes",
                "1,2",
                "--restarts",
                "3",
                "--max-steps",
                "30",
                "--jobs",
                jobs,
                "--out",
                &out,
            ],
        );
    }
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("m1.json"), read("m3.json"));
}
