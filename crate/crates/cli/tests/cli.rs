use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn nas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nas")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Toy config with a short search, plus its latency table, in `dir`.
fn setup(dir: &Path) -> PathBuf {
    let o = nas(&["init-config", "--preset", "toy", "--out", p(dir)]);
    assert!(o.status.success(), "{o:?}");
    let config = dir.join("config.json");
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(&config).unwrap()).unwrap();
    v["search"]["steps"] = 20.into();
    v["search"]["train"]["epochs"] = 2.into();
    std::fs::write(&config, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    let o = nas(&["lut-synth", "--config", p(&config), "--out", p(dir)]);
    assert!(o.status.success(), "{o:?}");
    config
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_with_one_and_help_with_zero() {
    assert_eq!(nas(&["search"]).status.code(), Some(1));
    assert_eq!(nas(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(nas(&["search", "--config", "/nonexistent/config.json"]).status.code(), Some(1));
    assert_eq!(nas(&["--help"]).status.code(), Some(0));
    assert_eq!(nas(&["--version"]).status.code(), Some(0));
}

#[test]
fn missing_latency_table_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    std::fs::remove_file(dir.path().join("lut.json")).unwrap();
    let o = nas(&["search", "--config", p(&config), "--out", p(&dir.path().join("s"))]);
    assert_ne!(o.status.code(), Some(0));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("lut.json"), "{err}");
}

#[test]
fn lut_synth_is_deterministic_per_seed_and_sized_to_the_space() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    let run = |seed: &str, out: &str| {
        let out = dir.path().join(out);
        assert!(nas(&["lut-synth", "--config", p(&config), "--seed", seed, "--out", p(&out)]).status.success());
        std::fs::read_to_string(out.join("lut.json")).unwrap()
    };
    let (a, b, c) = (run("4", "a"), run("4", "b"), run("5", "c"));
    assert_eq!(a, b);
    assert_ne!(a, c);
    let lut: Value = serde_json::from_str(&a).unwrap();
    assert_eq!(lut["layers"].as_array().unwrap().len(), 4);
    for row in lut["layers"].as_array().unwrap() {
        let f = |k: &str| row[k].as_f64().unwrap();
        assert!(f("r5x5_e6_ms") >= f("r5x5_e3_ms") && f("r5x5_e6_ms") >= f("r3x3_e6_ms"));
    }
}

#[test]
fn search_writes_artifacts_and_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    let out = dir.path().join("search");
    let o = nas(&["search", "--config", p(&config), "--seed", "9", "--out", p(&out)]);
    assert!(o.status.success(), "{o:?}");
    for f in ["metrics.csv", "derived.json", "checkpoint.json", "search.manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let m = read_json(&out.join("search.manifest.json"));
    assert_eq!(m["command"], "search");
    assert_eq!(m["seed"], 9);
    assert_eq!(m["config"]["search"]["seed"], 9);
    assert_eq!(m["config"]["search"]["arch"]["seed"], 9);
    assert_eq!(m["tool_version"], env!("CARGO_PKG_VERSION"));
    assert!(m["started_at"].as_str().unwrap() <= m["finished_at"].as_str().unwrap());
    assert_eq!(m["artifacts"].as_object().unwrap().len(), 3);
    let derived = read_json(&out.join("derived.json"));
    assert_eq!(derived["provenance"]["seed"], 9);
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,ce,runtime_ms,loss,decisions\n"));
    assert_eq!(metrics.lines().count(), 21);
}

#[test]
fn derive_reproduces_the_search_decisions_from_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    let s = dir.path().join("s");
    assert!(nas(&["search", "--config", p(&config), "--out", p(&s)]).status.success());
    let d = dir.path().join("d");
    let ckpt = s.join("checkpoint.json");
    let o = nas(&["derive", "--config", p(&config), "--checkpoint", p(&ckpt), "--out", p(&d)]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(std::fs::read(s.join("derived.json")).unwrap(), std::fs::read(d.join("derived.json")).unwrap());
}

#[test]
fn train_prints_the_accuracy_it_records() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    let s = dir.path().join("s");
    assert!(nas(&["search", "--config", p(&config), "--out", p(&s)]).status.success());
    for precision in ["f64", "f32"] {
        let t = dir.path().join(format!("t-{precision}"));
        let derived = s.join("derived.json");
        let ckpt = s.join("checkpoint.json");
        let o = nas(&[
            "train",
            "--config",
            p(&config),
            "--derived",
            p(&derived),
            "--checkpoint",
            p(&ckpt),
            "--precision",
            precision,
            "--out",
            p(&t),
        ]);
        assert!(o.status.success(), "{o:?}");
        let printed: f64 =
            stdout(&o).lines().find_map(|l| l.strip_prefix("accuracy: ")).expect("accuracy line").parse().unwrap();
        let report = read_json(&t.join("train_report.json"));
        assert_eq!(printed, report["accuracy"].as_f64().unwrap());
        assert_eq!(std::fs::read_to_string(t.join("train.csv")).unwrap().lines().count(), 3);
    }
}

#[test]
fn validate_latency_prints_the_module_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    let out = dir.path().join("v");
    let o = nas(&["validate-latency", "--config", p(&config), "--out", p(&out)]);
    assert!(o.status.success(), "{o:?}");
    let report = read_json(&out.join("validation.json"));
    let text = stdout(&o);
    let rmse = report["rmse_ms"].as_f64().unwrap();
    let rel = report["mean_rel_error"].as_f64().unwrap();
    assert!(text.contains(&format!("rmse_ms={rmse:.6}")), "{text}");
    assert!(text.contains(&format!("mean_rel_error={rel:.6}")), "{text}");
}

#[test]
fn gradcheck_exit_code_follows_the_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    let o = nas(&["gradcheck", "--config", p(&config), "--out", p(&dir.path().join("ok"))]);
    assert_eq!(o.status.code(), Some(0), "{o:?}");

    let mut v = read_json(&config);
    v["gradcheck"] = serde_json::json!({
        "batch_size": 2,
        "settings": {"h": 1e-3, "tolerance": 1e-12, "abs_floor": 0.0, "max_coords_per_param": 4, "sample_seed": 0}
    });
    let strict = dir.path().join("strict.json");
    std::fs::write(&strict, v.to_string()).unwrap();
    let out = dir.path().join("bad");
    let o = nas(&["gradcheck", "--config", p(&strict), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2), "{o:?}");
    assert_eq!(read_json(&out.join("gradcheck.json"))["passed"], false);
    assert!(out.join("gradcheck.manifest.json").exists());
}

#[test]
fn validation_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    let mut v = read_json(&config);
    v["search"]["lut_path"] = "short.json".into();
    let lut = read_json(&dir.path().join("lut.json"));
    let mut short = lut.clone();
    short["layers"].as_array_mut().unwrap().pop();
    std::fs::write(dir.path().join("short.json"), short.to_string()).unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, v.to_string()).unwrap();
    let o = nas(&["search", "--config", p(&bad), "--out", p(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2), "{o:?}");
}

#[test]
fn sweep_recommends_one_of_the_swept_values() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    let mut v = read_json(&config);
    v["sweep"] = serde_json::json!({"lambdas": [0.0, 1.0], "seeds": [0]});
    std::fs::write(&config, v.to_string()).unwrap();
    let out = dir.path().join("sw");
    let o = nas(&["sweep-lambda", "--config", p(&config), "--out", p(&out)]);
    assert!(o.status.success(), "{o:?}");
    let report = read_json(&out.join("sweep.json"));
    let rec = report["recommended_lambda"].as_f64().unwrap();
    assert!(rec == 0.0 || rec == 1.0);
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(csv.starts_with("lambda,seed,runtime_ms,accuracy,decisions\n"));
    assert_eq!(csv.lines().count(), 3);
}
