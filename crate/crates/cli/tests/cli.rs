use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use disentangle::estimate::{FitReport, FitReportJson};
use disentangle::infer::Query;
use disentangle::io::{read_dataset_file, ScmJson};
use disentangle::model::SymmetricAnm;
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_disentangle"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn load_fit(path: &Path) -> FitReport {
    serde_json::from_str::<FitReportJson>(&fs::read_to_string(path).unwrap()).unwrap().try_into().unwrap()
}

fn small_gen(dir: &Path, noise_scale: f64, n: usize) {
    let cfg = format!(
        r#"{{"K": 2, "covariate_dim": 1, "noise_scale": {noise_scale},
            "regimes": [{{"intervened": [], "n": {n}}}, {{"intervened": [0, 1], "n": {n}}}, {{"intervened": [1], "n": 0}}]}}"#
    );
    fs::write(dir.join("gen.json"), cfg).unwrap();
    ok(dir, &["gen", "--config", "gen.json", "--seed", "5", "--out", "g", "-q"]);
}

#[test]
fn gen_default_dimensions() {
    let t = TempDir::new().unwrap();
    ok(t.path(), &["gen", "--seed", "3", "--out", "g"]);
    let scm = json(&t.path().join("g/scm.json"));
    assert_eq!(scm["sigma"].as_array().unwrap().len(), 25);
    assert_eq!(scm["theta"]["treatments"].as_array().unwrap().len(), 4);
    assert!(scm["theta"]["outcome"].is_array());
    for f in ["data_obs.csv", "data_do_0_1.csv", "data_do_1_2.csv", "data_do_2_3.csv"] {
        assert_eq!(read_dataset_file(&t.path().join("g").join(f)).unwrap().len(), 2048);
    }
}

#[test]
fn gen_empty_regime_and_determinism() {
    let t = TempDir::new().unwrap();
    small_gen(t.path(), 1.0, 50);
    let empty = fs::read_to_string(t.path().join("g/data_do_1.csv")).unwrap();
    assert_eq!(empty, "regime_id,c_0,x_0,x_1,i_0,i_1,y\n");
    let first: Vec<Vec<u8>> = ["scm.json", "data_obs.csv", "data_do_0_1.csv"]
        .iter()
        .map(|f| fs::read(t.path().join("g").join(f)).unwrap())
        .collect();
    ok(t.path(), &["gen", "--config", "gen.json", "--seed", "5", "--out", "g", "-q"]);
    for (f, bytes) in ["scm.json", "data_obs.csv", "data_do_0_1.csv"].iter().zip(first) {
        assert_eq!(fs::read(t.path().join("g").join(f)).unwrap(), bytes, "{f}");
    }
}

#[test]
fn config_errors_name_the_field() {
    let t = TempDir::new().unwrap();
    fs::write(t.path().join("bad.json"), r#"{"K": 2, "regimes": [{"n": "many"}]}"#).unwrap();
    let out = run(t.path(), &["gen", "--config", "bad.json", "--seed", "1", "--out", "g"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("regimes[0].n"), "{err}");
    fs::write(t.path().join("extra.json"), r#"{"K": 2, "colour": 1}"#).unwrap();
    let out = run(t.path(), &["gen", "--config", "extra.json", "--seed", "1", "--out", "g"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
    let out = run(t.path(), &["gen", "--seed", "-4", "--out", "g"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn fit_reports_malformed_row_location() {
    let t = TempDir::new().unwrap();
    fs::write(t.path().join("bad.csv"), "regime_id,c_0,x_0,i_0,y\n0,1,2,0,3\n0,1,2,0,3\n0,1,2\n").unwrap();
    let out = run(t.path(), &["fit", "bad.csv", "--out", "f"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.csv:4:"));
}

#[test]
fn fit_and_baseline_outputs() {
    let t = TempDir::new().unwrap();
    small_gen(t.path(), 1.0, 400);
    let summary = ok(t.path(), &["fit", "g/data_obs.csv", "g/data_do_0_1.csv", "g/data_do_1.csv", "--out", "f", "--baseline"]);
    assert!(summary.contains("final log-likelihood") && summary.contains("iterations") && summary.contains("converged: true"));
    let fit = load_fit(&t.path().join("f/fit.json"));
    assert!(fit.converged);
    let base = json(&t.path().join("f/baseline_fit.json"));
    assert_eq!(base["outcome"].as_array().unwrap().len(), 7);
}

#[test]
fn predict_modes() {
    let t = TempDir::new().unwrap();
    small_gen(t.path(), 1.0, 400);
    ok(t.path(), &["fit", "g/data_obs.csv", "g/data_do_0_1.csv", "--out", "f", "-q"]);
    let fit = load_fit(&t.path().join("f/fit.json"));

    fs::write(t.path().join("all.json"), r#"{"c": [0.3], "do": {"0": 1.0, "1": -0.5}}"#).unwrap();
    let v: Value = serde_json::from_str(&ok(t.path(), &["predict", "--fit", "f/fit.json", "--query", "all.json"])).unwrap();
    let manual = fit.params.outcome_mean(&[0.3], &[1.0, -0.5]).unwrap();
    assert!((v["prediction"].as_f64().unwrap() - manual).abs() < 1e-12);

    fs::write(t.path().join("obs.json"), r#"{"c": [0.3], "do": {"0": 1.0}, "obs": {"1": 2.5}}"#).unwrap();
    let with: Value = serde_json::from_str(&ok(t.path(), &["predict", "--fit", "f/fit.json", "--query", "obs.json"])).unwrap();
    let without: Value =
        serde_json::from_str(&ok(t.path(), &["predict", "--fit", "f/fit.json", "--query", "obs.json", "--no-correction"])).unwrap();
    assert!(fit.params.sigma.get(1, 2).abs() > 1e-3);
    assert!((with["prediction"].as_f64().unwrap() - without["prediction"].as_f64().unwrap()).abs() > 1e-6);
    assert_eq!(with["structural"], without["prediction"]);

    fs::write(t.path().join("dims.json"), r#"{"c": [0.3, 1.0], "do": {"0": 1.0, "1": 0.0}}"#).unwrap();
    assert_eq!(run(t.path(), &["predict", "--fit", "f/fit.json", "--query", "dims.json"]).status.code(), Some(1));
}

#[test]
fn cate_on_single_treatment_matches_predict() {
    let t = TempDir::new().unwrap();
    let cfg = r#"{"K": 1, "covariate_dim": 1, "regimes": [{"intervened": [], "n": 300}, {"intervened": [0], "n": 300}]}"#;
    fs::write(t.path().join("gen.json"), cfg).unwrap();
    ok(t.path(), &["gen", "--config", "gen.json", "--seed", "2", "--out", "g", "-q"]);
    ok(t.path(), &["fit", "g/data_obs.csv", "g/data_do_0.csv", "--out", "f", "-q"]);
    fs::write(t.path().join("q.json"), r#"{"c": [-0.4], "do": {"0": 0.7}}"#).unwrap();
    let p: Value = serde_json::from_str(&ok(t.path(), &["predict", "--fit", "f/fit.json", "--query", "q.json"])).unwrap();
    let c: Value =
        serde_json::from_str(&ok(t.path(), &["predict", "--fit", "f/fit.json", "--query", "q.json", "--cate", "--n-mc", "500"]))
            .unwrap();
    assert!((p["prediction"].as_f64().unwrap() - c["prediction"].as_f64().unwrap()).abs() < 1e-12);
}

#[test]
fn noiseless_round_trip_recovers_outcomes() {
    let t = TempDir::new().unwrap();
    small_gen(t.path(), 0.0, 200);
    ok(t.path(), &["fit", "g/data_obs.csv", "g/data_do_0_1.csv", "--out", "f", "-q"]);
    let truth: SymmetricAnm =
        serde_json::from_str::<ScmJson>(&fs::read_to_string(t.path().join("g/scm.json")).unwrap()).unwrap().try_into().unwrap();
    let queries = [
        r#"{"c": [0.5], "do": {"0": 1.0, "1": -0.5}}"#,
        r#"{"c": [-1.2], "do": {"1": 2.0}, "obs": {"0": 0.3}}"#,
        r#"{"c": [0.0], "obs": {"0": -0.7, "1": 1.1}}"#,
    ];
    for (j, q) in queries.iter().enumerate() {
        let name = format!("q{j}.json");
        fs::write(t.path().join(&name), q).unwrap();
        let v: Value = serde_json::from_str(&ok(t.path(), &["predict", "--fit", "f/fit.json", "--query", &name])).unwrap();
        let query: Query = serde_json::from_str(q).unwrap();
        // no noise, so the outcome is the structural mean itself
        let expected = truth.params.outcome_mean(&query.c, &query.treatments()).unwrap();
        assert!((v["prediction"].as_f64().unwrap() - expected).abs() < 1e-3, "{q}");
    }
}

#[test]
fn verify_subcommands() {
    let t = TempDir::new().unwrap();
    ok(t.path(), &["verify", "s31", "--p", "0.3", "--out", "v"]);
    let r = json(&t.path().join("v/verify_s31.json"));
    assert_eq!(r["status"], "pass");
    let do0 = r["checks"].as_array().unwrap().iter().find(|c| c["expected_relation"] == "different").unwrap();
    assert!((do0["tv_distance"].as_f64().unwrap() - 0.3).abs() < 1e-12);

    ok(t.path(), &["verify", "g32", "--n", "200000", "--out", "v"]);
    assert_eq!(json(&t.path().join("v/verify_g32.json"))["status"], "pass");

    let out = ok(t.path(), &["verify", "cu", "--p", "1.0", "--out", "v"]);
    assert!(out.contains("Unresolved"));
    assert_eq!(json(&t.path().join("v/verify_cu.json"))["status"], "unresolved");

    assert_eq!(run(t.path(), &["verify", "s31", "--p", "1.5"]).status.code(), Some(1));
}

const REDUCED: &str = r#"{"K": 4, "covariate_dim": 4, "sample_sizes": [32, 256], "seeds": [0, 1], "eval_draws": 2000}"#;

#[test]
fn experiment_synthetic_reduced() {
    let t = TempDir::new().unwrap();
    fs::write(t.path().join("syn.json"), REDUCED).unwrap();
    let table = ok(t.path(), &["experiment", "synthetic", "--config", "syn.json", "--out", "e1", "--threads", "4"]);
    assert!(table.contains("do(X0,X1,X2,X3)"));
    let raw = fs::read_to_string(t.path().join("e1/metrics.csv")).unwrap();
    assert_eq!(raw.lines().count(), 1 + 2 * 2 * 16 * 3);

    let mut rdr = csv_rows(&t.path().join("e1/aggregate.csv"));
    let header = rdr.remove(0);
    let lo = header.iter().position(|h| h == "mae_ci_half_width").unwrap();
    for row in &rdr {
        if !row[lo].is_empty() {
            assert!(row[lo].parse::<f64>().unwrap() >= 0.0);
        }
    }

    ok(t.path(), &["-q", "experiment", "synthetic", "--config", "syn.json", "--out", "e2", "--threads", "1"]);
    for f in ["metrics.csv", "aggregate.csv"] {
        assert_eq!(fs::read(t.path().join("e1").join(f)).unwrap(), fs::read(t.path().join("e2").join(f)).unwrap(), "{f}");
    }

    ok(t.path(), &["-q", "report", "e1/metrics.csv", "--out", "r"]);
    assert_eq!(fs::read(t.path().join("r/aggregate.csv")).unwrap(), fs::read(t.path().join("e1/aggregate.csv")).unwrap());
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path).unwrap().lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn experiment_stroke_small() {
    let t = TempDir::new().unwrap();
    fs::write(t.path().join("s.json"), r#"{"bounds": [0.0, 0.4], "seeds": [0], "n_eval": 300}"#).unwrap();
    let table = ok(t.path(), &["experiment", "stroke", "--config", "s.json", "--out", "s"]);
    assert!(table.contains("bound") && table.contains("do(X0)"));
    assert_eq!(fs::read_to_string(t.path().join("s/metrics.csv")).unwrap().lines().count(), 1 + 2 * 3);
    fs::write(t.path().join("bad.json"), r#"{"bounds": [2.0]}"#).unwrap();
    assert_eq!(run(t.path(), &["experiment", "stroke", "--config", "bad.json", "--out", "s"]).status.code(), Some(1));
}
