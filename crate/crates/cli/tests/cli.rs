use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bksieve"));
    c.env_remove("BKSIEVE_WORKERS");
    c
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(out: &Path, args: &[&str]) -> Output {
    bin().arg("--out").arg(out).args(args).output().unwrap()
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

const SMALL_CURVE: [&str; 11] = [
    "are-curve", "--family", "plackett", "--rho", "-0.8:0.8:0.1", "--n", "2000", "--order", "4", "--k", "4",
];

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn are_curve_has_seventeen_rows_per_estimator_and_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &SMALL_CURVE);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(dir.path(), "are_curve.csv");
    let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        *counts.entry((f[1].to_string(), f[2].to_string())).or_default() += 1;
    }
    assert_eq!(counts.len(), 4);
    assert!(counts.values().all(|&c| c == 17), "{counts:?}");
    let manifest: serde_json::Value = serde_json::from_str(&read(dir.path(), "manifest.json")).unwrap();
    assert_eq!(manifest["command"], "are-curve");
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["status"], "ok");
}

#[test]
fn rerun_from_manifest_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(run(a.path(), &SMALL_CURVE).status.success());
    let manifest = a.path().join("manifest.json");
    let o = run(b.path(), &["rerun", manifest.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["are_curve.csv", "are_skipped.csv"] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
    }
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = ["simulate-table1", "--reps", "6", "--n", "300", "--order", "4", "--no-avar", "--seed", "3"];
    assert!(bin().arg("--out").arg(a.path()).arg("--workers").arg("1").args(args).status().unwrap().success());
    let o = bin().arg("--out").arg(b.path()).env("BKSIEVE_WORKERS", "3").args(args).output().unwrap();
    assert!(o.status.success());
    assert_eq!(read(a.path(), "table1.csv"), read(b.path(), "table1.csv"));
    let manifest: serde_json::Value = serde_json::from_str(&read(b.path(), "manifest.json")).unwrap();
    assert_eq!(manifest["workers"], 3);
}

#[test]
fn malformed_data_exits_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "date,adj_close,volume\n2020-01-02,abc,5\n").unwrap();
    let o = run(&dir.path().join("out"), &["var-backtest", "--data", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "data");
    assert!(dir.path().join("out/error.json").exists());
    let manifest: serde_json::Value = serde_json::from_str(&read(&dir.path().join("out"), "manifest.json")).unwrap();
    assert!(manifest["status"].as_str().unwrap().starts_with("failed"));
}

#[test]
fn invalid_parameters_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["are-curve", "--family", "nope"]);
    assert_eq!(o.status.code(), Some(2));
    let o = bin().arg("--out").arg(dir.path()).env("BKSIEVE_WORKERS", "0").args(SMALL_CURVE).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn fit_and_order_selection_write_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = (fixture("pairs.csv"), fixture("model.json"));
    let args = ["--data", data.to_str().unwrap(), "--model", model.to_str().unwrap()];
    let o = bin().arg("--out").arg(dir.path()).arg("fit").args(args).args(["--avar-k", "6"]).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let fit: serde_json::Value = serde_json::from_str(&read(dir.path(), "fit.json")).unwrap();
    assert_eq!(fit["beta_hat"].as_array().unwrap().len(), 2);
    assert_eq!(fit["acov"].as_array().unwrap().len(), 2);

    let o = bin().arg("--out").arg(dir.path()).arg("select-order").args(args).args(["--criterion", "bic"]).output().unwrap();
    assert!(o.status.success());
    let csv = read(dir.path(), "order_selection.csv");
    assert_eq!(csv.lines().count(), 5);
    let sel: serde_json::Value = serde_json::from_str(&read(dir.path(), "order_selection.json")).unwrap();
    // the BIC column of the CSV decides the chosen order
    let best = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect::<Vec<_>>())
        .min_by(|a, b| a[4].parse::<f64>().unwrap().total_cmp(&b[4].parse::<f64>().unwrap()))
        .unwrap()[0]
        .parse::<u64>()
        .unwrap();
    assert_eq!(sel["j_star"], best);
}

#[test]
fn var_backtest_writes_series_and_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture("daily_prices.csv");
    let o = run(
        dir.path(),
        &["var-backtest", "--data", data.to_str().unwrap(), "--window", "20", "--methods", "qmle,smle", "--companion", "volume"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let weekly = read(dir.path(), "weekly.csv");
    let weeks = weekly.lines().count() - 1;
    assert_eq!(weeks, 44);
    let series = read(dir.path(), "var_series.csv");
    assert_eq!(series.lines().count(), 1 + 2 * (weeks - 20));
    let cmp: serde_json::Value = serde_json::from_str(&read(dir.path(), "score_comparison.json")).unwrap();
    assert_eq!(cmp[0]["method_a"], "SMLE");
    assert_eq!(cmp[0]["method_b"], "QMLE");
}

#[test]
fn small_table1_runs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = ["simulate-table1", "--reps", "8", "--n", "400", "--order", "5", "--seed", "7", "--avar-n", "2000", "--avar-order", "4", "--avar-k", "4"];
    assert!(run(a.path(), &args).status.success());
    assert!(run(b.path(), &args).status.success());
    for f in ["table1.csv", "table1_failures.json"] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
    }
}
