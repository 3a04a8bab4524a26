use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 11

[model]
K = 8
J = 4

[windows]
spinup = 5.0
train_end = 15.0
test_end = 25.0
horizon = 0.5

[enkf]
members = 10
window = 2.0

[lyapunov]
spinup = 5.0
total_time = 15.0
"#;

fn l96(dir: &Path, config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_l96"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(dir.join("runs"))
        .args(args)
        .output()
        .expect("spawn l96")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run_dir(out: &Output) -> PathBuf {
    let stdout = String::from_utf8(out.stdout.clone()).unwrap();
    PathBuf::from(stdout.lines().last().expect("run directory line").trim())
}

#[test]
fn simulate_writes_experiment_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", SMALL);
    let out = l96(tmp.path(), &cfg, &["simulate", "--record-every", "100"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let dir = run_dir(&out);
    for f in [
        "config.json",
        "metrics.json",
        "timing.json",
        "x.csv",
        "u.csv",
    ] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }
    let x = fs::read_to_string(dir.join("x.csv")).unwrap();
    let header: Vec<&str> = x.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 9);
    assert_eq!(x.lines().count(), 1 + 21);
    let echo: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["seed"], 11);
    assert_eq!(echo["model"]["K"], 8);
}

#[test]
fn json_config_is_accepted() {
    let tmp = tempfile::tempdir().unwrap();
    let json = r#"{"seed": 3, "model": {"K": 8, "J": 4},
        "windows": {"spinup": 1.0, "train_end": 2.0, "test_end": 3.0, "horizon": 0.2},
        "enkf": {"window": 0.4}}"#;
    let cfg = write_config(tmp.path(), "small.json", json);
    let out = l96(tmp.path(), &cfg, &["simulate"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write_config(tmp.path(), "bad.toml", "seed = 1\nbogus = 2\n");
    let out = l96(tmp.path(), &bad, &["simulate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));

    let windows = write_config(
        tmp.path(),
        "windows.toml",
        "[windows]\nspinup = 10.0\ntrain_end = 5.0\n",
    );
    let out = l96(tmp.path(), &windows, &["lyapunov"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("windows.train_end"));

    let missing = tmp.path().join("absent.toml");
    let out = l96(tmp.path(), &missing, &["simulate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!tmp.path().join("runs").exists());
}

#[test]
fn unknown_targets_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", SMALL);
    for args in [
        &["reproduce", "fig9"][..],
        &["reproduce", "table5"][..],
        &["fit-ar", "--method", "lasso"][..],
        &["enkf", "--variant", "ar-lasso"][..],
    ] {
        let out = l96(tmp.path(), &cfg, args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn blow_up_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let text = SMALL.replace("J = 4", "J = 4\nF = 1e9");
    let cfg = write_config(tmp.path(), "blow.toml", &text);
    let out = l96(tmp.path(), &cfg, &["simulate"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn metrics_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", SMALL);
    let a = l96(tmp.path(), &cfg, &["fit-ar", "--method", "wilks"]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let first = fs::read(run_dir(&a).join("metrics.json")).unwrap();
    let model = fs::read(run_dir(&a).join("models/wilks.json")).unwrap();
    let b = l96(tmp.path(), &cfg, &["fit-ar", "--method", "wilks"]);
    assert!(b.status.success());
    assert_eq!(run_dir(&a), run_dir(&b));
    assert_eq!(first, fs::read(run_dir(&b).join("metrics.json")).unwrap());
    assert_eq!(
        model,
        fs::read(run_dir(&b).join("models/wilks.json")).unwrap()
    );

    let other = l96(
        tmp.path(),
        &cfg,
        &["--seed", "12", "fit-ar", "--method", "wilks"],
    );
    assert!(other.status.success());
    assert_ne!(run_dir(&a), run_dir(&other));
}

#[test]
fn evaluate_accepts_a_saved_model() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", SMALL);
    let fit = l96(tmp.path(), &cfg, &["fit", "wilks"]);
    assert!(
        fit.status.success(),
        "{}",
        String::from_utf8_lossy(&fit.stderr)
    );
    let model = run_dir(&fit).join("models/wilks.json");
    let model = model.to_str().unwrap();
    let out = l96(tmp.path(), &cfg, &["evaluate", "--model", model]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir(&out).join("metrics.json")).unwrap())
            .unwrap();
    let row = &metrics["rows"][0];
    assert!(row["mspe"].as_f64().unwrap() > 0.0);
    assert!(row["avg_kl"].as_f64().unwrap() >= 0.0);

    let garbage = write_config(tmp.path(), "model.json", "{\"kind\": \"nope\"}");
    let out = l96(
        tmp.path(),
        &cfg,
        &["evaluate", "--model", garbage.to_str().unwrap()],
    );
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn enkf_and_figures_write_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", SMALL);
    let out = l96(tmp.path(), &cfg, &["enkf", "--variant", "ar-wilks"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(run_dir(&out).join("enkf_ar-wilks.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("t,"));
    assert!(header.ends_with("l1_error"));

    let out = l96(tmp.path(), &cfg, &["reproduce", "fig4"]);
    assert!(out.status.success());
    let acf = fs::read_to_string(run_dir(&out).join("fig4_acf_X1.csv")).unwrap();
    let first: Vec<&str> = acf.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(first[0], "0");
    assert_eq!(first[2].parse::<f64>().unwrap(), 1.0);
}
