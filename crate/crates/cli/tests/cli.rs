use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn preset(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets").join(name);
    std::fs::read_to_string(path).unwrap()
}

/// Toy preset cut down to a few thousand epochs, with a JSONL trajectory.
fn small_toy() -> String {
    preset("toy.toml")
        .replace("horizon = 1000000\n", "horizon = 5000\ntrajectory = \"jsonl\"\n")
        .replace("checkpoints = [1000, 10000, 100000, 1000000]", "checkpoints = [1000]")
        .replace("horizon = 100000\nreplications = 4", "horizon = 2000\nreplications = 2")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn sgs_route(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgs-route")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_compare_diagnose_and_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "toy.toml", &small_toy());
    let train = dir.path().join("train");
    let out = sgs_route(&["train", "--config", s(&cfg), "--out", s(&train)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["weights.csv", "trace.csv", "metrics.csv", "summary.csv", "trajectory.jsonl", "metadata.toml"] {
        assert!(train.join(f).exists(), "{f}");
    }

    // rerunning overwrites with identical results
    let first = std::fs::read(train.join("weights.csv")).unwrap();
    let again = sgs_route(&["train", "--config", s(&cfg), "--out", s(&train)]);
    assert_eq!(code(&again), 0);
    assert_eq!(std::fs::read(train.join("weights.csv")).unwrap(), first);

    let weights = train.join("weights.csv");
    let cmp = dir.path().join("compare");
    let out = sgs_route(&["compare", "--config", s(&cfg), "--out", s(&cmp), "--weights", s(&weights)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("SGS/JSQ cost ratio"));
    assert!(cmp.join("comparison.csv").exists());

    let diag = dir.path().join("diagnose");
    let traj = train.join("trajectory.jsonl");
    let out = sgs_route(&[
        "diagnose", "--config", s(&cfg), "--out", s(&diag), "--trajectory", s(&traj),
        "--weights", s(&weights), "--nu", "0.001", "--window", "1000", "--tv-window", "1000",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(diag.join("diagnose.json").exists());

    let orc = dir.path().join("oracle");
    let out = sgs_route(&["oracle", "--config", s(&cfg), "--out", s(&orc), "--weights", s(&weights)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("states: 81"));
}

#[test]
fn evaluate_baselines() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "toy.toml", &small_toy());
    for policy in [["--policy", "jsq"], ["--policy", "bernoulli"]] {
        let mut args = vec!["evaluate", "--config", s(&cfg)];
        args.extend(policy);
        let out = sgs_route(&args);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).contains("average cost"));
    }
    let out = sgs_route(&["evaluate", "--config", s(&cfg), "--policy", "jsq", "--horizon", "0"]);
    assert_eq!(code(&out), 2);
    let out = sgs_route(&["evaluate", "--config", s(&cfg), "--policy", "greedy"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("weights"));
    let out = sgs_route(&["evaluate", "--config", s(&cfg), "--policy", "fastest"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn check_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let stable = write_config(dir.path(), "stable.toml", &preset("three_server.toml"));
    let out = sgs_route(&["check", "--config", s(&stable)]);
    assert!(matches!(code(&out), 0 | 1));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["stabilizable"], true);

    let overloaded = preset("three_server.toml").replacen("lambda = ", "lambda = 10.0\n# was ", 1);
    let overloaded = write_config(dir.path(), "overloaded.toml", &overloaded);
    let out = sgs_route(&["check", "--config", s(&overloaded)]);
    assert_eq!(code(&out), 1);
    let out = sgs_route(&["train", "--config", s(&overloaded), "--out", s(&dir.path().join("t"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.toml", &format!("unknown_key = 1\n{}", small_toy()));
    let out = sgs_route(&["train", "--config", s(&bad), "--out", s(&dir.path().join("t"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown_key"));

    let missing = dir.path().join("missing.toml");
    assert_eq!(code(&sgs_route(&["train", "--config", s(&missing)])), 2);
}

#[test]
fn divergence_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let text = small_toy()
        .replace("schedule = { alpha0 = 0.05, tau = 5000 }", "schedule = { alpha0 = 50.0, tau = 5000 }\ndivergence_ceiling = 100.0");
    let cfg = write_config(dir.path(), "diverge.toml", &text);
    let out = sgs_route(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("t"))]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}
