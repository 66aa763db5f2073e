use std::fs;
use std::path::PathBuf;

use sgs_routing::harness::{
    cmd_check, cmd_compare, cmd_evaluate, cmd_oracle, cmd_train, read_trajectory, read_weights, train_replication, write_trajectory,
    RunConfig, RunOptions, TrajectoryFormat,
};
use sgs_routing::policy::PolicyParams;
use sgs_routing::Error;

fn preset(name: &str) -> RunConfig {
    RunConfig::load(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../presets").join(name)).unwrap()
}

fn small_three_server() -> RunConfig {
    let mut c = preset("three_server.toml");
    c.horizon = 20_000;
    c.snapshot_every = 5_000;
    c.replications = 3;
    c.trajectory = Some(TrajectoryFormat::Jsonl);
    c.evaluation.horizon = 5_000;
    c.evaluation.replications = 2;
    c
}

fn opts(out: PathBuf) -> RunOptions {
    RunOptions {
        out,
        force: false,
        workers: 2,
    }
}

#[test]
fn presets_parse() {
    for name in ["three_server.toml", "toy.toml"] {
        let c = preset(name);
        c.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }
}

#[test]
fn train_artifacts_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_three_server();
    let a = cmd_train(&cfg, &opts(dir.path().join("a"))).unwrap();
    let b = cmd_train(&cfg, &opts(dir.path().join("b"))).unwrap();
    assert_eq!(a.config_hash, b.config_hash);
    for f in ["weights.csv", "trace.csv", "metrics.csv", "summary.csv", "trajectory.jsonl"] {
        let x = fs::read(dir.path().join("a").join(f)).unwrap();
        let y = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
    let meta = fs::read_to_string(dir.path().join("a/metadata.toml")).unwrap();
    assert!(meta.contains(&a.config_hash));
    assert!(meta.contains("assumption1_pass = true"));
    assert!(dir.path().join("a/timing.csv").exists());
    let trace = fs::read_to_string(dir.path().join("a/trace.csv")).unwrap();
    // Header plus 4 snapshots for each of 3 replications.
    assert_eq!(trace.lines().count(), 1 + 12);
}

#[test]
fn replications_do_not_depend_on_execution_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_three_server();
    let mut serial = opts(dir.path().join("serial"));
    serial.workers = 1;
    cmd_train(&cfg, &serial).unwrap();
    cmd_train(&cfg, &opts(dir.path().join("parallel"))).unwrap();
    assert_eq!(
        fs::read(dir.path().join("serial/weights.csv")).unwrap(),
        fs::read(dir.path().join("parallel/weights.csv")).unwrap()
    );
    let features = cfg.features().unwrap();
    let (alone, _) = train_replication(&cfg, &features, 2, false).unwrap();
    assert_eq!(read_weights(&dir.path().join("serial/weights.csv"), 2).unwrap(), alone.w.iter().map(|v| format!("{v:e}").parse().unwrap()).collect::<Vec<f64>>());
}

#[test]
fn zero_horizon_training_writes_empty_trace() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_three_server();
    cfg.horizon = 0;
    cfg.replications = 1;
    let s = cmd_train(&cfg, &opts(dir.path().to_path_buf())).unwrap();
    assert_eq!(s.runs[0].trace.len(), 0);
    let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1);
}

#[test]
fn unstable_systems_are_refused_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_three_server();
    cfg.system.lambda = 10.0;
    cfg.horizon = 100;
    match cmd_train(&cfg, &opts(dir.path().join("x"))) {
        Err(Error::Config { field, .. }) => assert_eq!(field, "system"),
        other => panic!("{other:?}"),
    }
    let mut forced = opts(dir.path().join("y"));
    forced.force = true;
    assert!(cmd_train(&cfg, &forced).is_ok());
    let report = cmd_check(&cfg, None).unwrap();
    assert!(!report.stabilizable && !report.pass);
}

#[test]
fn divergence_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_three_server();
    cfg.learner.schedule.alpha0 = 50.0;
    cfg.learner.divergence_ceiling = 100.0;
    cfg.replications = 1;
    match cmd_train(&cfg, &opts(dir.path().to_path_buf())) {
        Err(e @ Error::Divergence { .. }) => assert_eq!(sgs_routing::harness::exit_code(&e), 3),
        other => panic!("{other:?}"),
    }
}

#[test]
fn trajectory_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_three_server();
    let features = cfg.features().unwrap();
    let (_, t) = train_replication(&cfg, &features, 0, true).unwrap();
    let t = t.unwrap();
    for format in [TrajectoryFormat::Jsonl, TrajectoryFormat::Binary] {
        let path = dir.path().join(format!("t.{}", format.extension()));
        write_trajectory(&t, &path, format).unwrap();
        assert_eq!(TrajectoryFormat::sniff(&path).unwrap(), format);
        assert_eq!(read_trajectory(&path).unwrap(), t);
    }
    let bad = dir.path().join("bad.bin");
    let mut bytes = fs::read(dir.path().join("t.bin")).unwrap();
    bytes.truncate(bytes.len() / 2);
    fs::write(&bad, bytes).unwrap();
    assert!(read_trajectory(&bad).is_err());
}

#[test]
fn compare_normalizes_by_sgs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_three_server();
    let s = cmd_train(&cfg, &opts(dir.path().join("train"))).unwrap();
    let table = cmd_compare(&cfg, &s.runs[0].w, &opts(dir.path().join("cmp"))).unwrap();
    assert_eq!(table.row("sgs").unwrap().normalized_cost, 1.0);
    assert_eq!(table.rows.len(), 1 + cfg.evaluation.baselines.len());
    assert!(table.sgs_jsq_ratio().is_some());
    let csv = fs::read_to_string(dir.path().join("cmp/comparison.csv")).unwrap();
    assert!(csv.starts_with("policy,average_cost,standard_error,normalized_cost,average_queue,wall_seconds"));
    assert!(fs::read_to_string(dir.path().join("cmp/comparison.txt")).unwrap().contains("SGS/JSQ"));
}

#[test]
fn evaluation_checks_weight_dimension() {
    let cfg = small_three_server();
    let err = cmd_evaluate(&cfg, "sgs", &cfg.policy, Some(&[0.0; 5]), 100, 1, 1).unwrap_err();
    assert!(matches!(err, Error::Config { .. }));
    let row = cmd_evaluate(&cfg, "bern", &PolicyParams::Bernoulli { p: vec![0.0625, 0.3125, 0.625] }, None, 20_000, 3, 1).unwrap();
    assert!(row.average_cost.is_finite() && row.standard_error >= 0.0);
}

#[test]
fn toy_oracle_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = preset("toy.toml");
    let r = cmd_oracle(&cfg, Some(&[0.5; 8]), dir.path()).unwrap();
    assert_eq!(r.n_states, 81);
    assert!(r.boundary_mass_fixed < 1e-6);
    assert!(r.distance_to_w_fixed.is_some());
    for f in ["q_star.csv", "d_star.csv", "oracle_weights.csv", "oracle.json", "metadata.toml"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let mut too_big = cfg.clone();
    too_big.system.mu = vec![1.0; 8];
    too_big.basis = sgs_routing::harness::BasisConfig::Standard;
    too_big.cost = sgs_routing::learner::CostModel::AggregateLog;
    too_big.oracle.as_mut().unwrap().x_max = 20;
    assert!(matches!(cmd_oracle(&too_big, None, dir.path()), Err(Error::Config { .. })));
}

#[test]
fn gamma_zero_oracle_equals_expected_cost() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = preset("toy.toml");
    cfg.oracle.as_mut().unwrap().gamma = Some(0.0);
    let report = cmd_oracle(&cfg, None, dir.path()).unwrap();
    // ties go to server 0, so server 1's columns carry no mass under d*
    assert!(report.w_star.is_none() && report.projection_error.is_some());
    let mdp = sgs_routing::oracle::build_truncated(&cfg.system, &cfg.cost, 8).unwrap();
    let mut r = csv::Reader::from_path(dir.path().join("q_star.csv")).unwrap();
    for rec in r.records() {
        let rec = rec.unwrap();
        let x: Vec<u32> = (0..2).map(|i| rec[i].parse().unwrap()).collect();
        let a: usize = rec[2].parse().unwrap();
        let q: f64 = rec[3].parse().unwrap();
        let s = mdp.index_of(&x).unwrap();
        assert!((q - mdp.expected_cost(s, a)).abs() <= 1e-12 * (1.0 + q.abs()));
    }
}
