//! Experiment plumbing: run configuration, replication orchestration, result
//! tables and artifact files. The CLI is a thin wrapper over the `cmd_*`
//! functions here.

pub mod trajectory_io;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diagnostics::{self, DriftOptions, DriftReport, MgfSeries, WindowStat};
use crate::error::{Error, Result};
use crate::features::{check_assumption1, Assumption1Report, Assumption1Scope, BasisFn, BasisSpec, Features};
use crate::learner::{train, CostModel, LearnerParams, LearnerState, Snapshot, TrainOptions};
use crate::oracle::{
    boundary_mass, build_truncated, greedy_policy, optimal_weights, sarsa_fixed_point, stationary_distribution, value_iteration,
    FixedPointOptions, PolicyTable,
};
use crate::policy::{ActionSampler, PolicyParams, ValueModel};
use crate::queueing::{is_stabilizable, Simulator, State, SystemConfig, TimeMode};
use crate::rng::{stream, RngStreams, Stream};

pub use trajectory_io::{read_trajectory, write_trajectory, TrajectoryFormat};

pub const VERSION: &str = concat!("sgs-routing ", env!("CARGO_PKG_VERSION"));

/// Evaluation replications draw from streams disjoint from training ones.
pub const EVAL_REPLICATION_BASE: u64 = 1 << 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BasisConfig {
    /// (1 + x^0.01, x^0.2, x, x^1.5) on every server.
    Standard,
    /// One list shared by all servers; the highest-degree entry is inferred.
    Uniform { fns: Vec<BasisFn> },
    Explicit { per_server: Vec<Vec<BasisFn>>, highest: usize },
}

impl BasisConfig {
    pub fn spec(&self, n_servers: usize) -> Result<BasisSpec> {
        let spec = match self {
            BasisConfig::Standard => BasisSpec::standard(n_servers),
            BasisConfig::Uniform { fns } => BasisSpec::uniform(fns.clone(), n_servers)?,
            BasisConfig::Explicit { per_server, highest } => BasisSpec {
                per_server: per_server.clone(),
                highest: *highest,
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Comparison rows besides the trained policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Baseline {
    Jsq,
    /// Greedy on the trained Q̂.
    Greedy,
    Bernoulli { p: Vec<f64> },
    /// Bernoulli with p_n = μ_n / Σμ.
    BernoulliProportional,
}

impl Baseline {
    pub fn name(&self) -> &'static str {
        match self {
            Baseline::Jsq => "jsq",
            Baseline::Greedy => "greedy",
            Baseline::Bernoulli { .. } => "bernoulli",
            Baseline::BernoulliProportional => "bernoulli_proportional",
        }
    }

    pub fn policy(&self, system: &SystemConfig) -> PolicyParams {
        match self {
            Baseline::Jsq => PolicyParams::Jsq,
            Baseline::Greedy => PolicyParams::Greedy,
            Baseline::Bernoulli { p } => PolicyParams::Bernoulli { p: p.clone() },
            Baseline::BernoulliProportional => {
                let total = system.total_service();
                PolicyParams::Bernoulli {
                    p: system.mu.iter().map(|m| m / total).collect(),
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub horizon: u64,
    pub replications: u64,
    pub baselines: Vec<Baseline>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            horizon: 1_000_000,
            replications: 10,
            baselines: vec![Baseline::Jsq, Baseline::BernoulliProportional],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub x_max: u32,
    /// Defaults to the learner's discount.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default = "OracleConfig::default_tol")]
    pub tol: f64,
    #[serde(default = "OracleConfig::default_damping")]
    pub damping: f64,
    #[serde(default = "OracleConfig::default_max_iter")]
    pub max_iter: usize,
}

impl OracleConfig {
    fn default_tol() -> f64 {
        1e-10
    }
    fn default_damping() -> f64 {
        0.5
    }
    fn default_max_iter() -> usize {
        3000
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckConfig {
    /// Window [0, x_max] for the basis growth check.
    pub assumption_x_max: u64,
    pub scope: Assumption1Scope,
    pub drift: DriftOptions,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            assumption_x_max: 10_000,
            scope: Assumption1Scope::HighestOnly,
            drift: DriftOptions::default(),
        }
    }
}

fn one() -> u64 {
    1
}

/// Everything a run depends on. The base seed is `system.seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemConfig,
    pub basis: BasisConfig,
    pub cost: CostModel,
    /// Training policy; must be softmax.
    pub policy: PolicyParams,
    #[serde(default)]
    pub learner: LearnerParams,
    pub horizon: u64,
    #[serde(default = "one")]
    pub replications: u64,
    #[serde(default)]
    pub time_mode: TimeMode,
    #[serde(default)]
    pub snapshot_every: u64,
    #[serde(default)]
    pub checkpoints: Vec<u64>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Save the replication-0 training trajectory in this format.
    #[serde(default)]
    pub trajectory: Option<TrajectoryFormat>,
    #[serde(default)]
    pub evaluation: EvalConfig,
    #[serde(default)]
    pub oracle: Option<OracleConfig>,
    #[serde(default)]
    pub check: CheckConfig,
}

fn in_field<T>(field: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config { .. } => e,
        other => Error::config(field, other.to_string()),
    })
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            let field = e
                .span()
                .and_then(|s| text.get(s))
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty() && s.len() < 80)
                .unwrap_or_else(|| "config".to_string());
            Error::config(field, message)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn seed(&self) -> u64 {
        self.system.seed
    }

    pub fn iota(&self) -> f64 {
        match self.policy {
            PolicyParams::Softmax { iota } => iota,
            _ => unreachable!("validated as softmax"),
        }
    }

    pub fn features(&self) -> Result<Features> {
        in_field("basis", self.basis.spec(self.system.n_servers())?.compile())
    }

    pub fn validate(&self) -> Result<()> {
        let n = in_field("system", self.system.validate().map(|_| self.system.n_servers()))?;
        let spec = in_field("basis", self.basis.spec(n))?;
        if spec.n_servers() != n {
            return Err(Error::config("basis", format!("basis has {} servers, system has {n}", spec.n_servers())));
        }
        in_field("cost", self.cost.validate(n))?;
        in_field("policy", self.policy.validate(n))?;
        if !matches!(self.policy, PolicyParams::Softmax { .. }) {
            return Err(Error::config("policy", "the training policy must be softmax"));
        }
        in_field("learner", self.learner.validate())?;
        if let crate::learner::WeightInit::Explicit { w } = &self.learner.init {
            if w.len() != spec.dim() {
                return Err(Error::config("learner.init", format!("explicit weights have length {}, basis needs {}", w.len(), spec.dim())));
            }
        }
        if self.replications == 0 {
            return Err(Error::config("replications", "must be at least 1"));
        }
        if let TimeMode::FixedStep { step } = self.time_mode {
            if !(step > 0.0 && step * (self.system.lambda + self.system.total_service()) <= 1.0) {
                return Err(Error::config("time_mode.step", "fixed step must be positive and at most 1/(λ + Σμ)"));
            }
        }
        for b in &self.evaluation.baselines {
            in_field("evaluation.baselines", b.policy(&self.system).validate(n))?;
        }
        if let Some(o) = &self.oracle {
            if let Some(g) = o.gamma {
                if !(0.0..1.0).contains(&g) {
                    return Err(Error::config("oracle.gamma", format!("must lie in [0, 1), got {g}")));
                }
            }
            if o.x_max == 0 {
                return Err(Error::config("oracle.x_max", "must be at least 1"));
            }
            if !(o.damping > 0.0 && o.damping <= 1.0) {
                return Err(Error::config("oracle.damping", "must lie in (0, 1]"));
            }
        }
        let d = &self.check.drift;
        if d.b_l > d.x_check || d.grid_len == 0 || !(d.nu_base > 0.0) {
            return Err(Error::config("check.drift", "need b_l ≤ x_check, nu_base > 0 and grid_len ≥ 1"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out: PathBuf,
    /// Run even when λ ≥ Σμ.
    pub force: bool,
    /// Worker threads for replications; 0 picks the machine default.
    pub workers: usize,
}

/// Process exit code for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence { .. } => 3,
        _ => 2,
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn csv_bytes(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn weight_header(prefix: &[&str], dim: usize) -> Vec<String> {
    prefix.iter().map(|s| s.to_string()).chain((0..dim).map(|i| format!("w_{i}"))).collect()
}

fn fmt(v: f64) -> String {
    format!("{v:e}")
}

fn run_parallel<T: Send>(workers: usize, count: u64, f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::arg(format!("thread pool: {e}")))?;
    let results: Vec<Result<T>> = pool.install(|| (0..count).into_par_iter().map(&f).collect());
    results.into_iter().collect()
}

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::config("--out", format!("{}: {e}", out.display())))
}

#[derive(Clone, Debug, Serialize)]
pub struct Metadata {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub wall_seconds: f64,
    pub stabilizable: bool,
    pub assumption1_pass: Option<bool>,
    pub notes: Vec<String>,
    pub config: RunConfig,
}

fn write_metadata(out: &Path, meta: &Metadata) -> Result<()> {
    let text = toml::to_string(meta).map_err(|e| Error::config("metadata", e.to_string()))?;
    write_atomic(&out.join("metadata.toml"), text.as_bytes())
}

fn refuse_unstable(cfg: &RunConfig, force: bool) -> Result<()> {
    if !is_stabilizable(&cfg.system) && !force {
        return Err(Error::config(
            "system",
            format!(
                "λ = {} is not below Σμ = {}; the system cannot be stabilized (use --force to run anyway)",
                cfg.system.lambda,
                cfg.system.total_service()
            ),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct ReplicationRun {
    pub replication: u64,
    pub w: Vec<f64>,
    pub trace: Vec<Snapshot>,
    pub restrained_steps: u64,
    pub total_time: f64,
    pub total_cost: f64,
    pub wall_seconds: f64,
}

impl ReplicationRun {
    pub fn average_cost(&self) -> f64 {
        if self.total_time > 0.0 {
            self.total_cost / self.total_time
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub out: PathBuf,
    pub config_hash: String,
    pub assumption1: Assumption1Report,
    pub runs: Vec<ReplicationRun>,
}

/// Trains one replication. Replication `r` uses streams `(seed, r)` for
/// events, holding times and actions and `(seed, r, Init)` for the initial weights.
pub fn train_replication(cfg: &RunConfig, features: &Features, replication: u64, record_trajectory: bool) -> Result<(ReplicationRun, Option<crate::queueing::Trajectory>)> {
    let start = Instant::now();
    let seed = cfg.seed();
    let learner = LearnerState::new(&cfg.learner, features, &mut stream(seed, replication, Stream::Init))?;
    let opts = TrainOptions {
        time_mode: cfg.time_mode,
        initial_state: None,
        snapshot_every: cfg.snapshot_every,
        checkpoints: cfg.checkpoints.clone(),
        record_trajectory,
    };
    let out = train(
        &cfg.system,
        features,
        &cfg.cost,
        &cfg.policy,
        learner,
        cfg.horizon,
        RngStreams::new(seed, replication),
        &opts,
        cfg.learner.divergence_ceiling,
        |_| {},
    )?;
    Ok((
        ReplicationRun {
            replication,
            w: out.learner.w,
            trace: out.trace,
            restrained_steps: out.restrained_steps,
            total_time: out.total_time,
            total_cost: out.total_cost,
            wall_seconds: start.elapsed().as_secs_f64(),
        },
        out.trajectory,
    ))
}

/// Trains every replication and writes `weights.csv`, `trace.csv`,
/// `metrics.csv`, `summary.csv`, `timing.csv`, `metadata.toml` and optionally
/// the replication-0 trajectory.
pub fn cmd_train(cfg: &RunConfig, opts: &RunOptions) -> Result<TrainSummary> {
    let start = Instant::now();
    cfg.validate()?;
    refuse_unstable(cfg, opts.force)?;
    let features = cfg.features()?;
    let spec = features.spec().clone();
    let assumption1 = in_field("basis", check_assumption1(&spec, &cfg.system, cfg.check.assumption_x_max, cfg.check.scope))?;
    prepare_out(&opts.out)?;
    let results = run_parallel(opts.workers, cfg.replications, |r| {
        train_replication(cfg, &features, r, r == 0 && cfg.trajectory.is_some())
    })?;
    let dim = features.dim();
    let mut runs = Vec::with_capacity(results.len());
    let mut trajectory = None;
    for (run, t) in results {
        if t.is_some() {
            trajectory = t;
        }
        runs.push(run);
    }

    let weights = csv_bytes(
        &weight_header(&["replication"], dim),
        runs.iter().map(|r| std::iter::once(r.replication.to_string()).chain(r.w.iter().map(|v| fmt(*v))).collect()),
    )?;
    write_atomic(&opts.out.join("weights.csv"), &weights)?;
    let trace = csv_bytes(
        &weight_header(&["replication", "k"], dim),
        runs.iter().flat_map(|r| {
            r.trace.iter().map(move |s| {
                [r.replication.to_string(), s.k.to_string()]
                    .into_iter()
                    .chain(s.w.iter().map(|v| fmt(*v)))
                    .collect()
            })
        }),
    )?;
    write_atomic(&opts.out.join("trace.csv"), &trace)?;
    let metrics = csv_bytes(
        &["replication", "k", "window_cost", "window_q_len", "b_alpha_max", "min_highest_weight"].map(String::from),
        runs.iter().flat_map(|r| {
            r.trace.iter().map(move |s| {
                vec![
                    r.replication.to_string(),
                    s.k.to_string(),
                    fmt(s.window_cost),
                    fmt(s.window_q_len),
                    fmt(s.b_alpha_max),
                    fmt(s.min_highest_weight),
                ]
            })
        }),
    )?;
    write_atomic(&opts.out.join("metrics.csv"), &metrics)?;
    let summary = csv_bytes(
        &["replication", "epochs", "total_time", "average_cost", "restrained_steps"].map(String::from),
        runs.iter().map(|r| {
            vec![
                r.replication.to_string(),
                cfg.horizon.to_string(),
                fmt(r.total_time),
                fmt(r.average_cost()),
                r.restrained_steps.to_string(),
            ]
        }),
    )?;
    write_atomic(&opts.out.join("summary.csv"), &summary)?;
    let timing = csv_bytes(
        &["replication", "wall_seconds"].map(String::from),
        runs.iter().map(|r| vec![r.replication.to_string(), format!("{:.3}", r.wall_seconds)]),
    )?;
    write_atomic(&opts.out.join("timing.csv"), &timing)?;
    if let (Some(t), Some(format)) = (&trajectory, cfg.trajectory) {
        let path = opts.out.join(format!("trajectory.{}", format.extension()));
        let tmp = path.with_extension("tmp");
        write_trajectory(t, &tmp, format)?;
        fs::rename(&tmp, &path)?;
    }
    let mut notes = Vec::new();
    if !assumption1.pass {
        notes.push("basis growth check failed".to_string());
    }
    write_metadata(
        &opts.out,
        &Metadata {
            command: "train".into(),
            version: VERSION.into(),
            config_hash: cfg.hash(),
            seed: cfg.seed(),
            wall_seconds: start.elapsed().as_secs_f64(),
            stabilizable: is_stabilizable(&cfg.system),
            assumption1_pass: Some(assumption1.pass),
            notes,
            config: cfg.clone(),
        },
    )?;
    Ok(TrainSummary {
        out: opts.out.clone(),
        config_hash: cfg.hash(),
        assumption1,
        runs,
    })
}

/// Reads a weights CSV (as written by `cmd_train`) and returns the row of
/// the given replication.
pub fn read_weights(path: &Path, replication: u64) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::config("--weights", format!("{}: {e}", path.display())))?;
    let headers = r.headers()?.clone();
    let first = headers.iter().take_while(|h| !h.starts_with("w_")).count();
    for rec in r.records() {
        let rec = rec?;
        let rep: u64 = if first == 0 {
            0
        } else {
            rec[0].parse().map_err(|_| Error::config("--weights", "replication column is not an integer"))?
        };
        if rep == replication {
            return rec
                .iter()
                .skip(first)
                .map(|v| v.trim().parse::<f64>().map_err(|_| Error::config("--weights", format!("not a number: {v}"))))
                .collect();
        }
    }
    Err(Error::config("--weights", format!("no row for replication {replication} in {}", path.display())))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub name: String,
    /// Mean over replications of (Σ cost) / (Σ holding time).
    pub average_cost: f64,
    pub standard_error: f64,
    pub average_queue: f64,
    pub replications: u64,
    pub horizon: u64,
    pub wall_seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReplicationEval {
    pub average_cost: f64,
    pub average_queue: f64,
}

/// Simulates a frozen policy for `horizon` epochs from the empty state.
pub fn evaluate_replication(
    cfg: &RunConfig,
    features: &Features,
    policy: &PolicyParams,
    w: Option<&[f64]>,
    horizon: u64,
    streams: RngStreams,
) -> Result<ReplicationEval> {
    let n = cfg.system.n_servers();
    let model = match w {
        Some(w) => Some(ValueModel::new(features, w)?),
        None => None,
    };
    let mut sampler = ActionSampler::new(policy.clone(), n);
    let mut sim = Simulator::new(&cfg.system, State::zeros(n), cfg.time_mode, streams)?;
    let (mut cost, mut time, mut area) = (0.0, 0.0, 0.0);
    for _ in 0..horizon {
        let q = sim.state().total() as f64;
        let x = sim.state().clone();
        let a = sampler.sample(model.as_ref(), x.as_slice(), sim.actions_rng())?;
        let (_, dt) = sim.step(a)?;
        cost += cfg.cost.one_step(sim.state(), dt);
        time += dt;
        area += q * dt;
    }
    if !(time > 0.0) {
        return Err(Error::Numeric("evaluation accumulated no time".into()));
    }
    Ok(ReplicationEval {
        average_cost: cost / time,
        average_queue: area / time,
    })
}

/// Freezes a policy and averages its cost over independent replications.
/// Replication `r` uses streams `(seed, EVAL_REPLICATION_BASE + r)`.
#[allow(clippy::too_many_arguments)]
pub fn cmd_evaluate(
    cfg: &RunConfig,
    name: &str,
    policy: &PolicyParams,
    w: Option<&[f64]>,
    horizon: u64,
    replications: u64,
    workers: usize,
) -> Result<EvalRow> {
    let start = Instant::now();
    if horizon == 0 {
        return Err(Error::config("evaluation.horizon", "an evaluation needs at least one epoch"));
    }
    if replications == 0 {
        return Err(Error::config("evaluation.replications", "must be at least 1"));
    }
    let features = cfg.features()?;
    in_field("policy", policy.validate(cfg.system.n_servers()))?;
    if policy.needs_weights() {
        let w = w.ok_or_else(|| Error::config("--weights", format!("policy `{}` needs trained weights", policy.name())))?;
        if w.len() != features.dim() {
            return Err(Error::config("--weights", format!("weights have length {}, basis needs {}", w.len(), features.dim())));
        }
    }
    let seed = cfg.seed();
    let reps = run_parallel(workers, replications, |r| {
        evaluate_replication(cfg, &features, policy, w, horizon, RngStreams::new(seed, EVAL_REPLICATION_BASE + r))
    })?;
    let m = reps.len() as f64;
    let mean = reps.iter().map(|r| r.average_cost).sum::<f64>() / m;
    let se = if reps.len() > 1 {
        let var = reps.iter().map(|r| (r.average_cost - mean).powi(2)).sum::<f64>() / (m - 1.0);
        (var / m).sqrt()
    } else {
        0.0
    };
    Ok(EvalRow {
        name: name.to_string(),
        average_cost: mean,
        standard_error: se,
        average_queue: reps.iter().map(|r| r.average_queue).sum::<f64>() / m,
        replications,
        horizon,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub name: String,
    pub average_cost: f64,
    pub standard_error: f64,
    pub normalized_cost: f64,
    pub average_queue: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub base: String,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    /// Normalizes every row by the row named `base`.
    pub fn new(rows: &[EvalRow], base: &str) -> Result<Self> {
        let b = rows
            .iter()
            .find(|r| r.name == base)
            .ok_or_else(|| Error::arg(format!("no row named `{base}` to normalize by")))?;
        if !(b.average_cost > 0.0) {
            return Err(Error::Numeric(format!("base row `{base}` has non-positive cost {}", b.average_cost)));
        }
        let base_cost = b.average_cost;
        Ok(ComparisonTable {
            base: base.to_string(),
            rows: rows
                .iter()
                .map(|r| ComparisonRow {
                    name: r.name.clone(),
                    average_cost: r.average_cost,
                    standard_error: r.standard_error,
                    normalized_cost: if r.name == base { 1.0 } else { r.average_cost / base_cost },
                    average_queue: r.average_queue,
                    wall_seconds: r.wall_seconds,
                })
                .collect(),
        })
    }

    pub fn row(&self, name: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// cost(sgs) / cost(jsq), when both rows are present.
    pub fn sgs_jsq_ratio(&self) -> Option<f64> {
        Some(self.row("sgs")?.average_cost / self.row("jsq")?.average_cost)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        csv_bytes(
            &["policy", "average_cost", "standard_error", "normalized_cost", "average_queue", "wall_seconds"].map(String::from),
            self.rows.iter().map(|r| {
                vec![
                    r.name.clone(),
                    fmt(r.average_cost),
                    fmt(r.standard_error),
                    fmt(r.normalized_cost),
                    fmt(r.average_queue),
                    format!("{:.3}", r.wall_seconds),
                ]
            }),
        )
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<24} {:>12} {:>10} {:>11} {:>10} {:>9}\n",
            "policy", "avg cost", "std err", "normalized", "avg |x|", "wall s"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<24} {:>12.5} {:>10.5} {:>11.3} {:>10.4} {:>9.2}\n",
                r.name, r.average_cost, r.standard_error, r.normalized_cost, r.average_queue, r.wall_seconds
            ));
        }
        s.push_str(&format!("normalized by `{}`\n", self.base));
        if let Some(ratio) = self.sgs_jsq_ratio() {
            s.push_str(&format!("SGS/JSQ cost ratio: {ratio:.4}\n"));
        }
        s
    }
}

/// Evaluates the trained softmax policy (row `sgs`) and every configured
/// baseline, and writes `comparison.csv` and `comparison.txt`.
pub fn cmd_compare(cfg: &RunConfig, w: &[f64], opts: &RunOptions) -> Result<ComparisonTable> {
    let start = Instant::now();
    cfg.validate()?;
    refuse_unstable(cfg, opts.force)?;
    let e = &cfg.evaluation;
    let mut rows = vec![cmd_evaluate(cfg, "sgs", &cfg.policy, Some(w), e.horizon, e.replications, opts.workers)?];
    for b in &e.baselines {
        let p = b.policy(&cfg.system);
        rows.push(cmd_evaluate(cfg, b.name(), &p, Some(w), e.horizon, e.replications, opts.workers)?);
    }
    let table = ComparisonTable::new(&rows, "sgs")?;
    prepare_out(&opts.out)?;
    write_atomic(&opts.out.join("comparison.csv"), &table.to_csv()?)?;
    write_atomic(&opts.out.join("comparison.txt"), table.to_text().as_bytes())?;
    write_metadata(
        &opts.out,
        &Metadata {
            command: "compare".into(),
            version: VERSION.into(),
            config_hash: cfg.hash(),
            seed: cfg.seed(),
            wall_seconds: start.elapsed().as_secs_f64(),
            stabilizable: is_stabilizable(&cfg.system),
            assumption1_pass: None,
            notes: vec![],
            config: cfg.clone(),
        },
    )?;
    Ok(table)
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleReport {
    pub x_max: u32,
    pub gamma: f64,
    pub iota: f64,
    pub n_states: usize,
    pub value_iteration_sweeps: usize,
    /// Mass of d* on states with a coordinate at the cap.
    pub boundary_mass_optimal: f64,
    pub projection_residual: Option<f64>,
    pub projection_condition: Option<f64>,
    /// Set when d* leaves the feature columns singular, e.g. a server π* never uses.
    pub projection_error: Option<String>,
    pub w_star: Option<Vec<f64>>,
    pub w_fixed: Vec<f64>,
    pub fixed_point_residual: f64,
    pub fixed_point_iterations: usize,
    pub boundary_mass_fixed: f64,
    pub distance_to_w_star: Option<f64>,
    pub distance_to_w_fixed: Option<f64>,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Solves the truncated MDP and writes `q_star.csv`, `d_star.csv`,
/// `oracle_weights.csv`, `oracle.json` and `metadata.toml`.
pub fn cmd_oracle(cfg: &RunConfig, w: Option<&[f64]>, out: &Path) -> Result<OracleReport> {
    let start = Instant::now();
    cfg.validate()?;
    let oc = cfg
        .oracle
        .as_ref()
        .ok_or_else(|| Error::config("oracle", "the config has no [oracle] section"))?;
    let gamma = oc.gamma.unwrap_or(cfg.learner.gamma);
    let features = cfg.features()?;
    let mdp = in_field("oracle.x_max", build_truncated(&cfg.system, &cfg.cost, oc.x_max))?;
    let q = value_iteration(&mdp, gamma, oc.tol)?;
    let pi = greedy_policy(&q);
    let table = PolicyTable::deterministic(&pi, mdp.n_servers());
    let d_star = stationary_distribution(&mdp, &table, 1e-12)?;
    let (proj, projection_error) = match optimal_weights(&mdp, &q, &table, &d_star, &features) {
        Ok(p) => (Some(p), None),
        Err(e @ Error::RankDeficient { .. }) => (None, Some(e.to_string())),
        Err(e) => return Err(e),
    };
    let fp = sarsa_fixed_point(
        &mdp,
        &features,
        gamma,
        cfg.iota(),
        &vec![0.0; features.dim()],
        FixedPointOptions {
            tol: 1e-9,
            max_iter: oc.max_iter,
            damping: oc.damping,
            stationary_tol: 1e-11,
        },
    )?;
    if let Some(w) = w {
        if w.len() != features.dim() {
            return Err(Error::config("--weights", format!("weights have length {}, basis needs {}", w.len(), features.dim())));
        }
    }
    let report = OracleReport {
        x_max: oc.x_max,
        gamma,
        iota: cfg.iota(),
        n_states: mdp.n_states(),
        value_iteration_sweeps: q.iterations,
        boundary_mass_optimal: boundary_mass(&mdp, &d_star),
        projection_residual: proj.as_ref().map(|p| p.residual),
        projection_condition: proj.as_ref().map(|p| p.condition),
        projection_error,
        w_star: proj.as_ref().map(|p| p.w.clone()),
        w_fixed: fp.w.clone(),
        fixed_point_residual: fp.residual,
        fixed_point_iterations: fp.iterations,
        boundary_mass_fixed: fp.boundary_mass,
        distance_to_w_star: w.zip(proj.as_ref()).map(|(w, p)| distance(w, &p.w)),
        distance_to_w_fixed: w.map(|w| distance(w, &fp.w)),
    };

    prepare_out(out)?;
    let n = mdp.n_servers();
    let state_cols: Vec<String> = (0..n).map(|i| format!("x_{i}")).collect();
    let mut header = state_cols.clone();
    header.extend(["action", "q_star", "pi_star", "pi_fixed"].map(String::from));
    let q_rows = (0..mdp.n_states()).flat_map(|s| {
        let x = mdp.state(s).to_vec();
        let (q, pi, fp) = (&q, &pi, &fp);
        (0..n).map(move |a| {
            x.iter()
                .map(|v| v.to_string())
                .chain([a.to_string(), fmt(q.get(s, a)), ((pi[s] == a) as u8).to_string(), fmt(fp.policy.get(s, a))])
                .collect()
        })
    });
    write_atomic(&out.join("q_star.csv"), &csv_bytes(&header, q_rows)?)?;
    let mut header = state_cols;
    header.extend(["d_star", "d_fixed"].map(String::from));
    let d_rows = (0..mdp.n_states()).map(|s| {
        mdp.state(s)
            .iter()
            .map(|v| v.to_string())
            .chain([fmt(d_star[s]), fmt(fp.d[s])])
            .collect()
    });
    write_atomic(&out.join("d_star.csv"), &csv_bytes(&header, d_rows)?)?;
    let w_rows = [("w_star", report.w_star.as_ref()), ("w_fixed", Some(&report.w_fixed))]
        .into_iter()
        .filter_map(|(name, w)| w.map(|w| (name, w)))
        .map(|(name, w)| std::iter::once(name.to_string()).chain(w.iter().map(|v| fmt(*v))).collect());
    write_atomic(&out.join("oracle_weights.csv"), &csv_bytes(&weight_header(&["name"], features.dim()), w_rows)?)?;
    write_atomic(&out.join("oracle.json"), &serde_json::to_vec_pretty(&report)?)?;
    write_metadata(
        out,
        &Metadata {
            command: "oracle".into(),
            version: VERSION.into(),
            config_hash: cfg.hash(),
            seed: cfg.seed(),
            wall_seconds: start.elapsed().as_secs_f64(),
            stabilizable: is_stabilizable(&cfg.system),
            assumption1_pass: None,
            notes: vec![],
            config: cfg.clone(),
        },
    )?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub stabilizable: bool,
    pub assumption1: Assumption1Report,
    pub weights_source: String,
    pub drift: DriftReport,
    pub pass: bool,
}

/// Stabilizability, basis growth and the drift certificate. Without weights
/// the certificate uses the configured initial weights of replication 0.
pub fn cmd_check(cfg: &RunConfig, w: Option<&[f64]>) -> Result<CheckReport> {
    cfg.validate()?;
    let features = cfg.features()?;
    let assumption1 = in_field(
        "basis",
        check_assumption1(features.spec(), &cfg.system, cfg.check.assumption_x_max, cfg.check.scope),
    )?;
    let (weights, source) = match w {
        Some(w) => {
            if w.len() != features.dim() {
                return Err(Error::config("--weights", format!("weights have length {}, basis needs {}", w.len(), features.dim())));
            }
            (w.to_vec(), "weights file".to_string())
        }
        None => {
            let l = LearnerState::new(&cfg.learner, &features, &mut stream(cfg.seed(), 0, Stream::Init))?;
            (l.w, "initial weights".to_string())
        }
    };
    let drift = diagnostics::find_nu(&cfg.system, &features, &weights, cfg.iota(), &cfg.check.drift)?;
    let stabilizable = is_stabilizable(&cfg.system);
    let pass = stabilizable && assumption1.pass && drift.pass;
    Ok(CheckReport {
        stabilizable,
        assumption1,
        weights_source: source,
        drift,
        pass,
    })
}

#[derive(Clone, Debug)]
pub struct DiagnoseOptions {
    /// Epochs per stability window.
    pub window: u64,
    /// Epochs per total-variation window.
    pub tv_window: usize,
    /// Weights and ν for the MGF average.
    pub mgf: Option<(Vec<f64>, f64)>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DiagnoseReport {
    pub epochs: usize,
    pub total_time: f64,
    pub time_average_queue: f64,
    pub last_window_change: Option<f64>,
    pub windows: Vec<WindowStat>,
    pub tv_distances: Vec<f64>,
    pub mgf_final: Option<f64>,
    pub mgf_final_half_drift: Option<f64>,
    pub mgf_overflow_at: Option<u64>,
}

/// Runs the trajectory monitors over a saved trajectory and writes
/// `windows.csv`, `tv.csv`, `mgf.csv` (when requested) and `diagnose.json`.
pub fn cmd_diagnose(cfg: &RunConfig, trajectory: &Path, opts: &DiagnoseOptions, out: &Path) -> Result<DiagnoseReport> {
    cfg.validate()?;
    let t = read_trajectory(trajectory)?;
    if t.n_servers != cfg.system.n_servers() {
        return Err(Error::config("--trajectory", "trajectory and config disagree on the number of servers"));
    }
    let stab = diagnostics::stability_metrics(&t, opts.window)?;
    let tv = if t.len() >= 2 * opts.tv_window {
        diagnostics::tv_window_distance(&t, opts.tv_window)?
    } else {
        Vec::new()
    };
    let mgf: Option<MgfSeries> = match &opts.mgf {
        Some((w, nu)) if !t.is_empty() => Some(diagnostics::mgf_time_average(&t, &cfg.features()?, w, *nu)?),
        _ => None,
    };
    prepare_out(out)?;
    let windows = csv_bytes(
        &["window", "start_epoch", "epochs", "time", "mean_queue"].map(String::from),
        stab.windows.iter().map(|w| {
            vec![
                w.index.to_string(),
                w.start_epoch.to_string(),
                w.epochs.to_string(),
                fmt(w.time),
                fmt(w.mean_queue),
            ]
        }),
    )?;
    write_atomic(&out.join("windows.csv"), &windows)?;
    let tv_csv = csv_bytes(
        &["pair", "tv"].map(String::from),
        tv.iter().enumerate().map(|(i, d)| vec![i.to_string(), fmt(*d)]),
    )?;
    write_atomic(&out.join("tv.csv"), &tv_csv)?;
    if let Some(m) = &mgf {
        let stride = (m.running.len() / 1000).max(1);
        let rows = m
            .running
            .iter()
            .enumerate()
            .filter(|(k, _)| k % stride == 0 || *k + 1 == m.running.len())
            .map(|(k, v)| vec![k.to_string(), fmt(*v)]);
        write_atomic(&out.join("mgf.csv"), &csv_bytes(&["k", "running_mean"].map(String::from), rows)?)?;
    }
    let report = DiagnoseReport {
        epochs: t.len(),
        total_time: stab.total_time,
        time_average_queue: stab.time_average_queue,
        last_window_change: stab.last_window_change(),
        windows: stab.windows.clone(),
        tv_distances: tv,
        mgf_final: mgf.as_ref().and_then(|m| m.final_value()),
        mgf_final_half_drift: mgf.as_ref().and_then(|m| m.final_half_drift()),
        mgf_overflow_at: mgf.as_ref().and_then(|m| m.overflow_at),
    };
    write_atomic(&out.join("diagnose.json"), &serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}
