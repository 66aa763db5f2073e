use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sgs_routing::harness::{self, DiagnoseOptions, RunConfig, RunOptions};
use sgs_routing::policy::PolicyParams;
use sgs_routing::Error;

#[derive(Parser)]
#[command(name = "sgs-route", version, about = "Learned dynamic routing over parallel exponential servers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `system.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `output` in the config, then `runs/<command>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run even when the system cannot be stabilized.
    #[arg(long)]
    force: bool,
    /// Worker threads for replications (0 = all cores).
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Args)]
struct WeightsArg {
    /// Weights CSV written by `train`.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Row of the weights file to use.
    #[arg(long, default_value_t = 0)]
    replication: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Train with restrained semi-gradient SARSA.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a frozen policy: the trained softmax policy (`sgs`), `greedy`, `jsq` or `bernoulli`.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        weights: WeightsArg,
        #[arg(long, default_value = "sgs")]
        policy: String,
        /// Bernoulli routing probabilities, comma separated (defaults to p ∝ μ).
        #[arg(long, value_delimiter = ',')]
        p: Option<Vec<f64>>,
        /// Overrides `evaluation.horizon`.
        #[arg(long)]
        horizon: Option<u64>,
        /// Overrides `evaluation.replications`.
        #[arg(long)]
        replications: Option<u64>,
    },
    /// Compare the trained policy against the configured baselines.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        weights: WeightsArg,
    },
    /// Solve the truncated MDP exactly.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        weights: WeightsArg,
    },
    /// Stabilizability, basis growth and drift certificate.
    Check {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        weights: WeightsArg,
    },
    /// Trajectory diagnostics over a saved trajectory.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Trajectory file (JSON lines or binary).
        #[arg(long)]
        trajectory: PathBuf,
        #[command(flatten)]
        weights: WeightsArg,
        /// ν for the MGF average; needs --weights.
        #[arg(long)]
        nu: Option<f64>,
        #[arg(long, default_value_t = 100_000)]
        window: u64,
        #[arg(long, default_value_t = 10_000)]
        tv_window: usize,
    },
}

fn load(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.system.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &RunConfig, command: &str) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| Path::new("runs").join(command))
}

fn weights(arg: &WeightsArg) -> Result<Option<Vec<f64>>, Error> {
    arg.weights.as_deref().map(|p| harness::read_weights(p, arg.replication)).transpose()
}

fn require_weights(arg: &WeightsArg) -> Result<Vec<f64>, Error> {
    weights(arg)?.ok_or_else(|| Error::Config {
        field: "--weights".into(),
        message: "this command needs a weights file".into(),
    })
}

fn options(common: &Common, cfg: &RunConfig, command: &str) -> RunOptions {
    RunOptions {
        out: out_dir(common, cfg, command),
        force: common.force,
        workers: common.workers,
    }
}

fn json(value: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(value).unwrap_or_default()
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Train { common } => {
            let cfg = load(&common)?;
            let s = harness::cmd_train(&cfg, &options(&common, &cfg, "train"))?;
            for r in &s.runs {
                println!(
                    "replication {}: average cost {:.5}, restrained steps {}, {:.2} s",
                    r.replication,
                    r.average_cost(),
                    r.restrained_steps,
                    r.wall_seconds
                );
            }
            println!("basis growth check: {}", if s.assumption1.pass { "pass" } else { "fail" });
            println!("artifacts in {}", s.out.display());
        }
        Command::Evaluate {
            common,
            weights: warg,
            policy,
            p,
            horizon,
            replications,
        } => {
            let cfg = load(&common)?;
            let w = weights(&warg)?;
            let params = match policy.as_str() {
                "sgs" | "softmax" => cfg.policy.clone(),
                "greedy" => PolicyParams::Greedy,
                "jsq" => PolicyParams::Jsq,
                "bernoulli" => match p {
                    Some(p) => PolicyParams::Bernoulli { p },
                    None => harness::Baseline::BernoulliProportional.policy(&cfg.system),
                },
                other => {
                    return Err(Error::Config {
                        field: "--policy".into(),
                        message: format!("unknown policy `{other}`"),
                    })
                }
            };
            let row = harness::cmd_evaluate(
                &cfg,
                &policy,
                &params,
                w.as_deref(),
                horizon.unwrap_or(cfg.evaluation.horizon),
                replications.unwrap_or(cfg.evaluation.replications),
                common.workers,
            )?;
            println!(
                "{}: average cost {:.5} ± {:.5} (SE), average |x| {:.4}, {} × {} epochs",
                row.name, row.average_cost, row.standard_error, row.average_queue, row.replications, row.horizon
            );
        }
        Command::Compare { common, weights: warg } => {
            let cfg = load(&common)?;
            let w = require_weights(&warg)?;
            let table = harness::cmd_compare(&cfg, &w, &options(&common, &cfg, "compare"))?;
            print!("{}", table.to_text());
        }
        Command::Oracle { common, weights: warg } => {
            let cfg = load(&common)?;
            let w = weights(&warg)?;
            let out = out_dir(&common, &cfg, "oracle");
            let r = harness::cmd_oracle(&cfg, w.as_deref(), &out)?;
            println!("states: {}, value-iteration sweeps: {}", r.n_states, r.value_iteration_sweeps);
            println!("boundary mass: optimal {:.3e}, fixed point {:.3e}", r.boundary_mass_optimal, r.boundary_mass_fixed);
            println!("fixed-point residual {:.3e} after {} iterations", r.fixed_point_residual, r.fixed_point_iterations);
            if let Some(e) = &r.projection_error {
                println!("projection of Q* skipped: {e}");
            }
            if let Some(a) = r.distance_to_w_star {
                println!("|w - w*| = {a:.6}");
            }
            if let Some(b) = r.distance_to_w_fixed {
                println!("|w - w_fixed| = {b:.6}");
            }
            println!("artifacts in {}", out.display());
        }
        Command::Check { common, weights: warg } => {
            let cfg = load(&common)?;
            let w = weights(&warg)?;
            let r = harness::cmd_check(&cfg, w.as_deref())?;
            println!("{}", json(&r));
            eprintln!(
                "stabilizable: {}, basis growth: {}, drift certificate: {} (nu = {:e})",
                yes_no(r.stabilizable),
                pass_fail(r.assumption1.pass),
                pass_fail(r.drift.pass),
                r.drift.nu
            );
            if !r.pass {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Diagnose {
            common,
            trajectory,
            weights: warg,
            nu,
            window,
            tv_window,
        } => {
            let cfg = load(&common)?;
            let mgf = match (weights(&warg)?, nu) {
                (Some(w), Some(nu)) => Some((w, nu)),
                (None, None) => None,
                _ => {
                    return Err(Error::Config {
                        field: "--nu".into(),
                        message: "the MGF average needs both --weights and --nu".into(),
                    })
                }
            };
            let out = out_dir(&common, &cfg, "diagnose");
            let opts = DiagnoseOptions { window, tv_window, mgf };
            let r = harness::cmd_diagnose(&cfg, &trajectory, &opts, &out)?;
            println!("epochs {}, time-average |x| {:.5}", r.epochs, r.time_average_queue);
            if let Some(c) = r.last_window_change {
                println!("last window change {:.3}%", 100.0 * c);
            }
            if let (Some(v), Some(d)) = (r.mgf_final, r.mgf_final_half_drift) {
                println!("MGF average {v:.6}, drift over final half {:.3}%", 100.0 * d);
            }
            println!("artifacts in {}", out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

fn pass_fail(b: bool) -> &'static str {
    if b {
        "pass"
    } else {
        "fail"
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
