//! `cmat` experiment runner.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for numeric
//! failures during training, 1 for anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cmat::env::{EnvSpec, MatrixGameSpec};
use cmat::experiment::{
    ablate_m, block_grad_checks, emit_plot_data, model_grad_check, oracle_report, run_evaluate, run_experiment, run_failure_case,
    run_finetune, small_model_config, write_failure_case, ExperimentConfig,
};
use cmat::policy::{ActMode, ModelKind, PolicyModel};
use cmat::trainer::{FinetuneMode, TrainConfig};
use cmat::Error;

#[derive(Parser, Debug)]
#[command(name = "cmat", version, about = "Train and evaluate consensus multi-agent transformers")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Experiment config file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run this single seed instead of the configured list.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Output directory; for `plot-data`, the output file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress progress lines on stderr.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train every configured seed from scratch.
    Train,
    /// Continue training a checkpoint with part of the network frozen.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `consensus` or `action`.
        #[arg(long)]
        mode: FinetuneMode,
    },
    /// Play episodes with a checkpoint and report return statistics.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 32)]
        episodes: usize,
        /// Sample actions instead of acting greedily.
        #[arg(long)]
        sampled: bool,
    },
    /// Sweep the number of consensus iterations.
    AblateM,
    /// Compare equilibrium selection on the matrix game with no entropy bonus.
    FailureCase {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Aggregate training curves of several runs into one CSV.
    PlotData {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Finite-difference gradient check of the full loss on small models.
    GradCheck {
        /// Model kind; all kinds when omitted.
        #[arg(long)]
        kind: Option<ModelKind>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
    /// Exact optimal return of the configured environment.
    Oracle,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Numeric { .. } => 3,
        _ => 1,
    }
}

fn load_config(g: &Global) -> Result<ExperimentConfig, Error> {
    let path = g
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs --config".into()))?;
    apply_overrides(ExperimentConfig::load(path)?, g)
}

fn apply_overrides(mut cfg: ExperimentConfig, g: &Global) -> Result<ExperimentConfig, Error> {
    if let Some(seed) = g.seed_override {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &g.out {
        cfg.output_dir = out.clone();
    }
    if let Ok(w) = std::env::var("CMAT_WORKERS") {
        cfg.train.workers = w
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("CMAT_WORKERS: expected a positive integer, got {w:?}")))?;
    }
    cfg.train.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    let g = &cli.global;
    let quiet = g.quiet;
    let mut log = |s: &str| {
        if !quiet {
            eprintln!("{s}");
        }
    };
    match cli.command {
        Command::Train => {
            let cfg = load_config(g)?;
            let summary = run_experiment(&cfg, &mut log)?;
            for s in &summary.seeds {
                print_final(s.seed, s.final_eval.as_ref().map(|e| (e.mean_return, e.discounted_return)));
            }
            println!("artifacts in {}", cfg.output_dir.display());
        }
        Command::Finetune { checkpoint, mode } => {
            let cfg = load_config(g)?;
            let summary = run_finetune(&cfg, &checkpoint, mode, &mut log)?;
            for s in &summary.seeds {
                print_final(s.seed, s.final_eval.as_ref().map(|e| (e.mean_return, e.discounted_return)));
            }
            println!("artifacts in {}", cfg.output_dir.display());
        }
        Command::Evaluate {
            checkpoint,
            episodes,
            sampled,
        } => {
            let cfg = load_config(g)?;
            let mode = if sampled { ActMode::Sample } else { ActMode::Greedy };
            let seed = cfg.seeds.first().copied().unwrap_or(0);
            let stats = run_evaluate(&cfg.train.env, &checkpoint, episodes, mode, cfg.train.ppo.gamma, seed)?;
            let show = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{v:.6}"));
            println!("episodes {}", stats.episodes());
            println!("mean_return {}", show(stats.mean()));
            println!("std_return {}", show(stats.std()));
            println!("min_return {}", show(stats.min()));
            println!("max_return {}", show(stats.max()));
            println!("discounted_return {}", show(stats.discounted_mean()));
        }
        Command::AblateM => {
            let cfg = load_config(g)?;
            let arms = ablate_m(&cfg, &mut log)?;
            for arm in &arms {
                let returns = arm.summary.final_returns();
                let mean = returns.iter().sum::<f64>() / returns.len().max(1) as f64;
                println!("{} (m = {}): mean final greedy return {mean:.4}", arm.label, arm.m);
            }
            println!("artifacts in {}", cfg.output_dir.display());
        }
        Command::FailureCase { seeds } => {
            let cfg = match &g.config {
                Some(_) => load_config(g)?,
                None => apply_overrides(default_failure_config()?, g)?,
            };
            let report = run_failure_case(&cfg, seeds, &mut log)?;
            write_failure_case(&report, &cfg.output_dir)?;
            print!("{}", report.render());
        }
        Command::PlotData { runs } => {
            let out = g.out.clone().unwrap_or_else(|| PathBuf::from("plot.csv"));
            for w in emit_plot_data(&runs, &out)? {
                eprintln!("{w}");
            }
            println!("wrote {}", out.display());
        }
        Command::GradCheck {
            kind,
            seed,
            tolerance,
            step,
        } => {
            let kinds = kind.map_or_else(|| ModelKind::ALL.to_vec(), |k| vec![k]);
            let mut failed = Vec::new();
            for k in kinds {
                let report = model_grad_check(k, seed, step, tolerance)?;
                let (_, store) = PolicyModel::build(&small_model_config(k), seed)?;
                println!("{k}: worst relative error {:.3e}", report.worst());
                for ((_, name, _), err) in store.iter().zip(&report.max_rel_error) {
                    if let Some(err) = err {
                        log(&format!("  {name}: {err:.3e}"));
                    }
                }
                if !report.passed {
                    failed.push(k.to_string());
                }
            }
            if kind.is_none() {
                for (name, report) in block_grad_checks(seed, step, tolerance)? {
                    println!("block {name}: worst relative error {:.3e}", report.worst());
                    if !report.passed {
                        failed.push(format!("block {name}"));
                    }
                }
            }
            if !failed.is_empty() {
                return Err(Error::Contract(format!(
                    "gradient check above {tolerance:e} for {}",
                    failed.join(", ")
                )));
            }
        }
        Command::Oracle => {
            let cfg = load_config(g)?;
            let report = oracle_report(&cfg.train.env, cfg.train.ppo.gamma)?;
            println!("optimal_return {}", report.optimal_return);
            println!("greedy_rollout_return {}", report.greedy_rollout_return);
        }
    }
    Ok(())
}

fn default_failure_config() -> Result<ExperimentConfig, Error> {
    let train = TrainConfig::new(EnvSpec::Matrix(MatrixGameSpec::default()), ModelKind::Cmat)?;
    Ok(ExperimentConfig {
        train,
        seeds: vec![0],
        output_dir: Path::new("runs").join("failure_case"),
    })
}

fn print_final(seed: u64, eval: Option<(f64, f64)>) {
    match eval {
        Some((g, d)) => println!("seed {seed}: final greedy return {g:.4}, discounted {d:.4}"),
        None => println!("seed {seed}: no evaluation ran"),
    }
}
