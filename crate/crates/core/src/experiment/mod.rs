//! Experiment orchestration on top of the trainer: multi-seed runs with
//! on-disk artifacts, fine-tuning, the consensus-iteration ablation, the
//! matrix-game failure case and plot-data aggregation.

mod config;
mod records;

pub use config::{ExperimentConfig, KEYS};
pub use records::{
    read_evals, read_metrics, write_evals, write_metrics, write_table, write_timing, EVAL_HEADER,
    METRICS_HEADER, TIMING_HEADER,
};

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::env::{EnvSpec, JointObservation, MatrixGameSpec, OraclePolicy, DEFAULT_STATE_BOUND};
use crate::error::{Error, Result};
use crate::compressor::Compressor;
use crate::nn::{Activation, Decoder, Encoder, Mlp};
use crate::params::{Binding, ParameterStore};
use crate::policy::{ActMode, DecisionCache, ModelConfig, ModelKind, PolicyModel};
use crate::rl::{ppo_losses, LossTargets, PpoConfig};
use crate::tensor::{grad_check, GradCheckReport, Tape, Tensor, Var};
use crate::trainer::{
    evaluate_policy, mean, population_std, restore, save_checkpoint, EvalRow, FinetuneMode, ReturnStats,
    TrainConfig, TrainOutcome, Trainer,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Final numbers of one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub dir: PathBuf,
    /// Last greedy evaluation, if any were run.
    pub final_eval: Option<EvalRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSummary {
    pub seeds: Vec<SeedResult>,
}

impl ExperimentSummary {
    pub fn final_returns(&self) -> Vec<f64> {
        self.seeds
            .iter()
            .map(|s| s.final_eval.as_ref().map_or(f64::NAN, |e| e.mean_return))
            .collect()
    }
}

pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed_{seed}"))
}

fn write_run(dir: &Path, trainer: &Trainer) -> Result<()> {
    write_metrics(&dir.join("metrics.csv"), trainer.metrics())?;
    write_timing(&dir.join("timing.csv"), trainer.metrics())?;
    write_evals(&dir.join("eval.csv"), trainer.evals())
}

/// Runs the trainer to completion, leaving artifacts in `dir`. On failure
/// the partial metrics and an `error.txt` are written before returning.
fn drive(dir: &Path, mut trainer: Trainer, effective: &str, log: &mut dyn FnMut(&str)) -> Result<TrainOutcome> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.effective"), effective)?;
    let seed = trainer.config().seed;
    let result = trainer.run(|row, eval| {
        if let Some(e) = eval {
            log(&format!(
                "seed {seed} update {} steps {} train return {:.4} greedy return {:.4}",
                row.update, row.env_steps, row.mean_return, e.mean_return
            ));
        }
    });
    write_run(dir, &trainer)?;
    if let Err(e) = result {
        fs::write(dir.join("error.txt"), format!("{e}\n"))?;
        return Err(e);
    }
    save_checkpoint(trainer.store(), &trainer.config().model, dir.join(CHECKPOINT_FILE))?;
    Ok(trainer.into_outcome())
}

fn summarize(root: &Path, results: &[SeedResult]) -> Result<()> {
    let mut rows: Vec<Vec<String>> = results
        .iter()
        .map(|r| {
            let (g, d) = r
                .final_eval
                .as_ref()
                .map_or((f64::NAN, f64::NAN), |e| (e.mean_return, e.discounted_return));
            vec![r.seed.to_string(), g.to_string(), d.to_string()]
        })
        .collect();
    let greedy: Vec<f64> = results
        .iter()
        .map(|r| r.final_eval.as_ref().map_or(f64::NAN, |e| e.mean_return))
        .collect();
    let disc: Vec<f64> = results
        .iter()
        .map(|r| r.final_eval.as_ref().map_or(f64::NAN, |e| e.discounted_return))
        .collect();
    let stat = |f: fn(&[f64]) -> Option<f64>, xs: &[f64]| f(xs).unwrap_or(f64::NAN).to_string();
    rows.push(vec!["mean".into(), stat(mean, &greedy), stat(mean, &disc)]);
    rows.push(vec!["std".into(), stat(population_std, &greedy), stat(population_std, &disc)]);
    write_table(
        &root.join("summary.csv"),
        &["seed", "final_greedy_return", "final_discounted_return"],
        &rows,
    )
}

/// Trains every configured seed from scratch.
pub fn run_experiment(cfg: &ExperimentConfig, log: &mut dyn FnMut(&str)) -> Result<ExperimentSummary> {
    let mut results = Vec::new();
    for &seed in &cfg.seeds {
        let dir = seed_dir(&cfg.output_dir, seed);
        let effective = ExperimentConfig {
            seeds: vec![seed],
            ..cfg.clone()
        };
        let trainer = Trainer::new(cfg.for_seed(seed))?;
        let outcome = drive(&dir, trainer, &effective.to_text(), log)?;
        results.push(SeedResult {
            seed,
            dir,
            final_eval: outcome.evals.last().cloned(),
        });
    }
    summarize(&cfg.output_dir, &results)?;
    Ok(ExperimentSummary { seeds: results })
}

/// Fine-tunes a trained checkpoint for every configured seed. The model
/// architecture comes from the checkpoint; its kind must match `model`.
pub fn run_finetune(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    mode: FinetuneMode,
    log: &mut dyn FnMut(&str),
) -> Result<ExperimentSummary> {
    let (model, store) = restore(checkpoint, Some(cfg.train.model.kind))?;
    let mut results = Vec::new();
    for &seed in &cfg.seeds {
        let dir = seed_dir(&cfg.output_dir, seed);
        let mut train = cfg.for_seed(seed);
        train.model = model.config().clone();
        let effective = ExperimentConfig {
            train: train.clone(),
            seeds: vec![seed],
            output_dir: cfg.output_dir.clone(),
        };
        let mut trainer = Trainer::with_parameters(train, store.clone())?;
        trainer.apply_finetune_mask(mode)?;
        let outcome = drive(&dir, trainer, &effective.to_text(), log)?;
        results.push(SeedResult {
            seed,
            dir,
            final_eval: outcome.evals.last().cloned(),
        });
    }
    summarize(&cfg.output_dir, &results)?;
    Ok(ExperimentSummary { seeds: results })
}

/// Plays `episodes` episodes with a checkpointed model.
pub fn run_evaluate(
    spec: &EnvSpec,
    checkpoint: &Path,
    episodes: usize,
    mode: ActMode,
    gamma: f64,
    seed: u64,
) -> Result<ReturnStats> {
    let (model, store) = restore(checkpoint, None)?;
    crate::trainer::evaluate(&model, &store, spec, episodes, mode, gamma, seed)
}

/// One ablation arm.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationArm {
    pub label: String,
    pub kind: ModelKind,
    pub m: usize,
    pub summary: ExperimentSummary,
}

/// `m ∈ {0, ⌊n/2⌋, n, 2n}` with the pooled consensus, plus the
/// last-vector variant at `m = n`.
pub fn ablation_arms(n: usize) -> Vec<(String, ModelKind, usize)> {
    let mut ms = vec![0, n / 2, n, 2 * n];
    ms.dedup();
    let mut arms: Vec<_> = ms
        .into_iter()
        .map(|m| (format!("m_{m}"), ModelKind::Cmat, m))
        .collect();
    arms.push(("last_consensus".into(), ModelKind::CmatLastConsensus, n));
    arms
}

/// Runs every ablation arm into its own subdirectory and writes one curve
/// file per arm plus `ablation.csv` with the final greedy returns.
pub fn ablate_m(cfg: &ExperimentConfig, log: &mut dyn FnMut(&str)) -> Result<Vec<AblationArm>> {
    if !cfg.train.model.kind.is_consensus() {
        return Err(Error::config(format!(
            "ablate-m needs a consensus model, config selects {}",
            cfg.train.model.kind
        )));
    }
    let n = cfg.train.model.n_agents;
    let mut arms = Vec::new();
    let mut table = Vec::new();
    for (label, kind, m) in ablation_arms(n) {
        let mut arm = cfg.clone();
        arm.output_dir = cfg.output_dir.join(&label);
        arm.train.model.kind = kind;
        arm.train.model = arm.train.model.with_iterations(m);
        log(&format!("ablation arm {label}"));
        let summary = run_experiment(&arm, log)?;
        let dirs: Vec<PathBuf> = summary.seeds.iter().map(|s| s.dir.clone()).collect();
        for w in emit_plot_data(&dirs, &cfg.output_dir.join(format!("{label}.csv")))? {
            log(&w);
        }
        for s in &summary.seeds {
            let ret = s.final_eval.as_ref().map_or(f64::NAN, |e| e.mean_return);
            table.push(vec![label.clone(), m.to_string(), s.seed.to_string(), ret.to_string()]);
        }
        arms.push(AblationArm {
            label,
            kind,
            m,
            summary,
        });
    }
    write_table(
        &cfg.output_dir.join("ablation.csv"),
        &["arm", "m", "seed", "final_greedy_return"],
        &table,
    )?;
    Ok(arms)
}

/// Where a matrix-game run ended up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixOutcome {
    /// `(B, B)`, the global optimum.
    Optimal,
    /// `(A, A)`, the Pareto-dominated equilibrium.
    Suboptimal,
    Other,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FailureCaseRun {
    pub kind: ModelKind,
    pub seed: u64,
    pub greedy_action: Vec<usize>,
    pub greedy_return: f64,
    pub outcome: MatrixOutcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FailureCaseReport {
    pub runs: Vec<FailureCaseRun>,
    /// Optimal return of the game.
    pub oracle: f64,
}

impl FailureCaseReport {
    pub fn rate(&self, kind: ModelKind, outcome: MatrixOutcome) -> f64 {
        let runs: Vec<_> = self.runs.iter().filter(|r| r.kind == kind).collect();
        if runs.is_empty() {
            return f64::NAN;
        }
        runs.iter().filter(|r| r.outcome == outcome).count() as f64 / runs.len() as f64
    }

    pub fn render(&self) -> String {
        let mut s = format!("oracle optimum: {}\n", self.oracle);
        for kind in [ModelKind::Cmat, ModelKind::MatSequential] {
            s += &format!(
                "{kind}: (B,B) rate {:.3}, (A,A) rate {:.3}, other {:.3}\n",
                self.rate(kind, MatrixOutcome::Optimal),
                self.rate(kind, MatrixOutcome::Suboptimal),
                self.rate(kind, MatrixOutcome::Other)
            );
        }
        s
    }
}

/// Trains the consensus model and the sequential baseline on the matrix
/// game with the entropy bonus off, `seeds` seeds each, and tallies which
/// equilibrium the greedy policies settle on. Training settings other than
/// the environment, model kind and entropy coefficient come from `cfg`.
pub fn run_failure_case(cfg: &ExperimentConfig, seeds: usize, log: &mut dyn FnMut(&str)) -> Result<FailureCaseReport> {
    let spec = MatrixGameSpec::default();
    let env = EnvSpec::Matrix(spec.clone());
    let mut runs = Vec::new();
    for kind in [ModelKind::Cmat, ModelKind::MatSequential] {
        for seed in 0..seeds as u64 {
            let mut train = TrainConfig::new(env.clone(), kind)?;
            let base = &cfg.train.model;
            train.model = ModelConfig {
                kind,
                d_model: base.d_model,
                heads: base.heads,
                encoder_blocks: base.encoder_blocks,
                decoder_blocks: base.decoder_blocks,
                compressor_heads: base.compressor_heads,
                ..train.model
            };
            train.ppo = PpoConfig {
                entropy_coef: 0.0,
                ..cfg.train.ppo.clone()
            };
            train.total_steps = cfg.train.total_steps;
            train.workers = cfg.train.workers;
            train.horizon = cfg.train.horizon;
            train.eval_interval = 0;
            train.seed = seed;
            let mut trainer = Trainer::new(train)?;
            trainer.run(|_, _| {})?;
            let obs = env.build().map(|mut e| crate::env::Environment::reset(&mut e))?;
            let mut cache = DecisionCache::new();
            let mut rng = [ChaCha8Rng::seed_from_u64(seed)];
            let d = trainer
                .model()
                .decide(trainer.store(), &[obs], ActMode::Greedy, &mut rng, &mut cache)?;
            let action = d[0].actions.clone();
            let outcome = match (action[0], action[1]) {
                (1, 1) => MatrixOutcome::Optimal,
                (0, 0) => MatrixOutcome::Suboptimal,
                _ => MatrixOutcome::Other,
            };
            let greedy_return = spec.reward(action[0], action[1]);
            log(&format!("{kind} seed {seed}: greedy {action:?} return {greedy_return}"));
            runs.push(FailureCaseRun {
                kind,
                seed,
                greedy_action: action,
                greedy_return,
                outcome,
            });
        }
    }
    let oracle = env.oracle_optimal_return(cfg.train.ppo.gamma, DEFAULT_STATE_BOUND)?;
    Ok(FailureCaseReport { runs, oracle })
}

pub fn write_failure_case(report: &FailureCaseReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let rows: Vec<Vec<String>> = report
        .runs
        .iter()
        .map(|r| {
            vec![
                r.kind.to_string(),
                r.seed.to_string(),
                r.greedy_action[0].to_string(),
                r.greedy_action[1].to_string(),
                r.greedy_return.to_string(),
                format!("{:?}", r.outcome).to_lowercase(),
            ]
        })
        .collect();
    write_table(
        &dir.join("failure_case.csv"),
        &["model", "seed", "agent1_action", "agent2_action", "greedy_return", "outcome"],
        &rows,
    )?;
    fs::write(dir.join("failure_case.txt"), report.render())?;
    Ok(())
}

/// Aggregates `metrics.csv` of several runs into one
/// `env_steps,mean_return,std_return,runs` file; the standard deviation is
/// the population one. Runs on different step grids are resampled onto the
/// coarsest grid, carrying each run's last value forward, and a warning is
/// returned.
pub fn emit_plot_data(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<String>> {
    if run_dirs.is_empty() {
        return Err(Error::config("plot data needs at least one run directory"));
    }
    let runs = run_dirs
        .iter()
        .map(|d| read_metrics(&d.join("metrics.csv")))
        .collect::<Result<Vec<_>>>()?;
    let grids: Vec<Vec<usize>> = runs.iter().map(|r| r.iter().map(|m| m.env_steps).collect()).collect();
    let mut warnings = Vec::new();
    let grid = if grids.iter().all(|g| *g == grids[0]) {
        grids[0].clone()
    } else {
        let coarsest = grids.iter().min_by_key(|g| g.len()).cloned().unwrap_or_default();
        warnings.push(format!(
            "warning: runs use different step grids; resampled onto the coarsest ({} points)",
            coarsest.len()
        ));
        coarsest
    };
    let rows: Vec<Vec<String>> = grid
        .iter()
        .map(|&step| {
            let values: Vec<f64> = runs
                .iter()
                .filter_map(|r| {
                    r.iter()
                        .take_while(|m| m.env_steps <= step)
                        .last()
                        .or(r.first())
                        .map(|m| m.mean_return)
                })
                .collect();
            vec![
                step.to_string(),
                mean(&values).unwrap_or(f64::NAN).to_string(),
                population_std(&values).unwrap_or(f64::NAN).to_string(),
                values.len().to_string(),
            ]
        })
        .collect();
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    write_table(out, &["env_steps", "mean_return", "std_return", "runs"], &rows)?;
    Ok(warnings)
}

/// Exact optimum and the greedy-extraction check for an environment.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub optimal_return: f64,
    pub greedy_rollout_return: f64,
}

pub fn oracle_report(spec: &EnvSpec, gamma: f64) -> Result<OracleReport> {
    let optimal_return = spec.oracle_optimal_return(gamma, DEFAULT_STATE_BOUND)?;
    let mut policy = match spec {
        EnvSpec::Matrix(s) => OraclePolicy::new(&crate::env::MatrixGame::new(s.clone())?, gamma, DEFAULT_STATE_BOUND)?,
        EnvSpec::Spread(s) => OraclePolicy::new(&crate::env::SpreadGrid::new(s.clone())?, gamma, DEFAULT_STATE_BOUND)?,
    };
    let stats = evaluate_policy(spec, &mut policy, 1, gamma)?;
    Ok(OracleReport {
        optimal_return,
        greedy_rollout_return: stats.discounted[0],
    })
}

/// A small model of `kind` for gradient checks: width 8, two heads, one
/// encoder and one decoder block, two agents with three actions.
pub fn small_model_config(kind: ModelKind) -> ModelConfig {
    let mut cfg = ModelConfig::new(kind, 5, 3, 2);
    cfg.d_model = 8;
    cfg.heads = 2;
    cfg.encoder_blocks = 1;
    cfg.decoder_blocks = 1;
    cfg.compressor_heads = 2;
    cfg
}

/// Random joint observations of shape `[n, width]`, standard normal entries.
pub fn random_observations(n_agents: usize, width: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<JointObservation> {
    (0..count)
        .map(|_| {
            let agents = (0..n_agents)
                .map(|_| (0..width).map(|_| StandardNormal.sample(rng)).collect())
                .collect();
            JointObservation::new(agents, 0).expect("uniform widths")
        })
        .collect()
}

/// Central-difference check of `critic + actor` over every parameter of a
/// small model on a random batch. Behaviour log-probs sit slightly off the
/// current policy so ratios differ from 1 but stay inside the clip range.
pub fn model_grad_check(kind: ModelKind, seed: u64, h: f64, tol: f64) -> Result<GradCheckReport> {
    let cfg = small_model_config(kind);
    let (model, store) = PolicyModel::build(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let batch = 6;
    let obs = random_observations(cfg.n_agents, cfg.obs_width, batch, &mut rng);
    let actions: Vec<Vec<usize>> = (0..batch)
        .map(|b| (0..cfg.n_agents).map(|i| (b + 2 * i) % cfg.n_actions).collect())
        .collect();
    let current = {
        let mut tape = Tape::new();
        let p = store.bind_constant(&mut tape);
        let e = model.evaluate(&mut tape, &p, &obs, &actions)?;
        tape.value(e.log_probs).data().to_vec()
    };
    let behavior: Vec<Vec<f64>> = current
        .chunks(cfg.n_agents)
        .map(|row| {
            row.iter()
                .map(|lp| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    lp - 0.02 * z.clamp(-2.0, 2.0)
                })
                .collect()
        })
        .collect();
    let advantages: Vec<f64> = (0..batch).map(|_| StandardNormal.sample(&mut rng)).collect();
    let returns: Vec<f64> = (0..batch).map(|_| StandardNormal.sample(&mut rng)).collect();
    let ppo = PpoConfig {
        entropy_coef: 0.0,
        value_coef: 1.0,
        ..PpoConfig::default()
    };
    let inputs: Vec<Tensor> = store.iter().map(|(_, _, p)| p.value.clone()).collect();
    let trainable = vec![true; inputs.len()];
    let form = model.loss_form();
    let report = grad_check(
        |tape, vars| {
            let p = Binding::from_vars(vars.to_vec());
            let e = model.evaluate(tape, &p, &obs, &actions).map_err(to_tensor_err)?;
            let targets = LossTargets {
                behavior_log_probs: &behavior,
                advantages: &advantages,
                returns: &returns,
            };
            let terms = ppo_losses(tape, &e, form, targets, &ppo).map_err(to_tensor_err)?;
            tape.add(terms.actor, terms.critic)
        },
        &inputs,
        &trainable,
        h,
        tol,
    )?;
    Ok(report)
}

fn to_tensor_err(e: Error) -> crate::tensor::TensorError {
    match e {
        Error::Tensor(t) => t,
        other => crate::tensor::TensorError::Contract(other.to_string()),
    }
}

/// Central-difference checks of each building block on its own, with
/// random inputs and a random linear read-out as the scalar loss. Inputs are
/// checked along with parameters.
pub fn block_grad_checks(seed: u64, h: f64, tol: f64) -> Result<Vec<(String, GradCheckReport)>> {
    let cfg = small_model_config(ModelKind::Cmat);
    let (d, heads, n) = (cfg.d_model, cfg.heads, cfg.n_agents);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = 3;
    let steps = 3;
    let mut normal = |shape: &[usize]| -> Result<Tensor> {
        let len = shape.iter().product();
        Ok(Tensor::new(shape.to_vec(), (0..len).map(|_| StandardNormal.sample(&mut rng)).collect())?)
    };

    let mut stores = Vec::new();
    let mut init = ChaCha8Rng::seed_from_u64(seed ^ 0xb10c);
    let mut add = |name: &str| {
        stores.push(name.to_string());
        ParameterStore::new(name)
    };

    let mut embed_store = add("embed");
    let embed = Mlp::new(&mut embed_store, "embed", &[cfg.obs_width, d, d], Activation::Relu, &mut init)?;
    let mut enc_store = add("encoder");
    let encoder = Encoder::new(&mut enc_store, "encoder", d, heads, 2, &mut init)?;
    let mut cc_store = add("critic_compressor");
    let critic_compressor = Compressor::critic(&mut cc_store, d, cfg.compressor_heads, &mut init)?;
    let mut dec_store = add("decoder");
    let decoder = Decoder::new(&mut dec_store, "decoder", d, heads, 2, &mut init)?;
    let mut ac_store = add("actor_compressor");
    let actor_compressor = Compressor::actor(&mut ac_store, d, cfg.compressor_heads, &mut init)?;
    let mut am_store = add("actor_mlp");
    let actor_mlp = Mlp::new(&mut am_store, "actor_mlp", &[2 * d, d, cfg.n_actions], Activation::Relu, &mut init)?;

    type Block<'a> = Box<dyn Fn(&mut Tape<'_>, &Binding, &[Var]) -> Result<Var> + 'a>;
    let cases: Vec<(ParameterStore, Vec<Tensor>, Block<'_>)> = vec![
        (
            embed_store,
            vec![normal(&[batch, n, cfg.obs_width])?],
            Box::new(|t, p, x| embed.forward(t, p, x[0])),
        ),
        (
            enc_store,
            vec![normal(&[batch, n, d])?],
            Box::new(|t, p, x| encoder.forward(t, p, x[0])),
        ),
        (
            cc_store,
            vec![normal(&[batch, n, d])?],
            Box::new(|t, p, x| critic_compressor.compress(t, p, x[0])),
        ),
        (
            dec_store,
            vec![normal(&[batch, steps, d])?, normal(&[batch, n, d])?],
            Box::new(|t, p, x| decoder.forward(t, p, x[0], x[1])),
        ),
        (
            ac_store,
            vec![normal(&[batch, steps, d])?],
            Box::new(|t, p, x| actor_compressor.compress(t, p, x[0])),
        ),
        (
            am_store,
            vec![normal(&[batch, n, 2 * d])?],
            Box::new(|t, p, x| actor_mlp.forward(t, p, x[0])),
        ),
    ];

    let mut reports = Vec::new();
    for ((store, data, block), name) in cases.into_iter().zip(stores) {
        let params = store.len();
        let mut inputs: Vec<Tensor> = store.iter().map(|(_, _, p)| p.value.clone()).collect();
        inputs.extend(data);
        let readout_shape = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
            let p = Binding::from_vars(vars[..params].to_vec());
            let y = block(&mut tape, &p, &vars[params..])?;
            tape.shape(y).to_vec()
        };
        let readout = normal(&readout_shape)?;
        let trainable = vec![true; inputs.len()];
        let report = grad_check(
            |tape, vars| {
                let p = Binding::from_vars(vars[..params].to_vec());
                let y = block(tape, &p, &vars[params..]).map_err(to_tensor_err)?;
                let w = tape.constant(readout.clone());
                let prod = tape.mul(y, w)?;
                Ok(tape.sum(prod))
            },
            &inputs,
            &trainable,
            h,
            tol,
        )?;
        reports.push((name, report));
    }
    Ok(reports)
}
