//! The training loop: collect, estimate advantages, run PPO epochs, blend
//! the target critic. Fine-tuning reuses the same loop with a freeze mask.

mod checkpoint;
mod evaluate;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, FORMAT_VERSION, MAGIC,
};
pub use evaluate::{
    evaluate, evaluate_policy, mean, population_std, EpisodePolicy, ModelPolicy, RandomPolicy, ReturnStats,
};

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::env::{EnvSpec, JointObservation, RolloutWorkers};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::policy::{ActMode, ModelConfig, ModelKind, PolicyModel};
use crate::rl::{normalize, ppo_losses, soft_update, Adam, LossTargets, PpoConfig};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub env: EnvSpec,
    pub model: ModelConfig,
    pub ppo: PpoConfig,
    /// Environment-step budget; the run performs
    /// `total_steps / (workers * horizon)` updates.
    pub total_steps: usize,
    pub workers: usize,
    /// Steps per worker per collection phase.
    pub horizon: usize,
    /// Greedy evaluation every this many updates; 0 disables it.
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults for `kind` on `env`, with model widths taken from the
    /// environment.
    pub fn new(env: EnvSpec, kind: ModelKind) -> Result<Self> {
        let (agents, actions, width) = env.dims()?;
        Ok(Self {
            env,
            model: ModelConfig::new(kind, width, actions, agents),
            ppo: PpoConfig::default(),
            total_steps: 20_000,
            workers: 8,
            horizon: 32,
            eval_interval: 10,
            eval_episodes: 32,
            seed: 0,
        })
    }

    pub fn batch_steps(&self) -> usize {
        self.workers * self.horizon
    }

    pub fn updates(&self) -> usize {
        self.total_steps / self.batch_steps()
    }

    pub fn validate(&self) -> Result<()> {
        self.ppo.validate()?;
        self.model.validate()?;
        if self.workers == 0 || self.horizon == 0 {
            return Err(Error::config("workers and horizon must be positive"));
        }
        let (agents, actions, width) = self.env.dims()?;
        if (agents, actions, width) != (self.model.n_agents, self.model.n_actions, self.model.obs_width) {
            return Err(Error::config(format!(
                "model expects {} agents, {} actions, width {} but the {} environment has {agents}, {actions}, {width}",
                self.model.n_agents,
                self.model.n_actions,
                self.model.obs_width,
                self.env.name()
            )));
        }
        Ok(())
    }
}

/// Training statistics for one update.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub update: usize,
    pub env_steps: usize,
    /// Over episodes that finished during the update's collection phase.
    pub mean_return: f64,
    pub std_return: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub wall_seconds: f64,
}

/// Greedy evaluation taken after `update` updates.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub update: usize,
    pub env_steps: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub discounted_return: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinetuneMode {
    /// Trains the value head, decoder, positional table and actor compressor.
    Consensus,
    /// Trains the value head and the action MLP.
    Action,
}

impl FinetuneMode {
    pub fn frozen_prefixes(self) -> &'static [&'static str] {
        match self {
            FinetuneMode::Consensus => &["embed.", "encoder.", "critic_compressor.", "actor_mlp."],
            FinetuneMode::Action => &[
                "embed.",
                "encoder.",
                "decoder.",
                "pos",
                "critic_compressor.",
                "actor_compressor.",
            ],
        }
    }

    pub fn trainable_prefixes(self) -> &'static [&'static str] {
        match self {
            FinetuneMode::Consensus => &["critic_mlp.", "decoder.", "pos", "actor_compressor."],
            FinetuneMode::Action => &["critic_mlp.", "actor_mlp."],
        }
    }
}

impl fmt::Display for FinetuneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FinetuneMode::Consensus => "consensus",
            FinetuneMode::Action => "action",
        })
    }
}

impl FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "consensus" => Ok(FinetuneMode::Consensus),
            "action" => Ok(FinetuneMode::Action),
            _ => Err(Error::config(format!("unknown fine-tune mode {s:?}"))),
        }
    }
}

/// Splits parameter names into `(trainable, frozen)` for `mode`. Every
/// name must land in exactly one set.
pub fn freeze_partition(store: &ParameterStore, mode: FinetuneMode) -> Result<(Vec<String>, Vec<String>)> {
    let (mut trainable, mut frozen) = (Vec::new(), Vec::new());
    for (_, name, _) in store.iter() {
        let t = mode.trainable_prefixes().iter().any(|p| name.starts_with(p));
        let f = mode.frozen_prefixes().iter().any(|p| name.starts_with(p));
        match (t, f) {
            (true, false) => trainable.push(name.to_string()),
            (false, true) => frozen.push(name.to_string()),
            _ => {
                return Err(Error::contract(format!(
                    "parameter {name} is not covered exactly once by the {mode} freeze mask"
                )))
            }
        }
    }
    Ok((trainable, frozen))
}

/// Everything a finished run leaves behind.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PolicyModel,
    pub store: ParameterStore,
    pub target: ParameterStore,
    pub metrics: Vec<MetricRow>,
    pub evals: Vec<EvalRow>,
}

/// Mutable state of one run. Behaviour log-probabilities are recorded at
/// collection time, so the parameters in `store` at that moment act as the
/// behaviour snapshot; the target critic is a separate store written only
/// by [`soft_update`].
#[derive(Debug)]
pub struct Trainer {
    config: TrainConfig,
    model: PolicyModel,
    store: ParameterStore,
    target: ParameterStore,
    adam: Adam,
    workers: RolloutWorkers,
    shuffle: ChaCha8Rng,
    update: usize,
    env_steps: usize,
    metrics: Vec<MetricRow>,
    evals: Vec<EvalRow>,
}

fn derived_seed(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt)
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (model, store) = PolicyModel::build(&config.model, config.seed)?;
        Self::assemble(config, model, store)
    }

    /// Starts from existing parameters, which must match the configured
    /// model's layout.
    pub fn with_parameters(config: TrainConfig, store: ParameterStore) -> Result<Self> {
        config.validate()?;
        let (model, fresh) = PolicyModel::build(&config.model, config.seed)?;
        if !fresh.same_layout(&store) || store.kind() != fresh.kind() {
            return Err(Error::config(format!(
                "parameters tagged {} do not fit a {} model with this configuration",
                store.kind(),
                config.model.kind
            )));
        }
        Self::assemble(config, model, store)
    }

    fn assemble(config: TrainConfig, model: PolicyModel, store: ParameterStore) -> Result<Self> {
        let workers = RolloutWorkers::new(&config.env, config.workers, derived_seed(config.seed, 1))?;
        Ok(Self {
            adam: Adam::new(&store, config.ppo.lr),
            target: store.clone(),
            shuffle: ChaCha8Rng::seed_from_u64(derived_seed(config.seed, 3)),
            config,
            model,
            store,
            workers,
            update: 0,
            env_steps: 0,
            metrics: Vec::new(),
            evals: Vec::new(),
        })
    }

    /// Applies a fine-tune freeze mask after checking its completeness.
    pub fn apply_finetune_mask(&mut self, mode: FinetuneMode) -> Result<()> {
        if !self.model.kind().is_consensus() {
            return Err(Error::config(format!(
                "fine-tuning applies to consensus models, not {}",
                self.model.kind()
            )));
        }
        freeze_partition(&self.store, mode)?;
        self.store.unfreeze_all();
        self.store.freeze_prefixes(mode.frozen_prefixes());
        Ok(())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &PolicyModel {
        &self.model
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn target(&self) -> &ParameterStore {
        &self.target
    }

    pub fn metrics(&self) -> &[MetricRow] {
        &self.metrics
    }

    pub fn evals(&self) -> &[EvalRow] {
        &self.evals
    }

    pub fn updates_done(&self) -> usize {
        self.update
    }

    pub fn env_steps(&self) -> usize {
        self.env_steps
    }

    /// Greedy returns of the current parameters.
    pub fn evaluate_greedy(&self) -> Result<ReturnStats> {
        evaluate(
            &self.model,
            &self.store,
            &self.config.env,
            self.config.eval_episodes,
            ActMode::Greedy,
            self.config.ppo.gamma,
            derived_seed(self.config.seed, 2),
        )
    }

    fn record_eval(&mut self) -> Result<EvalRow> {
        let stats = self.evaluate_greedy()?;
        let row = EvalRow {
            update: self.update,
            env_steps: self.env_steps,
            mean_return: stats.mean().unwrap_or(f64::NAN),
            std_return: stats.std().unwrap_or(f64::NAN),
            discounted_return: stats.discounted_mean().unwrap_or(f64::NAN),
        };
        self.evals.push(row.clone());
        Ok(row)
    }

    /// One collection phase followed by the PPO epochs and a target blend.
    pub fn step(&mut self) -> Result<MetricRow> {
        let started = Instant::now();
        let update = self.update;
        let numeric = |what: String| Error::Numeric { update, what };
        let ppo = self.config.ppo.clone();

        let mut batch = self
            .workers
            .collect(&self.model, &self.store, &self.target, self.config.horizon)?;
        batch.compute_gae(ppo.gamma, ppo.lambda)?;
        let advantages = if ppo.normalize_advantages {
            normalize(&batch.advantages)
        } else {
            batch.advantages.clone()
        };

        let n = batch.len();
        let size = if ppo.minibatch_size == 0 { n } else { ppo.minibatch_size.min(n) };
        let mut order: Vec<usize> = (0..n).collect();
        let mut sums = [0.0; 5];
        let mut steps = 0usize;
        for _ in 0..ppo.epochs {
            if size < n {
                order.shuffle(&mut self.shuffle);
            }
            for chunk in order.chunks(size) {
                let obs: Vec<JointObservation> = chunk.iter().map(|&i| batch.observations[i].clone()).collect();
                let actions: Vec<Vec<usize>> = chunk.iter().map(|&i| batch.actions[i].clone()).collect();
                let behavior: Vec<Vec<f64>> = chunk.iter().map(|&i| batch.behavior_log_probs[i].clone()).collect();
                let adv: Vec<f64> = chunk.iter().map(|&i| advantages[i]).collect();
                let ret: Vec<f64> = chunk.iter().map(|&i| batch.returns[i]).collect();

                let grads: Vec<Option<Tensor>> = {
                    let mut tape = Tape::new();
                    let p = self.store.bind(&mut tape);
                    let eval = self.model.evaluate(&mut tape, &p, &obs, &actions)?;
                    let targets = LossTargets {
                        behavior_log_probs: &behavior,
                        advantages: &adv,
                        returns: &ret,
                    };
                    let terms = ppo_losses(&mut tape, &eval, self.model.loss_form(), targets, &ppo).map_err(
                        |e| match e {
                            Error::Numeric { what, .. } => numeric(what),
                            other => other,
                        },
                    )?;
                    let total = tape.value(terms.total).item();
                    if !total.is_finite() {
                        return Err(numeric(format!("non-finite loss {total}")));
                    }
                    sums[0] += tape.value(terms.critic).item();
                    sums[1] += tape.value(terms.actor).item();
                    sums[2] += tape.value(terms.entropy).item();
                    sums[3] += terms.clip_fraction;
                    sums[4] += terms.approx_kl;
                    steps += 1;
                    let mut g = tape.backward(terms.total)?;
                    p.vars().iter().map(|&v| g.take(v)).collect()
                };
                if grads.iter().flatten().any(|g| !g.is_finite()) {
                    return Err(numeric("non-finite gradient".into()));
                }
                self.adam.step(&mut self.store, &grads)?;
            }
        }
        soft_update(&mut self.target, &self.store, ppo.tau)?;

        self.update += 1;
        self.env_steps += n;
        let avg = |s: f64| s / steps.max(1) as f64;
        let row = MetricRow {
            update: self.update,
            env_steps: self.env_steps,
            mean_return: mean(&batch.episode_returns).unwrap_or(f64::NAN),
            std_return: population_std(&batch.episode_returns).unwrap_or(f64::NAN),
            critic_loss: avg(sums[0]),
            actor_loss: avg(sums[1]),
            entropy: avg(sums[2]),
            clip_fraction: avg(sums[3]),
            approx_kl: avg(sums[4]),
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        self.metrics.push(row.clone());
        Ok(row)
    }

    /// Runs the configured number of updates. Greedy evaluations happen
    /// before the first update, every `eval_interval` updates and after the
    /// last one.
    pub fn run(&mut self, mut observe: impl FnMut(&MetricRow, Option<&EvalRow>)) -> Result<()> {
        let total = self.config.updates();
        let interval = self.config.eval_interval;
        if interval > 0 && self.evals.is_empty() {
            self.record_eval()?;
        }
        while self.update < total {
            let row = self.step()?;
            let due = interval > 0 && (self.update.is_multiple_of(interval) || self.update == total);
            let eval = if due { Some(self.record_eval()?) } else { None };
            observe(&row, eval.as_ref());
        }
        Ok(())
    }

    pub fn into_outcome(self) -> TrainOutcome {
        TrainOutcome {
            model: self.model,
            store: self.store,
            target: self.target,
            metrics: self.metrics,
            evals: self.evals,
        }
    }
}

/// Trains from a fresh initialization.
pub fn train(config: TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config)?;
    trainer.run(|_, _| {})?;
    Ok(trainer.into_outcome())
}

/// Continues training `store` with the freeze mask of `mode`.
pub fn finetune(config: TrainConfig, store: ParameterStore, mode: FinetuneMode) -> Result<TrainOutcome> {
    let mut trainer = Trainer::with_parameters(config, store)?;
    trainer.apply_finetune_mask(mode)?;
    trainer.run(|_, _| {})?;
    Ok(trainer.into_outcome())
}

/// Loads a checkpoint and rebuilds its model, checking the layout.
pub fn restore(path: impl AsRef<Path>, expected: Option<ModelKind>) -> Result<(PolicyModel, ParameterStore)> {
    let (config, store) = load_checkpoint(path, expected)?;
    let (model, fresh) = PolicyModel::build(&config, 0)?;
    if !fresh.same_layout(&store) {
        return Err(Error::Checkpoint(format!(
            "parameter layout does not match a {} model with the stored configuration",
            config.kind
        )));
    }
    Ok((model, store))
}
