//! Lockstep collection across independent environment copies.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Env, EnvSpec, Environment, JointObservation};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::policy::{ActMode, DecisionCache, PolicyModel};
use crate::rl::TrajectoryBatch;

/// Environment copies that persist across collection phases, each with its
/// own RNG stream derived from one seed.
#[derive(Debug, Clone)]
pub struct RolloutWorkers {
    envs: Vec<Env>,
    current: Vec<JointObservation>,
    rngs: Vec<ChaCha8Rng>,
    running: Vec<f64>,
}

impl RolloutWorkers {
    pub fn new(spec: &EnvSpec, workers: usize, seed: u64) -> Result<Self> {
        if workers == 0 {
            return Err(Error::config("workers must be positive"));
        }
        let mut envs = (0..workers).map(|_| spec.build()).collect::<Result<Vec<_>>>()?;
        let current = envs.iter_mut().map(Environment::reset).collect();
        let rngs = (0..workers)
            .map(|w| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(w as u64 + 1);
                rng
            })
            .collect();
        Ok(Self {
            envs,
            current,
            rngs,
            running: vec![0.0; workers],
        })
    }

    pub fn workers(&self) -> usize {
        self.envs.len()
    }

    /// Runs `horizon` steps in every worker, sampling from `behavior` and
    /// valuing observations with `target`.
    pub fn collect(
        &mut self,
        model: &PolicyModel,
        behavior: &ParameterStore,
        target: &ParameterStore,
        horizon: usize,
    ) -> Result<TrajectoryBatch> {
        let workers = self.workers();
        let env = &self.envs[0];
        let cfg = model.config();
        if env.n_agents() != cfg.n_agents || env.n_actions() != cfg.n_actions || env.obs_width() != cfg.obs_width {
            return Err(Error::contract(format!(
                "environment ({} agents, {} actions, width {}) does not match the model ({}, {}, {})",
                env.n_agents(),
                env.n_actions(),
                env.obs_width(),
                cfg.n_agents,
                cfg.n_actions,
                cfg.obs_width
            )));
        }
        let total = workers * horizon;
        let mut obs = vec![Vec::with_capacity(horizon); workers];
        let mut actions = vec![Vec::with_capacity(horizon); workers];
        let mut log_probs = vec![Vec::with_capacity(horizon); workers];
        let mut rewards = vec![Vec::with_capacity(horizon); workers];
        let mut dones = vec![Vec::with_capacity(horizon); workers];
        let mut episode_returns = Vec::new();
        let mut cache = DecisionCache::new();
        for _ in 0..horizon {
            let decisions = model.decide(behavior, &self.current, ActMode::Sample, &mut self.rngs, &mut cache)?;
            for (w, d) in decisions.into_iter().enumerate() {
                let step = self.envs[w].step(&d.actions)?;
                self.running[w] += step.reward;
                let next = if step.done {
                    episode_returns.push(self.running[w]);
                    self.running[w] = 0.0;
                    self.envs[w].reset()
                } else {
                    step.observation
                };
                obs[w].push(std::mem::replace(&mut self.current[w], next));
                actions[w].push(d.actions);
                log_probs[w].push(d.log_probs);
                rewards[w].push(step.reward);
                dones[w].push(step.done);
            }
        }
        let observations: Vec<JointObservation> = obs.into_iter().flatten().collect();
        let dones: Vec<bool> = dones.into_iter().flatten().collect();
        let values = if total == 0 {
            Vec::new()
        } else {
            model.critic_values(target, &observations)?
        };
        let tail = model.critic_values(target, &self.current)?;
        let bootstrap = (0..workers)
            .map(|w| {
                if horizon > 0 && dones[w * horizon + horizon - 1] {
                    0.0
                } else {
                    tail[w]
                }
            })
            .collect();
        Ok(TrajectoryBatch {
            observations,
            actions: actions.into_iter().flatten().collect(),
            rewards: rewards.into_iter().flatten().collect(),
            dones,
            values,
            behavior_log_probs: log_probs.into_iter().flatten().collect(),
            advantages: Vec::new(),
            returns: Vec::new(),
            bootstrap,
            workers,
            horizon,
            episode_returns,
        })
    }
}

/// One collection phase from freshly reset workers.
pub fn rollout(
    spec: &EnvSpec,
    model: &PolicyModel,
    behavior: &ParameterStore,
    target: &ParameterStore,
    horizon: usize,
    workers: usize,
    seed: u64,
) -> Result<TrajectoryBatch> {
    RolloutWorkers::new(spec, workers, seed)?.collect(model, behavior, target, horizon)
}
