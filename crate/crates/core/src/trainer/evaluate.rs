//! Episode-level evaluation of trained models and reference policies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{EnvSpec, Environment, JointObservation, OraclePolicy};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::policy::{ActMode, DecisionCache, PolicyModel};

/// Anything that maps an observation to a joint action.
pub trait EpisodePolicy {
    fn act(&mut self, obs: &JointObservation) -> Result<Vec<usize>>;
}

/// A model with fixed parameters.
pub struct ModelPolicy<'a> {
    model: &'a PolicyModel,
    store: &'a ParameterStore,
    mode: ActMode,
    rng: [ChaCha8Rng; 1],
    cache: DecisionCache,
}

impl<'a> ModelPolicy<'a> {
    pub fn new(model: &'a PolicyModel, store: &'a ParameterStore, mode: ActMode, seed: u64) -> Self {
        Self {
            model,
            store,
            mode,
            rng: [ChaCha8Rng::seed_from_u64(seed)],
            cache: DecisionCache::new(),
        }
    }
}

impl EpisodePolicy for ModelPolicy<'_> {
    fn act(&mut self, obs: &JointObservation) -> Result<Vec<usize>> {
        let d = self
            .model
            .decide(self.store, std::slice::from_ref(obs), self.mode, &mut self.rng, &mut self.cache)?;
        Ok(d.into_iter().next().expect("one decision").actions)
    }
}

/// Every agent picks uniformly at random.
pub struct RandomPolicy {
    pub n_actions: usize,
    pub rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(n_actions: usize, seed: u64) -> Self {
        Self {
            n_actions,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl EpisodePolicy for RandomPolicy {
    fn act(&mut self, obs: &JointObservation) -> Result<Vec<usize>> {
        Ok((0..obs.n_agents()).map(|_| self.rng.random_range(0..self.n_actions)).collect())
    }
}

impl EpisodePolicy for OraclePolicy {
    fn act(&mut self, obs: &JointObservation) -> Result<Vec<usize>> {
        self.action(obs)
            .map(<[usize]>::to_vec)
            .ok_or_else(|| Error::contract("observation outside the oracle's state space"))
    }
}

/// Per-episode returns, undiscounted and discounted.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReturnStats {
    pub returns: Vec<f64>,
    pub discounted: Vec<f64>,
}

impl ReturnStats {
    pub fn episodes(&self) -> usize {
        self.returns.len()
    }

    pub fn mean(&self) -> Option<f64> {
        mean(&self.returns)
    }

    /// Population standard deviation.
    pub fn std(&self) -> Option<f64> {
        population_std(&self.returns)
    }

    pub fn min(&self) -> Option<f64> {
        self.returns.iter().copied().reduce(f64::min)
    }

    pub fn max(&self) -> Option<f64> {
        self.returns.iter().copied().reduce(f64::max)
    }

    pub fn discounted_mean(&self) -> Option<f64> {
        mean(&self.discounted)
    }
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn population_std(xs: &[f64]) -> Option<f64> {
    let m = mean(xs)?;
    Some((xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt())
}

/// Plays `episodes` complete episodes from reset.
pub fn evaluate_policy(
    spec: &EnvSpec,
    policy: &mut impl EpisodePolicy,
    episodes: usize,
    gamma: f64,
) -> Result<ReturnStats> {
    let mut env = spec.build()?;
    let mut stats = ReturnStats::default();
    for _ in 0..episodes {
        let mut obs = env.reset();
        let (mut total, mut discounted, mut weight) = (0.0, 0.0, 1.0);
        loop {
            let actions = policy.act(&obs)?;
            let step = env.step(&actions)?;
            total += step.reward;
            discounted += weight * step.reward;
            weight *= gamma;
            if step.done {
                break;
            }
            obs = step.observation;
        }
        stats.returns.push(total);
        stats.discounted.push(discounted);
    }
    Ok(stats)
}

/// Evaluates a model's greedy or sampled policy.
pub fn evaluate(
    model: &PolicyModel,
    store: &ParameterStore,
    spec: &EnvSpec,
    episodes: usize,
    mode: ActMode,
    gamma: f64,
    seed: u64,
) -> Result<ReturnStats> {
    evaluate_policy(spec, &mut ModelPolicy::new(model, store, mode, seed), episodes, gamma)
}
