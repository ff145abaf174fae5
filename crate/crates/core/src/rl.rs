//! PPO machinery: trajectory storage, advantage estimation, the clipped
//! losses, the target-critic blend and an Adam optimizer that honours
//! freeze flags.

use crate::env::JointObservation;
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::policy::{Evaluation, LossForm};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct PpoConfig {
    pub clip: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub epochs: usize,
    /// Samples per gradient step; 0 means the whole batch.
    pub minibatch_size: usize,
    /// Target-critic blend rate.
    pub tau: f64,
    pub lr: f64,
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            gamma: 0.99,
            lambda: 0.95,
            entropy_coef: 0.01,
            value_coef: 0.5,
            epochs: 5,
            minibatch_size: 0,
            tau: 0.005,
            lr: 3e-4,
            normalize_advantages: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.gamma > 0.0 && self.gamma < 1.0, "gamma must lie in (0, 1)"),
            ((0.0..=1.0).contains(&self.lambda), "lambda must lie in [0, 1]"),
            (self.clip > 0.0, "clip must be positive"),
            (self.tau > 0.0 && self.tau <= 1.0, "tau must lie in (0, 1]"),
            (self.lr > 0.0 && self.lr.is_finite(), "lr must be positive"),
            (self.epochs > 0, "epochs must be positive"),
            (self.entropy_coef >= 0.0, "entropy_coef must be non-negative"),
            (self.value_coef >= 0.0, "value_coef must be non-negative"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::config(*msg)),
            None => Ok(()),
        }
    }
}

/// Experience from one collection phase, laid out worker-major: step `t`
/// of worker `w` sits at `w * horizon + t`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryBatch {
    pub observations: Vec<JointObservation>,
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Target-critic value of each observation.
    pub values: Vec<f64>,
    /// Per-agent log-probabilities under the behaviour snapshot.
    pub behavior_log_probs: Vec<Vec<f64>>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// Per worker, the target-critic value after the last step (0 if terminal).
    pub bootstrap: Vec<f64>,
    pub workers: usize,
    pub horizon: usize,
    /// Undiscounted returns of the episodes that finished during collection.
    pub episode_returns: Vec<f64>,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn behavior_joint_log_prob(&self, i: usize) -> f64 {
        self.behavior_log_probs[i].iter().sum()
    }

    /// Fills `advantages` and `returns` worker by worker.
    pub fn compute_gae(&mut self, gamma: f64, lambda: f64) -> Result<()> {
        if self.len() != self.workers * self.horizon
            || self.values.len() != self.len()
            || self.dones.len() != self.len()
            || self.bootstrap.len() != self.workers
        {
            return Err(Error::contract("trajectory batch fields disagree in length"));
        }
        self.advantages = Vec::with_capacity(self.len());
        self.returns = Vec::with_capacity(self.len());
        for w in 0..self.workers {
            let r = w * self.horizon..(w + 1) * self.horizon;
            let (adv, ret) = gae(
                &self.rewards[r.clone()],
                &self.values[r.clone()],
                &self.dones[r],
                self.bootstrap[w],
                gamma,
                lambda,
            );
            self.advantages.extend(adv);
            self.returns.extend(ret);
        }
        Ok(())
    }
}

/// Generalized advantage estimates and return targets for one contiguous
/// segment. `bootstrap` is the value after the final step; it is ignored
/// when that step ends an episode.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_value = bootstrap;
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        adv[t] = delta + gamma * lambda * live * next_adv;
        next_value = values[t];
        next_adv = adv[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Shifts to zero mean and scales to unit population standard deviation.
/// A constant input maps to zeros.
pub fn normalize(xs: &[f64]) -> Vec<f64> {
    if xs.is_empty() {
        return Vec::new();
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std > 1e-12 {
        xs.iter().map(|x| (x - mean) / std).collect()
    } else {
        vec![0.0; xs.len()]
    }
}

/// Joint probability ratio per step, formed from summed per-agent
/// log-probabilities in log space.
pub fn cmat_ratio(current: &[Vec<f64>], behavior: &[Vec<f64>]) -> Result<Vec<f64>> {
    if current.len() != behavior.len() {
        return Err(Error::contract("ratio inputs differ in length"));
    }
    current
        .iter()
        .zip(behavior)
        .enumerate()
        .map(|(t, (c, b))| {
            let r = (c.iter().sum::<f64>() - b.iter().sum::<f64>()).exp();
            if r.is_finite() {
                Ok(r)
            } else {
                Err(Error::Numeric {
                    update: 0,
                    what: format!("non-finite probability ratio at step {t}"),
                })
            }
        })
        .collect()
}

/// Targets for one loss evaluation, aligned with the evaluated batch.
#[derive(Debug, Clone, Copy)]
pub struct LossTargets<'a> {
    pub behavior_log_probs: &'a [Vec<f64>],
    pub advantages: &'a [f64],
    pub returns: &'a [f64],
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    /// `actor - entropy_coef * entropy + value_coef * critic`
    pub total: Var,
    pub critic: Var,
    /// Negated clipped surrogate, without the entropy bonus.
    pub actor: Var,
    pub entropy: Var,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// `mean(min(ρÂ, clip(ρ, 1 − ε, 1 + ε)Â))` over all entries.
pub fn clipped_surrogate(tape: &mut Tape<'_>, ratio: Var, advantages: Var, clip: f64) -> Result<Var> {
    let plain = tape.mul(ratio, advantages)?;
    let clipped = tape.clip(ratio, 1.0 - clip, 1.0 + clip);
    let clipped = tape.mul(clipped, advantages)?;
    let m = tape.minimum(plain, clipped)?;
    Ok(tape.mean(m))
}

/// Critic and actor losses. With [`LossForm::Joint`] one ratio per step
/// comes from the summed agent log-probs; with [`LossForm::PerAgent`] each
/// agent has its own ratio sharing the step's advantage.
pub fn ppo_losses(
    tape: &mut Tape<'_>,
    eval: &Evaluation,
    form: LossForm,
    targets: LossTargets<'_>,
    cfg: &PpoConfig,
) -> Result<LossTerms> {
    let shape = tape.shape(eval.log_probs).to_vec();
    let (b, n) = (shape[0], shape[1]);
    if targets.behavior_log_probs.len() != b || targets.advantages.len() != b || targets.returns.len() != b {
        return Err(Error::contract("loss targets do not match the evaluated batch"));
    }
    let (log_ratio, adv) = match form {
        LossForm::Joint => {
            let joint = tape.sum_axis(eval.log_probs, 1)?;
            let old: Vec<f64> = targets.behavior_log_probs.iter().map(|l| l.iter().sum()).collect();
            let old = tape.constant(Tensor::vector(old));
            let lr = tape.sub(joint, old)?;
            (lr, tape.constant(Tensor::vector(targets.advantages.to_vec())))
        }
        LossForm::PerAgent => {
            let old: Vec<f64> = targets.behavior_log_probs.iter().flatten().copied().collect();
            let old = tape.constant(Tensor::new([b, n], old)?);
            let lr = tape.sub(eval.log_probs, old)?;
            let adv: Vec<f64> = targets.advantages.iter().flat_map(|&a| std::iter::repeat_n(a, n)).collect();
            (lr, tape.constant(Tensor::new([b, n], adv)?))
        }
    };
    let ratio = tape.exp(log_ratio);
    let rv = tape.value(ratio).data();
    if let Some(t) = rv.iter().position(|r| !r.is_finite()) {
        return Err(Error::Numeric {
            update: 0,
            what: format!("non-finite probability ratio at sample {t}"),
        });
    }
    let clip_fraction = rv.iter().filter(|r| (*r - 1.0).abs() > cfg.clip).count() as f64 / rv.len() as f64;
    let approx_kl = rv.iter().map(|r| (r - 1.0) - r.ln()).sum::<f64>() / rv.len() as f64;

    let objective = clipped_surrogate(tape, ratio, adv, cfg.clip)?;
    let actor = tape.neg(objective);
    let entropy = tape.mean(eval.entropy);

    let k = tape.shape(eval.values)[1];
    let ret: Vec<f64> = targets.returns.iter().flat_map(|&r| std::iter::repeat_n(r, k)).collect();
    let ret = tape.constant(Tensor::new([b, k], ret)?);
    let diff = tape.sub(ret, eval.values)?;
    let sq = tape.square(diff)?;
    let critic = tape.mean(sq);

    let bonus = tape.scale(entropy, -cfg.entropy_coef);
    let weighted = tape.scale(critic, cfg.value_coef);
    let total = tape.add(actor, bonus)?;
    let total = tape.add(total, weighted)?;
    Ok(LossTerms {
        total,
        critic,
        actor,
        entropy,
        clip_fraction,
        approx_kl,
    })
}

/// `target ← τ·online + (1 − τ)·target` for every parameter.
pub fn soft_update(target: &mut ParameterStore, online: &ParameterStore, tau: f64) -> Result<()> {
    if !target.same_layout(online) {
        return Err(Error::contract("soft update between stores of different layout"));
    }
    for id in online.ids().collect::<Vec<_>>() {
        let src = online.get(id).data();
        let dst = target.get_mut(id).data_mut();
        if tau == 1.0 {
            dst.copy_from_slice(src);
        } else {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = tau * s + (1.0 - tau) * *d;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

/// Bias-corrected Adam. Frozen parameters and parameters without a gradient
/// are skipped, moments included.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: Vec<Moments>,
}

impl Adam {
    pub fn new(store: &ParameterStore, lr: f64) -> Self {
        let state = store
            .iter()
            .map(|(_, _, p)| Moments {
                m: vec![0.0; p.value.numel()],
                v: vec![0.0; p.value.numel()],
                steps: 0,
            })
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state,
        }
    }

    /// Number of steps taken for parameter `index`.
    pub fn steps(&self, index: usize) -> i32 {
        self.state[index].steps
    }

    /// `grads[i]` belongs to the `i`-th parameter of `store`.
    pub fn step(&mut self, store: &mut ParameterStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != store.len() || self.state.len() != store.len() {
            return Err(Error::contract("optimizer state does not match the parameter store"));
        }
        let ids: Vec<_> = store.ids().collect();
        for ((id, g), s) in ids.into_iter().zip(grads).zip(&mut self.state) {
            let Some(g) = g else { continue };
            if store.is_frozen(id) {
                continue;
            }
            let w = store.get_mut(id);
            if g.shape() != w.shape() {
                return Err(Error::contract("gradient shape differs from its parameter"));
            }
            s.steps += 1;
            let c1 = 1.0 - self.beta1.powi(s.steps);
            let c2 = 1.0 - self.beta2.powi(s.steps);
            for (((w, &g), m), v) in w.data_mut().iter_mut().zip(g.data()).zip(&mut s.m).zip(&mut s.v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
