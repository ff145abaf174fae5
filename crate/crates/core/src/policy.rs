//! Model configuration and the shared interface the trainer drives.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::{SequentialPolicy, SimultaneousPolicy};
use crate::cmat::CmatPolicy;
use crate::env::JointObservation;
use crate::error::{Error, Result};
use crate::params::{Binding, ParameterStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    /// Consensus policy pooling the whole consensus sequence.
    Cmat,
    /// Consensus policy that keeps only the last generated consensus vector.
    CmatLastConsensus,
    /// Autoregressive per-agent decoder in a fixed agent order.
    MatSequential,
    /// Independent per-agent heads, no consensus.
    Simultaneous,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::Cmat,
        ModelKind::CmatLastConsensus,
        ModelKind::MatSequential,
        ModelKind::Simultaneous,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Cmat => "cmat",
            ModelKind::CmatLastConsensus => "cmat-last-consensus",
            ModelKind::MatSequential => "mat-sequential",
            ModelKind::Simultaneous => "simultaneous",
        }
    }

    pub fn is_consensus(self) -> bool {
        matches!(self, ModelKind::Cmat | ModelKind::CmatLastConsensus)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown model kind {s:?}")))
    }
}

/// Architecture hyperparameters. Everything needed to rebuild a model's
/// parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub obs_width: usize,
    pub n_actions: usize,
    pub n_agents: usize,
    pub d_model: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub compressor_heads: usize,
    /// Consensus iterations `m`.
    pub consensus_iterations: usize,
    /// Rows in the decoder's positional table.
    pub max_positions: usize,
    /// Replace the consensus with zeros (consensus-free ablation).
    pub zero_consensus: bool,
    /// Decision order for the sequential baseline.
    pub order: Vec<usize>,
}

impl ModelConfig {
    /// Defaults: `d = 64`, 4 heads, 2 encoder and 2 decoder blocks,
    /// 4 compressor heads and `m = n`.
    pub fn new(kind: ModelKind, obs_width: usize, n_actions: usize, n_agents: usize) -> Self {
        Self {
            kind,
            obs_width,
            n_actions,
            n_agents,
            d_model: 64,
            heads: 4,
            encoder_blocks: 2,
            decoder_blocks: 2,
            compressor_heads: crate::compressor::DEFAULT_COMPRESSOR_HEADS,
            consensus_iterations: n_agents,
            max_positions: default_positions(n_agents, n_agents),
            zero_consensus: false,
            order: (0..n_agents).collect(),
        }
    }

    /// Sets `m` and grows the positional table if needed.
    pub fn with_iterations(mut self, m: usize) -> Self {
        self.consensus_iterations = m;
        self.max_positions = self.max_positions.max(default_positions(self.n_agents, m));
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("obs_width", self.obs_width),
            ("n_actions", self.n_actions),
            ("n_agents", self.n_agents),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("compressor_heads", self.compressor_heads),
            ("max_positions", self.max_positions),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{k} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.kind.is_consensus() && self.consensus_iterations + 1 > self.max_positions {
            return Err(Error::config(format!(
                "m = {} needs {} positions but the table holds {}",
                self.consensus_iterations,
                self.consensus_iterations + 1,
                self.max_positions
            )));
        }
        let mut sorted = self.order.clone();
        sorted.sort_unstable();
        if sorted != (0..self.n_agents).collect::<Vec<_>>() {
            return Err(Error::config(format!(
                "order {:?} is not a permutation of 0..{}",
                self.order, self.n_agents
            )));
        }
        Ok(())
    }

    /// `key=value` lines, stable order.
    pub fn to_meta(&self) -> String {
        let order: Vec<String> = self.order.iter().map(usize::to_string).collect();
        format!(
            "kind={}\nobs_width={}\nn_actions={}\nn_agents={}\nd_model={}\nheads={}\n\
             encoder_blocks={}\ndecoder_blocks={}\ncompressor_heads={}\nconsensus_iterations={}\n\
             max_positions={}\nzero_consensus={}\norder={}\n",
            self.kind,
            self.obs_width,
            self.n_actions,
            self.n_agents,
            self.d_model,
            self.heads,
            self.encoder_blocks,
            self.decoder_blocks,
            self.compressor_heads,
            self.consensus_iterations,
            self.max_positions,
            self.zero_consensus,
            order.join(",")
        )
    }

    pub fn from_meta(text: &str) -> Result<Self> {
        let mut map = HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad model metadata line {line:?}")))?;
            map.insert(k.trim(), v.trim());
        }
        let get = |k: &str| {
            map.get(k)
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("model metadata lacks {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("model metadata {k} is not an integer")))
        };
        let order = get("order")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Error::Checkpoint("bad order".into())))
            .collect::<Result<Vec<usize>>>()?;
        let cfg = Self {
            kind: get("kind")?.parse()?,
            obs_width: num("obs_width")?,
            n_actions: num("n_actions")?,
            n_agents: num("n_agents")?,
            d_model: num("d_model")?,
            heads: num("heads")?,
            encoder_blocks: num("encoder_blocks")?,
            decoder_blocks: num("decoder_blocks")?,
            compressor_heads: num("compressor_heads")?,
            consensus_iterations: num("consensus_iterations")?,
            max_positions: num("max_positions")?,
            zero_consensus: get("zero_consensus")? == "true",
            order,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn default_positions(n_agents: usize, m: usize) -> usize {
    16usize.max(2 * n_agents + 1).max(m + 1)
}

/// Whether the PPO ratio is formed per agent or over the joint action.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossForm {
    Joint,
    PerAgent,
}

/// Differentiable per-sample quantities for a batch of `(O, A)` pairs.
#[derive(Debug, Clone, Copy)]
pub struct Evaluation {
    /// `[B, K]` value estimates: one joint column, or one per agent.
    pub values: Var,
    /// `[B, n]` log-probability of each agent's action.
    pub log_probs: Var,
    /// `[B, n]` entropy of each agent's action distribution.
    pub entropy: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Greedy,
}

/// One joint decision taken during a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub value: f64,
}

/// Memo of policy outputs for one fixed parameter snapshot. Must be discarded
/// whenever parameters change.
#[derive(Debug, Default)]
pub struct DecisionCache {
    pub(crate) joint: HashMap<Vec<u64>, (Vec<Vec<f64>>, f64)>,
    pub(crate) step: HashMap<Vec<u64>, Vec<f64>>,
    pub(crate) agent_values: HashMap<Vec<u64>, Vec<f64>>,
}

impl DecisionCache {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Indices of the first occurrence of each distinct key, and for every
/// item the position of its key among those.
pub(crate) fn dedup<K: Hash + Eq>(keys: impl IntoIterator<Item = K>) -> (Vec<usize>, Vec<usize>) {
    let mut seen: HashMap<K, usize> = HashMap::new();
    let mut firsts = Vec::new();
    let mut map = Vec::new();
    for (i, k) in keys.into_iter().enumerate() {
        let next = seen.len();
        let slot = *seen.entry(k).or_insert_with(|| {
            firsts.push(i);
            next
        });
        map.push(slot);
    }
    (firsts, map)
}

/// Stacks observations into `[B, n, w]`.
pub(crate) fn observation_tensor(obs: &[&JointObservation], width: usize) -> Result<Tensor> {
    let first = obs.first().ok_or_else(|| Error::contract("empty observation batch"))?;
    let n = first.n_agents();
    if obs.iter().any(|o| o.n_agents() != n || o.width() != width) {
        return Err(Error::contract(format!(
            "observation batch must share {n} agents of width {width}"
        )));
    }
    let mut data = Vec::with_capacity(obs.len() * n * width);
    for o in obs {
        data.extend_from_slice(o.data());
    }
    Ok(Tensor::new([obs.len(), n, width], data)?)
}

/// Log-softmax of each row.
pub fn log_softmax_rows(logits: &[f64], width: usize) -> Vec<Vec<f64>> {
    logits
        .chunks(width)
        .map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter().map(|v| v - lse).collect()
        })
        .collect()
}

/// Index of the first maximal entry.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from a log-probability vector.
pub fn sample_log_probs(log_probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    log_probs.len() - 1
}

pub(crate) fn choose(log_probs: &[f64], mode: ActMode, rng: &mut impl Rng) -> usize {
    match mode {
        ActMode::Greedy => argmax(log_probs),
        ActMode::Sample => sample_log_probs(log_probs, rng),
    }
}

/// Shared tail for factorized policies: expands per-unique logits and
/// values to the batch and reads off log-probs and entropies.
pub(crate) fn finish_evaluation(
    tape: &mut Tape<'_>,
    logits: Var,
    values: Var,
    map: &[usize],
    actions: &[Vec<usize>],
) -> Result<Evaluation> {
    let log_p = tape.log_softmax(logits)?;
    let p = tape.exp(log_p);
    let plogp = tape.mul(p, log_p)?;
    let neg_entropy = tape.sum_axis(plogp, 2)?;
    let entropy_unique = tape.neg(neg_entropy);

    let log_p = tape.gather_rows(log_p, map)?;
    let flat: Vec<usize> = actions.iter().flatten().copied().collect();
    let log_probs = tape.pick_last(log_p, &flat)?;
    Ok(Evaluation {
        values: tape.gather_rows(values, map)?,
        log_probs,
        entropy: tape.gather_rows(entropy_unique, map)?,
    })
}

pub(crate) fn check_actions(actions: &[Vec<usize>], obs: &[JointObservation], n_actions: usize) -> Result<()> {
    if actions.len() != obs.len() {
        return Err(Error::contract("one joint action per observation required"));
    }
    for (a, o) in actions.iter().zip(obs) {
        if a.len() != o.n_agents() || a.iter().any(|&x| x >= n_actions) {
            return Err(Error::contract(format!("invalid joint action {a:?}")));
        }
    }
    Ok(())
}

/// Any of the supported policies.
#[derive(Debug, Clone)]
pub enum PolicyModel {
    Cmat(CmatPolicy),
    Sequential(SequentialPolicy),
    Simultaneous(SimultaneousPolicy),
}

impl PolicyModel {
    /// Builds the model and a freshly initialized parameter store.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParameterStore)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new(cfg.kind.as_str());
        let model = match cfg.kind {
            ModelKind::Cmat | ModelKind::CmatLastConsensus => {
                PolicyModel::Cmat(CmatPolicy::new(cfg.clone(), &mut store, &mut rng)?)
            }
            ModelKind::MatSequential => {
                PolicyModel::Sequential(SequentialPolicy::new(cfg.clone(), &mut store, &mut rng)?)
            }
            ModelKind::Simultaneous => {
                PolicyModel::Simultaneous(SimultaneousPolicy::new(cfg.clone(), &mut store, &mut rng)?)
            }
        };
        Ok((model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            PolicyModel::Cmat(m) => &m.config,
            PolicyModel::Sequential(m) => &m.config,
            PolicyModel::Simultaneous(m) => &m.config,
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.config().kind
    }

    pub fn loss_form(&self) -> LossForm {
        match self {
            PolicyModel::Sequential(_) => LossForm::PerAgent,
            _ => LossForm::Joint,
        }
    }

    pub fn evaluate(
        &self,
        tape: &mut Tape<'_>,
        p: &Binding,
        obs: &[JointObservation],
        actions: &[Vec<usize>],
    ) -> Result<Evaluation> {
        match self {
            PolicyModel::Cmat(m) => m.evaluate(tape, p, obs, actions),
            PolicyModel::Sequential(m) => m.evaluate(tape, p, obs, actions),
            PolicyModel::Simultaneous(m) => m.evaluate(tape, p, obs, actions),
        }
    }

    /// Joint value estimate `V(O)` per observation, without gradient.
    pub fn critic_values(&self, store: &ParameterStore, obs: &[JointObservation]) -> Result<Vec<f64>> {
        match self {
            PolicyModel::Cmat(m) => m.critic_values(store, obs),
            PolicyModel::Sequential(m) => m.critic_values(store, obs),
            PolicyModel::Simultaneous(m) => m.critic_values(store, obs),
        }
    }

    /// Chooses joint actions for a batch of observations, one RNG per item.
    pub fn decide<R: Rng>(
        &self,
        store: &ParameterStore,
        obs: &[JointObservation],
        mode: ActMode,
        rngs: &mut [R],
        cache: &mut DecisionCache,
    ) -> Result<Vec<Decision>> {
        if rngs.len() != obs.len() {
            return Err(Error::contract("one rng per observation required"));
        }
        match self {
            PolicyModel::Cmat(m) => m.decide(store, obs, mode, rngs, cache),
            PolicyModel::Sequential(m) => m.decide(store, obs, mode, rngs, cache),
            PolicyModel::Simultaneous(m) => m.decide(store, obs, mode, rngs, cache),
        }
    }

    /// Per-agent action log-probabilities for every joint action of a single
    /// observation, as `exp`-summable joint log-probs in odometer order.
    pub fn joint_log_prob_table(&self, store: &ParameterStore, obs: &JointObservation) -> Result<Vec<f64>> {
        let n = obs.n_agents();
        let joint = crate::env::oracle::joint_actions(n, self.config().n_actions);
        let obs_batch = vec![obs.clone(); joint.len()];
        let mut tape = Tape::new();
        let p = store.bind_constant(&mut tape);
        let eval = self.evaluate(&mut tape, &p, &obs_batch, &joint)?;
        let summed = tape.sum_axis(eval.log_probs, 1)?;
        Ok(tape.value(summed).data().to_vec())
    }
}

/// Shared decision routine for policies whose agents act independently
/// given the observation: per-observation log-prob rows and a value.
pub(crate) fn decide_factorized<R: Rng>(
    obs: &[JointObservation],
    mode: ActMode,
    rngs: &mut [R],
    cache: &mut DecisionCache,
    compute: impl FnOnce(&[&JointObservation]) -> Result<Vec<(Vec<Vec<f64>>, f64)>>,
) -> Result<Vec<Decision>> {
    let keys: Vec<Vec<u64>> = obs.iter().map(JointObservation::key).collect();
    let (firsts, _) = dedup(keys.iter().cloned());
    let missing: Vec<usize> = firsts
        .into_iter()
        .filter(|&i| !cache.joint.contains_key(&keys[i]))
        .collect();
    if !missing.is_empty() {
        let batch: Vec<&JointObservation> = missing.iter().map(|&i| &obs[i]).collect();
        let outputs = compute(&batch)?;
        for (i, out) in missing.into_iter().zip(outputs) {
            cache.joint.insert(keys[i].clone(), out);
        }
    }
    Ok(keys
        .iter()
        .zip(rngs.iter_mut())
        .map(|(k, rng)| {
            let (rows, value) = &cache.joint[k];
            let actions: Vec<usize> = rows.iter().map(|r| choose(r, mode, rng)).collect();
            let log_probs = rows.iter().zip(&actions).map(|(r, &a)| r[a]).collect();
            Decision {
                actions,
                log_probs,
                value: *value,
            }
        })
        .collect())
}
