//! The consensus policy.
//!
//! Observations are embedded and encoded into per-agent features. A critic
//! compressor pools them into `e^0`, which both feeds the value head and seeds
//! the consensus sequence. A causal decoder then extends the sequence `m`
//! times, each step reading the full prefix and cross-attending to the
//! encoded features. The actor compressor pools the whole sequence into a
//! consensus vector `c`, and every agent picks its action from its own
//! features concatenated with `c`. Given the observation, agents act
//! independently, so the joint log-probability is a sum over agents.

use rand::Rng;

use crate::compressor::Compressor;
use crate::env::JointObservation;
use crate::error::{Error, Result};
use crate::nn::{Activation, Decoder, Encoder, Mlp, PositionalEmbedding};
use crate::params::{Binding, ParameterStore};
use crate::policy::{
    check_actions, choose, decide_factorized, dedup, finish_evaluation, log_softmax_rows,
    observation_tensor, ActMode, Decision, DecisionCache, Evaluation, ModelConfig, ModelKind,
};
use crate::tensor::{Tape, Tensor, Var};

/// How the consensus sequence becomes the vector the actors see.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsensusMode {
    /// Actor compressor over `e^0 ..= e^m`.
    Pooled,
    /// Only `e^m`.
    Last,
    /// A zero vector.
    Zeroed,
}

#[derive(Debug, Clone)]
pub struct CmatPolicy {
    pub config: ModelConfig,
    pub embed: Mlp,
    pub encoder: Encoder,
    pub critic_compressor: Compressor,
    pub critic_mlp: Mlp,
    pub pos: PositionalEmbedding,
    pub decoder: Decoder,
    pub actor_compressor: Option<Compressor>,
    pub actor_mlp: Mlp,
}

/// Encoder outputs for a batch.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// `[B, n, d]`
    pub features: Var,
    /// `[B, d]`
    pub e0: Var,
    /// `[B, 1]`
    pub value: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct Consensus {
    /// `[B, m + 1, d]`, the raw `e^k` without positional offsets.
    pub sequence: Var,
    /// `[B, d]`
    pub vector: Var,
}

/// Everything the policy computes for one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub value: f64,
    /// `[m + 1, d]`
    pub sequence: Tensor,
    /// `[d]`
    pub consensus: Tensor,
    /// Per-agent action log-probabilities.
    pub log_probs: Vec<Vec<f64>>,
}

impl PolicyOutput {
    /// `log π(A | O)` as the sum of the agents' log-probabilities.
    pub fn joint_log_prob(&self, actions: &[usize]) -> Result<f64> {
        if actions.len() != self.log_probs.len() {
            return Err(Error::contract(format!(
                "expected {} actions, got {}",
                self.log_probs.len(),
                actions.len()
            )));
        }
        actions
            .iter()
            .zip(&self.log_probs)
            .map(|(&a, row)| {
                row.get(a)
                    .copied()
                    .ok_or_else(|| Error::contract(format!("action {a} out of range")))
            })
            .sum()
    }
}

impl CmatPolicy {
    pub fn new(config: ModelConfig, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<Self> {
        if !config.kind.is_consensus() {
            return Err(Error::config(format!("{} is not a consensus model", config.kind)));
        }
        config.validate()?;
        let d = config.d_model;
        let embed = Mlp::new(store, "embed", &[config.obs_width, d, d], Activation::Relu, rng)?;
        let encoder = Encoder::new(store, "encoder", d, config.heads, config.encoder_blocks, rng)?;
        let critic_compressor = Compressor::critic(store, d, config.compressor_heads, rng)?;
        let critic_mlp = Mlp::new(store, "critic_mlp", &[d, d, 1], Activation::Relu, rng)?;
        critic_mlp.zero_output_layer(store);
        let pos = PositionalEmbedding::new(store, "pos", config.max_positions, d, rng)?;
        let decoder = Decoder::new(store, "decoder", d, config.heads, config.decoder_blocks, rng)?;
        let actor_compressor = if config.kind == ModelKind::Cmat {
            Some(Compressor::actor(store, d, config.compressor_heads, rng)?)
        } else {
            None
        };
        let actor_mlp = Mlp::new(store, "actor_mlp", &[2 * d, d, config.n_actions], Activation::Relu, rng)?;
        Ok(Self {
            config,
            embed,
            encoder,
            critic_compressor,
            critic_mlp,
            pos,
            decoder,
            actor_compressor,
            actor_mlp,
        })
    }

    pub fn mode(&self) -> ConsensusMode {
        if self.config.zero_consensus {
            ConsensusMode::Zeroed
        } else if self.config.kind == ModelKind::CmatLastConsensus {
            ConsensusMode::Last
        } else {
            ConsensusMode::Pooled
        }
    }

    /// Per-agent features, `e^0` and `V(O)` for `obs: [B, n, w]`.
    pub fn encode(&self, tape: &mut Tape<'_>, p: &Binding, obs: Var) -> Result<Encoded> {
        let x = self.embed.forward(tape, p, obs)?;
        let features = self.encoder.forward(tape, p, x)?;
        let e0 = self.critic_compressor.compress(tape, p, features)?;
        let value = self.critic_mlp.forward(tape, p, e0)?;
        Ok(Encoded { features, e0, value })
    }

    /// Runs `m` consensus iterations from `e^0`.
    pub fn generate_consensus(
        &self,
        tape: &mut Tape<'_>,
        p: &Binding,
        enc: &Encoded,
        m: usize,
    ) -> Result<Consensus> {
        if m + 1 > self.pos.max_len {
            return Err(Error::config(format!(
                "m = {m} needs {} positions but the table holds {}",
                m + 1,
                self.pos.max_len
            )));
        }
        let batch = tape.shape(enc.e0)[0];
        let d = self.config.d_model;
        let mut raw = vec![tape.reshape(enc.e0, &[batch, 1, d])?];
        let p0 = self.pos.lookup(tape, p, 0)?;
        let mut seq = tape.add(raw[0], p0)?;
        for k in 1..=m {
            let out = self.decoder.forward(tape, p, seq, enc.features)?;
            let ek = tape.narrow(out, 1, k - 1, 1)?;
            raw.push(ek);
            let pk = self.pos.lookup(tape, p, k)?;
            let shifted = tape.add(ek, pk)?;
            seq = tape.concat(&[seq, shifted], 1)?;
        }
        let sequence = if raw.len() == 1 { raw[0] } else { tape.concat(&raw, 1)? };
        let vector = match self.mode() {
            ConsensusMode::Pooled => {
                let comp = self.actor_compressor.as_ref().expect("pooled mode has a compressor");
                comp.compress(tape, p, sequence)?
            }
            ConsensusMode::Last => tape.reshape(raw[m], &[batch, d])?,
            ConsensusMode::Zeroed => tape.constant(Tensor::zeros([batch, d])),
        };
        Ok(Consensus { sequence, vector })
    }

    /// `[B, n, A]` action logits from features and the consensus vector.
    pub fn action_logits(&self, tape: &mut Tape<'_>, p: &Binding, features: Var, consensus: Var) -> Result<Var> {
        let n = tape.shape(features)[1];
        let c = tape.repeat(consensus, 1, n)?;
        let x = tape.concat(&[features, c], 2)?;
        self.actor_mlp.forward(tape, p, x)
    }

    pub fn forward(&self, tape: &mut Tape<'_>, p: &Binding, obs: Var) -> Result<(Encoded, Consensus, Var)> {
        let enc = self.encode(tape, p, obs)?;
        let cons = self.generate_consensus(tape, p, &enc, self.config.consensus_iterations)?;
        let logits = self.action_logits(tape, p, enc.features, cons.vector)?;
        Ok((enc, cons, logits))
    }

    /// Full forward pass for a single observation, without gradient.
    pub fn output(&self, store: &ParameterStore, obs: &JointObservation) -> Result<PolicyOutput> {
        let mut tape = Tape::new();
        let p = store.bind_constant(&mut tape);
        let x = tape.constant(observation_tensor(&[obs], self.config.obs_width)?);
        let (enc, cons, logits) = self.forward(&mut tape, &p, x)?;
        let seq = tape.value(cons.sequence);
        let steps = seq.shape()[1];
        Ok(PolicyOutput {
            value: tape.value(enc.value).data()[0],
            sequence: seq.clone().reshaped([steps, self.config.d_model])?,
            consensus: tape.value(cons.vector).clone().reshaped([self.config.d_model])?,
            log_probs: log_softmax_rows(tape.value(logits).data(), self.config.n_actions),
        })
    }

    /// Samples (or takes the mode of) every agent's action for one observation.
    pub fn act(
        &self,
        store: &ParameterStore,
        obs: &JointObservation,
        mode: ActMode,
        rng: &mut impl Rng,
    ) -> Result<(Vec<usize>, PolicyOutput)> {
        let out = self.output(store, obs)?;
        let actions = out.log_probs.iter().map(|r| choose(r, mode, rng)).collect();
        Ok((actions, out))
    }

    pub fn evaluate(
        &self,
        tape: &mut Tape<'_>,
        p: &Binding,
        obs: &[JointObservation],
        actions: &[Vec<usize>],
    ) -> Result<Evaluation> {
        check_actions(actions, obs, self.config.n_actions)?;
        let (firsts, map) = dedup(obs.iter().map(JointObservation::key));
        let unique: Vec<&JointObservation> = firsts.iter().map(|&i| &obs[i]).collect();
        let x = tape.constant(observation_tensor(&unique, self.config.obs_width)?);
        let (enc, _, logits) = self.forward(tape, p, x)?;
        finish_evaluation(tape, logits, enc.value, &map, actions)
    }

    pub fn critic_values(&self, store: &ParameterStore, obs: &[JointObservation]) -> Result<Vec<f64>> {
        let (firsts, map) = dedup(obs.iter().map(JointObservation::key));
        let unique: Vec<&JointObservation> = firsts.iter().map(|&i| &obs[i]).collect();
        let mut tape = Tape::new();
        let p = store.bind_constant(&mut tape);
        let x = tape.constant(observation_tensor(&unique, self.config.obs_width)?);
        let enc = self.encode(&mut tape, &p, x)?;
        let v = tape.value(enc.value).data();
        Ok(map.iter().map(|&u| v[u]).collect())
    }

    pub fn decide<R: Rng>(
        &self,
        store: &ParameterStore,
        obs: &[JointObservation],
        mode: ActMode,
        rngs: &mut [R],
        cache: &mut DecisionCache,
    ) -> Result<Vec<Decision>> {
        decide_factorized(obs, mode, rngs, cache, |batch| {
            let mut tape = Tape::new();
            let p = store.bind_constant(&mut tape);
            let x = tape.constant(observation_tensor(batch, self.config.obs_width)?);
            let (enc, _, logits) = self.forward(&mut tape, &p, x)?;
            let (n, a) = (self.config.n_agents, self.config.n_actions);
            let rows = log_softmax_rows(tape.value(logits).data(), a);
            let values = tape.value(enc.value).data();
            Ok(rows
                .chunks(n)
                .zip(values)
                .map(|(r, &v)| (r.to_vec(), v))
                .collect())
        })
    }
}
