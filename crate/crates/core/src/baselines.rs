//! Comparison policies.
//!
//! [`SequentialPolicy`] decodes actions one agent at a time in a fixed order,
//! each agent conditioning on the actions already chosen. It has a per-agent
//! value head and is trained with per-agent ratios.
//!
//! [`SimultaneousPolicy`] shares the encoder and pooled critic of the
//! consensus model but drops the consensus: every agent acts from its own
//! encoded features only.

use rand::Rng;

use crate::compressor::Compressor;
use crate::env::JointObservation;
use crate::error::{Error, Result};
use crate::nn::{Activation, Decoder, Encoder, Mlp, PositionalEmbedding};
use crate::params::{Binding, ParamId, ParameterStore};
use crate::policy::{
    check_actions, choose, decide_factorized, dedup, finish_evaluation, log_softmax_rows,
    observation_tensor, ActMode, Decision, DecisionCache, Evaluation, ModelConfig, ModelKind,
};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct SequentialPolicy {
    pub config: ModelConfig,
    pub embed: Mlp,
    pub encoder: Encoder,
    pub value_head: Mlp,
    /// `[A + 1, d]`; the last row is the start token.
    pub action_tokens: ParamId,
    pub pos: PositionalEmbedding,
    pub decoder: Decoder,
    pub actor_mlp: Mlp,
}

impl SequentialPolicy {
    pub fn new(config: ModelConfig, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<Self> {
        if config.kind != ModelKind::MatSequential {
            return Err(Error::config(format!("{} is not the sequential model", config.kind)));
        }
        config.validate()?;
        if config.n_agents > config.max_positions {
            return Err(Error::config(format!(
                "{} agents need {} positions but the table holds {}",
                config.n_agents, config.n_agents, config.max_positions
            )));
        }
        let d = config.d_model;
        let embed = Mlp::new(store, "embed", &[config.obs_width, d, d], Activation::Relu, rng)?;
        let encoder = Encoder::new(store, "encoder", d, config.heads, config.encoder_blocks, rng)?;
        let value_head = Mlp::new(store, "value_head", &[d, d, 1], Activation::Relu, rng)?;
        value_head.zero_output_layer(store);
        let bound = (6.0 / (config.n_actions + 1 + d) as f64).sqrt();
        let table = (0..(config.n_actions + 1) * d)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let action_tokens = store.register("action_tokens", Tensor::new([config.n_actions + 1, d], table)?)?;
        let pos = PositionalEmbedding::new(store, "pos", config.max_positions, d, rng)?;
        let decoder = Decoder::new(store, "decoder", d, config.heads, config.decoder_blocks, rng)?;
        let actor_mlp = Mlp::new(store, "actor_mlp", &[2 * d, d, config.n_actions], Activation::Relu, rng)?;
        Ok(Self {
            config,
            embed,
            encoder,
            value_head,
            action_tokens,
            pos,
            decoder,
            actor_mlp,
        })
    }

    fn encode(&self, tape: &mut Tape<'_>, p: &Binding, obs: Var) -> Result<Var> {
        let x = self.embed.forward(tape, p, obs)?;
        self.encoder.forward(tape, p, x)
    }

    /// `[B, n]` per-agent values.
    fn agent_values(&self, tape: &mut Tape<'_>, p: &Binding, features: Var) -> Result<Var> {
        let v = self.value_head.forward(tape, p, features)?;
        let s = tape.shape(v)[..2].to_vec();
        Ok(tape.reshape(v, &s)?)
    }

    /// Decoder input for prefixes of equal length `k + 1`: the start token
    /// followed by the embedded actions of the first `k` agents in order.
    fn tokens(&self, tape: &mut Tape<'_>, p: &Binding, prefixes: &[&[usize]], len: usize) -> Result<Var> {
        let start = self.config.n_actions;
        let index: Vec<usize> = prefixes
            .iter()
            .flat_map(|pre| std::iter::once(start).chain(pre[..len - 1].iter().copied()))
            .collect();
        let d = self.config.d_model;
        let rows = tape.gather_rows(p.var(self.action_tokens), &index)?;
        let seq = tape.reshape(rows, &[prefixes.len(), len, d])?;
        let pos = tape.narrow(p.var(self.pos.table), 0, 0, len)?;
        Ok(tape.add(seq, pos)?)
    }

    /// Reorders the agent axis of `[B, n, ...]`: entry `k` of the result is entry `perm[k]` of `x`.
    fn reorder(tape: &mut Tape<'_>, x: Var, perm: &[usize]) -> Result<Var> {
        let rank = tape.shape(x).len();
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(0, 1);
        let t = tape.permute(x, &axes)?;
        let g = tape.gather_rows(t, perm)?;
        Ok(tape.permute(g, &axes)?)
    }

    pub fn evaluate(
        &self,
        tape: &mut Tape<'_>,
        p: &Binding,
        obs: &[JointObservation],
        actions: &[Vec<usize>],
    ) -> Result<Evaluation> {
        check_actions(actions, obs, self.config.n_actions)?;
        let keys = obs.iter().zip(actions).map(|(o, a)| {
            let mut k = o.key();
            k.extend(a.iter().map(|&x| x as u64));
            k
        });
        let (firsts, map) = dedup(keys);
        let unique: Vec<&JointObservation> = firsts.iter().map(|&i| &obs[i]).collect();
        let n = unique[0].n_agents();
        let order = &self.config.order;
        if order.len() != n {
            return Err(Error::contract(format!("order covers {} agents, batch has {n}", order.len())));
        }
        let ordered: Vec<Vec<usize>> = firsts
            .iter()
            .map(|&i| order.iter().map(|&a| actions[i][a]).collect())
            .collect();
        let prefixes: Vec<&[usize]> = ordered.iter().map(Vec::as_slice).collect();

        let x = tape.constant(observation_tensor(&unique, self.config.obs_width)?);
        let features = self.encode(tape, p, x)?;
        let values = self.agent_values(tape, p, features)?;
        let seq = self.tokens(tape, p, &prefixes, n)?;
        let dec = self.decoder.forward(tape, p, seq, features)?;
        let own = Self::reorder(tape, features, order)?;
        let joined = tape.concat(&[dec, own], 2)?;
        let logits_ordered = self.actor_mlp.forward(tape, p, joined)?;
        let mut inverse = vec![0; n];
        for (k, &a) in order.iter().enumerate() {
            inverse[a] = k;
        }
        let logits = Self::reorder(tape, logits_ordered, &inverse)?;
        finish_evaluation(tape, logits, values, &map, actions)
    }

    pub fn critic_values(&self, store: &ParameterStore, obs: &[JointObservation]) -> Result<Vec<f64>> {
        let (firsts, map) = dedup(obs.iter().map(JointObservation::key));
        let unique: Vec<&JointObservation> = firsts.iter().map(|&i| &obs[i]).collect();
        let mut tape = Tape::new();
        let p = store.bind_constant(&mut tape);
        let x = tape.constant(observation_tensor(&unique, self.config.obs_width)?);
        let features = self.encode(&mut tape, &p, x)?;
        let v = self.agent_values(&mut tape, &p, features)?;
        let mean = tape.mean_axis(v, 1)?;
        let v = tape.value(mean).data();
        Ok(map.iter().map(|&u| v[u]).collect())
    }

    /// Log-probabilities of agent `order[k]` for each `(observation, prefix)`
    /// pair, all prefixes holding `k` actions.
    pub fn step_log_probs(
        &self,
        store: &ParameterStore,
        items: &[(&JointObservation, &[usize])],
        k: usize,
    ) -> Result<Vec<Vec<f64>>> {
        if k >= self.config.n_agents {
            return Err(Error::contract(format!("step {k} with {} agents", self.config.n_agents)));
        }
        if items
            .iter()
            .any(|(_, pre)| pre.len() != k || pre.iter().any(|&a| a >= self.config.n_actions))
        {
            return Err(Error::contract(format!("every prefix must hold {k} valid actions")));
        }
        let mut tape = Tape::new();
        let p = store.bind_constant(&mut tape);
        let obs: Vec<&JointObservation> = items.iter().map(|(o, _)| *o).collect();
        let prefixes: Vec<&[usize]> = items.iter().map(|(_, pre)| *pre).collect();
        let b = items.len();
        let d = self.config.d_model;
        let x = tape.constant(observation_tensor(&obs, self.config.obs_width)?);
        let features = self.encode(&mut tape, &p, x)?;
        let seq = self.tokens(&mut tape, &p, &prefixes, k + 1)?;
        let dec = self.decoder.forward(&mut tape, &p, seq, features)?;
        let last = tape.narrow(dec, 1, k, 1)?;
        let last = tape.reshape(last, &[b, d])?;
        let own = tape.narrow(features, 1, self.config.order[k], 1)?;
        let own = tape.reshape(own, &[b, d])?;
        let joined = tape.concat(&[last, own], 1)?;
        let logits = self.actor_mlp.forward(&mut tape, &p, joined)?;
        Ok(log_softmax_rows(tape.value(logits).data(), self.config.n_actions))
    }

    pub fn decide<R: Rng>(
        &self,
        store: &ParameterStore,
        obs: &[JointObservation],
        mode: ActMode,
        rngs: &mut [R],
        cache: &mut DecisionCache,
    ) -> Result<Vec<Decision>> {
        let n = self.config.n_agents;
        if obs.iter().any(|o| o.n_agents() != n) {
            return Err(Error::contract(format!("sequential policy expects {n} agents")));
        }
        let obs_keys: Vec<Vec<u64>> = obs.iter().map(JointObservation::key).collect();

        let (firsts, _) = dedup(obs_keys.iter().cloned());
        let missing: Vec<usize> = firsts
            .into_iter()
            .filter(|&i| !cache.agent_values.contains_key(&obs_keys[i]))
            .collect();
        if !missing.is_empty() {
            let batch: Vec<JointObservation> = missing.iter().map(|&i| obs[i].clone()).collect();
            let mut tape = Tape::new();
            let p = store.bind_constant(&mut tape);
            let refs: Vec<&JointObservation> = batch.iter().collect();
            let x = tape.constant(observation_tensor(&refs, self.config.obs_width)?);
            let features = self.encode(&mut tape, &p, x)?;
            let v = self.agent_values(&mut tape, &p, features)?;
            for (row, &i) in tape.value(v).data().chunks(n).zip(&missing) {
                cache.agent_values.insert(obs_keys[i].clone(), row.to_vec());
            }
        }

        // `prefixes[b]` holds the actions chosen so far, in decision order.
        let mut prefixes: Vec<Vec<usize>> = vec![Vec::with_capacity(n); obs.len()];
        let mut log_probs: Vec<Vec<f64>> = vec![vec![0.0; n]; obs.len()];
        for k in 0..n {
            let keys: Vec<Vec<u64>> = obs_keys
                .iter()
                .zip(&prefixes)
                .map(|(o, pre)| {
                    let mut key = o.clone();
                    key.extend(pre.iter().map(|&a| a as u64));
                    key
                })
                .collect();
            let (firsts, _) = dedup(keys.iter().cloned());
            let missing: Vec<usize> = firsts.into_iter().filter(|&i| !cache.step.contains_key(&keys[i])).collect();
            if !missing.is_empty() {
                let items: Vec<(&JointObservation, &[usize])> =
                    missing.iter().map(|&i| (&obs[i], prefixes[i].as_slice())).collect();
                let rows = self.step_log_probs(store, &items, k)?;
                for (i, row) in missing.into_iter().zip(rows) {
                    cache.step.insert(keys[i].clone(), row);
                }
            }
            for (b, rng) in rngs.iter_mut().enumerate() {
                let row = &cache.step[&keys[b]];
                let a = choose(row, mode, rng);
                log_probs[b][self.config.order[k]] = row[a];
                prefixes[b].push(a);
            }
        }

        Ok(prefixes
            .into_iter()
            .zip(log_probs)
            .zip(&obs_keys)
            .map(|((ordered, log_probs), key)| {
                let mut actions = vec![0; n];
                for (k, &a) in ordered.iter().enumerate() {
                    actions[self.config.order[k]] = a;
                }
                let values = &cache.agent_values[key];
                Decision {
                    actions,
                    log_probs,
                    value: values.iter().sum::<f64>() / n as f64,
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone)]
pub struct SimultaneousPolicy {
    pub config: ModelConfig,
    pub embed: Mlp,
    pub encoder: Encoder,
    pub critic_compressor: Compressor,
    pub critic_mlp: Mlp,
    pub actor_mlp: Mlp,
}

impl SimultaneousPolicy {
    pub fn new(config: ModelConfig, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<Self> {
        if config.kind != ModelKind::Simultaneous {
            return Err(Error::config(format!("{} is not the simultaneous model", config.kind)));
        }
        config.validate()?;
        let d = config.d_model;
        let embed = Mlp::new(store, "embed", &[config.obs_width, d, d], Activation::Relu, rng)?;
        let encoder = Encoder::new(store, "encoder", d, config.heads, config.encoder_blocks, rng)?;
        let critic_compressor = Compressor::critic(store, d, config.compressor_heads, rng)?;
        let critic_mlp = Mlp::new(store, "critic_mlp", &[d, d, 1], Activation::Relu, rng)?;
        critic_mlp.zero_output_layer(store);
        let actor_mlp = Mlp::new(store, "actor_mlp", &[d, d, config.n_actions], Activation::Relu, rng)?;
        Ok(Self {
            config,
            embed,
            encoder,
            critic_compressor,
            critic_mlp,
            actor_mlp,
        })
    }

    /// `(features [B, n, d], value [B, 1], logits [B, n, A])`.
    pub fn forward(&self, tape: &mut Tape<'_>, p: &Binding, obs: Var) -> Result<(Var, Var, Var)> {
        let x = self.embed.forward(tape, p, obs)?;
        let features = self.encoder.forward(tape, p, x)?;
        let e0 = self.critic_compressor.compress(tape, p, features)?;
        let value = self.critic_mlp.forward(tape, p, e0)?;
        let logits = self.actor_mlp.forward(tape, p, features)?;
        Ok((features, value, logits))
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
        let (_, value, logits) = self.forward(tape, p, x)?;
        finish_evaluation(tape, logits, value, &map, actions)
    }

    pub fn critic_values(&self, store: &ParameterStore, obs: &[JointObservation]) -> Result<Vec<f64>> {
        let (firsts, map) = dedup(obs.iter().map(JointObservation::key));
        let unique: Vec<&JointObservation> = firsts.iter().map(|&i| &obs[i]).collect();
        let mut tape = Tape::new();
        let p = store.bind_constant(&mut tape);
        let x = tape.constant(observation_tensor(&unique, self.config.obs_width)?);
        let (_, value, _) = self.forward(&mut tape, &p, x)?;
        let v = tape.value(value).data();
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
            let (_, value, logits) = self.forward(&mut tape, &p, x)?;
            let rows = log_softmax_rows(tape.value(logits).data(), self.config.n_actions);
            let values = tape.value(value).data();
            Ok(rows
                .chunks(self.config.n_agents)
                .zip(values)
                .map(|(r, &v)| (r.to_vec(), v))
                .collect())
        })
    }
}
