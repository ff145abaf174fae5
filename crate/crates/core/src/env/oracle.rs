//! Exact optimal values by value iteration over the reachable state space.

use std::collections::{HashMap, VecDeque};

use super::{Game, JointObservation};
use crate::error::{Error, Result};

/// Default cap on `reachable states x joint actions`.
pub const DEFAULT_STATE_BOUND: usize = 2_000_000;

const TOLERANCE: f64 = 1e-10;
const MAX_SWEEPS: usize = 1_000_000;

/// Every joint action of `n` agents with `a` actions each, in odometer order.
pub fn joint_actions(n: usize, a: usize) -> Vec<Vec<usize>> {
    let total = a.pow(n as u32);
    (0..total)
        .map(|mut code| {
            let mut acts = vec![0; n];
            for slot in acts.iter_mut() {
                *slot = code % a;
                code /= a;
            }
            acts
        })
        .collect()
}

/// Optimal state values plus a greedy joint action per reachable state.
#[derive(Debug, Clone)]
pub struct OracleSolution<S> {
    pub initial_value: f64,
    pub values: HashMap<S, f64>,
    pub greedy: HashMap<S, Vec<usize>>,
    pub sweeps: usize,
}

struct Model<S> {
    states: Vec<S>,
    /// Per state, per joint action: `(next state index, reward, done)`.
    edges: Vec<Vec<(usize, f64, bool)>>,
}

fn enumerate<G: Game>(game: &G, bound: usize) -> Result<(Model<G::State>, Vec<Vec<usize>>)> {
    let (n, a) = (game.n_agents(), game.n_actions());
    let joint_count = (a as u128).pow(n as u32);
    if joint_count > bound as u128 {
        return Err(Error::contract(format!(
            "joint action space of {joint_count} exceeds the enumeration bound {bound}"
        )));
    }
    let joint = joint_actions(n, a);
    let mut index: HashMap<G::State, usize> = HashMap::new();
    let mut states = Vec::new();
    let mut edges = Vec::new();
    let mut queue = VecDeque::new();
    let start = game.initial_state();
    index.insert(start.clone(), 0);
    states.push(start);
    queue.push_back(0);
    while let Some(i) = queue.pop_front() {
        let mut out = Vec::with_capacity(joint.len());
        for acts in &joint {
            let (next, reward, done) = game.transition(&states[i], acts);
            let j = if done {
                usize::MAX
            } else if let Some(&j) = index.get(&next) {
                j
            } else {
                let j = states.len();
                if (j + 1).saturating_mul(joint.len()) > bound {
                    return Err(Error::contract(format!(
                        "state space too large: more than {j} reachable states x {} joint actions exceeds bound {bound}",
                        joint.len()
                    )));
                }
                index.insert(next.clone(), j);
                states.push(next);
                queue.push_back(j);
                j
            };
            out.push((j, reward, done));
        }
        edges.push(out);
    }
    Ok((Model { states, edges }, joint))
}

/// Solves the game exactly. `bound` caps `states x joint actions`.
pub fn solve<G: Game>(game: &G, gamma: f64, bound: usize) -> Result<OracleSolution<G::State>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::config(format!("discount {gamma} outside [0, 1]")));
    }
    let (model, joint) = enumerate(game, bound)?;
    let mut v = vec![0.0; model.states.len()];
    let q = |v: &[f64], edge: &(usize, f64, bool)| {
        let (j, r, done) = *edge;
        if done {
            r
        } else {
            r + gamma * v[j]
        }
    };
    let mut sweeps = 0;
    loop {
        sweeps += 1;
        let mut delta: f64 = 0.0;
        for s in 0..model.states.len() {
            let best = model.edges[s].iter().map(|e| q(&v, e)).fold(f64::NEG_INFINITY, f64::max);
            delta = delta.max((best - v[s]).abs());
            v[s] = best;
        }
        if delta < TOLERANCE {
            break;
        }
        if sweeps >= MAX_SWEEPS {
            return Err(Error::contract("value iteration did not converge"));
        }
    }
    let mut greedy = HashMap::new();
    for s in 0..model.states.len() {
        let mut best = (0, f64::NEG_INFINITY);
        for (k, e) in model.edges[s].iter().enumerate() {
            let value = q(&v, e);
            if value > best.1 {
                best = (k, value);
            }
        }
        greedy.insert(model.states[s].clone(), joint[best.0].clone());
    }
    Ok(OracleSolution {
        initial_value: v[0],
        values: model.states.iter().cloned().zip(v).collect(),
        greedy,
        sweeps,
    })
}

/// `J*`: optimal discounted return from the initial state.
pub fn oracle_optimal_return<G: Game>(game: &G, gamma: f64, bound: usize) -> Result<f64> {
    Ok(solve(game, gamma, bound)?.initial_value)
}

/// Acts greedily with respect to the oracle's values, looking states up by
/// their observation.
#[derive(Debug, Clone)]
pub struct OraclePolicy {
    by_observation: HashMap<Vec<u64>, Vec<usize>>,
}

impl OraclePolicy {
    pub fn new<G: Game>(game: &G, gamma: f64, bound: usize) -> Result<Self> {
        let solution = solve(game, gamma, bound)?;
        let by_observation = solution
            .greedy
            .iter()
            .map(|(s, a)| (game.observe(s).key(), a.clone()))
            .collect();
        Ok(Self { by_observation })
    }

    pub fn action(&self, obs: &JointObservation) -> Option<&[usize]> {
        self.by_observation.get(&obs.key()).map(Vec::as_slice)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{MatrixGame, MatrixGameSpec, SpreadGrid, SpreadGridSpec};

    #[test]
    fn joint_action_enumeration() {
        let j = joint_actions(2, 3);
        assert_eq!(j.len(), 9);
        assert_eq!(j[0], vec![0, 0]);
        assert_eq!(j[1], vec![1, 0]);
        assert_eq!(j[8], vec![2, 2]);
    }

    #[test]
    fn single_step_game_value_is_best_payoff() {
        let spec = MatrixGameSpec {
            payoff: [[3.0, -2.0], [7.5, 0.0]],
        };
        let v = oracle_optimal_return(&MatrixGame::new(spec).unwrap(), 0.9, 100).unwrap();
        assert_eq!(v, 7.5);
    }

    #[test]
    fn oversized_spaces_are_refused() {
        let spec = SpreadGridSpec {
            agents: 4,
            length: 8,
            landmarks: vec![0, 7],
            starts: vec![0, 1, 2, 3],
            horizon: 5,
            collision_penalty: 0.1,
        };
        let err = oracle_optimal_return(&SpreadGrid::new(spec).unwrap(), 0.99, 1000).unwrap_err();
        assert!(err.to_string().contains("exceeds"), "{err}");
    }
}
