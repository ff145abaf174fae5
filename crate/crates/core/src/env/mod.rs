//! Fully observable cooperative Markov games with a shared reward.
//!
//! Games are written against [`Game`], a pure transition function over an
//! enumerable state. [`GameEnv`] wraps a game with a current state to give the
//! stateful [`Environment`] interface used for rollouts, and the same
//! transition function drives the exact oracle in [`oracle`].

mod matrix;
pub mod oracle;
mod rollout;
mod spread;

pub use matrix::{MatrixGame, MatrixGameSpec};
pub use oracle::{oracle_optimal_return, OraclePolicy, OracleSolution, DEFAULT_STATE_BOUND};
pub use rollout::{rollout, RolloutWorkers};
pub use spread::{SpreadGrid, SpreadGridSpec, LEFT, RIGHT, STAY};

use std::hash::Hash;

use crate::error::{Error, Result};

/// Per-agent observation vectors for one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct JointObservation {
    n_agents: usize,
    width: usize,
    data: Vec<f64>,
    /// Timestep within the episode.
    pub step: usize,
}

impl JointObservation {
    pub fn new(agents: Vec<Vec<f64>>, step: usize) -> Result<Self> {
        let n_agents = agents.len();
        if n_agents == 0 {
            return Err(Error::contract("joint observation needs at least one agent"));
        }
        let width = agents[0].len();
        if width == 0 || agents.iter().any(|a| a.len() != width) {
            return Err(Error::contract(
                "observation widths must be uniform and non-zero across agents",
            ));
        }
        Ok(Self {
            n_agents,
            width,
            data: agents.concat(),
            step,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn agent(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    /// Row-major `[n_agents, width]` buffer.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Reorders agents: agent `k` of the result is agent `perm[k]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let agents = perm.iter().map(|&i| self.agent(i).to_vec()).collect();
        Self::new(agents, self.step).expect("permutation keeps shape")
    }

    /// Bit pattern of the observation content, usable as a hash key.
    pub fn key(&self) -> Vec<u64> {
        self.data.iter().map(|v| v.to_bits()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub observation: JointObservation,
    pub reward: f64,
    pub done: bool,
}

/// Deterministic cooperative game over an enumerable state space.
pub trait Game {
    type State: Clone + Eq + Hash + std::fmt::Debug;

    fn n_agents(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn obs_width(&self) -> usize;
    fn initial_state(&self) -> Self::State;
    /// `(next state, shared reward, episode finished)`.
    fn transition(&self, state: &Self::State, actions: &[usize]) -> (Self::State, f64, bool);
    fn observe(&self, state: &Self::State) -> JointObservation;
}

/// Stateful environment interface used by rollouts.
pub trait Environment {
    fn n_agents(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn obs_width(&self) -> usize;
    fn reset(&mut self) -> JointObservation;
    fn step(&mut self, actions: &[usize]) -> Result<EnvStep>;
}

/// A [`Game`] together with its current state.
#[derive(Debug, Clone)]
pub struct GameEnv<G: Game> {
    game: G,
    state: G::State,
    done: bool,
}

impl<G: Game> GameEnv<G> {
    pub fn new(game: G) -> Self {
        let state = game.initial_state();
        Self {
            game,
            state,
            done: false,
        }
    }

    pub fn game(&self) -> &G {
        &self.game
    }

    pub fn state(&self) -> &G::State {
        &self.state
    }
}

impl<G: Game> Environment for GameEnv<G> {
    fn n_agents(&self) -> usize {
        self.game.n_agents()
    }

    fn n_actions(&self) -> usize {
        self.game.n_actions()
    }

    fn obs_width(&self) -> usize {
        self.game.obs_width()
    }

    fn reset(&mut self) -> JointObservation {
        self.state = self.game.initial_state();
        self.done = false;
        self.game.observe(&self.state)
    }

    fn step(&mut self, actions: &[usize]) -> Result<EnvStep> {
        if self.done {
            return Err(Error::contract("step called on a finished episode"));
        }
        if actions.len() != self.game.n_agents() || actions.iter().any(|&a| a >= self.game.n_actions()) {
            return Err(Error::contract(format!(
                "invalid joint action {actions:?} for {} agents with {} actions",
                self.game.n_agents(),
                self.game.n_actions()
            )));
        }
        let (next, reward, done) = self.game.transition(&self.state, actions);
        self.state = next;
        self.done = done;
        Ok(EnvStep {
            observation: self.game.observe(&self.state),
            reward,
            done,
        })
    }
}

/// Environment selection as it appears in experiment configs.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvSpec {
    Matrix(MatrixGameSpec),
    Spread(SpreadGridSpec),
}

impl EnvSpec {
    pub fn name(&self) -> &'static str {
        match self {
            EnvSpec::Matrix(_) => "matrix",
            EnvSpec::Spread(_) => "spread",
        }
    }

    pub fn build(&self) -> Result<Env> {
        Ok(match self {
            EnvSpec::Matrix(s) => Env::Matrix(GameEnv::new(MatrixGame::new(s.clone())?)),
            EnvSpec::Spread(s) => Env::Spread(GameEnv::new(SpreadGrid::new(s.clone())?)),
        })
    }

    pub fn n_agents(&self) -> usize {
        match self {
            EnvSpec::Matrix(_) => 2,
            EnvSpec::Spread(s) => s.agents,
        }
    }

    /// `(agents, actions per agent, observation width)`.
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        let env = self.build()?;
        Ok((env.n_agents(), env.n_actions(), env.obs_width()))
    }

    /// Exact optimal discounted return from the initial state.
    pub fn oracle_optimal_return(&self, gamma: f64, state_bound: usize) -> Result<f64> {
        match self {
            EnvSpec::Matrix(s) => oracle_optimal_return(&MatrixGame::new(s.clone())?, gamma, state_bound),
            EnvSpec::Spread(s) => oracle_optimal_return(&SpreadGrid::new(s.clone())?, gamma, state_bound),
        }
    }
}

/// Concrete environments selectable from configs.
#[derive(Debug, Clone)]
pub enum Env {
    Matrix(GameEnv<MatrixGame>),
    Spread(GameEnv<SpreadGrid>),
}

impl Environment for Env {
    fn n_agents(&self) -> usize {
        match self {
            Env::Matrix(e) => e.n_agents(),
            Env::Spread(e) => e.n_agents(),
        }
    }

    fn n_actions(&self) -> usize {
        match self {
            Env::Matrix(e) => e.n_actions(),
            Env::Spread(e) => e.n_actions(),
        }
    }

    fn obs_width(&self) -> usize {
        match self {
            Env::Matrix(e) => e.obs_width(),
            Env::Spread(e) => e.obs_width(),
        }
    }

    fn reset(&mut self) -> JointObservation {
        match self {
            Env::Matrix(e) => e.reset(),
            Env::Spread(e) => e.reset(),
        }
    }

    fn step(&mut self, actions: &[usize]) -> Result<EnvStep> {
        match self {
            Env::Matrix(e) => e.step(actions),
            Env::Spread(e) => e.step(actions),
        }
    }
}

/// `n`-dimensional one-hot vector with a 1 at `i`.
pub(crate) fn one_hot(i: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}
