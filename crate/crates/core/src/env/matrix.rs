use super::{one_hot, Game, JointObservation};
use crate::error::{Error, Result};

/// Two-agent, two-action, single-step cooperative game.
///
/// `payoff[row][col]` is indexed by agent 2's action (row) and agent 1's
/// action (column); action 0 is `A`, action 1 is `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixGameSpec {
    pub payoff: [[f64; 2]; 2],
}

impl Default for MatrixGameSpec {
    /// The table with two pure equilibria, `(A, A)` worth 1 and `(B, B)`
    /// worth 100, where miscoordinating on `(B, A)` costs 100.
    fn default() -> Self {
        Self {
            payoff: [[1.0, -100.0], [0.0, 100.0]],
        }
    }
}

impl MatrixGameSpec {
    /// Shared reward for agent 1 playing `a1` and agent 2 playing `a2`.
    pub fn reward(&self, a1: usize, a2: usize) -> f64 {
        self.payoff[a2][a1]
    }

    /// Pure joint actions `(a1, a2)` from which no single agent gains by
    /// deviating unilaterally.
    pub fn pure_nash_equilibria(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for a1 in 0..2 {
            for a2 in 0..2 {
                let r = self.reward(a1, a2);
                let agent1_stays = (0..2).all(|d| self.reward(d, a2) <= r);
                let agent2_stays = (0..2).all(|d| self.reward(a1, d) <= r);
                if agent1_stays && agent2_stays {
                    out.push((a1, a2));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct MatrixGame {
    spec: MatrixGameSpec,
}

impl MatrixGame {
    pub fn new(spec: MatrixGameSpec) -> Result<Self> {
        if spec.payoff.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::config("matrix payoff entries must be finite"));
        }
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &MatrixGameSpec {
        &self.spec
    }
}

impl Game for MatrixGame {
    /// `true` once the single step has been played.
    type State = bool;

    fn n_agents(&self) -> usize {
        2
    }

    fn n_actions(&self) -> usize {
        2
    }

    fn obs_width(&self) -> usize {
        3
    }

    fn initial_state(&self) -> bool {
        false
    }

    fn transition(&self, _state: &bool, actions: &[usize]) -> (bool, f64, bool) {
        (true, self.spec.reward(actions[0], actions[1]), true)
    }

    /// A constant bias feature followed by the agent's one-hot id.
    fn observe(&self, state: &bool) -> JointObservation {
        let agents = (0..2)
            .map(|i| {
                let mut o = vec![1.0];
                o.extend(one_hot(i, 2));
                o
            })
            .collect();
        JointObservation::new(agents, usize::from(*state)).expect("fixed shape")
    }
}
