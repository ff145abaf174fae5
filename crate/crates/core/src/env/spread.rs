use super::{one_hot, Game, JointObservation};
use crate::error::{Error, Result};

pub const LEFT: usize = 0;
pub const STAY: usize = 1;
pub const RIGHT: usize = 2;

/// Agents on a line of `length` cells who should each cover a distinct
/// landmark without sharing cells.
#[derive(Debug, Clone, PartialEq)]
pub struct SpreadGridSpec {
    pub agents: usize,
    pub length: usize,
    pub landmarks: Vec<usize>,
    pub starts: Vec<usize>,
    pub horizon: usize,
    pub collision_penalty: f64,
}

impl Default for SpreadGridSpec {
    /// Two agents stacked in the middle of a 5-cell line with landmarks at
    /// both ends, three steps to split up.
    fn default() -> Self {
        Self {
            agents: 2,
            length: 5,
            landmarks: vec![0, 4],
            starts: vec![2, 2],
            horizon: 3,
            collision_penalty: 0.1,
        }
    }
}

impl SpreadGridSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(format!("spread grid: {msg}")));
        if self.agents == 0 || self.agents > self.length {
            return bad(format!("need 1 <= agents ({}) <= length ({})", self.agents, self.length));
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if self.starts.len() != self.agents {
            return bad(format!("{} start cells given for {} agents", self.starts.len(), self.agents));
        }
        if self.landmarks.is_empty() {
            return bad("at least one landmark required".into());
        }
        if let Some(p) = self.starts.iter().chain(&self.landmarks).find(|&&p| p >= self.length) {
            return bad(format!("cell {p} outside line of length {}", self.length));
        }
        if !self.collision_penalty.is_finite() || self.collision_penalty < 0.0 {
            return bad("collision penalty must be finite and non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SpreadState {
    pub positions: Vec<usize>,
    pub t: usize,
}

#[derive(Debug, Clone)]
pub struct SpreadGrid {
    spec: SpreadGridSpec,
}

impl SpreadGrid {
    pub fn new(spec: SpreadGridSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &SpreadGridSpec {
        &self.spec
    }

    /// Landmarks covered by exactly one agent, minus the penalty per pair of
    /// agents sharing a cell.
    pub fn reward_at(&self, positions: &[usize]) -> f64 {
        let count = |cell: usize| positions.iter().filter(|&&p| p == cell).count();
        let covered = self.spec.landmarks.iter().filter(|&&l| count(l) == 1).count();
        let mut pairs = 0usize;
        for i in 0..positions.len() {
            for j in i + 1..positions.len() {
                if positions[i] == positions[j] {
                    pairs += 1;
                }
            }
        }
        covered as f64 - self.spec.collision_penalty * pairs as f64
    }
}

impl Game for SpreadGrid {
    type State = SpreadState;

    fn n_agents(&self) -> usize {
        self.spec.agents
    }

    fn n_actions(&self) -> usize {
        3
    }

    /// Everyone's position, every landmark, elapsed fraction of the
    /// episode, then the agent's one-hot id.
    fn obs_width(&self) -> usize {
        2 * self.spec.agents + self.spec.landmarks.len() + 1
    }

    fn initial_state(&self) -> SpreadState {
        SpreadState {
            positions: self.spec.starts.clone(),
            t: 0,
        }
    }

    fn transition(&self, state: &SpreadState, actions: &[usize]) -> (SpreadState, f64, bool) {
        let last = self.spec.length - 1;
        let positions: Vec<usize> = state
            .positions
            .iter()
            .zip(actions)
            .map(|(&p, &a)| match a {
                LEFT => p.saturating_sub(1),
                RIGHT => (p + 1).min(last),
                _ => p,
            })
            .collect();
        let reward = self.reward_at(&positions);
        let t = state.t + 1;
        (SpreadState { positions, t }, reward, t >= self.spec.horizon)
    }

    fn observe(&self, state: &SpreadState) -> JointObservation {
        let scale = (self.spec.length - 1).max(1) as f64;
        let mut shared: Vec<f64> = state.positions.iter().map(|&p| p as f64 / scale).collect();
        shared.extend(self.spec.landmarks.iter().map(|&l| l as f64 / scale));
        shared.push(state.t as f64 / self.spec.horizon as f64);
        let agents = (0..self.spec.agents)
            .map(|i| {
                let mut o = shared.clone();
                o.extend(one_hot(i, self.spec.agents));
                o
            })
            .collect();
        JointObservation::new(agents, state.t).expect("fixed shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(spec: SpreadGridSpec) -> SpreadGrid {
        SpreadGrid::new(spec).unwrap()
    }

    #[test]
    fn agents_on_distinct_landmarks_staying_earn_n() {
        let g = grid(SpreadGridSpec {
            agents: 3,
            length: 6,
            landmarks: vec![0, 2, 5],
            starts: vec![0, 2, 5],
            horizon: 4,
            collision_penalty: 0.1,
        });
        let (_, r, done) = g.transition(&g.initial_state(), &[STAY; 3]);
        assert_eq!(r, 3.0);
        assert!(!done);
    }

    #[test]
    fn shared_cell_costs_the_penalty() {
        let g = grid(SpreadGridSpec::default());
        // Both on cell 2 (not a landmark): only the pair penalty applies.
        assert!((g.reward_at(&[2, 2]) + 0.1).abs() < 1e-15);
        // Both on landmark 0: it is not covered by exactly one agent.
        assert!((g.reward_at(&[0, 0]) + 0.1).abs() < 1e-15);
        assert_eq!(g.reward_at(&[0, 4]), 2.0);
    }

    #[test]
    fn walls_clamp_moves() {
        let g = grid(SpreadGridSpec {
            starts: vec![0, 4],
            ..SpreadGridSpec::default()
        });
        let (s, _, _) = g.transition(&g.initial_state(), &[LEFT, RIGHT]);
        assert_eq!(s.positions, vec![0, 4]);
    }

    #[test]
    fn invalid_specs_are_config_errors() {
        let too_many = SpreadGridSpec {
            agents: 6,
            starts: vec![0; 6],
            ..SpreadGridSpec::default()
        };
        assert!(matches!(SpreadGrid::new(too_many), Err(Error::Config(_))));
        let off_grid = SpreadGridSpec {
            landmarks: vec![5],
            ..SpreadGridSpec::default()
        };
        assert!(SpreadGrid::new(off_grid).is_err());
        let no_time = SpreadGridSpec {
            horizon: 0,
            ..SpreadGridSpec::default()
        };
        assert!(SpreadGrid::new(no_time).is_err());
    }

    #[test]
    fn episode_ends_at_horizon() {
        let g = grid(SpreadGridSpec::default());
        let mut s = g.initial_state();
        for t in 0..3 {
            let (next, _, done) = g.transition(&s, &[STAY, STAY]);
            assert_eq!(done, t == 2);
            s = next;
        }
    }
}
