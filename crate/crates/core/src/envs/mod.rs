//! Goal-reaching episodic environments: a partially observable maze family
//! indexed by grid side length, and a continuous point-mass reacher indexed
//! by arena half-width.

pub mod maze;
pub mod pointmass;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use maze::MazeState;
pub use pointmass::PointMassState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Maze,
    Pointmass,
}

/// `difficulty` is the grid side length for mazes and the arena half-width
/// for the point mass. `horizon == 0` selects the family default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub family: Family,
    pub difficulty: f64,
    #[serde(default)]
    pub horizon: u32,
    #[serde(default = "default_patch")]
    pub patch: usize,
}

fn default_patch() -> usize {
    5
}

pub const POINTMASS_DEFAULT_HORIZON: u32 = 60;

impl EnvConfig {
    pub fn maze(side: usize) -> Self {
        Self {
            family: Family::Maze,
            difficulty: side as f64,
            horizon: 0,
            patch: 5,
        }
    }

    pub fn pointmass(half_width: f64) -> Self {
        Self {
            family: Family::Pointmass,
            difficulty: half_width,
            horizon: 0,
            patch: 5,
        }
    }

    pub fn with_difficulty(&self, difficulty: f64) -> Self {
        Self {
            difficulty,
            ..self.clone()
        }
    }

    pub fn side(&self) -> usize {
        self.difficulty.round() as usize
    }

    pub fn resolved_horizon(&self) -> u32 {
        if self.horizon > 0 {
            return self.horizon;
        }
        match self.family {
            Family::Maze => (2 * self.side() * self.side()) as u32,
            Family::Pointmass => POINTMASS_DEFAULT_HORIZON,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.family {
            Family::Maze => {
                let n = self.side();
                if (self.difficulty - n as f64).abs() > 1e-9 || n < 5 || n % 2 == 0 {
                    return Err(Error::Config(format!(
                        "maze side must be an odd integer ≥ 5, got {}",
                        self.difficulty
                    )));
                }
                let h = self.resolved_horizon() as usize;
                if h < 2 * n * n {
                    return Err(Error::Config(format!(
                        "maze horizon {h} below 2·N² = {}",
                        2 * n * n
                    )));
                }
                if self.patch % 2 == 0 || self.patch == 0 {
                    return Err(Error::Config(format!("patch size {} must be odd", self.patch)));
                }
            }
            Family::Pointmass => {
                if !(self.difficulty > 0.0 && self.difficulty.is_finite()) {
                    return Err(Error::Config(format!(
                        "point-mass half-width must be positive, got {}",
                        self.difficulty
                    )));
                }
                if self.resolved_horizon() < 2 {
                    return Err(Error::Config("point-mass horizon must be ≥ 2".into()));
                }
            }
        }
        Ok(())
    }

    pub fn num_discrete_actions(&self) -> Option<usize> {
        match self.family {
            Family::Maze => Some(maze::NUM_ACTIONS),
            Family::Pointmass => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Observation {
    Patch(Vec<u8>),
    Continuous(Vec<f32>),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Action {
    Discrete(usize),
    Continuous([f32; 2]),
}

impl Action {
    pub fn discrete(self) -> Option<usize> {
        match self {
            Action::Discrete(a) => Some(a),
            Action::Continuous(_) => None,
        }
    }

    pub fn continuous(self) -> Option<[f32; 2]> {
        match self {
            Action::Continuous(a) => Some(a),
            Action::Discrete(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub observation: Observation,
    pub reward: f64,
    pub terminal: bool,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum EnvState {
    Maze(MazeState),
    Pointmass(PointMassState),
}

/// Deterministic initial state for `(config, seed)`.
pub fn reset(config: &EnvConfig, seed: u64) -> Result<(EnvState, Observation)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let state = match config.family {
        Family::Maze => EnvState::Maze(MazeState::generate(
            config.side(),
            config.resolved_horizon(),
            config.patch,
            &mut rng,
        )),
        Family::Pointmass => EnvState::Pointmass(PointMassState::spawn(
            config.difficulty,
            config.resolved_horizon(),
            &mut rng,
        )),
    };
    let obs = state.observe();
    Ok((state, obs))
}

impl EnvState {
    pub fn observe(&self) -> Observation {
        match self {
            EnvState::Maze(m) => Observation::Patch(m.observe()),
            EnvState::Pointmass(p) => Observation::Continuous(p.observe()),
        }
    }

    pub fn step(&mut self, action: Action) -> Result<Transition> {
        let (reward, terminal, success) = match (&mut *self, action) {
            (EnvState::Maze(m), Action::Discrete(a)) => m.apply(a)?,
            (EnvState::Pointmass(p), Action::Continuous(a)) => p.apply(a)?,
            (_, a) => {
                return Err(Error::Usage(format!(
                    "action {a:?} does not match the environment's action space"
                )))
            }
        };
        Ok(Transition {
            observation: self.observe(),
            reward,
            terminal,
            success,
        })
    }

    pub fn is_done(&self) -> bool {
        match self {
            EnvState::Maze(m) => m.done,
            EnvState::Pointmass(p) => p.done,
        }
    }

    pub fn elapsed(&self) -> u32 {
        match self {
            EnvState::Maze(m) => m.t,
            EnvState::Pointmass(p) => p.t,
        }
    }

    pub fn render(&self) -> String {
        match self {
            EnvState::Maze(m) => m.render(),
            EnvState::Pointmass(p) => format!(
                "pos=({:.3},{:.3}) goal=({:.3},{:.3}) t={}\n",
                p.pos[0], p.pos[1], p.goal[0], p.goal[1], p.t
            ),
        }
    }
}

/// BFS-optimal distance to the goal and a first move on an optimal path
/// (lowest action index among ties).
pub fn shortest_path(state: &EnvState) -> Result<(u32, Action)> {
    let EnvState::Maze(m) = state else {
        return Err(Error::Usage("shortest_path is defined for mazes only".into()));
    };
    let d = m.distances_to_goal();
    let len = d[m.agent.0 * m.side + m.agent.1];
    if len == u32::MAX {
        return Err(Error::Invariant(format!(
            "no path from {:?} to goal {:?}",
            m.agent, m.goal
        )));
    }
    Ok((len, Action::Discrete(m.first_move_towards(m.agent, &d))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn reset_is_deterministic() {
        let cfg = EnvConfig::maze(9);
        let (a, _) = reset(&cfg, 42).unwrap();
        let (b, _) = reset(&cfg, 42).unwrap();
        assert_eq!(a, b);
        let pm = EnvConfig::pointmass(1.0);
        assert_eq!(reset(&pm, 3).unwrap(), reset(&pm, 3).unwrap());
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(reset(&EnvConfig::maze(3), 0).is_err());
        assert!(reset(&EnvConfig::maze(6), 0).is_err());
        let mut short = EnvConfig::maze(7);
        short.horizon = 10;
        assert!(matches!(reset(&short, 0), Err(Error::Config(_))));
        assert!(reset(&EnvConfig::pointmass(0.0), 0).is_err());
    }

    #[test]
    fn n5_goals_reachable_over_1000_seeds() {
        let cfg = EnvConfig::maze(5);
        for seed in 0..1000 {
            let (s, _) = reset(&cfg, seed).unwrap();
            let EnvState::Maze(m) = &s else { unreachable!() };
            assert_ne!(m.agent, m.goal);
            // independent flood fill over floor cells
            let n = m.side;
            let mut seen = vec![false; n * n];
            let mut stack = vec![m.agent];
            seen[m.agent.0 * n + m.agent.1] = true;
            while let Some((r, c)) = stack.pop() {
                for (dr, dc) in [(0i32, 1i32), (1, 0), (0, -1), (-1, 0)] {
                    let (nr, nc) = ((r as i32 + dr) as usize, (c as i32 + dc) as usize);
                    if !m.walls[nr * n + nc] && !seen[nr * n + nc] {
                        seen[nr * n + nc] = true;
                        stack.push((nr, nc));
                    }
                }
            }
            assert!(seen[m.goal.0 * n + m.goal.1], "seed {seed}");
        }
    }

    #[test]
    fn adjacent_goal_step_succeeds() {
        let (mut s, _) = reset(&EnvConfig::maze(7), 5).unwrap();
        loop {
            let (len, a) = shortest_path(&s).unwrap();
            let t = s.step(a).unwrap();
            if len == 1 {
                assert!(t.success && t.terminal && t.reward == 1.0);
                break;
            }
            assert_eq!(t.reward, 0.0);
        }
    }

    #[test]
    fn agent_on_goal_has_zero_length() {
        let (s, _) = reset(&EnvConfig::maze(7), 1).unwrap();
        let EnvState::Maze(mut m) = s else { unreachable!() };
        m.agent = m.goal;
        let (len, a) = shortest_path(&EnvState::Maze(m)).unwrap();
        assert_eq!((len, a), (0, Action::Discrete(maze::NOOP)));
    }

    /// Dijkstra with unit weights and a binary heap, written without the BFS helper.
    fn dijkstra(m: &MazeState) -> u32 {
        use std::cmp::Reverse;
        use std::collections::BinaryHeap;
        let n = m.side;
        let mut best = vec![u32::MAX; n * n];
        let mut heap = BinaryHeap::new();
        best[m.agent.0 * n + m.agent.1] = 0;
        heap.push(Reverse((0u32, m.agent)));
        while let Some(Reverse((d, (r, c)))) = heap.pop() {
            if (r, c) == m.goal {
                return d;
            }
            if d > best[r * n + c] {
                continue;
            }
            for (dr, dc) in [(-1i32, 0i32), (1, 0), (0, -1), (0, 1)] {
                let (nr, nc) = ((r as i32 + dr) as usize, (c as i32 + dc) as usize);
                if m.walls[nr * n + nc] {
                    continue;
                }
                if d + 1 < best[nr * n + nc] {
                    best[nr * n + nc] = d + 1;
                    heap.push(Reverse((d + 1, (nr, nc))));
                }
            }
        }
        u32::MAX
    }

    #[test]
    fn shortest_path_matches_dijkstra() {
        for seed in 0..100 {
            let side = [5, 7, 9, 11][seed as usize % 4];
            let (s, _) = reset(&EnvConfig::maze(side), seed).unwrap();
            let EnvState::Maze(m) = &s else { unreachable!() };
            let (len, first) = shortest_path(&s).unwrap();
            assert_eq!(len, dijkstra(m));
            let next = m.neighbor(m.agent, first.discrete().unwrap());
            let mut after = m.clone();
            after.agent = next;
            assert_eq!(dijkstra(&after), len - 1);
        }
    }

    /// Replays a recorded action trace on a fresh state and reports whether
    /// the goal cell was ever occupied.
    fn replay_hits_goal(cfg: &EnvConfig, seed: u64, actions: &[usize]) -> bool {
        let (s, _) = reset(cfg, seed).unwrap();
        let EnvState::Maze(m) = s else { unreachable!() };
        let mut pos = m.agent;
        for &a in actions {
            let (dr, dc) = [(-1i32, 0i32), (1, 0), (0, -1), (0, 1), (0, 0)][a];
            let cand = ((pos.0 as i32 + dr) as usize, (pos.1 as i32 + dc) as usize);
            if !m.walls[cand.0 * m.side + cand.1] {
                pos = cand;
            }
            if pos == m.goal {
                return true;
            }
        }
        false
    }

    #[test]
    fn success_flag_matches_trace_replay() {
        let mut cfg = EnvConfig::maze(7);
        cfg.horizon = 200;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for seed in 0..100 {
            let (mut s, _) = reset(&cfg, seed).unwrap();
            let mut trace = Vec::new();
            let mut total = 0.0;
            let mut success = false;
            while !s.is_done() {
                let a = rng.gen_range(0..maze::NUM_ACTIONS);
                trace.push(a);
                let t = s.step(Action::Discrete(a)).unwrap();
                total += t.reward;
                success = t.success;
            }
            assert!(s.elapsed() <= 200);
            assert_eq!(success, replay_hits_goal(&cfg, seed, &trace));
            assert_eq!(total, if success { 1.0 } else { 0.0 });
            assert!(s.step(Action::Discrete(0)).is_err());
        }
    }

    #[test]
    fn difficulty_increases_expected_path_length() {
        let mut prev = 0.0;
        for side in [5, 7, 9, 11] {
            let cfg = EnvConfig::maze(side);
            let mean = (0..1000)
                .map(|seed| shortest_path(&reset(&cfg, seed).unwrap().0).unwrap().0 as f64)
                .sum::<f64>()
                / 1000.0;
            assert!(mean > prev, "N={side}: {mean} ≤ {prev}");
            prev = mean;
        }
    }

    #[test]
    fn mismatched_action_is_usage_error() {
        let (mut s, _) = reset(&EnvConfig::maze(5), 0).unwrap();
        assert!(matches!(
            s.step(Action::Continuous([0.0, 0.0])),
            Err(Error::Usage(_))
        ));
    }
}
