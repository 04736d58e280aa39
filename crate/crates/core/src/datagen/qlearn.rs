//! Tabular Q-learning source agent for the maze family.
//!
//! The table is keyed on what the agent can see rather than where it is:
//! the packed egocentric patch plus one bit per neighbouring cell saying
//! whether it was already visited this episode. Layouts are fresh every
//! episode, so a position-keyed table would not transfer between them.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{policy_rng, rollout, Policy};
use crate::envs::{self, maze, shortest_path, Action, EnvConfig, EnvState, Family, Observation};
use crate::error::{Error, Result};

const TRAIN_SEED_BASE: u64 = 1 << 40;
const EVAL_SEED_BASE: u64 = 2 << 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceAgentConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_decay_episodes: u32,
    pub episodes: u32,
    /// Training-episode counts after which a snapshot is captured.
    pub snapshots: Vec<u32>,
    pub eval_episodes: u32,
    pub seed: u64,
    /// Final-snapshot success below this marks the run as not converged.
    pub target_success: f64,
}

impl Default for SourceAgentConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            gamma: 0.95,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_decay_episodes: 1500,
            episodes: 2000,
            snapshots: vec![100, 500, 2000],
            eval_episodes: 100,
            seed: 0,
            target_success: 0.9,
        }
    }
}

impl SourceAgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        for (name, e) in [("eps_start", self.eps_start), ("eps_end", self.eps_end)] {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::Config(format!("{name} {e} outside [0, 1]")));
            }
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0, 1]", self.alpha)));
        }
        if self.snapshots.is_empty() {
            return Err(Error::Config("snapshot schedule is empty".into()));
        }
        if self.snapshots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "snapshot indices {:?} not strictly increasing",
                self.snapshots
            )));
        }
        if self.snapshots.iter().any(|&s| s > self.episodes) {
            return Err(Error::Config(format!(
                "snapshot index beyond the {} training episodes",
                self.episodes
            )));
        }
        Ok(())
    }

    pub fn epsilon(&self, episode: u32) -> f64 {
        if self.eps_decay_episodes == 0 {
            return self.eps_end;
        }
        let f = (episode as f64 / self.eps_decay_episodes as f64).min(1.0);
        self.eps_start + (self.eps_end - self.eps_start) * f
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SnapshotProvenance {
    QLearning,
    /// Deterministic fallback: shortest-path expert with ε-random actions.
    ScriptedExpert,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub stage: u32,
    pub provenance: SnapshotProvenance,
    /// Exploration rate in force at capture; rollouts act ε-greedily with it.
    pub epsilon: f64,
    pub episode_index: u32,
    pub success_rate: f64,
    #[serde(default)]
    pub table: HashMap<u64, [f32; maze::NUM_ACTIONS]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceRun {
    pub snapshots: Vec<PolicySnapshot>,
    /// Success flag of every training episode, in order.
    pub learning_curve: Vec<bool>,
    pub converged: bool,
}

/// Packed egocentric state: 2 bits per patch cell, then 4 visited bits.
pub fn state_key(patch: &[u8], visited_neighbors: [bool; 4]) -> u64 {
    let mut k = 0u64;
    for &c in patch {
        k = (k << 2) | c as u64;
    }
    for v in visited_neighbors {
        k = (k << 1) | v as u64;
    }
    k
}

/// Inverse of [`state_key`] for a patch of `cells` entries.
pub fn decode_key(key: u64, cells: usize) -> (Vec<u8>, [bool; 4]) {
    let mut visited = [false; 4];
    for (i, v) in visited.iter_mut().enumerate() {
        *v = (key >> (3 - i)) & 1 == 1;
    }
    let mut bits = key >> 4;
    let mut patch = vec![0u8; cells];
    for c in patch.iter_mut().rev() {
        *c = (bits & 3) as u8;
        bits >>= 2;
    }
    (patch, visited)
}

struct Visits {
    side: usize,
    seen: Vec<bool>,
}

impl Visits {
    fn new(m: &maze::MazeState) -> Self {
        let mut v = Self {
            side: m.side,
            seen: vec![false; m.side * m.side],
        };
        v.mark(m.agent);
        v
    }

    fn mark(&mut self, p: (usize, usize)) {
        self.seen[p.0 * self.side + p.1] = true;
    }

    fn key(&self, m: &maze::MazeState) -> u64 {
        let mut nb = [false; 4];
        for (a, slot) in nb.iter_mut().enumerate() {
            let p = m.neighbor(m.agent, a);
            *slot = p != m.agent && self.seen[p.0 * self.side + p.1];
        }
        state_key(&m.observe(), nb)
    }
}

fn greedy(q: &[f32; maze::NUM_ACTIONS], rng: &mut ChaCha8Rng) -> usize {
    let best = q.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let ties: Vec<usize> = (0..q.len()).filter(|&a| q[a] == best).collect();
    ties[rng.gen_range(0..ties.len())]
}

fn epsilon_greedy(
    table: &HashMap<u64, [f32; maze::NUM_ACTIONS]>,
    key: u64,
    eps: f64,
    rng: &mut ChaCha8Rng,
) -> usize {
    if rng.gen::<f64>() < eps {
        return rng.gen_range(0..maze::NUM_ACTIONS);
    }
    match table.get(&key) {
        Some(q) => greedy(q, rng),
        None => rng.gen_range(0..maze::NUM_ACTIONS),
    }
}

/// Acts like the agent did at the moment a snapshot was taken.
pub struct QPolicy<'a> {
    snapshot: &'a PolicySnapshot,
    visits: Option<Visits>,
}

impl<'a> QPolicy<'a> {
    pub fn new(snapshot: &'a PolicySnapshot) -> Self {
        Self {
            snapshot,
            visits: None,
        }
    }
}

impl Policy for QPolicy<'_> {
    fn begin_episode(&mut self, state: &EnvState, _: &mut ChaCha8Rng) {
        self.visits = match state {
            EnvState::Maze(m) => Some(Visits::new(m)),
            EnvState::Pointmass(_) => None,
        };
    }

    fn act(&mut self, state: &EnvState, _: &Observation, rng: &mut ChaCha8Rng) -> Result<Action> {
        let EnvState::Maze(m) = state else {
            return Err(Error::Usage("tabular snapshots act in mazes only".into()));
        };
        let visits = self
            .visits
            .as_mut()
            .ok_or_else(|| Error::Usage("begin_episode not called".into()))?;
        let a = match self.snapshot.provenance {
            SnapshotProvenance::QLearning => {
                epsilon_greedy(&self.snapshot.table, visits.key(m), self.snapshot.epsilon, rng)
            }
            SnapshotProvenance::ScriptedExpert => {
                if rng.gen::<f64>() < self.snapshot.epsilon {
                    rng.gen_range(0..maze::NUM_ACTIONS)
                } else {
                    shortest_path(state)?.1.discrete().unwrap_or(maze::NOOP)
                }
            }
        };
        visits.mark(m.neighbor(m.agent, a));
        Ok(Action::Discrete(a))
    }
}

fn measure(snapshot: &PolicySnapshot, env: &EnvConfig, episodes: u32, salt: u64) -> Result<f64> {
    if episodes == 0 {
        return Ok(0.0);
    }
    let mut policy = QPolicy::new(snapshot);
    let mut wins = 0u32;
    for i in 0..episodes {
        let ep = rollout(&mut policy, env, EVAL_SEED_BASE + salt + i as u64, u32::MAX)?;
        wins += ep.success as u32;
    }
    Ok(wins as f64 / episodes as f64)
}

pub fn train_source_agent(env: &EnvConfig, config: &SourceAgentConfig) -> Result<SourceRun> {
    config.validate()?;
    env.validate()?;
    if env.family != Family::Maze {
        return Err(Error::Usage(
            "the tabular source agent is defined for the maze family only".into(),
        ));
    }
    let mut table: HashMap<u64, [f32; maze::NUM_ACTIONS]> = HashMap::new();
    let mut curve = Vec::with_capacity(config.episodes as usize);
    let mut snapshots = Vec::with_capacity(config.snapshots.len());
    let alpha = config.alpha as f32;
    let gamma = config.gamma as f32;
    let salt = config.seed.wrapping_mul(0x9E37_79B9);

    let capture = |episode: u32, table: &HashMap<u64, [f32; 5]>, snaps: &mut Vec<PolicySnapshot>| -> Result<()> {
        let eps = config.epsilon(episode);
        let mut snap = PolicySnapshot {
            stage: snaps.len() as u32,
            provenance: SnapshotProvenance::QLearning,
            epsilon: eps,
            episode_index: episode,
            success_rate: 0.0,
            table: table.clone(),
        };
        snap.success_rate = measure(&snap, env, config.eval_episodes, salt)?;
        snaps.push(snap);
        Ok(())
    };

    let mut next_snap = 0usize;
    // Index 0 means "before any training".
    if config.snapshots[0] == 0 {
        capture(0, &table, &mut snapshots)?;
        next_snap = 1;
    }
    for e in 0..config.episodes {
        let eps = config.epsilon(e);
        let seed = TRAIN_SEED_BASE + salt + e as u64;
        let (state, _) = envs::reset(env, seed)?;
        let EnvState::Maze(mut m) = state else { unreachable!() };
        let mut rng = policy_rng(seed ^ salt);
        let mut visits = Visits::new(&m);
        let mut key = visits.key(&m);
        loop {
            let a = epsilon_greedy(&table, key, eps, &mut rng);
            let (r, terminal, success) = m.apply(a)?;
            visits.mark(m.agent);
            let next = visits.key(&m);
            let bootstrap = if success {
                0.0
            } else {
                table.get(&next).map_or(0.0, |q| q.iter().cloned().fold(f32::MIN, f32::max))
            };
            let q = table.entry(key).or_insert([0.0; maze::NUM_ACTIONS]);
            q[a] += alpha * (r as f32 + gamma * bootstrap - q[a]);
            key = next;
            if terminal {
                curve.push(success);
                break;
            }
        }
        if config.snapshots.get(next_snap) == Some(&(e + 1)) {
            capture(e + 1, &table, &mut snapshots)?;
            next_snap += 1;
        }
    }
    let converged = snapshots
        .last()
        .is_some_and(|s| s.success_rate >= config.target_success);
    Ok(SourceRun {
        snapshots,
        learning_curve: curve,
        converged,
    })
}

/// Snapshots of the scripted fallback generator, one per exploration rate,
/// ordered from most to least random.
pub fn scripted_snapshots(env: &EnvConfig, epsilons: &[f64], eval_episodes: u32) -> Result<Vec<PolicySnapshot>> {
    let mut out = Vec::with_capacity(epsilons.len());
    for (i, &eps) in epsilons.iter().enumerate() {
        if !(0.0..=1.0).contains(&eps) {
            return Err(Error::Config(format!("epsilon {eps} outside [0, 1]")));
        }
        if i > 0 && eps >= epsilons[i - 1] {
            return Err(Error::Config("scripted epsilons must strictly decrease".into()));
        }
        let mut snap = PolicySnapshot {
            stage: i as u32,
            provenance: SnapshotProvenance::ScriptedExpert,
            epsilon: eps,
            episode_index: i as u32,
            success_rate: 0.0,
            table: HashMap::new(),
        };
        snap.success_rate = measure(&snap, env, eval_episodes, 0)?;
        out.push(snap);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(episodes: u32, snapshots: Vec<u32>, seed: u64) -> SourceAgentConfig {
        SourceAgentConfig {
            episodes,
            eps_decay_episodes: episodes * 3 / 4,
            snapshots,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn key_round_trip() {
        let patch: Vec<u8> = (0..25).map(|i| (i * 7 % 4) as u8).collect();
        let vis = [true, false, false, true];
        assert_eq!(decode_key(state_key(&patch, vis), 25), (patch, vis));
    }

    #[test]
    fn myopic_agent_values_only_immediate_goal_moves() {
        let cfg = SourceAgentConfig {
            gamma: 0.0,
            ..quick(400, vec![400], 3)
        };
        let run = train_source_agent(&EnvConfig::maze(5), &cfg).unwrap();
        let table = &run.snapshots[0].table;
        assert!(!table.is_empty());
        // centre of a 5×5 patch is 12; up/down/left/right neighbours
        let neighbours = [7usize, 17, 11, 13];
        let mut positive = 0;
        for (&k, q) in table {
            let (patch, _) = decode_key(k, 25);
            for a in 0..maze::NUM_ACTIONS {
                if q[a] != 0.0 {
                    assert!(a < 4 && patch[neighbours[a]] == maze::GOAL, "{patch:?} {a}");
                    positive += 1;
                }
            }
        }
        assert!(positive > 0);
    }

    #[test]
    fn snapshot_schedule_is_respected() {
        let run = train_source_agent(&EnvConfig::maze(5), &quick(2000, vec![100, 500, 2000], 0)).unwrap();
        let idx: Vec<u32> = run.snapshots.iter().map(|s| s.episode_index).collect();
        assert_eq!(idx, vec![100, 500, 2000]);
        let stages: Vec<u32> = run.snapshots.iter().map(|s| s.stage).collect();
        assert_eq!(stages, vec![0, 1, 2]);
        assert_eq!(run.learning_curve.len(), 2000);
    }

    #[test]
    fn default_agent_masters_small_mazes() {
        let mut monotone = 0;
        for seed in 0..5 {
            let cfg = SourceAgentConfig {
                seed,
                ..Default::default()
            };
            let run = train_source_agent(&EnvConfig::maze(5), &cfg).unwrap();
            let rates: Vec<f64> = run.snapshots.iter().map(|s| s.success_rate).collect();
            assert!(run.converged, "seed {seed}: {rates:?}");
            assert!(*rates.last().unwrap() >= 0.9);
            monotone += rates.windows(2).all(|w| w[1] >= w[0]) as usize;
        }
        assert!(monotone >= 4);
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            SourceAgentConfig { gamma: 1.0, ..Default::default() },
            SourceAgentConfig { eps_end: 1.5, ..Default::default() },
            SourceAgentConfig { snapshots: vec![5, 5], ..Default::default() },
            SourceAgentConfig { snapshots: vec![], ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
        assert!(train_source_agent(&EnvConfig::pointmass(1.0), &SourceAgentConfig::default()).is_err());
    }

    #[test]
    fn scripted_fallback_improves_with_lower_epsilon() {
        let snaps = scripted_snapshots(&EnvConfig::maze(7), &[0.9, 0.5, 0.0], 60).unwrap();
        assert_eq!(snaps[2].success_rate, 1.0);
        assert!(snaps[0].success_rate <= snaps[2].success_rate);
        assert!(scripted_snapshots(&EnvConfig::maze(7), &[0.1, 0.5], 1).is_err());
    }
}
