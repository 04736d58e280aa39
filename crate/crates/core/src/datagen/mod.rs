//! Raw episode collections for curriculum construction: snapshots of a
//! learning tabular agent, and scripted demonstrators of graded skill.

mod demo;
mod qlearn;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use demo::{default_profiles, generate_expertise_collection, Demonstrator, DemonstratorProfile};
pub use qlearn::{
    decode_key, scripted_snapshots, state_key, train_source_agent, PolicySnapshot, QPolicy,
    SnapshotProvenance, SourceAgentConfig, SourceRun,
};

use crate::curriculum::{Collection, CurriculumKind};
use crate::envs::{self, maze, shortest_path, Action, EnvConfig, EnvState, Observation};
use crate::episode::{Episode, Tags};
use crate::error::{Error, Result};

/// Anything that can choose actions in an environment.
pub trait Policy {
    fn begin_episode(&mut self, _state: &EnvState, _rng: &mut ChaCha8Rng) {}
    fn act(&mut self, state: &EnvState, obs: &Observation, rng: &mut ChaCha8Rng) -> Result<Action>;
}

pub struct UniformRandom;

impl Policy for UniformRandom {
    fn act(&mut self, state: &EnvState, _: &Observation, rng: &mut ChaCha8Rng) -> Result<Action> {
        Ok(match state {
            EnvState::Maze(_) => Action::Discrete(rng.gen_range(0..maze::NUM_ACTIONS)),
            EnvState::Pointmass(_) => {
                Action::Continuous([rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            }
        })
    }
}

/// Shortest-path oracle (straight-line controller for the point mass).
pub struct OptimalPolicy;

impl Policy for OptimalPolicy {
    fn act(&mut self, state: &EnvState, _: &Observation, _: &mut ChaCha8Rng) -> Result<Action> {
        match state {
            EnvState::Maze(_) => Ok(shortest_path(state)?.1),
            EnvState::Pointmass(p) => Ok(Action::Continuous(p.expert_action())),
        }
    }
}

/// Policy randomness for an episode is drawn from its own stream so the
/// same `(policy, seed)` always yields the same episode.
pub fn policy_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

pub fn rollout(
    policy: &mut dyn Policy,
    config: &EnvConfig,
    seed: u64,
    max_steps: u32,
) -> Result<Episode> {
    let (mut state, mut obs) = envs::reset(config, seed)?;
    let mut rng = policy_rng(seed);
    policy.begin_episode(&state, &mut rng);
    let limit = max_steps.min(config.resolved_horizon());
    let mut observations = Vec::new();
    let mut actions = Vec::new();
    let mut success = false;
    for _ in 0..limit {
        let a = policy.act(&state, &obs, &mut rng)?;
        let tr = state.step(a)?;
        observations.push(std::mem::replace(&mut obs, tr.observation));
        actions.push(a);
        if tr.terminal {
            success = tr.success;
            break;
        }
    }
    Ok(Episode {
        id: 0,
        tags: Tags::default(),
        seed,
        success,
        observations,
        actions,
    })
}

/// Seeds for generated episodes: `base + offset`, disjoint from the
/// source agent's training seeds when `base` is chosen per collection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRange {
    pub base: u64,
}

pub fn generate_learning_progress_collection(
    env: &EnvConfig,
    snapshots: &[PolicySnapshot],
    episodes_per_stage: usize,
    seeds: SeedRange,
) -> Result<Collection> {
    if snapshots.is_empty() {
        return Err(Error::Validation(
            "learning-progress collection needs at least one snapshot".into(),
        ));
    }
    let mut episodes = Vec::with_capacity(snapshots.len() * episodes_per_stage);
    for snap in snapshots {
        let mut policy = QPolicy::new(snap);
        for i in 0..episodes_per_stage {
            let seed = seeds.base + (snap.stage as u64) * episodes_per_stage as u64 + i as u64;
            let mut ep = rollout(&mut policy, env, seed, env.resolved_horizon())?;
            ep.id = episodes.len() as u64;
            ep.tags.stage = Some(snap.stage);
            episodes.push(ep);
        }
    }
    Ok(Collection {
        env: env.clone(),
        kind: CurriculumKind::LearningProgress,
        episodes,
    })
}

/// One rung of a task-difficulty ladder: the difficulty and the snapshots
/// of the source agent trained at it.
pub struct DifficultyRung<'a> {
    pub difficulty: f64,
    pub snapshots: &'a [PolicySnapshot],
}

/// Episodes from every rung, tagged `(difficulty, stage)`, ordered
/// difficulty-major. `episodes_per_difficulty` is split evenly over the
/// rung's stages with the remainder going to the latest stages.
pub fn generate_task_difficulty_collection(
    env: &EnvConfig,
    ladder: &[DifficultyRung<'_>],
    episodes_per_difficulty: usize,
    test_difficulty: f64,
    seeds: SeedRange,
) -> Result<Collection> {
    validate_ladder(
        &ladder.iter().map(|r| r.difficulty).collect::<Vec<_>>(),
        test_difficulty,
    )?;
    let mut episodes = Vec::new();
    let mut seed = seeds.base;
    for rung in ladder {
        if rung.snapshots.is_empty() {
            return Err(Error::Validation(format!(
                "difficulty {} has no snapshots",
                rung.difficulty
            )));
        }
        let cfg = env.with_difficulty(rung.difficulty);
        let stages = rung.snapshots.len();
        for (k, snap) in rung.snapshots.iter().enumerate() {
            let extra = usize::from(k >= stages - episodes_per_difficulty % stages);
            let count = episodes_per_difficulty / stages + extra;
            let mut policy = QPolicy::new(snap);
            for _ in 0..count {
                let mut ep = rollout(&mut policy, &cfg, seed, cfg.resolved_horizon())?;
                seed += 1;
                ep.id = episodes.len() as u64;
                ep.tags.stage = Some(snap.stage);
                ep.tags.difficulty = Some(rung.difficulty);
                episodes.push(ep);
            }
        }
    }
    Ok(Collection {
        env: env.clone(),
        kind: CurriculumKind::TaskDifficulty,
        episodes,
    })
}

/// Ladders must be strictly increasing and must not contain the held-out
/// test difficulty.
pub fn validate_ladder(ladder: &[f64], test_difficulty: f64) -> Result<()> {
    if ladder.is_empty() {
        return Err(Error::Validation("empty difficulty ladder".into()));
    }
    if ladder.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Validation(format!(
            "difficulty ladder {ladder:?} is not strictly increasing"
        )));
    }
    if ladder.iter().any(|&d| (d - test_difficulty).abs() < 1e-9) {
        return Err(Error::Validation(format!(
            "difficulty ladder {ladder:?} contains the test difficulty {test_difficulty}; \
             evaluation must be zero-shot"
        )));
    }
    Ok(())
}
