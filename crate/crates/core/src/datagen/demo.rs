//! Scripted demonstrators of graded proficiency for the expertise curriculum.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{rollout, Policy, SeedRange};
use crate::curriculum::{Collection, CurriculumKind};
use crate::envs::{maze, pointmass, Action, EnvConfig, EnvState, Family, Observation};
use crate::episode::Expertise;
use crate::error::{Error, Result};

/// Attempts allowed per requested episode before a tier is declared unable
/// to produce successes.
pub const RETRY_FACTOR: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemonstratorProfile {
    pub tier: Expertise,
    /// Per-step probability of replacing the expert action with noise.
    pub p_noise: f64,
    /// Per-episode probability of first wandering to a random waypoint.
    pub detour_rate: f64,
}

impl DemonstratorProfile {
    pub fn new(tier: Expertise, p_noise: f64, detour_rate: f64) -> Self {
        Self {
            tier,
            p_noise,
            detour_rate,
        }
    }
}

pub fn default_profiles(family: Family) -> Vec<DemonstratorProfile> {
    use Expertise::*;
    match family {
        Family::Maze => vec![
            DemonstratorProfile::new(Worse, 0.5, 0.5),
            DemonstratorProfile::new(Okay, 0.25, 0.2),
            DemonstratorProfile::new(Better, 0.02, 0.0),
        ],
        Family::Pointmass => vec![
            DemonstratorProfile::new(Worse, 0.75, 0.3),
            DemonstratorProfile::new(Okay, 0.4, 0.1),
            DemonstratorProfile::new(Better, 0.05, 0.0),
        ],
    }
}

enum Waypoint {
    None,
    Cell((usize, usize), Vec<u32>),
    Point([f64; 2]),
}

/// Shortest-path (or straight-line) expert corrupted by tier noise. Maze
/// noise is a uniformly random move; point-mass noise is a small jitter
/// around standing still, the way a hesitant operator idles.
pub struct Demonstrator {
    pub profile: DemonstratorProfile,
    waypoint: Waypoint,
}

pub const IDLE_JITTER: f32 = 0.1;

impl Demonstrator {
    pub fn new(profile: DemonstratorProfile) -> Self {
        Self {
            profile,
            waypoint: Waypoint::None,
        }
    }
}

fn steer(pos: [f64; 2], target: [f64; 2]) -> [f32; 2] {
    let g = pointmass::STEP_GAIN;
    [
        ((target[0] - pos[0]) / g).clamp(-1.0, 1.0) as f32,
        ((target[1] - pos[1]) / g).clamp(-1.0, 1.0) as f32,
    ]
}

impl Policy for Demonstrator {
    fn begin_episode(&mut self, state: &EnvState, rng: &mut ChaCha8Rng) {
        self.waypoint = Waypoint::None;
        if rng.gen::<f64>() >= self.profile.detour_rate {
            return;
        }
        self.waypoint = match state {
            EnvState::Maze(m) => {
                let floor: Vec<(usize, usize)> = (0..m.side * m.side)
                    .filter(|&i| !m.walls[i])
                    .map(|i| (i / m.side, i % m.side))
                    .collect();
                let w = floor[rng.gen_range(0..floor.len())];
                Waypoint::Cell(w, m.distances_from(w))
            }
            EnvState::Pointmass(p) => {
                let hw = p.half_width;
                Waypoint::Point([rng.gen_range(-hw..hw), rng.gen_range(-hw..hw)])
            }
        };
    }

    fn act(&mut self, state: &EnvState, _: &Observation, rng: &mut ChaCha8Rng) -> Result<Action> {
        let noisy = rng.gen::<f64>() < self.profile.p_noise;
        match state {
            EnvState::Maze(m) => {
                if noisy {
                    return Ok(Action::Discrete(rng.gen_range(0..maze::NUM_ACTIONS)));
                }
                if let Waypoint::Cell(w, d) = &self.waypoint {
                    if m.agent != *w {
                        return Ok(Action::Discrete(m.first_move_towards(m.agent, d)));
                    }
                    self.waypoint = Waypoint::None;
                }
                Ok(Action::Discrete(m.first_move_towards(m.agent, &m.distances_to_goal())))
            }
            EnvState::Pointmass(p) => {
                if noisy {
                    return Ok(Action::Continuous([
                        rng.gen_range(-IDLE_JITTER..IDLE_JITTER),
                        rng.gen_range(-IDLE_JITTER..IDLE_JITTER),
                    ]));
                }
                if let Waypoint::Point(w) = self.waypoint {
                    let close = ((w[0] - p.pos[0]).powi(2) + (w[1] - p.pos[1]).powi(2)).sqrt()
                        <= pointmass::SUCCESS_RADIUS * p.width();
                    if !close {
                        return Ok(Action::Continuous(steer(p.pos, w)));
                    }
                    self.waypoint = Waypoint::None;
                }
                Ok(Action::Continuous(p.expert_action()))
            }
        }
    }
}

fn validate_profiles(profiles: &[DemonstratorProfile]) -> Result<()> {
    if profiles.is_empty() {
        return Err(Error::Validation("no demonstrator profiles".into()));
    }
    for p in profiles {
        for (name, v) in [("p_noise", p.p_noise), ("detour_rate", p.detour_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{:?} {name} {v} outside [0, 1]", p.tier)));
            }
        }
    }
    for w in profiles.windows(2) {
        if w[1].tier <= w[0].tier {
            return Err(Error::Validation(
                "demonstrator tiers must be ordered worse → better without repeats".into(),
            ));
        }
        if w[1].p_noise >= w[0].p_noise {
            return Err(Error::Validation(format!(
                "p_noise must strictly decrease with expertise ({:?} {} vs {:?} {})",
                w[0].tier, w[0].p_noise, w[1].tier, w[1].p_noise
            )));
        }
    }
    Ok(())
}

/// Successful demonstrations only, `episodes_per_tier` per tier, ordered
/// worse → better. Fails if a tier runs out of attempts or if the tiers do
/// not come out with strictly decreasing mean length.
pub fn generate_expertise_collection(
    env: &EnvConfig,
    profiles: &[DemonstratorProfile],
    episodes_per_tier: usize,
    seeds: SeedRange,
) -> Result<Collection> {
    validate_profiles(profiles)?;
    env.validate()?;
    let mut episodes = Vec::with_capacity(profiles.len() * episodes_per_tier);
    let mut means = Vec::with_capacity(profiles.len());
    let budget = episodes_per_tier * RETRY_FACTOR;
    for (k, profile) in profiles.iter().enumerate() {
        let mut demo = Demonstrator::new(profile.clone());
        let mut kept = 0usize;
        let mut total_len = 0usize;
        let stride = (budget as u64).max(1);
        for attempt in 0..budget {
            if kept == episodes_per_tier {
                break;
            }
            let seed = seeds.base + k as u64 * stride + attempt as u64;
            let mut ep = rollout(&mut demo, env, seed, env.resolved_horizon())?;
            if !ep.success {
                continue;
            }
            ep.id = episodes.len() as u64;
            ep.tags.expertise = Some(profile.tier);
            total_len += ep.len();
            kept += 1;
            episodes.push(ep);
        }
        if kept < episodes_per_tier {
            return Err(Error::Validation(format!(
                "{:?} demonstrator produced only {kept}/{episodes_per_tier} successes in {budget} attempts",
                profile.tier
            )));
        }
        means.push(total_len as f64 / kept.max(1) as f64);
    }
    if episodes_per_tier > 0 && means.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Invariant(format!(
            "mean episode length per tier {means:?} is not strictly decreasing worse → better"
        )));
    }
    Ok(Collection {
        env: env.clone(),
        kind: CurriculumKind::Expertise,
        episodes,
    })
}
