use serde::{Deserialize, Serialize};

use super::{CurricularSequence, Curriculum};
use crate::envs::{maze, pointmass, Action, EnvConfig, Family, Observation};
use crate::episode::Episode;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ObservationCodec {
    /// One-hot per patch cell over the symbolic codes.
    OneHot { cells: usize, codes: usize },
    Continuous { dim: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ActionSpace {
    Discrete { n: usize },
    Continuous { dim: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Codec {
    pub observation: ObservationCodec,
    pub actions: ActionSpace,
}

impl Codec {
    pub fn for_env(env: &EnvConfig) -> Self {
        match env.family {
            Family::Maze => Self {
                observation: ObservationCodec::OneHot {
                    cells: env.patch * env.patch,
                    codes: maze::NUM_CODES,
                },
                actions: ActionSpace::Discrete { n: maze::NUM_ACTIONS },
            },
            Family::Pointmass => Self {
                observation: ObservationCodec::Continuous { dim: pointmass::OBS_DIM },
                actions: ActionSpace::Continuous { dim: pointmass::ACTION_DIM },
            },
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self.observation {
            ObservationCodec::OneHot { cells, codes } => cells * codes,
            ObservationCodec::Continuous { dim } => dim,
        }
    }

    /// Rows of the previous-action table. Discrete spaces get one row per
    /// action plus the episode-start sentinel; continuous spaces only
    /// distinguish "episode start" from "continuing".
    pub fn prev_vocab(&self) -> usize {
        match self.actions {
            ActionSpace::Discrete { n } => n + 1,
            ActionSpace::Continuous { .. } => 2,
        }
    }

    pub fn sentinel(&self) -> usize {
        self.prev_vocab() - 1
    }

    pub fn prev_id(&self, prev: Option<Action>) -> Result<usize> {
        match (self.actions, prev) {
            (_, None) => Ok(self.sentinel()),
            (ActionSpace::Discrete { n }, Some(Action::Discrete(a))) if a < n => Ok(a),
            (ActionSpace::Continuous { .. }, Some(Action::Continuous(_))) => Ok(0),
            (_, Some(a)) => Err(Error::Validation(format!(
                "action {a:?} does not belong to {:?}",
                self.actions
            ))),
        }
    }

    pub fn encode_observation(&self, obs: &Observation, out: &mut Vec<f32>) -> Result<()> {
        match (self.observation, obs) {
            (ObservationCodec::OneHot { cells, codes }, Observation::Patch(p)) if p.len() == cells => {
                let start = out.len();
                out.resize(start + cells * codes, 0.0);
                for (i, &c) in p.iter().enumerate() {
                    if c as usize >= codes {
                        return Err(Error::Validation(format!("observation code {c} ≥ {codes}")));
                    }
                    out[start + i * codes + c as usize] = 1.0;
                }
                Ok(())
            }
            (ObservationCodec::Continuous { dim }, Observation::Continuous(v)) if v.len() == dim => {
                out.extend_from_slice(v);
                Ok(())
            }
            _ => Err(Error::Validation(format!(
                "observation does not match codec {:?}",
                self.observation
            ))),
        }
    }

    pub fn check_action(&self, a: &Action) -> Result<()> {
        match (self.actions, a) {
            (ActionSpace::Discrete { n }, Action::Discrete(i)) if *i < n => Ok(()),
            (ActionSpace::Continuous { dim }, Action::Continuous(v)) if v.len() == dim => Ok(()),
            _ => Err(Error::Validation(format!(
                "mixed action spaces: {a:?} in a {:?} dataset",
                self.actions
            ))),
        }
    }
}

/// One token per timestep: `(o_t, a_{t-1} or sentinel)` with target `a_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedBatch {
    pub obs_dim: usize,
    /// Row-major `[len, obs_dim]`.
    pub observations: Vec<f32>,
    pub prev_actions: Vec<usize>,
    pub targets: Vec<Action>,
    pub episode_start: Vec<bool>,
    /// Episode lengths in sequence order.
    pub lengths: Vec<usize>,
}

impl TokenizedBatch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn from_episodes<'a>(
        episodes: impl IntoIterator<Item = &'a Episode>,
        codec: &Codec,
    ) -> Result<Self> {
        let mut b = TokenizedBatch {
            obs_dim: codec.obs_dim(),
            observations: Vec::new(),
            prev_actions: Vec::new(),
            targets: Vec::new(),
            episode_start: Vec::new(),
            lengths: Vec::new(),
        };
        for ep in episodes {
            if ep.observations.len() != ep.actions.len() {
                return Err(Error::Validation(format!(
                    "episode {} has {} observations but {} actions",
                    ep.id,
                    ep.observations.len(),
                    ep.actions.len()
                )));
            }
            let mut prev = None;
            for (o, a) in ep.observations.iter().zip(&ep.actions) {
                codec.check_action(a)?;
                codec.encode_observation(o, &mut b.observations)?;
                b.prev_actions.push(codec.prev_id(prev)?);
                b.episode_start.push(prev.is_none());
                b.targets.push(*a);
                prev = Some(*a);
            }
            b.lengths.push(ep.len());
        }
        Ok(b)
    }

    /// Keeps only the most recent `max` tokens. A cut through an episode
    /// leaves its tail without a start marker.
    pub fn truncate_front(&mut self, max: usize) {
        let n = self.len();
        if n <= max {
            return;
        }
        let drop = n - max;
        self.observations.drain(..drop * self.obs_dim);
        self.prev_actions.drain(..drop);
        self.targets.drain(..drop);
        self.episode_start.drain(..drop);
        let mut left = drop;
        let mut lengths = Vec::new();
        for &l in &self.lengths {
            if left >= l {
                left -= l;
            } else {
                lengths.push(l - left);
                left = 0;
            }
        }
        self.lengths = lengths;
    }
}

pub fn tokenize(cur: &Curriculum, seq: &CurricularSequence, codec: &Codec) -> Result<TokenizedBatch> {
    TokenizedBatch::from_episodes(seq.episodes.iter().map(|&i| cur.episode(i)), codec)
}

/// Splits the targets of a batch back into per-episode action lists.
pub fn detokenize(batch: &TokenizedBatch) -> Vec<Vec<Action>> {
    let mut out = Vec::with_capacity(batch.lengths.len());
    let mut at = 0;
    for &l in &batch.lengths {
        out.push(batch.targets[at..at + l].to_vec());
        at += l;
    }
    out
}
