use serde::{Deserialize, Serialize};

use crate::envs::{self, Action, EnvConfig, Observation};
use crate::error::{Error, Result};

/// Demonstrator proficiency, ordered from least to most skilled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expertise {
    Worse,
    Okay,
    Better,
}

impl Expertise {
    pub const ALL: [Expertise; 3] = [Expertise::Worse, Expertise::Okay, Expertise::Better];
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tags {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expertise: Option<Expertise>,
}

/// One environment interaction: observations `o_0..o_{T-1}` aligned with
/// the actions taken from them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Episode {
    pub id: u64,
    pub tags: Tags,
    pub seed: u64,
    pub success: bool,
    pub observations: Vec<Observation>,
    pub actions: Vec<Action>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Environment this episode ran in: the collection-level config with
    /// the episode's own difficulty tag applied.
    pub fn env_config(&self, base: &EnvConfig) -> EnvConfig {
        match self.tags.difficulty {
            Some(d) => base.with_difficulty(d),
            None => base.clone(),
        }
    }

    /// Re-runs the recorded actions from the recorded seed and checks the
    /// observations and success flag are reproduced exactly.
    pub fn replay(&self, base: &EnvConfig) -> Result<()> {
        let cfg = self.env_config(base);
        let (mut state, mut obs) = envs::reset(&cfg, self.seed)?;
        let mut success = false;
        for (t, (o, &a)) in self.observations.iter().zip(&self.actions).enumerate() {
            if &obs != o {
                return Err(Error::Validation(format!(
                    "episode {} diverges from its replay at step {t}",
                    self.id
                )));
            }
            let tr = state.step(a)?;
            obs = tr.observation;
            success = tr.success;
        }
        if success != self.success {
            return Err(Error::Validation(format!(
                "episode {} success flag {} but replay gives {}",
                self.id, self.success, success
            )));
        }
        Ok(())
    }
}
