use serde::{Deserialize, Serialize};

use crate::curriculum::{ActionSpace, Codec};
use crate::error::{Error, Result};

/// Width of each previous-action embedding row before projection.
pub const ACTION_EMBED_DIM: usize = 16;
pub const MIXTURE_MODES: usize = 5;
pub const SCALE_FLOOR: f64 = 1e-4;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    /// Feed-forward width as a multiple of `d_model`.
    pub ff_ratio: usize,
    /// Tokens processed per forward segment.
    pub segment: usize,
    /// Cached positions per layer carried between segments.
    pub memory: usize,
    /// Relative-distance buckets per head.
    pub rel_buckets: usize,
    /// Distance at which the last bucket starts.
    pub rel_max_distance: usize,
    pub mixture_modes: usize,
    /// When false, attention never crosses an episode boundary.
    pub cross_episodic: bool,
    pub codec: Codec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 4,
            ff_ratio: 4,
            segment: 128,
            memory: 384,
            rel_buckets: 32,
            rel_max_distance: 512,
            mixture_modes: MIXTURE_MODES,
            cross_episodic: true,
            codec: Codec::for_env(&crate::envs::EnvConfig::maze(5)),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.layers == 0 || self.heads == 0 || self.ff_ratio == 0 {
            return bad("d_model, layers, heads and ff_ratio must be positive".into());
        }
        if self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.segment == 0 {
            return bad("segment length must be ≥ 1".into());
        }
        if self.rel_buckets < 2 || self.rel_max_distance < self.rel_buckets {
            return bad("need rel_buckets ≥ 2 and rel_max_distance ≥ rel_buckets".into());
        }
        if matches!(self.codec.actions, ActionSpace::Continuous { .. }) && self.mixture_modes == 0 {
            return bad("mixture head needs at least one mode".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn ff_dim(&self) -> usize {
        self.d_model * self.ff_ratio
    }

    /// Keys visible to a query during step-wise inference.
    pub fn context(&self) -> usize {
        self.segment + self.memory
    }

    /// Width of the head's final layer.
    pub fn head_outputs(&self) -> usize {
        match self.codec.actions {
            ActionSpace::Discrete { n } => n,
            ActionSpace::Continuous { dim } => self.mixture_modes * (1 + 2 * dim),
        }
    }

    /// Closed form for the number of trainable scalars. With `d` = d_model,
    /// `f` = feed-forward width, `o` = codec width, `v` = previous-action
    /// rows, `h` = heads, `b` = buckets, `L` = layers, `e` = 16:
    ///
    /// ```text
    /// obs encoder   o·d + d + d·d + d
    /// prev action   v·e + e·d
    /// per layer     4(d² + d) + 4d + (2·d·f + f + d) + h·b
    /// final norm    2d
    /// categorical   2(d² + d) + d·|A| + |A|
    /// mixture       d² + d + d·P + P,   P = K(1 + 2·dim)
    /// ```
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let f = self.ff_dim();
        let o = self.codec.obs_dim();
        let v = self.codec.prev_vocab();
        let e = ACTION_EMBED_DIM;
        let obs = o * d + d + d * d + d;
        let act = v * e + e * d;
        let layer = 4 * (d * d + d) + 4 * d + (2 * d * f + f + d) + self.heads * self.rel_buckets;
        let p = self.head_outputs();
        let head = match self.codec.actions {
            ActionSpace::Discrete { .. } => 2 * (d * d + d) + d * p + p,
            ActionSpace::Continuous { .. } => d * d + d + d * p + p,
        };
        obs + act + self.layers * layer + 2 * d + head
    }

    /// T5-style bucket for a non-negative query-key distance: exact buckets
    /// for short distances, log-spaced ones beyond.
    pub fn bucket(&self, distance: u64) -> usize {
        let nb = self.rel_buckets;
        let exact = (nb / 2).max(1);
        let d = distance as usize;
        if d < exact {
            return d;
        }
        let span = (self.rel_max_distance as f64 / exact as f64).ln();
        let rest = (nb - exact) as f64;
        let b = exact + ((d as f64 / exact as f64).ln() / span * rest) as usize;
        b.min(nb - 1)
    }
}
