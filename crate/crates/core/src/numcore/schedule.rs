use serde::{Deserialize, Serialize};

/// Linear warm-up from zero, then cosine annealing to `floor_rate`, then
/// constant. The floor bounds the rate from below once warm-up is over.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub base_rate: f64,
    pub warmup_steps: u64,
    pub anneal_steps: u64,
    pub floor_rate: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            base_rate: 5e-4,
            warmup_steps: 1000,
            anneal_steps: 100_000,
            floor_rate: 0.0,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.base_rate >= self.floor_rate && self.floor_rate >= 0.0) {
            return Err(crate::Error::Config(format!(
                "schedule needs base_rate ≥ floor_rate ≥ 0, got {} / {}",
                self.base_rate, self.floor_rate
            )));
        }
        Ok(())
    }
}

pub fn lr_at(step: u64, s: &Schedule) -> f64 {
    if step < s.warmup_steps {
        return s.base_rate * step as f64 / s.warmup_steps as f64;
    }
    let t = step - s.warmup_steps;
    if t >= s.anneal_steps {
        return s.floor_rate;
    }
    let progress = t as f64 / s.anneal_steps as f64;
    s.floor_rate + (s.base_rate - s.floor_rate) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
