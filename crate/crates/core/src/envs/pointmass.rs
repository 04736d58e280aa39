//! Planar point-mass reaching task for the continuous-control arm.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const ACTION_DIM: usize = 2;
pub const OBS_DIM: usize = 4;
/// Euler step gain applied to the clamped action.
pub const STEP_GAIN: f64 = 0.1;
/// Minimum spawn separation as a fraction of arena width.
pub const SPAWN_SEPARATION: f64 = 0.2;
/// Success radius as a fraction of arena width.
pub const SUCCESS_RADIUS: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct PointMassState {
    pub half_width: f64,
    pub pos: [f64; 2],
    pub goal: [f64; 2],
    pub t: u32,
    pub horizon: u32,
    pub done: bool,
    pub success: bool,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl PointMassState {
    pub fn spawn(half_width: f64, horizon: u32, rng: &mut ChaCha8Rng) -> Self {
        let hw = half_width;
        let width = 2.0 * hw;
        let mut draw = || [rng.gen_range(-hw..hw), rng.gen_range(-hw..hw)];
        let pos = draw();
        let goal = loop {
            let g = draw();
            if dist(g, pos) >= SPAWN_SEPARATION * width {
                break g;
            }
        };
        Self {
            half_width,
            pos,
            goal,
            t: 0,
            horizon,
            done: false,
            success: false,
        }
    }

    pub fn width(&self) -> f64 {
        2.0 * self.half_width
    }

    pub fn goal_distance(&self) -> f64 {
        dist(self.pos, self.goal)
    }

    /// `[x, y, goal_x − x, goal_y − y]`
    pub fn observe(&self) -> Vec<f32> {
        vec![
            self.pos[0] as f32,
            self.pos[1] as f32,
            (self.goal[0] - self.pos[0]) as f32,
            (self.goal[1] - self.pos[1]) as f32,
        ]
    }

    pub fn apply(&mut self, action: [f32; 2]) -> Result<(f64, bool, bool)> {
        if self.done {
            return Err(Error::Usage("step called on a terminal point-mass state".into()));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::Usage(format!("non-finite action {action:?}")));
        }
        let hw = self.half_width;
        for (p, &a) in self.pos.iter_mut().zip(&action) {
            let a = (a as f64).clamp(-1.0, 1.0);
            *p = (*p + STEP_GAIN * a).clamp(-hw, hw);
        }
        self.t += 1;
        let mut reward = 0.0;
        if self.goal_distance() <= SUCCESS_RADIUS * self.width() {
            self.success = true;
            reward = 1.0;
        }
        self.done = self.success || self.t >= self.horizon;
        Ok((reward, self.done, self.success))
    }

    /// Straight-line controller: the clamped action that moves towards the
    /// goal as fast as possible without overshooting.
    pub fn expert_action(&self) -> [f32; 2] {
        let g = self.observe();
        [
            (g[2] as f64 / STEP_GAIN).clamp(-1.0, 1.0) as f32,
            (g[3] as f64 / STEP_GAIN).clamp(-1.0, 1.0) as f32,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn spawn_separation_rule() {
        for seed in 0..500 {
            let s = PointMassState::spawn(1.0, 60, &mut ChaCha8Rng::seed_from_u64(seed));
            assert!(s.goal_distance() >= SPAWN_SEPARATION * 2.0);
        }
    }

    #[test]
    fn euler_step_and_clamp() {
        let mut s = PointMassState {
            half_width: 1.0,
            pos: [0.0, 0.0],
            goal: [0.9, 0.9],
            t: 0,
            horizon: 40,
            done: false,
            success: false,
        };
        s.apply([3.0, -0.5]).unwrap();
        assert!((s.pos[0] - 0.1).abs() < 1e-12 && (s.pos[1] + 0.05).abs() < 1e-12);
        assert!(s.apply([f32::NAN, 0.0]).is_err());
    }

    #[test]
    fn expert_reaches_goal() {
        let mut s = PointMassState::spawn(1.0, 60, &mut ChaCha8Rng::seed_from_u64(11));
        while !s.done {
            let a = s.expert_action();
            s.apply(a).unwrap();
        }
        assert!(s.success);
    }
}
