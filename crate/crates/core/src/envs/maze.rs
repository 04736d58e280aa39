//! Procedurally generated goal mazes with an egocentric symbolic view.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Observation codes.
pub const FLOOR: u8 = 0;
pub const WALL: u8 = 1;
pub const GOAL: u8 = 2;
pub const OUT_OF_BOUNDS: u8 = 3;
pub const NUM_CODES: usize = 4;

/// up, down, left, right, no-op
pub const NUM_ACTIONS: usize = 5;
pub const NOOP: usize = 4;
const MOVES: [(isize, isize); NUM_ACTIONS] = [(-1, 0), (1, 0), (0, -1), (0, 1), (0, 0)];

/// Fraction of removable interior walls knocked out after carving.
pub const LOOP_FRACTION: f64 = 0.10;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MazeState {
    pub side: usize,
    pub walls: Vec<bool>,
    pub agent: (usize, usize),
    pub goal: (usize, usize),
    pub t: u32,
    pub horizon: u32,
    pub patch: usize,
    pub done: bool,
    pub success: bool,
}

impl MazeState {
    pub fn generate(side: usize, horizon: u32, patch: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut walls = vec![true; side * side];
        let cells = (side - 1) / 2;
        let mut visited = vec![false; cells * cells];
        let start = (rng.gen_range(0..cells), rng.gen_range(0..cells));
        let mut stack = vec![start];
        visited[start.0 * cells + start.1] = true;
        walls[(2 * start.0 + 1) * side + 2 * start.1 + 1] = false;
        while let Some(&(ci, cj)) = stack.last() {
            let mut next: Vec<(usize, usize)> = [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)]
                .iter()
                .filter_map(|&(di, dj)| {
                    let ni = ci as isize + di;
                    let nj = cj as isize + dj;
                    (ni >= 0 && nj >= 0 && (ni as usize) < cells && (nj as usize) < cells)
                        .then_some((ni as usize, nj as usize))
                })
                .filter(|&(ni, nj)| !visited[ni * cells + nj])
                .collect();
            if next.is_empty() {
                stack.pop();
                continue;
            }
            next.shuffle(rng);
            let (ni, nj) = next[0];
            visited[ni * cells + nj] = true;
            walls[(ci + ni + 1) * side + (cj + nj + 1)] = false;
            walls[(2 * ni + 1) * side + 2 * nj + 1] = false;
            stack.push((ni, nj));
        }

        // Walls separating two cells horizontally or vertically.
        let mut removable: Vec<usize> = (1..side - 1)
            .flat_map(|r| (1..side - 1).map(move |c| (r, c)))
            .filter(|&(r, c)| (r % 2 == 1) != (c % 2 == 1))
            .map(|(r, c)| r * side + c)
            .filter(|&i| walls[i])
            .collect();
        removable.shuffle(rng);
        let open = (LOOP_FRACTION * removable.len() as f64).round() as usize;
        for &i in &removable[..open] {
            walls[i] = false;
        }

        let floor: Vec<(usize, usize)> = (0..side * side)
            .filter(|&i| !walls[i])
            .map(|i| (i / side, i % side))
            .collect();
        let agent = floor[rng.gen_range(0..floor.len())];
        let goal = loop {
            let g = floor[rng.gen_range(0..floor.len())];
            if g != agent {
                break g;
            }
        };
        Self {
            side,
            walls,
            agent,
            goal,
            t: 0,
            horizon,
            patch,
            done: false,
            success: false,
        }
    }

    pub fn is_wall(&self, r: usize, c: usize) -> bool {
        self.walls[r * self.side + c]
    }

    fn code_at(&self, r: isize, c: isize) -> u8 {
        let n = self.side as isize;
        if r < 0 || c < 0 || r >= n || c >= n {
            OUT_OF_BOUNDS
        } else if (r as usize, c as usize) == self.goal {
            GOAL
        } else if self.is_wall(r as usize, c as usize) {
            WALL
        } else {
            FLOOR
        }
    }

    /// Row-major K×K patch centred on the agent.
    pub fn observe(&self) -> Vec<u8> {
        let half = (self.patch / 2) as isize;
        let (ar, ac) = (self.agent.0 as isize, self.agent.1 as isize);
        let mut out = Vec::with_capacity(self.patch * self.patch);
        for dr in -half..=half {
            for dc in -half..=half {
                out.push(self.code_at(ar + dr, ac + dc));
            }
        }
        out
    }

    pub fn neighbor(&self, pos: (usize, usize), action: usize) -> (usize, usize) {
        let (dr, dc) = MOVES[action];
        let r = pos.0 as isize + dr;
        let c = pos.1 as isize + dc;
        let n = self.side as isize;
        if r < 0 || c < 0 || r >= n || c >= n || self.is_wall(r as usize, c as usize) {
            pos
        } else {
            (r as usize, c as usize)
        }
    }

    /// Applies one move; returns `(reward, terminal, success)`.
    pub fn apply(&mut self, action: usize) -> Result<(f64, bool, bool)> {
        if self.done {
            return Err(Error::Usage("step called on a terminal maze state".into()));
        }
        if action >= NUM_ACTIONS {
            return Err(Error::Usage(format!("maze action {action} out of range")));
        }
        self.agent = self.neighbor(self.agent, action);
        self.t += 1;
        let mut reward = 0.0;
        if self.agent == self.goal {
            self.success = true;
            reward = 1.0;
        }
        self.done = self.success || self.t >= self.horizon;
        Ok((reward, self.done, self.success))
    }

    /// BFS distances to the goal (`u32::MAX` where unreachable).
    pub fn distances_to_goal(&self) -> Vec<u32> {
        self.distances_from(self.goal)
    }

    pub fn distances_from(&self, src: (usize, usize)) -> Vec<u32> {
        let n = self.side;
        let mut dist = vec![u32::MAX; n * n];
        let mut q = VecDeque::new();
        dist[src.0 * n + src.1] = 0;
        q.push_back(src);
        while let Some(p) = q.pop_front() {
            let d = dist[p.0 * n + p.1];
            for a in 0..4 {
                let nb = self.neighbor(p, a);
                if nb != p && dist[nb.0 * n + nb.1] == u32::MAX {
                    dist[nb.0 * n + nb.1] = d + 1;
                    q.push_back(nb);
                }
            }
        }
        dist
    }

    /// First move on a shortest path from `from` towards `target`, with
    /// ties broken by action index.
    pub fn first_move_towards(&self, from: (usize, usize), dist_to_target: &[u32]) -> usize {
        let d = dist_to_target[from.0 * self.side + from.1];
        if d == 0 || d == u32::MAX {
            return NOOP;
        }
        (0..4)
            .find(|&a| {
                let nb = self.neighbor(from, a);
                nb != from && dist_to_target[nb.0 * self.side + nb.1] == d - 1
            })
            .unwrap_or(NOOP)
    }

    pub fn render(&self) -> String {
        let mut s = String::with_capacity(self.side * (self.side + 1));
        for r in 0..self.side {
            for c in 0..self.side {
                let ch = if (r, c) == self.agent {
                    'A'
                } else if (r, c) == self.goal {
                    'G'
                } else if self.is_wall(r, c) {
                    '#'
                } else {
                    '.'
                };
                s.push(ch);
            }
            s.push('\n');
        }
        s
    }
}
