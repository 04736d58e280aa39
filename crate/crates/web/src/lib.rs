//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Three operations, each returning a JSON string: generate a maze with
//! its shortest path, assemble a curricular sequence from a small
//! learning-progress collection, and score a success trace with the
//! sliding-window metric and the automatic sequencer.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use cec::curriculum::{assemble_sequence, build_curriculum, CurriculumKind};
use cec::datagen::{generate_learning_progress_collection, scripted_snapshots, SeedRange};
use cec::envs::{self, EnvConfig, EnvState};
use cec::evalharness::{quarter, sliding_window_max, AutoSequencer};

type Res = Result<Value, String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

pub fn maze_json(side: u32, seed: u32) -> Res {
    let (state, _) = envs::reset(&EnvConfig::maze(side as usize), seed as u64).map_err(err)?;
    let EnvState::Maze(m) = state else { unreachable!("maze config yields a maze") };
    let dist = m.distances_to_goal();
    let mut path = vec![m.agent];
    let mut at = m.agent;
    while at != m.goal && path.len() <= m.side * m.side {
        at = m.neighbor(at, m.first_move_towards(at, &dist));
        path.push(at);
    }
    Ok(json!({
        "side": m.side,
        "walls": m.walls,
        "start": [m.agent.0, m.agent.1],
        "goal": [m.goal.0, m.goal.1],
        "path": path.iter().map(|p| [p.0, p.1]).collect::<Vec<_>>(),
    }))
}

pub fn assemble_json(cap: u32, per_stage: u32, seed: u32) -> Res {
    let env = EnvConfig::maze(5);
    let snaps = scripted_snapshots(&env, &[0.8, 0.4, 0.05], 5).map_err(err)?;
    let col = generate_learning_progress_collection(&env, &snaps, per_stage as usize, SeedRange { base: 1 }).map_err(err)?;
    let cur = build_curriculum(col, CurriculumKind::LearningProgress).map_err(err)?;
    let caps = vec![cap as usize; cur.levels.len()];
    let seq = assemble_sequence(&cur, &caps, seed as u64).map_err(err)?;
    let episodes: Vec<Value> = seq
        .episodes
        .iter()
        .zip(&seq.levels)
        .map(|(&e, &l)| {
            let ep = cur.episode(e);
            json!({"level": l, "epsilon": snaps[l].epsilon, "length": ep.len(), "success": ep.success})
        })
        .collect();
    Ok(json!({
        "counts": seq.counts,
        "total_tokens": seq.total_tokens,
        "episodes": episodes,
    }))
}

/// `trace` is a string of `1` (success) and `0` (failure) characters; other
/// characters are ignored.
pub fn score_json(trace: &str, promote_after: u32) -> Res {
    let t: Vec<bool> = trace.chars().filter_map(|c| match c {
        '1' => Some(true),
        '0' => Some(false),
        _ => None,
    }).collect();
    if t.is_empty() {
        return Err("empty trace".into());
    }
    let w = quarter(t.len());
    let best = sliding_window_max(&t, w).map_err(err)?;
    let mut auto = AutoSequencer::new(vec![5.0, 7.0, 9.0, 11.0], promote_after as usize).map_err(err)?;
    let mut rungs = Vec::with_capacity(t.len());
    for &s in &t {
        rungs.push(auto.current());
        auto.record(s);
    }
    Ok(json!({
        "episodes": t.len(),
        "window": w,
        "sliding_window_max": best,
        "mean": t.iter().filter(|&&b| b).count() as f64 / t.len() as f64,
        "auto_difficulty": rungs,
    }))
}

fn to_js(r: Res) -> Result<String, JsError> {
    r.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn maze(side: u32, seed: u32) -> Result<String, JsError> {
    to_js(maze_json(side, seed))
}

#[wasm_bindgen]
pub fn assemble(cap: u32, per_stage: u32, seed: u32) -> Result<String, JsError> {
    to_js(assemble_json(cap, per_stage, seed))
}

#[wasm_bindgen]
pub fn score(trace: &str, promote_after: u32) -> Result<String, JsError> {
    to_js(score_json(trace, promote_after))
}
