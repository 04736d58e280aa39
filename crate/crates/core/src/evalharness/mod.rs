//! Evaluation with memory carried across test episodes: difficulty
//! sequencers, success traces, the sliding-window metric, aggregation
//! over runs and variant comparison.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curriculum::Codec;
use crate::datagen::{policy_rng, Policy};
use crate::envs::{self, Action, EnvConfig, EnvState, Observation};
use crate::error::{Error, Result};
use crate::model::{act, model_hash, ActMode, InferenceState, Model};
use crate::seeds::{self, stream};

#[cfg(test)]
mod tests;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SequencerKind {
    /// Every episode at the test difficulty.
    Single,
    /// `per_level` episodes per ladder rung, the last rung absorbing the rest.
    Fixed,
    /// Promotion after `promote_after` consecutive successes.
    Auto,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    /// Maximum window mean, window = a quarter of the scored episodes.
    SlidingWindowMax,
    /// Plain mean success over scored episodes.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub runs: usize,
    pub sequencer: SequencerKind,
    /// Difficulty rungs visited before the test difficulty (for `fixed`
    /// and `auto`).
    pub ladder: Vec<f64>,
    pub test_difficulty: f64,
    pub per_level: usize,
    pub promote_after: usize,
    pub action_mode: ActMode,
    /// Overrides the model's memory length when set.
    pub memory: Option<usize>,
    pub metric: Metric,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            runs: 20,
            sequencer: SequencerKind::Single,
            ladder: Vec::new(),
            test_difficulty: 11.0,
            per_level: 5,
            promote_after: 3,
            action_mode: ActMode::Sample,
            memory: None,
            metric: Metric::SlidingWindowMax,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.episodes < 4 {
            return bad(format!("episodes per run must be ≥ 4, got {}", self.episodes));
        }
        if self.runs == 0 {
            return bad("runs must be ≥ 1".into());
        }
        if self.sequencer == SequencerKind::Fixed && self.per_level == 0 {
            return bad("fixed sequencer needs per_level ≥ 1".into());
        }
        if self.sequencer == SequencerKind::Auto && self.promote_after == 0 {
            return bad("auto sequencer needs promote_after ≥ 1".into());
        }
        if self.ladder.iter().any(|&d| d == self.test_difficulty) {
            return bad("ladder rungs must differ from the test difficulty".into());
        }
        Ok(())
    }

    /// Full ladder with the test difficulty as the final rung.
    pub fn rungs(&self) -> Vec<f64> {
        let mut r = if self.sequencer == SequencerKind::Single { Vec::new() } else { self.ladder.clone() };
        r.push(self.test_difficulty);
        r
    }

    /// Short hex digest of the canonical JSON of this config and `env`.
    pub fn fingerprint(&self, env: &EnvConfig) -> Result<String> {
        let bytes = serde_json::to_vec(&(self, env))?;
        Ok(Sha256::digest(&bytes)[..8].iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Block schedule: every rung repeated `count` times.
pub fn sequencer_fixed(ladder: &[f64], count: usize) -> Vec<f64> {
    ladder.iter().flat_map(|&d| std::iter::repeat_n(d, count)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AutoSequencer {
    ladder: Vec<f64>,
    promote_after: usize,
    rung: usize,
    streak: usize,
}

impl AutoSequencer {
    pub fn new(ladder: Vec<f64>, promote_after: usize) -> Result<Self> {
        if ladder.is_empty() || promote_after == 0 {
            return Err(Error::Config("auto sequencer needs a ladder and promote_after ≥ 1".into()));
        }
        Ok(Self {
            ladder,
            promote_after,
            rung: 0,
            streak: 0,
        })
    }

    pub fn current(&self) -> f64 {
        self.ladder[self.rung]
    }

    pub fn rung(&self) -> usize {
        self.rung
    }

    /// Feeds the outcome of the episode just played at `current()`.
    pub fn record(&mut self, success: bool) {
        if !success {
            self.streak = 0;
            return;
        }
        self.streak += 1;
        if self.streak >= self.promote_after && self.rung + 1 < self.ladder.len() {
            self.rung += 1;
            self.streak = 0;
        }
    }
}

/// Maximum mean of `trace` over all contiguous windows of length `window`.
pub fn sliding_window_max(trace: &[bool], window: usize) -> Result<f64> {
    if window == 0 || window > trace.len() {
        return Err(Error::Validation(format!(
            "window {window} invalid for a trace of {} episodes",
            trace.len()
        )));
    }
    let mut sum: usize = trace[..window].iter().filter(|&&s| s).count();
    let mut best = sum;
    for i in window..trace.len() {
        sum = sum + trace[i] as usize - trace[i - window] as usize;
        best = best.max(sum);
    }
    Ok(best as f64 / window as f64)
}

/// A quarter of `n` episodes, at least one.
pub fn quarter(n: usize) -> usize {
    (n / 4).max(1)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuccessTrace {
    pub successes: Vec<bool>,
    pub difficulties: Vec<f64>,
    pub lengths: Vec<u32>,
    pub seeds: Vec<u64>,
}

impl SuccessTrace {
    pub fn len(&self) -> usize {
        self.successes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.successes.is_empty()
    }

    /// Success bits of the episodes played at `difficulty`, in order.
    pub fn at_difficulty(&self, difficulty: f64) -> Vec<bool> {
        self.successes
            .iter()
            .zip(&self.difficulties)
            .filter(|(_, &d)| d == difficulty)
            .map(|(&s, _)| s)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuarterStats {
    pub first: f64,
    pub last: f64,
}

impl QuarterStats {
    pub fn delta(&self) -> f64 {
        self.last - self.first
    }
}

fn mean_of(bits: &[bool]) -> f64 {
    if bits.is_empty() {
        return 0.0;
    }
    bits.iter().filter(|&&b| b).count() as f64 / bits.len() as f64
}

pub fn quarter_stats(scored: &[bool]) -> QuarterStats {
    if scored.is_empty() {
        return QuarterStats { first: 0.0, last: 0.0 };
    }
    let q = quarter(scored.len());
    QuarterStats {
        first: mean_of(&scored[..q]),
        last: mean_of(&scored[scored.len() - q..]),
    }
}

/// Score of one run. Only episodes at the test difficulty count; a run
/// that never reaches it scores 0.
pub fn score_trace(trace: &SuccessTrace, test_difficulty: f64, metric: Metric) -> Result<f64> {
    let scored = trace.at_difficulty(test_difficulty);
    if scored.is_empty() {
        return Ok(0.0);
    }
    match metric {
        Metric::Mean => Ok(mean_of(&scored)),
        Metric::SlidingWindowMax => sliding_window_max(&scored, quarter(scored.len())),
    }
}

/// A trained model acting through a rolling cache that persists across
/// episodes.
pub struct ModelAgent<'m> {
    model: &'m Model,
    state: InferenceState,
    mode: ActMode,
    carry: bool,
}

impl<'m> ModelAgent<'m> {
    /// With `model.config.memory == 0` nothing is carried across episodes.
    pub fn new(model: &'m Model, mode: ActMode) -> Self {
        Self {
            model,
            state: InferenceState::new(&model.config),
            mode,
            carry: model.config.memory > 0,
        }
    }
}

impl Policy for ModelAgent<'_> {
    fn begin_episode(&mut self, _: &EnvState, _: &mut ChaCha8Rng) {
        if !self.carry {
            self.state = InferenceState::new(&self.model.config);
        }
        self.state.begin_episode();
    }

    fn act(&mut self, _: &EnvState, obs: &Observation, rng: &mut ChaCha8Rng) -> Result<Action> {
        let out = self.state.step(self.model, obs)?;
        let a = act(&out, self.mode, rng);
        self.state.record_action(a);
        Ok(a)
    }
}

/// Plays one episode per entry of `difficulties` with the matching task
/// seed. Action randomness is drawn from each episode's own stream.
pub fn play_episodes(
    agent: &mut dyn Policy,
    env: &EnvConfig,
    difficulties: &[f64],
    task_seeds: &[u64],
) -> Result<SuccessTrace> {
    let mut trace = SuccessTrace::default();
    for (&d, &seed) in difficulties.iter().zip(task_seeds) {
        let (s, len) = play_one(agent, &env.with_difficulty(d), seed)?;
        trace.successes.push(s);
        trace.difficulties.push(d);
        trace.lengths.push(len);
        trace.seeds.push(seed);
    }
    Ok(trace)
}

fn play_one(agent: &mut dyn Policy, env: &EnvConfig, seed: u64) -> Result<(bool, u32)> {
    let (mut state, mut obs) = envs::reset(env, seed)?;
    let mut rng = policy_rng(seeds::split(seed, stream::EVAL));
    agent.begin_episode(&state, &mut rng);
    let mut t = 0;
    loop {
        let a = agent.act(&state, &obs, &mut rng)?;
        let tr = state.step(a)?;
        t += 1;
        obs = tr.observation;
        if tr.terminal {
            return Ok((tr.success, t));
        }
    }
}

/// Plays one run, choosing each episode's difficulty with the configured
/// sequencer.
pub fn run_once(agent: &mut dyn Policy, env: &EnvConfig, cfg: &EvalConfig, run_seed: u64) -> Result<SuccessTrace> {
    let rungs = cfg.rungs();
    let task_seed = |i: usize| seeds::split(run_seed, i as u64);
    match cfg.sequencer {
        SequencerKind::Single | SequencerKind::Fixed => {
            let mut sched = match cfg.sequencer {
                SequencerKind::Single => Vec::new(),
                _ => sequencer_fixed(&cfg.ladder, cfg.per_level),
            };
            sched.truncate(cfg.episodes);
            sched.resize(cfg.episodes, cfg.test_difficulty);
            let seeds: Vec<u64> = (0..cfg.episodes).map(task_seed).collect();
            play_episodes(agent, env, &sched, &seeds)
        }
        SequencerKind::Auto => {
            let mut seq = AutoSequencer::new(rungs, cfg.promote_after)?;
            let mut trace = SuccessTrace::default();
            for i in 0..cfg.episodes {
                let d = seq.current();
                let seed = task_seed(i);
                let (s, len) = play_one(agent, &env.with_difficulty(d), seed)?;
                seq.record(s);
                trace.successes.push(s);
                trace.difficulties.push(d);
                trace.lengths.push(len);
                trace.seeds.push(seed);
            }
            Ok(trace)
        }
    }
}

/// Seed of run `run`.
pub fn run_seed(cfg: &EvalConfig, run: usize) -> u64 {
    seeds::split(seeds::split(cfg.seed, stream::EVAL), run as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub score: f64,
    pub quarters: QuarterStats,
    pub trace: SuccessTrace,
}

/// Evaluates `model`; runs are independent and each owns its memory.
pub fn run_eval(model: &Model, env: &EnvConfig, cfg: &EvalConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let codec = Codec::for_env(env);
    if codec != model.config.codec {
        return Err(Error::Validation(format!(
            "environment codec {codec:?} does not match policy codec {:?}",
            model.config.codec
        )));
    }
    let mut model = model.clone();
    if let Some(m) = cfg.memory {
        model.config.memory = m;
    }
    let model = &model;
    let one = |run: usize| -> Result<RunRecord> {
        let seed = run_seed(cfg, run);
        let mut agent = ModelAgent::new(model, cfg.action_mode);
        let trace = run_once(&mut agent, env, cfg, seed)?;
        record(run, seed, trace, cfg)
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..cfg.runs).into_par_iter().map(one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..cfg.runs).map(one).collect()
    }
}

/// Evaluates an arbitrary policy; `make` builds a fresh agent per run.
pub fn run_eval_with(
    make: &dyn Fn() -> Box<dyn Policy>,
    env: &EnvConfig,
    cfg: &EvalConfig,
) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    (0..cfg.runs)
        .map(|run| {
            let seed = run_seed(cfg, run);
            let mut agent = make();
            let trace = run_once(agent.as_mut(), env, cfg, seed)?;
            record(run, seed, trace, cfg)
        })
        .collect()
}

fn record(run: usize, seed: u64, trace: SuccessTrace, cfg: &EvalConfig) -> Result<RunRecord> {
    let score = score_trace(&trace, cfg.test_difficulty, cfg.metric)?;
    let quarters = quarter_stats(&trace.at_difficulty(cfg.test_difficulty));
    Ok(RunRecord {
        run,
        seed,
        score,
        quarters,
        trace,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
}

pub fn aggregate(scores: &[f64]) -> Result<Summary> {
    if scores.is_empty() {
        return Err(Error::Validation("aggregate over zero runs".into()));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let std = if scores.len() < 2 {
        0.0
    } else {
        (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(Summary {
        runs: scores.len(),
        mean,
        std,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub fingerprint: String,
    pub checkpoint_hash: String,
    pub env: EnvConfig,
    pub eval: EvalConfig,
    pub memory: usize,
    pub cross_episodic: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub header: ReportHeader,
    pub summary: Summary,
    /// Mean of last-quarter minus first-quarter success over runs.
    pub in_context_improvement: f64,
    pub runs: Vec<RunRecord>,
}

impl EvalReport {
    pub fn new(model: &Model, env: &EnvConfig, cfg: &EvalConfig, runs: Vec<RunRecord>) -> Result<Self> {
        let scores: Vec<f64> = runs.iter().map(|r| r.score).collect();
        let summary = aggregate(&scores)?;
        let ici = runs.iter().map(|r| r.quarters.delta()).sum::<f64>() / runs.len() as f64;
        Ok(Self {
            header: ReportHeader {
                fingerprint: cfg.fingerprint(env)?,
                checkpoint_hash: model_hash(model)?,
                env: env.clone(),
                eval: cfg.clone(),
                memory: cfg.memory.unwrap_or(model.config.memory),
                cross_episodic: model.config.cross_episodic,
            },
            summary,
            in_context_improvement: ici,
            runs,
        })
    }

    /// Mean success at each scored-episode index over runs.
    pub fn curve(&self) -> Vec<f64> {
        let test = self.header.eval.test_difficulty;
        let per_run: Vec<Vec<bool>> = self.runs.iter().map(|r| r.trace.at_difficulty(test)).collect();
        let n = per_run.iter().map(Vec::len).max().unwrap_or(0);
        (0..n)
            .map(|i| {
                let hits: Vec<bool> = per_run.iter().filter_map(|r| r.get(i).copied()).collect();
                mean_of(&hits)
            })
            .collect()
    }

    /// Header line, one line per run, then a summary line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for r in &self.runs {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        let tail = serde_json::json!({
            "summary": self.summary,
            "in_context_improvement": self.in_context_improvement,
        });
        out.push_str(&serde_json::to_string(&tail)?);
        out.push('\n');
        Ok(out)
    }

    pub fn from_jsonl(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if lines.len() < 2 {
            return Err(parse_err(lines.len() + 1, "report needs a header and a summary line".into()));
        }
        let header: ReportHeader = serde_json::from_str(lines[0]).map_err(|e| parse_err(1, e.to_string()))?;
        let mut runs = Vec::new();
        for (i, l) in lines[1..lines.len() - 1].iter().enumerate() {
            runs.push(serde_json::from_str(l).map_err(|e| parse_err(i + 2, e.to_string()))?);
        }
        #[derive(Deserialize)]
        struct Tail {
            summary: Summary,
            in_context_improvement: f64,
        }
        let tail: Tail =
            serde_json::from_str(lines[lines.len() - 1]).map_err(|e| parse_err(lines.len(), e.to_string()))?;
        Ok(Self {
            header,
            summary: tail.summary,
            in_context_improvement: tail.in_context_improvement,
            runs,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_jsonl(&std::fs::read_to_string(path)?, path)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub mean: f64,
    pub std: f64,
    /// Difference of `mean` from the first variant.
    pub delta: f64,
    /// Ratio of `mean` to the first variant's mean (0 when it is 0).
    pub relative: f64,
    pub first_quarter: f64,
    pub last_quarter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    /// Per-variant mean success by scored-episode index.
    pub curves: Vec<(String, Vec<f64>)>,
}

pub fn compare(variants: &[(String, EvalReport)]) -> Result<Comparison> {
    if variants.len() < 2 {
        return Err(Error::Usage("compare needs at least two variants".into()));
    }
    let base = variants[0].1.summary.mean;
    let rows = variants
        .iter()
        .map(|(label, r)| {
            let n = r.runs.len().max(1) as f64;
            ComparisonRow {
                label: label.clone(),
                mean: r.summary.mean,
                std: r.summary.std,
                delta: r.summary.mean - base,
                relative: if base > 0.0 { r.summary.mean / base } else { 0.0 },
                first_quarter: r.runs.iter().map(|x| x.quarters.first).sum::<f64>() / n,
                last_quarter: r.runs.iter().map(|x| x.quarters.last).sum::<f64>() / n,
            }
        })
        .collect();
    let curves = variants.iter().map(|(l, r)| (l.clone(), r.curve())).collect();
    Ok(Comparison { rows, curves })
}

impl Comparison {
    pub fn table(&self) -> String {
        let w = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(7).max(7);
        let mut s = format!(
            "{:<w$}  {:>7}  {:>7}  {:>8}  {:>8}  {:>7}  {:>7}  {:>8}\n",
            "variant", "mean", "std", "delta", "relative", "first_q", "last_q", "q_delta"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<w$}  {:>7.4}  {:>7.4}  {:>+8.4}  {:>8.4}  {:>7.4}  {:>7.4}  {:>+8.4}",
                r.label,
                r.mean,
                r.std,
                r.delta,
                r.relative,
                r.first_quarter,
                r.last_quarter,
                r.last_quarter - r.first_quarter
            );
        }
        s
    }

    /// Writes `table.txt`, `comparison.json` and one two-column
    /// `curve-<label>.dat` per variant into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut paths = Vec::new();
        let table = dir.join("table.txt");
        std::fs::write(&table, self.table())?;
        paths.push(table);
        let json = dir.join("comparison.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)?)?;
        paths.push(json);
        for (label, curve) in &self.curves {
            let safe: String = label
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
                .collect();
            let p = dir.join(format!("curve-{safe}.dat"));
            let mut body = String::from("# episode\tsuccess\n");
            for (i, v) in curve.iter().enumerate() {
                let _ = writeln!(body, "{}\t{v:.6}", i + 1);
            }
            std::fs::write(&p, body)?;
            paths.push(p);
        }
        Ok(paths)
    }
}
