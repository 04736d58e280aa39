//! Declarative run configuration and the pipeline commands behind the
//! `cec` binary: `gen`, `assemble`, `train`, `eval` and `report`.
//!
//! One JSON document configures every stage. Each command writes the fully
//! resolved document (defaults included) as `resolved-config.json` next to
//! its outputs, so any output directory can be reproduced from itself.
//!
//! Seeds: the global `seed` is copied into the trainer, evaluator and
//! source-agent sections, and each stage derives its streams with
//! [`seeds::split`]: model init `split(seed, INIT)`, training sequences
//! `split(split(seed, TRAIN), step * batch + item)`, evaluation run `r`
//! `split(split(seed, EVAL), r)`, episode seeds of generated data from
//! `split(seed, DATAGEN)` and assembled manifest `i` from
//! `split(split(seed, ASSEMBLE), i)`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::curriculum::{
    assemble_sequence, build_curriculum, read_dataset, write_dataset, write_manifest, Codec, Collection,
    Curriculum, CurriculumKind,
};
use crate::datagen::{
    default_profiles, generate_expertise_collection, generate_learning_progress_collection,
    generate_task_difficulty_collection, scripted_snapshots, train_source_agent, validate_ladder,
    DemonstratorProfile, DifficultyRung, PolicySnapshot, SeedRange, SnapshotProvenance, SourceAgentConfig,
};
use crate::envs::{EnvConfig, Family};
use crate::error::{Error, Result};
use crate::evalharness::{compare, run_eval, Comparison, EvalConfig, EvalReport, SequencerKind};
use crate::model::{load_checkpoint, Model, ModelConfig};
use crate::seeds::{self, stream};
use crate::trainer::{self, TrainConfig, TrainMetrics, Trainer};


pub const RESOLVED_CONFIG: &str = "resolved-config.json";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const PROVENANCE_FILE: &str = "provenance.json";
pub const REPORT_FILE: &str = "report.jsonl";
pub const MODEL_FILE: &str = "model.cec";
/// Overrides `output` as the root of every command's output directory.
pub const OUT_ENV: &str = "CEC_OUT";

/// Where snapshots for learning-progress and task-difficulty data come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    /// Q-learning, falling back to the scripted expert on a rung where the
    /// learner does not converge.
    #[default]
    Auto,
    QLearning,
    Scripted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatagenConfig {
    pub source: SourceKind,
    pub agent: SourceAgentConfig,
    /// Exploration rate per stage of the scripted source, most random first.
    pub scripted_epsilons: Vec<f64>,
    pub episodes_per_stage: usize,
    pub ladder: Vec<f64>,
    pub episodes_per_difficulty: usize,
    /// Demonstrator tiers; empty selects the family defaults.
    pub profiles: Vec<DemonstratorProfile>,
    pub episodes_per_tier: usize,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            source: SourceKind::Auto,
            agent: SourceAgentConfig::default(),
            scripted_epsilons: vec![0.8, 0.4, 0.05],
            episodes_per_stage: 100,
            ladder: vec![5.0, 7.0, 9.0],
            episodes_per_difficulty: 300,
            profiles: Vec::new(),
            episodes_per_tier: 90,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumSection {
    pub kind: CurriculumKind,
}

impl Default for CurriculumSection {
    fn default() -> Self {
        Self {
            kind: CurriculumKind::LearningProgress,
        }
    }
}

fn default_env() -> EnvConfig {
    EnvConfig::maze(5)
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default = "default_env")]
    pub env: EnvConfig,
    #[serde(default)]
    pub datagen: DatagenConfig,
    #[serde(default)]
    pub curriculum: CurriculumSection,
    /// `codec` is derived from `env`; a conflicting explicit value is an error.
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub trainer: TrainConfig,
    /// An empty `ladder` inherits `datagen.ladder` for task-difficulty runs.
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_value(Value::Object(Default::default())).expect("default config resolves")
    }
}

fn lookup<'v>(v: &'v Value, path: &str) -> Option<&'v Value> {
    path.split('.').try_fold(v, |cur, k| cur.get(k))
}

/// Sets `path` (dot-separated) in `v` to `raw`, parsed as JSON when it
/// parses and kept as a string otherwise.
pub fn apply_override(v: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Usage(format!("bad override path `{path}`")));
    }
    let mut cur = v;
    for k in &keys[..keys.len() - 1] {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Usage(format!("override `{path}` descends into a non-object")))?;
        cur = obj.entry(k.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = cur
        .as_object_mut()
        .ok_or_else(|| Error::Usage(format!("override `{path}` descends into a non-object")))?;
    obj.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parses `text` (empty means all defaults), applies `KEY=VALUE`
    /// overrides and resolves the result.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut v: Value = if text.trim().is_empty() {
            Value::Object(Default::default())
        } else {
            serde_json::from_str(text)?
        };
        for o in overrides {
            let (k, val) = o
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("override `{o}` is not KEY=VALUE")))?;
            apply_override(&mut v, k.trim(), val.trim())?;
        }
        Self::from_value(v)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn from_value(raw: Value) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_value(raw.clone()).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve(&raw)?;
        Ok(cfg)
    }

    fn resolve(&mut self, raw: &Value) -> Result<()> {
        self.env.validate()?;
        let codec = Codec::for_env(&self.env);
        if lookup(raw, "model.codec").is_some() && self.model.codec != codec {
            return Err(Error::Config(format!(
                "model.codec conflicts with the {:?} environment; omit it to derive it",
                self.env.family
            )));
        }
        self.model.codec = codec;

        for (name, v) in [
            ("trainer.seed", &mut self.trainer.seed),
            ("eval.seed", &mut self.eval.seed),
            ("datagen.agent.seed", &mut self.datagen.agent.seed),
        ] {
            if lookup(raw, name).is_some() && *v != self.seed {
                return Err(Error::Config(format!("{name} must not differ from the global seed")));
            }
            *v = self.seed;
        }

        let kind = self.curriculum.kind;
        if kind == CurriculumKind::TaskDifficulty {
            if self.eval.ladder.is_empty() {
                self.eval.ladder = self.datagen.ladder.clone();
            }
            validate_ladder(&self.datagen.ladder, self.eval.test_difficulty)?;
        } else if lookup(raw, "eval.test_difficulty").is_none() {
            self.eval.test_difficulty = self.env.difficulty;
        }
        if kind != CurriculumKind::TaskDifficulty && self.eval.sequencer != SequencerKind::Single && self.eval.ladder.is_empty() {
            return Err(Error::Config("fixed and auto sequencing need eval.ladder".into()));
        }
        if self.env.family == Family::Pointmass && kind != CurriculumKind::Expertise {
            return Err(Error::Config(
                "the point-mass family only supports the expertise curriculum".into(),
            ));
        }
        if self.datagen.profiles.is_empty() {
            self.datagen.profiles = default_profiles(self.env.family);
        }
        self.model.validate()?;
        self.trainer.validate()?;
        self.eval.validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Root for outputs: `$CEC_OUT` when set, else `output`.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output.clone(),
        }
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let p = dir.join(RESOLVED_CONFIG);
        std::fs::write(&p, self.to_json()?)?;
        Ok(p)
    }
}

/// Maps an error to the process exit code: 1 for user errors, 2 for
/// internal failures.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Validation(_)
        | Error::Usage(_)
        | Error::Parse { .. }
        | Error::Format { .. }
        | Error::Io(_)
        | Error::Json(_) => 1,
        Error::Dimension { .. } | Error::NonFiniteGradient(_) | Error::NonFiniteLoss { .. } | Error::Invariant(_) => 2,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotInfo {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<f64>,
    pub stage: u32,
    pub provenance: SnapshotProvenance,
    pub epsilon: f64,
    pub episode_index: u32,
    pub success_rate: f64,
}

/// One source-agent training run; `curve` is the per-episode success flag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub difficulty: f64,
    pub converged: bool,
    pub curve: Vec<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub snapshots: Vec<SnapshotInfo>,
    pub learning_curves: Vec<LearningCurve>,
}

fn info(s: &PolicySnapshot, difficulty: Option<f64>) -> SnapshotInfo {
    SnapshotInfo {
        difficulty,
        stage: s.stage,
        provenance: s.provenance,
        epsilon: s.epsilon,
        episode_index: s.episode_index,
        success_rate: s.success_rate,
    }
}

fn source_snapshots(cfg: &RunConfig, env: &EnvConfig, prov: &mut Provenance) -> Result<Vec<PolicySnapshot>> {
    let dg = &cfg.datagen;
    if dg.source == SourceKind::Scripted {
        return scripted_snapshots(env, &dg.scripted_epsilons, dg.agent.eval_episodes);
    }
    let run = train_source_agent(env, &dg.agent)?;
    prov.learning_curves.push(LearningCurve {
        difficulty: env.difficulty,
        converged: run.converged,
        curve: run.learning_curve,
    });
    if run.converged || dg.source == SourceKind::QLearning {
        return Ok(run.snapshots);
    }
    scripted_snapshots(env, &dg.scripted_epsilons, dg.agent.eval_episodes)
}

/// Builds the configured collection with its provenance.
pub fn generate(cfg: &RunConfig) -> Result<(Collection, Provenance)> {
    let dg = &cfg.datagen;
    let seeds = SeedRange {
        base: seeds::split(cfg.seed, stream::DATAGEN) >> 24,
    };
    let mut prov = Provenance::default();
    let col = match cfg.curriculum.kind {
        CurriculumKind::LearningProgress => {
            let snaps = source_snapshots(cfg, &cfg.env, &mut prov)?;
            prov.snapshots = snaps.iter().map(|s| info(s, None)).collect();
            generate_learning_progress_collection(&cfg.env, &snaps, dg.episodes_per_stage, seeds)?
        }
        CurriculumKind::TaskDifficulty => {
            validate_ladder(&dg.ladder, cfg.eval.test_difficulty)?;
            let mut per_rung = Vec::with_capacity(dg.ladder.len());
            for &d in &dg.ladder {
                let snaps = source_snapshots(cfg, &cfg.env.with_difficulty(d), &mut prov)?;
                prov.snapshots.extend(snaps.iter().map(|s| info(s, Some(d))));
                per_rung.push(snaps);
            }
            let rungs: Vec<DifficultyRung> = dg
                .ladder
                .iter()
                .zip(&per_rung)
                .map(|(&difficulty, snapshots)| DifficultyRung { difficulty, snapshots })
                .collect();
            generate_task_difficulty_collection(
                &cfg.env,
                &rungs,
                dg.episodes_per_difficulty,
                cfg.eval.test_difficulty,
                seeds,
            )?
        }
        CurriculumKind::Expertise => generate_expertise_collection(&cfg.env, &dg.profiles, dg.episodes_per_tier, seeds)?,
    };
    Ok((col, prov))
}

/// `gen`: writes `dataset.jsonl`, `provenance.json` and the resolved config.
pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let (col, prov) = generate(cfg)?;
    std::fs::create_dir_all(out)?;
    let data = out.join(DATASET_FILE);
    write_dataset(&col, &data)?;
    let p = out.join(PROVENANCE_FILE);
    std::fs::write(&p, serde_json::to_string(&prov)? + "\n")?;
    Ok(vec![data, p, cfg.write_resolved(out)?])
}

/// Reads a dataset and checks it matches the configured curriculum kind
/// and environment family.
pub fn load_curriculum(cfg: &RunConfig, dataset: &Path) -> Result<Curriculum> {
    let col = read_dataset(dataset)?;
    if col.kind != cfg.curriculum.kind {
        return Err(Error::Validation(format!(
            "dataset holds a {} collection but the config asks for {}",
            col.kind.as_str(),
            cfg.curriculum.kind.as_str()
        )));
    }
    if col.env.family != cfg.env.family {
        return Err(Error::Validation(format!(
            "dataset environment {:?} differs from the configured {:?}",
            col.env.family, cfg.env.family
        )));
    }
    build_curriculum(col, cfg.curriculum.kind)
}

/// `assemble`: writes `count` sequence manifests drawn with the trainer caps.
pub fn cmd_assemble(cfg: &RunConfig, dataset: &Path, count: usize, out: &Path) -> Result<Vec<PathBuf>> {
    let cur = load_curriculum(cfg, dataset)?;
    let caps = cfg.trainer.resolve_caps(cur.levels.len())?;
    std::fs::create_dir_all(out)?;
    let base = seeds::split(cfg.seed, stream::ASSEMBLE);
    let mut paths = Vec::with_capacity(count + 1);
    for i in 0..count {
        let seq = assemble_sequence(&cur, &caps, seeds::split(base, i as u64))?;
        let p = out.join(format!("sequence-{i:04}.json"));
        write_manifest(&seq.manifest(&cur), &p)?;
        paths.push(p);
    }
    paths.push(cfg.write_resolved(out)?);
    Ok(paths)
}

/// `train`: fits a fresh model (or resumes `resume`) and writes metrics,
/// checkpoints and the resolved config into `out`.
pub fn cmd_train(cfg: &RunConfig, dataset: &Path, out: &Path, resume: Option<&Path>) -> Result<TrainMetrics> {
    let cur = load_curriculum(cfg, dataset)?;
    cfg.write_resolved(out)?;
    let mut trainer = match resume {
        Some(p) => {
            let ck = load_checkpoint(p, Some(&cfg.model))?;
            Trainer::resume(ck, &cur, Some(cfg.trainer.clone()))?
        }
        None => {
            let model = Model::new(cfg.model.clone(), seeds::split(cfg.seed, stream::INIT))?;
            Trainer::new(model, &cur, cfg.trainer.clone())?
        }
    }
    .with_dump_dir(out);
    let (metrics, _) = trainer::run(&mut trainer, Some(out))?;
    Ok(metrics)
}

/// `eval`: evaluates a checkpoint and writes `report.jsonl`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<EvalReport> {
    let model = load_checkpoint(checkpoint, None)?.model;
    let runs = run_eval(&model, &cfg.env, &cfg.eval)?;
    let report = EvalReport::new(&model, &cfg.env, &cfg.eval, runs)?;
    cfg.write_resolved(out)?;
    report.write(&out.join(REPORT_FILE))?;
    Ok(report)
}

/// Parses `label=path`; a bare path is labelled by its parent directory.
pub fn parse_variant(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((l, p)) if !l.is_empty() => (l.to_string(), PathBuf::from(p)),
        _ => {
            let p = PathBuf::from(arg);
            let label = p
                .parent()
                .and_then(|d| d.file_name())
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| arg.to_string());
            (label, p)
        }
    }
}

/// `report`: aligns two or more evaluation reports. Every label in
/// `require` must be present; the first variant is the reference row.
pub fn cmd_report(variants: &[(String, PathBuf)], require: &[String], out: &Path) -> Result<Comparison> {
    for r in require {
        if !variants.iter().any(|(l, _)| l == r) {
            return Err(Error::Usage(format!("required variant `{r}` was not given")));
        }
    }
    let mut loaded = Vec::with_capacity(variants.len());
    for (label, path) in variants {
        if !path.is_file() {
            return Err(Error::Usage(format!("report for `{label}` not found at {}", path.display())));
        }
        loaded.push((label.clone(), EvalReport::read(path)?));
    }
    let cmp = compare(&loaded)?;
    cmp.write(out)?;
    Ok(cmp)
}
