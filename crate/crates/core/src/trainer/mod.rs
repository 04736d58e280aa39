//! Training on curricular sequences: fresh sequences each step, segments
//! carried through the recurrence memory within a sequence, mean NLL over
//! every valid token of the batch, global-norm clipping and AdamW.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::curriculum::{assemble_sequence, tokenize, Codec, CurricularSequence, Curriculum, SequenceManifest, TokenizedBatch};
use crate::envs::Action;
use crate::error::{Error, Result};
use crate::model::{
    bind_params, forward_graph, gmm_log_prob, save_checkpoint, token_coordinates, Checkpoint, HeadVars, Memory, Model,
    PolicyOutput, ResumeMeta, ResumeState, SegmentTokens, SCALE_FLOOR,
};
use crate::numcore::{
    adamw_step, clip_global_norm, log_sum_exp, lr_at, AdamWConfig, Array, CategoricalTargets, Graph, MixtureTargets,
    OptimState, ParamSet, Schedule,
};
use crate::seeds::{self, stream};


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: u64,
    pub sequences_per_epoch: u64,
    /// Upper bound on episodes drawn per level: a single entry shared by
    /// every level, or one entry per level.
    pub caps: Vec<usize>,
    pub schedule: Schedule,
    pub optimizer: AdamWConfig,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    /// Steps between intermediate checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Tokens kept per sequence, oldest dropped first; 0 keeps everything.
    pub max_sequence_tokens: usize,
    /// Replays one pre-assembled batch every step instead of drawing anew.
    pub fixed_sequences: bool,
    /// Held-out sequences scored after each epoch; 0 skips validation.
    pub validation_sequences: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            sequences_per_epoch: 100,
            caps: vec![5],
            schedule: Schedule {
                base_rate: 5e-4,
                warmup_steps: 100,
                anneal_steps: 900,
                floor_rate: 0.0,
            },
            optimizer: AdamWConfig::default(),
            batch_size: 1,
            grad_clip: 1.0,
            checkpoint_every: 0,
            max_sequence_tokens: 0,
            fixed_sequences: false,
            validation_sequences: 2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.sequences_per_epoch == 0 || self.batch_size == 0 {
            return bad("epochs, sequences_per_epoch and batch_size must be positive");
        }
        if self.caps.is_empty() || self.caps.contains(&0) {
            return bad("caps must be non-empty and every cap ≥ 1");
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be ≥ 0");
        }
        self.schedule.validate()
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.sequences_per_epoch.div_ceil(self.batch_size as u64)
    }

    pub fn total_steps(&self) -> u64 {
        self.epochs * self.steps_per_epoch()
    }

    /// Per-level caps for a curriculum with `levels` levels.
    pub fn resolve_caps(&self, levels: usize) -> Result<Vec<usize>> {
        match self.caps.len() {
            1 => Ok(vec![self.caps[0]; levels]),
            n if n == levels => Ok(self.caps.clone()),
            n => Err(Error::Config(format!("{n} caps given for a curriculum with {levels} levels"))),
        }
    }

    /// Assembly seed of sequence `item` in step `step`.
    pub fn sequence_seed(&self, step: u64, item: usize) -> u64 {
        let base = seeds::split(self.seed, stream::TRAIN);
        let step = if self.fixed_sequences { 0 } else { step };
        seeds::split(base, step * self.batch_size as u64 + item as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub step: u64,
    pub validation_nll: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub tokens_per_second: f64,
}

fn log_softmax_at(logits: &[f32], class: usize) -> f64 {
    let z: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
    z[class] - log_sum_exp(&z)
}

/// `-log π(target)` for one position.
pub fn token_nll(output: &PolicyOutput, target: &Action) -> Result<f64> {
    match (output, target) {
        (PolicyOutput::Categorical { logits }, Action::Discrete(a)) => {
            if *a >= logits.len() {
                return Err(Error::Validation(format!("target {a} outside {} classes", logits.len())));
            }
            Ok(-log_softmax_at(logits, *a))
        }
        (PolicyOutput::Mixture { .. }, Action::Continuous(a)) => Ok(-gmm_log_prob(output, a)?),
        _ => Err(Error::Validation("output head and target action kinds differ".into())),
    }
}

/// Mean `-log π(a_t)` over positions where `mask` is set.
pub fn nll_loss(outputs: &[PolicyOutput], targets: &[Action], mask: &[bool]) -> Result<f64> {
    if outputs.len() != targets.len() || outputs.len() != mask.len() {
        return Err(Error::Dimension {
            op: "nll_loss",
            lhs: vec![outputs.len()],
            rhs: vec![targets.len(), mask.len()],
        });
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for ((o, t), &m) in outputs.iter().zip(targets).zip(mask) {
        if m {
            total += token_nll(o, t)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Validation("nll_loss over zero valid tokens".into()));
    }
    Ok(total / n as f64)
}

/// Per-token NLL of a whole batch under `model`, memory carried across
/// segments.
pub fn batch_token_nll(model: &Model, batch: &TokenizedBatch) -> Result<Vec<f64>> {
    let outputs = model.forward_batch(batch)?;
    outputs.iter().zip(&batch.targets).map(|(o, t)| token_nll(o, t)).collect()
}

/// Weighted NLL sum of one sequence and its parameter gradients. Each
/// token carries weight `weight`, so a batch mean needs `1 / batch tokens`.
pub fn sequence_loss_and_grads(
    model: &Model,
    batch: &TokenizedBatch,
    weight: f64,
) -> Result<(f64, Vec<Array<f32>>)> {
    let cfg = &model.config;
    let params: &ParamSet<f32> = &model.params;
    let (episodes, positions) = token_coordinates(batch);
    let od = batch.obs_dim;
    let mut grads: Vec<Array<f32>> = params.values.iter().map(|v| Array::zeros(v.shape())).collect();
    let mut mem = Memory::empty(cfg);
    let mut total = 0.0;
    let mut at = 0;
    while at < batch.len() {
        let end = (at + cfg.segment).min(batch.len());
        let tok = SegmentTokens {
            observations: &batch.observations[at * od..end * od],
            prev_actions: &batch.prev_actions[at..end],
            episodes: &episodes[at..end],
            positions: &positions[at..end],
        };
        let mut g = Graph::new();
        let pv = bind_params(&mut g, params);
        let (head, next) = forward_graph(&mut g, cfg, params, &pv, &tok, &mem)?;
        let targets = &batch.targets[at..end];
        let weights = vec![weight as f32; end - at];
        let loss = match head {
            HeadVars::Categorical(z) => {
                let classes = targets
                    .iter()
                    .map(|a| a.discrete().ok_or_else(|| Error::Validation("continuous target for a discrete head".into())))
                    .collect::<Result<Vec<_>>>()?;
                g.cross_entropy(z, CategoricalTargets { classes, weights })?
            }
            HeadVars::Mixture { mix, mean, raw_scale } => {
                let mut actions = Vec::with_capacity(targets.len() * 2);
                for a in targets {
                    let c = a.continuous().ok_or_else(|| Error::Validation("discrete target for a mixture head".into()))?;
                    actions.extend_from_slice(&c);
                }
                let dim = match cfg.codec.actions {
                    crate::curriculum::ActionSpace::Continuous { dim } => dim,
                    crate::curriculum::ActionSpace::Discrete { .. } => unreachable!(),
                };
                g.mixture_nll(
                    mix,
                    mean,
                    raw_scale,
                    MixtureTargets {
                        actions,
                        dim,
                        weights,
                        scale_floor: SCALE_FLOOR as f32,
                    },
                )?
            }
        };
        total += g.value(loss).data()[0] as f64;
        let gr = g.backward(loss)?;
        for (acc, &v) in grads.iter_mut().zip(&pv) {
            if let Some(gv) = gr.get(v) {
                acc.add_assign(gv);
            }
        }
        mem = next;
        at = end;
    }
    Ok((total, grads))
}

pub struct Trainer<'c> {
    pub model: Model,
    pub optim: OptimState<f32>,
    config: TrainConfig,
    curriculum: &'c Curriculum,
    caps: Vec<usize>,
    dump_dir: Option<PathBuf>,
}

impl<'c> Trainer<'c> {
    pub fn new(model: Model, curriculum: &'c Curriculum, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let codec = Codec::for_env(&curriculum.collection.env);
        if codec != model.config.codec {
            return Err(Error::Validation(format!(
                "curriculum codec {:?} does not match model codec {:?}",
                codec, model.config.codec
            )));
        }
        let caps = config.resolve_caps(curriculum.levels.len())?;
        let optim = OptimState::new(&model.params, config.optimizer);
        Ok(Self {
            model,
            optim,
            config,
            curriculum,
            caps,
            dump_dir: None,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`]. The
    /// stored trainer config is used unless `config` overrides it.
    pub fn resume(ck: Checkpoint, curriculum: &'c Curriculum, config: Option<TrainConfig>) -> Result<Self> {
        let resume = ck
            .resume
            .ok_or_else(|| Error::Validation("checkpoint carries no optimizer state".into()))?;
        let stored: TrainConfig = serde_json::from_value(resume.meta.trainer.clone())?;
        let config = config.unwrap_or(stored);
        let mut t = Self::new(ck.model, curriculum, config)?;
        t.optim = resume.optim;
        Ok(t)
    }

    pub fn with_dump_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.dump_dir = Some(dir.into());
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.optim.step
    }

    pub fn is_done(&self) -> bool {
        self.optim.step >= self.config.total_steps()
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            model: self.model.clone(),
            resume: Some(ResumeState {
                meta: ResumeMeta {
                    step: self.optim.step,
                    optimizer: self.optim.config,
                    trainer: serde_json::to_value(&self.config)?,
                },
                optim: self.optim.clone(),
            }),
        })
    }

    fn sequence(&self, seed: u64) -> Result<(CurricularSequence, TokenizedBatch)> {
        let seq = assemble_sequence(self.curriculum, &self.caps, seed)?;
        let mut batch = tokenize(self.curriculum, &seq, &self.model.config.codec)?;
        if self.config.max_sequence_tokens > 0 {
            batch.truncate_front(self.config.max_sequence_tokens);
        }
        Ok((seq, batch))
    }

    /// Sequences of optimizer step `step`.
    pub fn step_batch(&self, step: u64) -> Result<Vec<(CurricularSequence, TokenizedBatch)>> {
        (0..self.config.batch_size)
            .map(|i| self.sequence(self.config.sequence_seed(step, i)))
            .collect()
    }

    fn halt(&self, step: u64, seqs: &[(CurricularSequence, TokenizedBatch)], what: &str) -> Error {
        let manifests: Vec<SequenceManifest> = seqs.iter().map(|(s, _)| s.manifest(self.curriculum)).collect();
        let json = serde_json::to_string_pretty(&manifests).unwrap_or_default();
        let detail = match &self.dump_dir {
            Some(dir) => {
                let path = dir.join(format!("nonfinite-step-{step}.json"));
                match std::fs::create_dir_all(dir).and_then(|_| std::fs::write(&path, &json)) {
                    Ok(()) => format!("{what}; sequence manifests written to {}", path.display()),
                    Err(e) => format!("{what}; could not write manifests ({e}): {json}"),
                }
            }
            None => format!("{what}; sequence manifests: {json}"),
        };
        Error::NonFiniteLoss { step, detail }
    }

    pub fn train_step(&mut self) -> Result<StepRecord> {
        let step = self.optim.step;
        let seqs = self.step_batch(step)?;
        let tokens: usize = seqs.iter().map(|(_, b)| b.len()).sum();
        if tokens == 0 {
            return Err(Error::Validation("assembled batch has no tokens".into()));
        }
        let w = 1.0 / tokens as f64;
        let model = &self.model;
        #[cfg(feature = "parallel")]
        let parts: Vec<Result<(f64, Vec<Array<f32>>)>> = {
            use rayon::prelude::*;
            seqs.par_iter().map(|(_, b)| sequence_loss_and_grads(model, b, w)).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let parts: Vec<Result<(f64, Vec<Array<f32>>)>> =
            seqs.iter().map(|(_, b)| sequence_loss_and_grads(model, b, w)).collect();
        let mut loss = 0.0;
        let mut grads: Option<Vec<Array<f32>>> = None;
        for part in parts {
            let (l, g) = part?;
            loss += l;
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
            }
        }
        let mut grads = grads.unwrap_or_default();
        if !loss.is_finite() {
            return Err(self.halt(step, &seqs, &format!("loss = {loss}")));
        }
        let grad_norm = clip_global_norm(&mut grads, self.config.grad_clip);
        if !grad_norm.is_finite() {
            return Err(self.halt(step, &seqs, "gradient norm is not finite"));
        }
        let lr = lr_at(step + 1, &self.config.schedule);
        adamw_step(&mut self.model.params, &grads, &mut self.optim, lr)?;
        Ok(StepRecord {
            step: step + 1,
            loss,
            lr,
            grad_norm,
            tokens,
        })
    }

    /// Mean NLL over the held-out validation sequences.
    pub fn validation_nll(&self) -> Result<Option<f64>> {
        if self.config.validation_sequences == 0 {
            return Ok(None);
        }
        let base = seeds::split(self.config.seed, stream::VALIDATE);
        let mut total = 0.0;
        let mut n = 0usize;
        for i in 0..self.config.validation_sequences {
            let (_, batch) = self.sequence(seeds::split(base, i as u64))?;
            let nll = batch_token_nll(&self.model, &batch)?;
            total += nll.iter().sum::<f64>();
            n += nll.len();
        }
        Ok(Some(total / n.max(1) as f64))
    }
}

fn open_log(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let f = if append {
        OpenOptions::new().create(true).append(true).open(path)?
    } else {
        File::create(path)?
    };
    Ok(BufWriter::new(f))
}

fn write_line<T: Serialize>(w: &mut BufWriter<File>, record: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, record)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Runs `trainer` to its configured step count. With `out_dir`, writes
/// `metrics.jsonl`, `validation.jsonl`, periodic checkpoints under
/// `checkpoints/` and a final `model.cec`; a resumed trainer appends to
/// the existing logs.
pub fn run(trainer: &mut Trainer<'_>, out_dir: Option<&Path>) -> Result<(TrainMetrics, Vec<PathBuf>)> {
    let mut metrics = TrainMetrics::default();
    let mut written = Vec::new();
    let append = trainer.step() > 0;
    let mut logs = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some((
                open_log(&dir.join("metrics.jsonl"), append)?,
                open_log(&dir.join("validation.jsonl"), append)?,
            ))
        }
        None => None,
    };
    let per_epoch = trainer.config.steps_per_epoch();
    let started = Instant::now();
    let mut tokens = 0usize;
    while !trainer.is_done() {
        let rec = trainer.train_step()?;
        tokens += rec.tokens;
        if let Some((m, _)) = &mut logs {
            write_line(m, &rec)?;
        }
        let step = rec.step;
        metrics.steps.push(rec);
        if step % per_epoch == 0 {
            if let Some(nll) = trainer.validation_nll()? {
                let e = EpochRecord {
                    epoch: step / per_epoch,
                    step,
                    validation_nll: nll,
                };
                if let Some((_, v)) = &mut logs {
                    write_line(v, &e)?;
                }
                metrics.epochs.push(e);
            }
        }
        let every = trainer.config.checkpoint_every;
        if let Some(dir) = out_dir {
            if every > 0 && step % every == 0 && !trainer.is_done() {
                let ck_dir = dir.join("checkpoints");
                std::fs::create_dir_all(&ck_dir)?;
                let path = ck_dir.join(format!("step-{step:06}.cec"));
                save_checkpoint(&trainer.checkpoint()?, &path)?;
                written.push(path);
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    metrics.tokens_per_second = if secs > 0.0 { tokens as f64 / secs } else { 0.0 };
    if let Some((mut m, mut v)) = logs {
        m.flush()?;
        v.flush()?;
    }
    if let Some(dir) = out_dir {
        let path = dir.join("model.cec");
        save_checkpoint(&trainer.checkpoint()?, &path)?;
        written.push(path);
    }
    Ok((metrics, written))
}

/// Trains a fresh `model` on `curriculum`.
pub fn train(
    model: Model,
    curriculum: &Curriculum,
    config: TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(Model, TrainMetrics, Vec<PathBuf>)> {
    let mut trainer = Trainer::new(model, curriculum, config)?;
    if let Some(dir) = out_dir {
        trainer = trainer.with_dump_dir(dir);
    }
    let (metrics, paths) = run(&mut trainer, out_dir)?;
    Ok((trainer.model, metrics, paths))
}
