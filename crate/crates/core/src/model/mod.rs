//! Segment-recurrent causal transformer policy with relative position
//! biases, a previous-action embedding and categorical or Gaussian-mixture
//! action heads.

mod checkpoint;
mod config;
mod infer;

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, model_hash, save_checkpoint, Checkpoint,
    ResumeMeta, ResumeState, CHECKPOINT_MAGIC,
};
pub use config::{ModelConfig, ACTION_EMBED_DIM, LN_EPS, MIXTURE_MODES, SCALE_FLOOR};
pub use infer::InferenceState;

use crate::curriculum::{ActionSpace, TokenizedBatch};
use crate::envs::Action;
use crate::error::{Error, Result};
use crate::numcore::{log_sum_exp, softplus, Array, Graph, ParamSet, Scalar, Var};

/// Per-timestep model inputs for one segment.
#[derive(Clone, Copy, Debug)]
pub struct SegmentTokens<'a> {
    /// Row-major `[len × obs_dim]` codec output.
    pub observations: &'a [f32],
    pub prev_actions: &'a [usize],
    pub episodes: &'a [u64],
    pub positions: &'a [u64],
}

impl SegmentTokens<'_> {
    pub fn len(&self) -> usize {
        self.prev_actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prev_actions.is_empty()
    }
}

/// Episode index and absolute position of every token in a batch.
pub fn token_coordinates(batch: &TokenizedBatch) -> (Vec<u64>, Vec<u64>) {
    let mut ep = 0u64;
    let mut episodes = Vec::with_capacity(batch.len());
    for (i, &s) in batch.episode_start.iter().enumerate() {
        if s && i > 0 {
            ep += 1;
        }
        episodes.push(ep);
    }
    (episodes, (0..batch.len() as u64).collect())
}

/// Layer inputs of the most recent positions, detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Memory<T> {
    pub d_model: usize,
    /// One row-major `[len × d_model]` buffer per layer.
    pub layers: Vec<Vec<T>>,
    pub positions: Vec<u64>,
    pub episodes: Vec<u64>,
}

impl<T: Scalar> Memory<T> {
    pub fn empty(config: &ModelConfig) -> Self {
        Self {
            d_model: config.d_model,
            layers: vec![Vec::new(); config.layers],
            positions: Vec::new(),
            episodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.d_model != config.d_model || self.layers.len() != config.layers {
            return Err(Error::Validation(format!(
                "memory built for d_model {} × {} layers used with d_model {} × {} layers",
                self.d_model,
                self.layers.len(),
                config.d_model,
                config.layers
            )));
        }
        if self.len() > config.memory {
            return Err(Error::Validation(format!(
                "memory holds {} positions, config allows {}",
                self.len(),
                config.memory
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub enum HeadVars {
    Categorical(Var),
    Mixture { mix: Var, mean: Var, raw_scale: Var },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum PolicyOutput {
    Categorical { logits: Vec<f32> },
    /// `means` and `scales` are `[modes × dim]`.
    Mixture {
        logits: Vec<f32>,
        means: Vec<f32>,
        scales: Vec<f32>,
        dim: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActMode {
    Sample,
    Greedy,
    /// Mean of the heaviest mixture component; argmax for discrete heads.
    LowNoise,
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_logits(logits: &[f32], rng: &mut ChaCha8Rng) -> usize {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let w: Vec<f64> = logits.iter().map(|&l| ((l - max) as f64).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &p) in w.iter().enumerate() {
        if u < p {
            return i;
        }
        u -= p;
    }
    w.len() - 1
}

pub fn act(output: &PolicyOutput, mode: ActMode, rng: &mut ChaCha8Rng) -> Action {
    match output {
        PolicyOutput::Categorical { logits } => Action::Discrete(match mode {
            ActMode::Sample => sample_logits(logits, rng),
            ActMode::Greedy | ActMode::LowNoise => argmax(logits),
        }),
        PolicyOutput::Mixture {
            logits,
            means,
            scales,
            dim,
        } => {
            let mut a = [0f32; 2];
            let k = match mode {
                ActMode::Sample => sample_logits(logits, rng),
                ActMode::Greedy | ActMode::LowNoise => argmax(logits),
            };
            for j in 0..(*dim).min(2) {
                let mu = means[k * dim + j];
                a[j] = match mode {
                    ActMode::Sample => {
                        let z: f64 = StandardNormal.sample(rng);
                        mu + scales[k * dim + j] * z as f32
                    }
                    _ => mu,
                };
            }
            Action::Continuous(a)
        }
    }
}

/// `log Σ_k w_k N(a; μ_k, diag σ_k²)`, evaluated in 64-bit.
pub fn gmm_log_prob(output: &PolicyOutput, action: &[f32]) -> Result<f64> {
    let PolicyOutput::Mixture {
        logits,
        means,
        scales,
        dim,
    } = output
    else {
        return Err(Error::Usage("gmm_log_prob needs a mixture output".into()));
    };
    if action.len() != *dim {
        return Err(Error::Dimension {
            op: "gmm_log_prob",
            lhs: vec![*dim],
            rhs: vec![action.len()],
        });
    }
    if let Some(s) = scales.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::Validation(format!("mixture scale {s} is not positive")));
    }
    let lw: Vec<f64> = logits.iter().map(|&l| l as f64).collect();
    let lse = log_sum_exp(&lw);
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let comp: Vec<f64> = (0..logits.len())
        .map(|c| {
            let mut lp = lw[c] - lse;
            for j in 0..*dim {
                let s = scales[c * dim + j] as f64;
                let z = (action[j] as f64 - means[c * dim + j] as f64) / s;
                lp -= 0.5 * z * z + s.ln() + half_log_2pi;
            }
            lp
        })
        .collect();
    Ok(log_sum_exp(&comp))
}

/// Scaled dot-product attention `softmax(QKᵀ/√D)·V` with an optional
/// boolean mask over `[queries × keys]` (true = visible).
pub fn attention<T: Scalar>(
    q: &Array<T>,
    k: &Array<T>,
    v: &Array<T>,
    mask: Option<&[bool]>,
) -> Result<Array<T>> {
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v));
    let d = q.dims2().1;
    let s = g.matmul_bt(qv, kv)?;
    let s = g.scale(s, T::from_f64(1.0 / (d as f64).sqrt()));
    let a = g.masked_softmax(s, mask)?;
    let out = g.matmul(a, vv)?;
    Ok(g.value(out).clone())
}

/// `(name, shape)` for every parameter, in storage order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let f = cfg.ff_dim();
    let mut l: Vec<(String, Vec<usize>)> = vec![
        ("obs.w1".into(), vec![cfg.codec.obs_dim(), d]),
        ("obs.b1".into(), vec![d]),
        ("obs.w2".into(), vec![d, d]),
        ("obs.b2".into(), vec![d]),
        ("act.table".into(), vec![cfg.codec.prev_vocab(), ACTION_EMBED_DIM]),
        ("act.proj".into(), vec![ACTION_EMBED_DIM, d]),
    ];
    for i in 0..cfg.layers {
        let p = |s: &str| format!("l{i}.{s}");
        l.extend([
            (p("ln1.g"), vec![d]),
            (p("ln1.b"), vec![d]),
            (p("wq"), vec![d, d]),
            (p("bq"), vec![d]),
            (p("wk"), vec![d, d]),
            (p("bk"), vec![d]),
            (p("wv"), vec![d, d]),
            (p("bv"), vec![d]),
            (p("wo"), vec![d, d]),
            (p("bo"), vec![d]),
            (p("rel"), vec![cfg.heads, cfg.rel_buckets]),
            (p("ln2.g"), vec![d]),
            (p("ln2.b"), vec![d]),
            (p("ff.w1"), vec![d, f]),
            (p("ff.b1"), vec![f]),
            (p("ff.w2"), vec![f, d]),
            (p("ff.b2"), vec![d]),
        ]);
    }
    l.push(("lnf.g".into(), vec![d]));
    l.push(("lnf.b".into(), vec![d]));
    let out = cfg.head_outputs();
    match cfg.codec.actions {
        ActionSpace::Discrete { .. } => l.extend([
            ("head.w1".into(), vec![d, d]),
            ("head.b1".into(), vec![d]),
            ("head.w2".into(), vec![d, d]),
            ("head.b2".into(), vec![d]),
            ("head.w3".into(), vec![d, out]),
            ("head.b3".into(), vec![out]),
        ]),
        ActionSpace::Continuous { .. } => l.extend([
            ("head.w1".into(), vec![d, d]),
            ("head.b1".into(), vec![d]),
            ("head.w2".into(), vec![d, out]),
            ("head.b2".into(), vec![out]),
        ]),
    }
    l
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet<f32>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let residual = 1.0 / (2.0 * config.layers as f64).sqrt();
        let last_head = match config.codec.actions {
            ActionSpace::Discrete { .. } => "head.w3",
            ActionSpace::Continuous { .. } => "head.w2",
        };
        let mut names = Vec::new();
        let mut values = Vec::new();
        for (name, shape) in param_layout(&config) {
            let n: usize = shape.iter().product();
            let leaf = name.rsplit('.').next().unwrap_or("");
            let data: Vec<f32> = if name.ends_with(".g") {
                vec![1.0; n]
            } else if shape.len() == 1 || leaf == "rel" {
                vec![0.0; n]
            } else {
                let mut std = 1.0 / (shape[0] as f64).sqrt();
                if leaf == "wo" || leaf == "w2" && name.contains(".ff.") {
                    std *= residual;
                }
                if name == "act.table" {
                    std = 1.0;
                }
                if name == last_head {
                    std *= 0.1;
                }
                let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
            };
            names.push(name);
            values.push(Array::new(shape, data)?);
        }
        Ok(Self {
            config,
            params: ParamSet { names, values },
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Runs one segment without building gradients.
    pub fn forward_segment(
        &self,
        tokens: &SegmentTokens<'_>,
        memory: &Memory<f32>,
    ) -> Result<(Vec<PolicyOutput>, Memory<f32>)> {
        let mut g = Graph::new();
        let pv = bind_params(&mut g, &self.params);
        let (head, mem) = forward_graph(&mut g, &self.config, &self.params, &pv, tokens, memory)?;
        Ok((policy_outputs(&g, &self.config, head), mem))
    }

    /// Token vectors for a batch of codec rows, without the transformer.
    pub fn embed(&self, observations: &[f32], prev_actions: &[usize]) -> Result<Array<f32>> {
        let od = self.config.codec.obs_dim();
        let mut g = Graph::new();
        let pv = bind_params(&mut g, &self.params);
        let x = g.input(Array::new(vec![prev_actions.len(), od], observations.to_vec())?, false);
        let e = embed_graph(&mut g, &self.params, &pv, x, prev_actions)?;
        Ok(g.value(e).clone())
    }

    /// Segments a whole batch, carrying memory between segments.
    pub fn forward_batch(&self, batch: &TokenizedBatch) -> Result<Vec<PolicyOutput>> {
        let (episodes, positions) = token_coordinates(batch);
        let s = self.config.segment;
        let od = batch.obs_dim;
        let mut mem = Memory::empty(&self.config);
        let mut out = Vec::with_capacity(batch.len());
        let mut at = 0;
        while at < batch.len() {
            let end = (at + s).min(batch.len());
            let tok = SegmentTokens {
                observations: &batch.observations[at * od..end * od],
                prev_actions: &batch.prev_actions[at..end],
                episodes: &episodes[at..end],
                positions: &positions[at..end],
            };
            let (o, m) = self.forward_segment(&tok, &mem)?;
            out.extend(o);
            mem = m;
            at = end;
        }
        Ok(out)
    }
}

fn p<T: Scalar>(params: &ParamSet<T>, pv: &[Var], name: &str) -> Result<Var> {
    params
        .index_of(name)
        .map(|i| pv[i])
        .ok_or_else(|| Error::Validation(format!("missing parameter `{name}`")))
}

/// One leaf per parameter, in storage order.
pub fn bind_params<'p, T: Scalar>(g: &mut Graph<'p, T>, params: &'p ParamSet<T>) -> Vec<Var> {
    params.values.iter().map(|v| g.param(v)).collect()
}

/// Visibility mask and relative-distance buckets for `s` queries against
/// `mem_len + s` keys.
fn attention_layout(
    cfg: &ModelConfig,
    tokens: &SegmentTokens<'_>,
    mem_pos: &[u64],
    mem_ep: &[u64],
) -> (Vec<bool>, Rc<Vec<usize>>) {
    let s = tokens.len();
    let m = mem_pos.len();
    let cols = m + s;
    let mut mask = vec![false; s * cols];
    let mut buckets = vec![0usize; s * cols];
    for i in 0..s {
        let qp = tokens.positions[i];
        let qe = tokens.episodes[i];
        for j in 0..cols {
            let (kp, ke) = if j < m {
                (mem_pos[j], mem_ep[j])
            } else {
                (tokens.positions[j - m], tokens.episodes[j - m])
            };
            let visible = kp <= qp && (cfg.cross_episodic || ke == qe) && (j < m || j - m <= i);
            if visible {
                mask[i * cols + j] = true;
                buckets[i * cols + j] = cfg.bucket(qp - kp);
            }
        }
    }
    (mask, Rc::new(buckets))
}

/// Builds the segment's forward pass on `g`. Memory rows enter as
/// constants so no gradient reaches earlier segments.
pub fn forward_graph<'p, T: Scalar>(
    g: &mut Graph<'p, T>,
    cfg: &ModelConfig,
    params: &ParamSet<T>,
    pv: &[Var],
    tokens: &SegmentTokens<'_>,
    memory: &Memory<T>,
) -> Result<(HeadVars, Memory<T>)> {
    memory.check(cfg)?;
    let s = tokens.len();
    let od = cfg.codec.obs_dim();
    if s == 0 || s > cfg.segment {
        return Err(Error::Validation(format!(
            "segment of {s} tokens, expected 1..={}",
            cfg.segment
        )));
    }
    if tokens.observations.len() != s * od || tokens.episodes.len() != s || tokens.positions.len() != s {
        return Err(Error::Dimension {
            op: "forward_segment",
            lhs: vec![s, od],
            rhs: vec![tokens.observations.len()],
        });
    }
    let obs = Array::new(vec![s, od], tokens.observations.iter().map(|&v| T::from_f64(v as f64)).collect())?;
    let x = g.input(obs, false);
    forward_from_input(g, cfg, params, pv, x, tokens, memory)
}

/// Token vectors `obsEncode(o) + actionEmbed(prev)` for the rows of `x`.
pub fn embed_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    params: &ParamSet<T>,
    pv: &[Var],
    x: Var,
    prev_actions: &[usize],
) -> Result<Var> {
    let (w1, b1) = (p(params, pv, "obs.w1")?, p(params, pv, "obs.b1")?);
    let (w2, b2) = (p(params, pv, "obs.w2")?, p(params, pv, "obs.b2")?);
    let h1 = g.linear(x, w1, b1)?;
    let h1 = g.relu(h1);
    let e = g.linear(h1, w2, b2)?;
    let table = p(params, pv, "act.table")?;
    let proj = p(params, pv, "act.proj")?;
    let a = g.gather(table, prev_actions)?;
    let a = g.matmul(a, proj)?;
    g.add(e, a)
}

/// As [`forward_graph`] but with the codec rows already on the graph, so
/// callers can differentiate with respect to them.
pub fn forward_from_input<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    params: &ParamSet<T>,
    pv: &[Var],
    x: Var,
    tokens: &SegmentTokens<'_>,
    memory: &Memory<T>,
) -> Result<(HeadVars, Memory<T>)> {
    memory.check(cfg)?;
    let s = tokens.len();
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let eps = T::from_f64(LN_EPS);
    let mut h = embed_graph(g, params, pv, x, tokens.prev_actions)?;

    let m = memory.len();
    let (mask, buckets) = attention_layout(cfg, tokens, &memory.positions, &memory.episodes);
    let mut layer_inputs = Vec::with_capacity(cfg.layers);
    let inv = T::from_f64(1.0 / (dh as f64).sqrt());
    for l in 0..cfg.layers {
        layer_inputs.push(g.value(h).data().to_vec());
        let n = |s: &str| format!("l{l}.{s}");
        let (lg, lb) = (p(params, pv, &n("ln1.g"))?, p(params, pv, &n("ln1.b"))?);
        let nh = g.layer_norm(h, lg, lb, eps)?;
        let nall = if m > 0 {
            let mv = g.input(Array::new(vec![m, d], memory.layers[l].clone())?, false);
            let nm = g.layer_norm(mv, lg, lb, eps)?;
            g.concat_rows(&[nm, nh])?
        } else {
            nh
        };
        let (wq, bq) = (p(params, pv, &n("wq"))?, p(params, pv, &n("bq"))?);
        let (wk, bk) = (p(params, pv, &n("wk"))?, p(params, pv, &n("bk"))?);
        let (wv, bv) = (p(params, pv, &n("wv"))?, p(params, pv, &n("bv"))?);
        let q = g.linear(nh, wq, bq)?;
        let k = g.linear(nall, wk, bk)?;
        let v = g.linear(nall, wv, bv)?;
        let rel = p(params, pv, &n("rel"))?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for hd in 0..cfg.heads {
            let qh = g.slice_cols(q, hd * dh, dh)?;
            let kh = g.slice_cols(k, hd * dh, dh)?;
            let vh = g.slice_cols(v, hd * dh, dh)?;
            let sc = g.matmul_bt(qh, kh)?;
            let sc = g.scale(sc, inv);
            let bias = g.rel_bias(rel, hd, buckets.clone(), s, m + s)?;
            let sc = g.add(sc, bias)?;
            let at = g.masked_softmax(sc, Some(&mask))?;
            heads.push(g.matmul(at, vh)?);
        }
        let o = g.concat_cols(&heads)?;
        let (wo, bo) = (p(params, pv, &n("wo"))?, p(params, pv, &n("bo"))?);
        let o = g.linear(o, wo, bo)?;
        h = g.add(h, o)?;
        let (g2, b2) = (p(params, pv, &n("ln2.g"))?, p(params, pv, &n("ln2.b"))?);
        let n2 = g.layer_norm(h, g2, b2, eps)?;
        let (fw1, fb1) = (p(params, pv, &n("ff.w1"))?, p(params, pv, &n("ff.b1"))?);
        let (fw2, fb2) = (p(params, pv, &n("ff.w2"))?, p(params, pv, &n("ff.b2"))?);
        let f = g.linear(n2, fw1, fb1)?;
        let f = g.relu(f);
        let f = g.linear(f, fw2, fb2)?;
        h = g.add(h, f)?;
    }
    let (fg, fb) = (p(params, pv, "lnf.g")?, p(params, pv, "lnf.b")?);
    let hf = g.layer_norm(h, fg, fb, eps)?;

    let head = match cfg.codec.actions {
        ActionSpace::Discrete { .. } => {
            let mut z = hf;
            for i in 1..=3 {
                let w = p(params, pv, &format!("head.w{i}"))?;
                let b = p(params, pv, &format!("head.b{i}"))?;
                z = g.linear(z, w, b)?;
                if i < 3 {
                    z = g.relu(z);
                }
            }
            HeadVars::Categorical(z)
        }
        ActionSpace::Continuous { dim } => {
            let (w1, b1) = (p(params, pv, "head.w1")?, p(params, pv, "head.b1")?);
            let (w2, b2) = (p(params, pv, "head.w2")?, p(params, pv, "head.b2")?);
            let z = g.linear(hf, w1, b1)?;
            let z = g.relu(z);
            let z = g.linear(z, w2, b2)?;
            let k = cfg.mixture_modes;
            HeadVars::Mixture {
                mix: g.slice_cols(z, 0, k)?,
                mean: g.slice_cols(z, k, k * dim)?,
                raw_scale: g.slice_cols(z, k + k * dim, k * dim)?,
            }
        }
    };

    // Keep the most recent `memory` positions of [old memory ∥ segment].
    let keep = cfg.memory.min(m + s);
    let drop = m + s - keep;
    let tail = |old: &[u64], new: &[u64]| -> Vec<u64> {
        old.iter().chain(new).skip(drop).copied().collect()
    };
    let layers = layer_inputs
        .into_iter()
        .zip(&memory.layers)
        .map(|(new, old)| old.iter().chain(&new).skip(drop * d).copied().collect())
        .collect();
    let next = Memory {
        d_model: d,
        layers,
        positions: tail(&memory.positions, tokens.positions),
        episodes: tail(&memory.episodes, tokens.episodes),
    };
    Ok((head, next))
}

pub fn policy_outputs<T: Scalar>(g: &Graph<'_, T>, cfg: &ModelConfig, head: HeadVars) -> Vec<PolicyOutput> {
    let f = |v: &[T]| -> Vec<f32> { v.iter().map(|x| x.as_f64() as f32).collect() };
    match head {
        HeadVars::Categorical(z) => {
            let zv = g.value(z);
            (0..zv.dims2().0).map(|i| PolicyOutput::Categorical { logits: f(zv.row(i)) }).collect()
        }
        HeadVars::Mixture { mix, mean, raw_scale } => {
            let dim = match cfg.codec.actions {
                ActionSpace::Continuous { dim } => dim,
                ActionSpace::Discrete { .. } => 0,
            };
            let (mv, muv, sv) = (g.value(mix), g.value(mean), g.value(raw_scale));
            let floor = T::from_f64(SCALE_FLOOR);
            (0..mv.dims2().0)
                .map(|i| PolicyOutput::Mixture {
                    logits: f(mv.row(i)),
                    means: f(muv.row(i)),
                    scales: sv.row(i).iter().map(|&r| (softplus(r) + floor).as_f64() as f32).collect(),
                    dim,
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests;
