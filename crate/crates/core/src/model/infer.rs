//! Step-wise inference with a rolling key/value cache.
//!
//! Keys and values depend only on their own row, so caching the projected
//! rows gives the same attention as recomputing them from stored layer
//! inputs. The cache keeps the last `segment + memory` positions.

use std::collections::VecDeque;

use super::{ModelConfig, Model, PolicyOutput, LN_EPS, SCALE_FLOOR};
use crate::curriculum::ActionSpace;
use crate::envs::{Action, Observation};
use crate::error::{Error, Result};
use crate::numcore::{dot, gemm_nn, row_stats, softmax_in_place, softplus, Array};

struct LayerCache {
    k: VecDeque<Vec<f32>>,
    v: VecDeque<Vec<f32>>,
}

pub struct InferenceState {
    layers: Vec<LayerCache>,
    positions: VecDeque<u64>,
    episodes: VecDeque<u64>,
    next_position: u64,
    episode: u64,
    prev: Option<Action>,
    started: bool,
    window: usize,
}

fn row_linear(x: &[f32], w: &Array<f32>, b: &Array<f32>) -> Vec<f32> {
    let (k, n) = w.dims2();
    let mut out = b.data().to_vec();
    gemm_nn(x, w.data(), &mut out, 1, k, n);
    out
}

fn row_norm(x: &[f32], g: &Array<f32>, b: &Array<f32>) -> Vec<f32> {
    let (mean, rstd) = row_stats(x, LN_EPS as f32);
    x.iter()
        .zip(g.data().iter().zip(b.data()))
        .map(|(&v, (&gv, &bv))| (v - mean) * rstd * gv + bv)
        .collect()
}

impl InferenceState {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            layers: (0..config.layers)
                .map(|_| LayerCache {
                    k: VecDeque::new(),
                    v: VecDeque::new(),
                })
                .collect(),
            positions: VecDeque::new(),
            episodes: VecDeque::new(),
            next_position: 0,
            episode: 0,
            prev: None,
            started: false,
            window: config.context(),
        }
    }

    pub fn cached(&self) -> usize {
        self.positions.len()
    }

    /// Marks the next token as an episode start. The cache is kept.
    pub fn begin_episode(&mut self) {
        if self.started {
            self.episode += 1;
        }
        self.started = true;
        self.prev = None;
    }

    /// Records the action actually taken after the last `step`.
    pub fn record_action(&mut self, action: Action) {
        self.prev = Some(action);
    }

    pub fn step(&mut self, model: &Model, obs: &Observation) -> Result<PolicyOutput> {
        let cfg = &model.config;
        if self.layers.len() != cfg.layers {
            return Err(Error::Validation("inference state built for another config".into()));
        }
        if !self.started {
            self.begin_episode();
        }
        let mut enc = Vec::with_capacity(cfg.codec.obs_dim());
        cfg.codec.encode_observation(obs, &mut enc)?;
        let prev_id = cfg.codec.prev_id(self.prev)?;
        self.step_encoded(model, &enc, prev_id)
    }

    pub fn step_encoded(&mut self, model: &Model, enc: &[f32], prev_id: usize) -> Result<PolicyOutput> {
        let cfg = &model.config;
        let w = |name: &str| -> Result<&Array<f32>> {
            model
                .params
                .index_of(name)
                .map(|i| &model.params.values[i])
                .ok_or_else(|| Error::Validation(format!("missing parameter `{name}`")))
        };
        let pos = self.next_position;
        self.next_position += 1;
        if self.positions.len() == self.window {
            self.positions.pop_front();
            self.episodes.pop_front();
            for l in &mut self.layers {
                l.k.pop_front();
                l.v.pop_front();
            }
        }
        self.positions.push_back(pos);
        self.episodes.push_back(self.episode);

        let h1: Vec<f32> = row_linear(enc, w("obs.w1")?, w("obs.b1")?).into_iter().map(|v| v.max(0.0)).collect();
        let mut h = row_linear(&h1, w("obs.w2")?, w("obs.b2")?);
        let table = w("act.table")?;
        if prev_id >= table.dims2().0 {
            return Err(Error::Validation(format!("previous-action id {prev_id} out of range")));
        }
        let proj = w("act.proj")?;
        let mut a = vec![0f32; cfg.d_model];
        gemm_nn(table.row(prev_id), proj.data(), &mut a, 1, proj.dims2().0, cfg.d_model);
        for (x, y) in h.iter_mut().zip(&a) {
            *x += y;
        }

        let dh = cfg.head_dim();
        let inv = 1.0 / (dh as f32).sqrt();
        let visible: Vec<bool> = self
            .episodes
            .iter()
            .map(|&e| cfg.cross_episodic || e == self.episode)
            .collect();
        let buckets: Vec<usize> = self.positions.iter().map(|&p| cfg.bucket(pos - p)).collect();
        for l in 0..cfg.layers {
            let n = |s: &str| format!("l{l}.{s}");
            let nh = row_norm(&h, w(&n("ln1.g"))?, w(&n("ln1.b"))?);
            let q = row_linear(&nh, w(&n("wq"))?, w(&n("bq"))?);
            let k = row_linear(&nh, w(&n("wk"))?, w(&n("bk"))?);
            let v = row_linear(&nh, w(&n("wv"))?, w(&n("bv"))?);
            let cache = &mut self.layers[l];
            cache.k.push_back(k);
            cache.v.push_back(v);
            let rel = w(&n("rel"))?;
            let mut o = vec![0f32; cfg.d_model];
            let mut scores = vec![0f32; cache.k.len()];
            for hd in 0..cfg.heads {
                let r = hd * dh..(hd + 1) * dh;
                let qh = &q[r.clone()];
                for (j, kr) in cache.k.iter().enumerate() {
                    scores[j] = dot(qh, &kr[r.clone()]) * inv + rel.get2(hd, buckets[j]);
                }
                softmax_in_place(&mut scores, Some(&visible));
                for (j, vr) in cache.v.iter().enumerate() {
                    let pj = scores[j];
                    if pj != 0.0 {
                        for (t, &x) in o[r.clone()].iter_mut().zip(&vr[r.clone()]) {
                            *t += pj * x;
                        }
                    }
                }
            }
            let o = row_linear(&o, w(&n("wo"))?, w(&n("bo"))?);
            for (x, y) in h.iter_mut().zip(&o) {
                *x += y;
            }
            let n2 = row_norm(&h, w(&n("ln2.g"))?, w(&n("ln2.b"))?);
            let f: Vec<f32> = row_linear(&n2, w(&n("ff.w1"))?, w(&n("ff.b1"))?).into_iter().map(|v| v.max(0.0)).collect();
            let f = row_linear(&f, w(&n("ff.w2"))?, w(&n("ff.b2"))?);
            for (x, y) in h.iter_mut().zip(&f) {
                *x += y;
            }
        }
        let hf = row_norm(&h, w("lnf.g")?, w("lnf.b")?);
        Ok(match cfg.codec.actions {
            ActionSpace::Discrete { .. } => {
                let mut z = hf;
                for i in 1..=3 {
                    z = row_linear(&z, w(&format!("head.w{i}"))?, w(&format!("head.b{i}"))?);
                    if i < 3 {
                        z.iter_mut().for_each(|v| *v = v.max(0.0));
                    }
                }
                PolicyOutput::Categorical { logits: z }
            }
            ActionSpace::Continuous { dim } => {
                let z: Vec<f32> = row_linear(&hf, w("head.w1")?, w("head.b1")?).into_iter().map(|v| v.max(0.0)).collect();
                let z = row_linear(&z, w("head.w2")?, w("head.b2")?);
                let k = cfg.mixture_modes;
                PolicyOutput::Mixture {
                    logits: z[..k].to_vec(),
                    means: z[k..k + k * dim].to_vec(),
                    scales: z[k + k * dim..].iter().map(|&r| softplus(r) + SCALE_FLOOR as f32).collect(),
                    dim,
                }
            }
        })
    }
}
