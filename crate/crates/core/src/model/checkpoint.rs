//! Binary checkpoint: magic `CEC1`, a length-prefixed JSON model config,
//! named little-endian f32 blobs with shapes, then an optional resume
//! section holding optimizer moments and trainer bookkeeping.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{param_layout, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numcore::{AdamWConfig, Array, OptimState, ParamSet};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CEC1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResumeMeta {
    pub step: u64,
    pub optimizer: AdamWConfig,
    /// Trainer-defined bookkeeping (config, RNG position, ...).
    pub trainer: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResumeState {
    pub meta: ResumeMeta,
    pub optim: OptimState<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub resume: Option<ResumeState>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Usage(format!("{v} does not fit a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_blob(out: &mut Vec<u8>, name: &str, a: &Array<f32>) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, a.shape().len())?;
    for &d in a.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in a.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let cfg = serde_json::to_vec(&ck.model.config)?;
    put_u32(&mut out, cfg.len())?;
    out.extend_from_slice(&cfg);
    let ps = &ck.model.params;
    put_u32(&mut out, ps.values.len())?;
    for (n, v) in ps.names.iter().zip(&ps.values) {
        put_blob(&mut out, n, v)?;
    }
    match &ck.resume {
        None => out.push(0),
        Some(r) => {
            out.push(1);
            let mut meta = r.meta.clone();
            meta.step = r.optim.step;
            let js = serde_json::to_vec(&meta)?;
            put_u32(&mut out, js.len())?;
            out.extend_from_slice(&js);
            for (i, n) in ps.names.iter().enumerate() {
                put_blob(&mut out, &format!("m1.{n}"), &r.optim.first_moment[i])?;
                put_blob(&mut out, &format!("m2.{n}"), &r.optim.second_moment[i])?;
            }
        }
    }
    Ok(out)
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ck)?)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.at as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(self.err(format!("truncated: need {n} more bytes")));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn blob(&mut self) -> Result<(String, Array<f32>)> {
        let n = self.u32()?;
        let name = std::str::from_utf8(self.take(n)?)
            .map_err(|_| self.err("parameter name is not UTF-8"))?
            .to_string();
        let nd = self.u32()?;
        if nd == 0 || nd > 8 {
            return Err(self.err(format!("`{name}` has {nd} dimensions")));
        }
        let mut shape = Vec::with_capacity(nd);
        for _ in 0..nd {
            shape.push(self.u64()? as usize);
        }
        let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let count = count.ok_or_else(|| self.err("shape overflows"))?;
        let bytes = self.take(count.checked_mul(4).ok_or_else(|| self.err("shape overflows"))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let arr = Array::new(shape, data).map_err(|e| self.err(e.to_string()))?;
        Ok((name, arr))
    }
}

pub fn decode_checkpoint(buf: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { buf, at: 0, path };
    if r.take(4).ok() != Some(&CHECKPOINT_MAGIC[..]) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: "not a CEC1 checkpoint".into(),
        });
    }
    let n = r.u32()?;
    let config: ModelConfig =
        serde_json::from_slice(r.take(n)?).map_err(|e| r.err(format!("bad config record: {e}")))?;
    config.validate()?;
    let layout = param_layout(&config);
    let count = r.u32()?;
    if count != layout.len() {
        return Err(r.err(format!("{count} parameter blobs, config implies {}", layout.len())));
    }
    let mut names = Vec::with_capacity(count);
    let mut values = Vec::with_capacity(count);
    for (want, shape) in &layout {
        let (name, arr) = r.blob()?;
        if &name != want || arr.shape() != &shape[..] {
            return Err(r.err(format!(
                "blob `{name}` {:?} does not match expected `{want}` {shape:?}",
                arr.shape()
            )));
        }
        names.push(name);
        values.push(arr);
    }
    let params = ParamSet { names, values };
    let resume = match r.take(1)?[0] {
        0 => None,
        1 => {
            let n = r.u32()?;
            let meta: ResumeMeta =
                serde_json::from_slice(r.take(n)?).map_err(|e| r.err(format!("bad resume record: {e}")))?;
            let mut first = Vec::with_capacity(count);
            let mut second = Vec::with_capacity(count);
            for (want, shape) in &layout {
                for (prefix, dst) in [("m1", &mut first), ("m2", &mut second)] {
                    let (name, arr) = r.blob()?;
                    if name != format!("{prefix}.{want}") || arr.shape() != &shape[..] {
                        return Err(r.err(format!("optimizer blob `{name}` out of place")));
                    }
                    dst.push(arr);
                }
            }
            Some(ResumeState {
                optim: OptimState {
                    config: meta.optimizer,
                    step: meta.step,
                    first_moment: first,
                    second_moment: second,
                },
                meta,
            })
        }
        f => return Err(r.err(format!("unknown section flag {f}"))),
    };
    if r.at != buf.len() {
        return Err(r.err("trailing bytes after checkpoint"));
    }
    Ok(Checkpoint {
        model: Model { config, params },
        resume,
    })
}

/// Loads a checkpoint; with `expect`, any difference from that config is
/// rejected.
pub fn load_checkpoint(path: &Path, expect: Option<&ModelConfig>) -> Result<Checkpoint> {
    let buf = std::fs::read(path)?;
    let ck = decode_checkpoint(&buf, path)?;
    if let Some(want) = expect {
        if want != &ck.model.config {
            return Err(Error::Validation(format!(
                "{}: checkpoint config differs from the requested model config",
                path.display()
            )));
        }
    }
    Ok(ck)
}

/// Hex SHA-256 of the model part of a checkpoint (config and parameters).
pub fn model_hash(model: &Model) -> Result<String> {
    let bytes = encode_checkpoint(&Checkpoint {
        model: model.clone(),
        resume: None,
    })?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
