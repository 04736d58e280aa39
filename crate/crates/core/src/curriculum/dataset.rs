//! Line-delimited JSON dataset files and sequence manifests.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Collection, CurriculumKind};
use crate::envs::EnvConfig;
use crate::episode::Episode;
use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "cec-episodes";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub env: EnvConfig,
    pub count: usize,
    pub kind: CurriculumKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceManifest {
    pub curriculum_id: String,
    pub seed: u64,
    pub caps: Vec<usize>,
    pub episode_ids: Vec<u64>,
}

pub fn write_dataset(collection: &Collection, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        env: collection.env.clone(),
        count: collection.episodes.len(),
        kind: collection.kind,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for ep in &collection.episodes {
        serde_json::to_writer(&mut w, ep)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Collection> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    let mut offset = 0u64;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let n = r.read_line(&mut line)?;
    if n == 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: "empty file, expected a dataset header".into(),
        });
    }
    offset += n as u64;
    let header: DatasetHeader =
        serde_json::from_str(line.trim_end()).map_err(|e| parse_err(1, format!("bad header: {e}")))?;
    if header.format != DATASET_FORMAT {
        return Err(parse_err(1, format!("format `{}` is not `{DATASET_FORMAT}`", header.format)));
    }
    if header.version != DATASET_VERSION {
        return Err(parse_err(
            1,
            format!("unsupported dataset version {} (expected {DATASET_VERSION})", header.version),
        ));
    }
    header.env.validate()?;

    let mut episodes = Vec::with_capacity(header.count);
    let mut lineno = 1;
    loop {
        line.clear();
        let n = r.read_line(&mut line)?;
        if n == 0 {
            break;
        }
        lineno += 1;
        if !line.ends_with('\n') {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset,
                msg: format!("truncated record on line {lineno}"),
            });
        }
        offset += n as u64;
        if line.trim().is_empty() {
            continue;
        }
        let ep: Episode =
            serde_json::from_str(line.trim_end()).map_err(|e| parse_err(lineno, e.to_string()))?;
        if ep.observations.len() != ep.actions.len() {
            return Err(parse_err(
                lineno,
                format!("{} observations but {} actions", ep.observations.len(), ep.actions.len()),
            ));
        }
        episodes.push(ep);
    }
    if episodes.len() != header.count {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset,
            msg: format!("header promises {} episodes, found {}", header.count, episodes.len()),
        });
    }
    Ok(Collection {
        env: header.env,
        kind: header.kind,
        episodes,
    })
}

pub fn write_manifest(manifest: &SequenceManifest, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, manifest)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<SequenceManifest> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}
