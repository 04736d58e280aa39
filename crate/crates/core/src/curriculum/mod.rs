//! Ordered partitions of an episode collection into levels, and assembly
//! of curricular sequences that concatenate episodes across levels.

mod dataset;
mod tokenize;

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use dataset::{
    read_dataset, read_manifest, write_dataset, write_manifest, DatasetHeader, SequenceManifest,
    DATASET_FORMAT, DATASET_VERSION,
};
pub use tokenize::{detokenize, tokenize, ActionSpace, Codec, ObservationCodec, TokenizedBatch};

use crate::envs::EnvConfig;
use crate::episode::{Episode, Expertise};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurriculumKind {
    LearningProgress,
    TaskDifficulty,
    Expertise,
}

impl CurriculumKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CurriculumKind::LearningProgress => "learning-progress",
            CurriculumKind::TaskDifficulty => "task-difficulty",
            CurriculumKind::Expertise => "expertise",
        }
    }
}

/// A tagged set of episodes from one environment family.
#[derive(Clone, Debug, PartialEq)]
pub struct Collection {
    pub env: EnvConfig,
    pub kind: CurriculumKind,
    pub episodes: Vec<Episode>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LevelKey {
    Stage(u32),
    DifficultyStage(f64, u32),
    Expertise(Expertise),
}

impl PartialOrd for LevelKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        use LevelKey::*;
        match (self, other) {
            (Stage(a), Stage(b)) => a.partial_cmp(b),
            (DifficultyStage(d1, s1), DifficultyStage(d2, s2)) => {
                match d1.partial_cmp(d2)? {
                    Ordering::Equal => s1.partial_cmp(s2),
                    o => Some(o),
                }
            }
            (Expertise(a), Expertise(b)) => a.partial_cmp(b),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub index: usize,
    pub key: LevelKey,
    /// Positions into the collection's episode list.
    pub members: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Curriculum {
    pub id: String,
    pub kind: CurriculumKind,
    pub collection: Collection,
    pub levels: Vec<Level>,
}

fn key_for(kind: CurriculumKind, ep: &Episode) -> std::result::Result<LevelKey, &'static str> {
    let t = &ep.tags;
    match kind {
        CurriculumKind::LearningProgress => match (t.stage, t.difficulty, t.expertise) {
            (Some(s), None, None) => Ok(LevelKey::Stage(s)),
            (None, _, _) => Err("missing stage tag"),
            _ => Err("extra tags for a learning-progress curriculum"),
        },
        CurriculumKind::TaskDifficulty => match (t.difficulty, t.stage, t.expertise) {
            (Some(d), Some(s), None) if d.is_finite() => Ok(LevelKey::DifficultyStage(d, s)),
            (Some(d), _, _) if !d.is_finite() => Err("non-finite difficulty tag"),
            (_, _, Some(_)) => Err("extra expertise tag for a task-difficulty curriculum"),
            _ => Err("missing difficulty or stage tag"),
        },
        CurriculumKind::Expertise => match (t.expertise, t.stage, t.difficulty) {
            (Some(e), None, None) => Ok(LevelKey::Expertise(e)),
            (None, _, _) => Err("missing expertise tag"),
            _ => Err("extra tags for an expertise curriculum"),
        },
    }
}

fn curriculum_id(kind: CurriculumKind, collection: &Collection, levels: &[Level]) -> String {
    let mut h = Sha256::new();
    h.update(kind.as_str().as_bytes());
    h.update(serde_json::to_vec(&collection.env).unwrap_or_default());
    for l in levels {
        h.update(serde_json::to_vec(&l.key).unwrap_or_default());
        for &m in &l.members {
            let e = &collection.episodes[m];
            h.update(e.id.to_le_bytes());
            h.update(e.seed.to_le_bytes());
            h.update((e.len() as u64).to_le_bytes());
        }
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn build_curriculum(collection: Collection, kind: CurriculumKind) -> Result<Curriculum> {
    if collection.episodes.is_empty() {
        return Err(Error::Validation("cannot build a curriculum from an empty collection".into()));
    }
    let mut bad = Vec::new();
    let mut seen = HashSet::new();
    let mut dupes = Vec::new();
    let mut keys = Vec::with_capacity(collection.episodes.len());
    for ep in &collection.episodes {
        if !seen.insert(ep.id) {
            dupes.push(ep.id);
        }
        match key_for(kind, ep) {
            Ok(k) => keys.push(k),
            Err(why) => bad.push(format!("{} ({why})", ep.id)),
        }
    }
    if !dupes.is_empty() {
        return Err(Error::Validation(format!(
            "episode ids appear more than once: {dupes:?}"
        )));
    }
    if !bad.is_empty() {
        return Err(Error::Validation(format!(
            "episodes not tagged for a {} curriculum: {}",
            kind.as_str(),
            bad.join(", ")
        )));
    }
    let mut order: Vec<usize> = (0..keys.len()).collect();
    // Keys of one kind are totally ordered once non-finite tags are rejected.
    order.sort_by(|&a, &b| keys[a].partial_cmp(&keys[b]).unwrap_or(Ordering::Equal));
    let mut levels: Vec<Level> = Vec::new();
    for i in order {
        match levels.last_mut() {
            Some(l) if l.key == keys[i] => l.members.push(i),
            _ => levels.push(Level {
                index: levels.len(),
                key: keys[i],
                members: vec![i],
            }),
        }
    }
    let cur = Curriculum {
        id: curriculum_id(kind, &collection, &levels),
        kind,
        collection,
        levels,
    };
    cur.check_partition()?;
    Ok(cur)
}

impl Curriculum {
    pub fn len(&self) -> usize {
        self.collection.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.collection.episodes.is_empty()
    }

    /// Union covers the collection and levels are pairwise disjoint.
    pub fn check_partition(&self) -> Result<()> {
        let n = self.collection.episodes.len();
        let mut owner = vec![usize::MAX; n];
        for l in &self.levels {
            if l.members.is_empty() {
                return Err(Error::Invariant(format!("level {} is empty", l.index)));
            }
            for &m in &l.members {
                if m >= n {
                    return Err(Error::Invariant(format!("level {} member {m} out of range", l.index)));
                }
                if owner[m] != usize::MAX {
                    return Err(Error::Invariant(format!(
                        "episode {} in levels {} and {}",
                        self.collection.episodes[m].id, owner[m], l.index
                    )));
                }
                owner[m] = l.index;
            }
        }
        if let Some(m) = owner.iter().position(|&o| o == usize::MAX) {
            return Err(Error::Invariant(format!(
                "episode {} belongs to no level",
                self.collection.episodes[m].id
            )));
        }
        for w in self.levels.windows(2) {
            if w[0].key.partial_cmp(&w[1].key) != Some(Ordering::Less) {
                return Err(Error::Invariant(format!(
                    "level keys {:?} and {:?} out of order",
                    w[0].key, w[1].key
                )));
            }
        }
        Ok(())
    }

    /// `min(cap, |L_l|)` for every level.
    pub fn uniform_caps(&self, cap: usize) -> Vec<usize> {
        self.levels.iter().map(|l| cap.min(l.members.len()).max(1)).collect()
    }

    pub fn episode(&self, index: usize) -> &Episode {
        &self.collection.episodes[index]
    }

    pub fn index_of_id(&self) -> HashMap<u64, usize> {
        self.collection
            .episodes
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id, i))
            .collect()
    }
}

/// Episodes concatenated level by level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurricularSequence {
    pub curriculum_id: String,
    pub seed: u64,
    pub caps: Vec<usize>,
    /// Sampled `C_l` per level.
    pub counts: Vec<usize>,
    /// Positions into the curriculum's collection, in sequence order.
    pub episodes: Vec<usize>,
    pub levels: Vec<usize>,
    /// Token offset at which each episode starts.
    pub offsets: Vec<usize>,
    pub total_tokens: usize,
}

/// For every level in order: draw `C_l` uniformly from `1..=cap_l`, then
/// `C_l` distinct members by a partial Fisher-Yates shuffle.
pub fn assemble_sequence(cur: &Curriculum, caps: &[usize], seed: u64) -> Result<CurricularSequence> {
    if caps.len() != cur.levels.len() {
        return Err(Error::Validation(format!(
            "{} caps given for {} levels",
            caps.len(),
            cur.levels.len()
        )));
    }
    for (l, &cap) in cur.levels.iter().zip(caps) {
        if cap == 0 || cap > l.members.len() {
            return Err(Error::Validation(format!(
                "cap {cap} for level {} outside 1..={}",
                l.index,
                l.members.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = Vec::with_capacity(caps.len());
    let mut episodes = Vec::new();
    let mut levels = Vec::new();
    for (l, &cap) in cur.levels.iter().zip(caps) {
        let c = rng.gen_range(1..=cap);
        let mut pool = l.members.clone();
        for i in 0..c {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        counts.push(c);
        episodes.extend_from_slice(&pool[..c]);
        levels.extend(std::iter::repeat(l.index).take(c));
    }
    let mut offsets = Vec::with_capacity(episodes.len());
    let mut total = 0;
    for &e in &episodes {
        offsets.push(total);
        total += cur.episode(e).len();
    }
    Ok(CurricularSequence {
        curriculum_id: cur.id.clone(),
        seed,
        caps: caps.to_vec(),
        counts,
        episodes,
        levels,
        offsets,
        total_tokens: total,
    })
}

impl CurricularSequence {
    pub fn manifest(&self, cur: &Curriculum) -> SequenceManifest {
        SequenceManifest {
            curriculum_id: self.curriculum_id.clone(),
            seed: self.seed,
            caps: self.caps.clone(),
            episode_ids: self.episodes.iter().map(|&i| cur.episode(i).id).collect(),
        }
    }
}
