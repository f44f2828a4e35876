//! Candidate pools for the ranking and re-ranking tasks, and control over the
//! order in which candidates are presented.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::corpus::SplitDataset;
use crate::error::{Error, Result};
use crate::ids::{ItemId, UserId};
use crate::seed;

pub const DEFAULT_NEGATIVES: usize = 19;
pub const DEFAULT_RERANK_SIZE: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Ranking,
    Rerank,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub user_id: UserId,
    pub positive_item: ItemId,
    pub items: Vec<ItemId>,
    pub positive_index: Option<usize>,
    pub provenance: Provenance,
    pub seed: u64,
}

impl CandidatePool {
    pub fn contains_positive(&self) -> bool {
        self.positive_index.is_some()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn reindex(&mut self) {
        self.positive_index = self.items.iter().position(|i| *i == self.positive_item);
    }
}

/// Sample `negatives` items uniformly without replacement from the catalog
/// minus everything the user has interacted with, then append the positive.
pub fn build_ranking_pool(
    user: &UserId,
    split: &SplitDataset,
    catalog: &BTreeMap<ItemId, String>,
    negatives: usize,
    seed: u64,
) -> Result<CandidatePool> {
    let positive = split
        .test
        .get(user)
        .ok_or_else(|| Error::invalid(format!("user `{user}` has no test item")))?;
    let seen: HashSet<&ItemId> = split
        .histories
        .get(user)
        .map(|h| h.iter().collect())
        .unwrap_or_default();
    let eligible: Vec<&ItemId> = catalog
        .keys()
        .filter(|i| !seen.contains(i) && *i != positive)
        .collect();
    if eligible.len() < negatives {
        return Err(Error::InsufficientNegatives {
            user: user.clone(),
            eligible: eligible.len(),
            needed: negatives,
        });
    }
    let user_seed = seed::derive_seed(seed, user.as_str());
    let mut rng = seed::rng_for(user_seed, "negatives");
    let mut items: Vec<ItemId> = index::sample(&mut rng, eligible.len(), negatives)
        .into_iter()
        .map(|i| eligible[i].clone())
        .collect();
    items.push(positive.clone());
    Ok(CandidatePool {
        user_id: user.clone(),
        positive_item: positive.clone(),
        positive_index: Some(negatives),
        items,
        provenance: Provenance::Ranking,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedEntries {
    pub items: Vec<ItemId>,
    pub scores: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RunRecord {
    user: UserId,
    items: Vec<ItemId>,
    #[serde(default)]
    scores: Vec<f64>,
}

/// Per-user ranked lists produced by one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFile {
    pub model_name: String,
    pub lists: BTreeMap<UserId, RankedEntries>,
}

impl RunFile {
    pub fn new(model_name: impl Into<String>) -> Self {
        Self {
            model_name: model_name.into(),
            lists: BTreeMap::new(),
        }
    }

    /// Insert a list, rejecting duplicate items.
    pub fn insert(&mut self, user: UserId, items: Vec<ItemId>, scores: Vec<f64>) -> Result<()> {
        let mut seen = HashSet::new();
        if let Some(dup) = items.iter().find(|i| !seen.insert(*i)) {
            return Err(Error::invalid(format!(
                "run `{}` lists item `{dup}` twice for user `{user}`",
                self.model_name
            )));
        }
        if !scores.is_empty() && scores.len() != items.len() {
            return Err(Error::invalid(format!(
                "run `{}`: {} scores for {} items (user `{user}`)",
                self.model_name,
                scores.len(),
                items.len()
            )));
        }
        self.lists.insert(user, RankedEntries { items, scores });
        Ok(())
    }

    /// Load a JSONL run; the model name defaults to the file stem.
    pub fn load(path: &Path, model_name: Option<&str>) -> Result<Self> {
        let shown = path.display().to_string();
        let name = model_name.map(str::to_owned).unwrap_or_else(|| {
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "run".into())
        });
        let file = File::open(path).map_err(|e| Error::io(shown.clone(), e))?;
        let mut run = RunFile::new(name);
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(shown.clone(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: RunRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: shown.clone(),
                line: idx + 1,
                message: e.to_string(),
            })?;
            run.insert(rec.user, rec.items, rec.scores).map_err(|e| Error::Parse {
                path: shown.clone(),
                line: idx + 1,
                message: e.to_string(),
            })?;
        }
        Ok(run)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let shown = path.display().to_string();
        let file = File::create(path).map_err(|e| Error::io(shown.clone(), e))?;
        let mut out = BufWriter::new(file);
        for (user, entries) in &self.lists {
            let rec = RunRecord {
                user: user.clone(),
                items: entries.items.clone(),
                scores: entries.scores.clone(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            writeln!(out).map_err(|e| Error::io(shown.clone(), e))?;
        }
        out.flush().map_err(|e| Error::io(shown, e))
    }
}

/// Interleave the runs round-robin in declared order, taking each model's
/// next unseen item, until `size` unique items are collected or every list
/// is exhausted. The positive is never injected.
pub fn build_rerank_pool(
    user: &UserId,
    positive: &ItemId,
    runs: &[RunFile],
    size: usize,
) -> Result<CandidatePool> {
    let lists: Vec<&[ItemId]> = runs
        .iter()
        .filter_map(|r| r.lists.get(user).map(|e| e.items.as_slice()))
        .collect();
    if lists.is_empty() {
        return Err(Error::UserNotInRuns(user.clone()));
    }
    let mut cursors = vec![0usize; lists.len()];
    let mut seen = BTreeSet::new();
    let mut items = Vec::new();
    while items.len() < size {
        let mut advanced = false;
        for (list, cursor) in lists.iter().zip(cursors.iter_mut()) {
            if items.len() == size {
                break;
            }
            while *cursor < list.len() {
                let candidate = &list[*cursor];
                *cursor += 1;
                if seen.insert(candidate.clone()) {
                    items.push(candidate.clone());
                    advanced = true;
                    break;
                }
            }
        }
        if !advanced {
            break;
        }
    }
    let mut pool = CandidatePool {
        user_id: user.clone(),
        positive_item: positive.clone(),
        items,
        positive_index: None,
        provenance: Provenance::Rerank,
        seed: 0,
    };
    pool.reindex();
    Ok(pool)
}

/// How to order a pool before it is shown to a recommender.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Placement {
    /// Uniform permutation keyed by `(seed, user)`, so every model sees the
    /// same order for the same user.
    Shuffled(u64),
    PositiveFirst,
    PositiveAt(usize),
    /// Leave the pool as built.
    AsBuilt,
}

impl Placement {
    pub fn label(&self) -> String {
        match self {
            Placement::Shuffled(_) => "shuffled".into(),
            Placement::PositiveFirst => "positive_first".into(),
            Placement::PositiveAt(k) => format!("positive_at_{k}"),
            Placement::AsBuilt => "as_built".into(),
        }
    }
}

pub fn arrange_pool(pool: &CandidatePool, placement: Placement) -> Result<CandidatePool> {
    let mut out = pool.clone();
    match placement {
        Placement::AsBuilt => {}
        Placement::Shuffled(seed) => {
            let mut rng = seed::rng_for(seed::derive_seed(seed, pool.user_id.as_str()), "arrange");
            out.items.shuffle(&mut rng);
        }
        Placement::PositiveFirst => move_positive(&mut out, 0)?,
        Placement::PositiveAt(k) => move_positive(&mut out, k)?,
    }
    out.reindex();
    Ok(out)
}

fn move_positive(pool: &mut CandidatePool, target: usize) -> Result<()> {
    if target >= pool.items.len() {
        return Err(Error::PositionOutOfRange {
            position: target,
            len: pool.items.len(),
        });
    }
    let from = pool
        .positive_index
        .ok_or_else(|| Error::PositiveAbsent(pool.user_id.clone()))?;
    let positive = pool.items.remove(from);
    pool.items.insert(target, positive);
    Ok(())
}

pub fn save_pools<'a>(path: &Path, pools: impl IntoIterator<Item = &'a CandidatePool>) -> Result<()> {
    crate::rundir::write_jsonl(path, pools)
}

pub fn load_pools(path: &Path) -> Result<BTreeMap<UserId, CandidatePool>> {
    let pools: Vec<CandidatePool> = crate::rundir::read_jsonl(path)?;
    Ok(pools.into_iter().map(|p| (p.user_id.clone(), p)).collect())
}
