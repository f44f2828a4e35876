//! Non-neural reference rankers. Every ranker returns a permutation of the
//! pool it was given.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::candidates::{CandidatePool, RankedEntries, RunFile};
use crate::corpus::PopularityTable;
use crate::error::Result;
use crate::ids::{ItemId, UserId};
use crate::parsing::{MatchScope, MatchedEntry, MatchedRecommendation};
use crate::seed;
use crate::text::tokenize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub user_id: UserId,
    /// Descending by score.
    pub items: Vec<ItemId>,
    pub scores: Vec<f64>,
}

impl RankedList {
    /// Sort `(item, score)` pairs by descending score, then item id.
    fn from_scored(user: &UserId, mut scored: Vec<(ItemId, f64)>) -> Self {
        scored.sort_by(|(ia, sa), (ib, sb)| sb.total_cmp(sa).then_with(|| ia.cmp(ib)));
        let (items, scores) = scored.into_iter().unzip();
        Self {
            user_id: user.clone(),
            items,
            scores,
        }
    }

    pub fn top(&self, k: usize) -> &[ItemId] {
        &self.items[..k.min(self.items.len())]
    }

    /// The top `k` items as an in-pool recommendation, so baselines and LLM
    /// outputs go through the same metric code.
    pub fn to_matched(&self, k: usize) -> MatchedRecommendation {
        MatchedRecommendation {
            user_id: self.user_id.clone(),
            entries: self
                .top(k)
                .iter()
                .map(|i| MatchedEntry {
                    raw_title: i.to_string(),
                    item: Some(i.clone()),
                    scope: MatchScope::InPool,
                })
                .collect(),
            k,
            parse_failed: false,
        }
    }
}

/// Collect per-user lists into a run file, interchangeable with external runs.
pub fn to_run_file<'a>(name: &str, lists: impl IntoIterator<Item = &'a RankedList>) -> Result<RunFile> {
    let mut run = RunFile::new(name);
    for l in lists {
        run.insert(l.user_id.clone(), l.items.clone(), l.scores.clone())?;
    }
    Ok(run)
}

/// Descending train popularity, ties by item id. Arrangement-invariant.
pub fn mostpop_rank(pool: &CandidatePool, pop: &PopularityTable) -> RankedList {
    let scored = pool
        .items
        .iter()
        .map(|i| (i.clone(), pop.pop_of(i) as f64))
        .collect();
    RankedList::from_scored(&pool.user_id, scored)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.5, b: 0.75 }
    }
}

/// Document frequencies over the per-user history documents.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Bm25Corpus {
    pub num_docs: usize,
    pub avg_len: f64,
    pub df: HashMap<String, usize>,
}

/// One document per user: the tokens of all history titles, concatenated.
pub fn history_document<S: AsRef<str>>(titles: &[S]) -> Vec<String> {
    titles.iter().flat_map(|t| tokenize(t.as_ref())).collect()
}

impl Bm25Corpus {
    pub fn from_documents<I, D>(docs: I) -> Self
    where
        I: IntoIterator<Item = D>,
        D: AsRef<[String]>,
    {
        let mut df: HashMap<String, usize> = HashMap::new();
        let (mut num_docs, mut total_len) = (0usize, 0usize);
        for doc in docs {
            let doc = doc.as_ref();
            num_docs += 1;
            total_len += doc.len();
            for term in doc.iter().collect::<BTreeSet<_>>() {
                *df.entry(term.clone()).or_default() += 1;
            }
        }
        let avg_len = if num_docs == 0 {
            0.0
        } else {
            total_len as f64 / num_docs as f64
        };
        Self { num_docs, avg_len, df }
    }

    /// `ln((N − df + 0.5)/(df + 0.5) + 1)`; never negative.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.num_docs as f64;
        let df = self.df.get(term).copied().unwrap_or(0) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// Sum over distinct query terms.
    pub fn score(&self, query: &[String], doc: &[String], params: Bm25Params) -> f64 {
        if doc.is_empty() || self.avg_len == 0.0 {
            return 0.0;
        }
        let mut tf: HashMap<&str, usize> = HashMap::new();
        for t in doc {
            *tf.entry(t.as_str()).or_default() += 1;
        }
        let norm = params.k1 * (1.0 - params.b + params.b * doc.len() as f64 / self.avg_len);
        query
            .iter()
            .map(String::as_str)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(|term| match tf.get(term) {
                Some(&f) => {
                    let f = f as f64;
                    self.idf(term) * f * (params.k1 + 1.0) / (f + norm)
                }
                None => 0.0,
            })
            .sum()
    }
}

/// Score each candidate title (query) against the user's history document.
pub fn bm25_rank<S: AsRef<str>>(
    pool: &CandidatePool,
    history_titles: &[S],
    corpus: &Bm25Corpus,
    catalog: &BTreeMap<ItemId, String>,
    params: Bm25Params,
) -> RankedList {
    let doc = history_document(history_titles);
    let scored = pool
        .items
        .iter()
        .map(|i| {
            let query = catalog.get(i).map(|t| tokenize(t)).unwrap_or_default();
            (i.clone(), corpus.score(&query, &doc, params))
        })
        .collect();
    RankedList::from_scored(&pool.user_id, scored)
}

/// Uniform permutation keyed by `(seed, user)`. The pool is sorted first so
/// the result does not depend on how it was arranged.
pub fn random_rank(pool: &CandidatePool, seed: u64) -> RankedList {
    let mut items = pool.items.clone();
    items.sort();
    let mut rng = seed::rng_for(seed::derive_seed(seed, pool.user_id.as_str()), "random-ranker");
    items.shuffle(&mut rng);
    let n = items.len();
    RankedList {
        user_id: pool.user_id.clone(),
        scores: (0..n).map(|r| (n - r) as f64).collect(),
        items,
    }
}

/// Order the pool by an external model's ranking. Items the model did not
/// rank go last, by item id.
pub fn run_file_rank(pool: &CandidatePool, entries: Option<&RankedEntries>) -> RankedList {
    let rank_of: HashMap<&ItemId, usize> = entries
        .map(|e| e.items.iter().enumerate().map(|(r, i)| (i, r)).collect())
        .unwrap_or_default();
    let mut items = pool.items.clone();
    items.sort_by(|a, b| match (rank_of.get(a), rank_of.get(b)) {
        (Some(x), Some(y)) => x.cmp(y),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => a.cmp(b),
    });
    let n = items.len();
    RankedList {
        user_id: pool.user_id.clone(),
        scores: (0..n).map(|r| (n - r) as f64).collect(),
        items,
    }
}
