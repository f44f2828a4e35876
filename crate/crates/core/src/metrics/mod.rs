//! The metric catalog.
//!
//! Every metric reads the same inputs: matched recommendations plus an
//! [`EvalContext`]. Only in-pool matches are scored; unmatched and
//! off-pool entries keep their rank slot and contribute nothing. List-level
//! sums are divided by `K`, and every aggregate is an unweighted mean over
//! the users in `ctx.truth`.

mod beyond;
mod stats;
mod utility;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{mostpop_rank, RankedList};
use crate::candidates::CandidatePool;
use crate::corpus::PopularityTable;
use crate::error::{Error, Result};
use crate::ids::{ItemId, UserId};
use crate::parsing::MatchedRecommendation;

pub use beyond::{
    aplt, arp, dpd, gini, item_coverage, jains_index, overlap_item_coverage, pop_reo, self_information,
    serendipity, SerendipityVariant,
};
pub use stats::{cand_dif, significance, stars, CAND_DIF_CLAMP};
pub use utility::{hallucination_rate, hit_rate, ndcg, off_pool_rate};

pub const HR: &str = "HR";
pub const NDCG: &str = "NDCG";
pub const APLT: &str = "APLT";
pub const SERENDIPITY: &str = "Serendipity";
pub const SERENDIPITY_LITERAL: &str = "SerendipityLiteral";
pub const SELF_INFO: &str = "SelfInfo";
pub const ARP: &str = "ARP";
pub const POP_REO: &str = "PopREO";
pub const ITEM_COVERAGE: &str = "ItemCoverage";
pub const OIC: &str = "OIC";
pub const GINI: &str = "Gini";
pub const DPD: &str = "DPD";
pub const JAIN: &str = "Jain";
pub const HALLUCINATION: &str = "Hallucination";
/// Share of slots holding a real item that was not in the pool.
pub const OFF_POOL: &str = "OffPool";

pub const DEFAULT_POP_GROUPS: usize = 5;

pub type PerUser = BTreeMap<UserId, f64>;

/// Where the MostPop reference list for serendipity comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceScope {
    /// MostPop over the user's own pool.
    #[default]
    Pool,
    /// Global top-K of the catalog.
    Catalog,
}

#[derive(Clone, Debug)]
pub struct EvalContext {
    pub k: usize,
    /// Scored users and their held-out item.
    pub truth: BTreeMap<UserId, ItemId>,
    pub pools: BTreeMap<UserId, CandidatePool>,
    pub popularity: PopularityTable,
    pub mostpop: BTreeMap<UserId, RankedList>,
    pub history_lengths: BTreeMap<UserId, usize>,
}

impl EvalContext {
    /// Truth comes from each pool's positive item. The MostPop reference is
    /// computed over the chosen scope.
    pub fn new(
        k: usize,
        pools: BTreeMap<UserId, CandidatePool>,
        popularity: PopularityTable,
        history_lengths: BTreeMap<UserId, usize>,
        scope: ReferenceScope,
    ) -> Self {
        let truth = pools.iter().map(|(u, p)| (u.clone(), p.positive_item.clone())).collect();
        let global = match scope {
            ReferenceScope::Catalog => {
                let all = CandidatePool {
                    user_id: UserId::from(""),
                    positive_item: ItemId::from(""),
                    items: popularity.pop.keys().cloned().collect(),
                    positive_index: None,
                    provenance: crate::candidates::Provenance::Ranking,
                    seed: 0,
                };
                let mut ranked = mostpop_rank(&all, &popularity);
                ranked.items.truncate(k);
                ranked.scores.truncate(k);
                Some(ranked)
            }
            ReferenceScope::Pool => None,
        };
        let mostpop = pools
            .iter()
            .map(|(u, p)| {
                let mut r = match &global {
                    Some(g) => g.clone(),
                    None => mostpop_rank(p, &popularity),
                };
                r.user_id = u.clone();
                (u.clone(), r)
            })
            .collect();
        Self {
            k,
            truth,
            pools,
            popularity,
            mostpop,
            history_lengths,
        }
    }

    pub fn num_users(&self) -> usize {
        self.truth.len()
    }
}

/// Scored users paired with their recommendation; users without one are
/// scored as an empty list.
pub(crate) fn scored_users<'a>(
    recs: &'a BTreeMap<UserId, MatchedRecommendation>,
    ctx: &'a EvalContext,
) -> impl Iterator<Item = (&'a UserId, &'a ItemId, Option<&'a MatchedRecommendation>)> {
    ctx.truth.iter().map(move |(u, y)| (u, y, recs.get(u)))
}

pub(crate) fn in_pool_items(rec: Option<&MatchedRecommendation>) -> BTreeSet<&ItemId> {
    rec.map(|r| r.scored().map(|(_, i)| i).collect()).unwrap_or_default()
}

/// Neumaier-compensated mean; `None` for an empty input.
pub fn mean<'a>(values: impl IntoIterator<Item = &'a f64>) -> Option<f64> {
    let (mut sum, mut comp, mut n) = (0.0f64, 0.0f64, 0usize);
    for &v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
        n += 1;
    }
    (n > 0).then(|| (sum + comp) / n as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub task: String,
    pub model: String,
    pub strategy: String,
    pub arrangement: String,
    pub k: usize,
    pub history_length: Option<usize>,
    pub seeds: BTreeMap<String, u64>,
    pub template_version: Option<String>,
    pub serendipity_variant: String,
    pub serendipity_reference: ReferenceScope,
    pub significance_test: String,
    /// Free-form provenance: decoding parameters, matching mode, selector.
    pub notes: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_user: BTreeMap<UserId, BTreeMap<String, f64>>,
    pub aggregate: BTreeMap<String, f64>,
    pub metadata: ReportMetadata,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl MetricReport {
    /// One metric's per-user column.
    pub fn column(&self, metric: &str) -> PerUser {
        self.per_user
            .iter()
            .filter_map(|(u, m)| m.get(metric).map(|v| (u.clone(), *v)))
            .collect()
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.aggregate.get(metric).copied()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        crate::rundir::write_json(path, self)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        crate::rundir::read_json(path)
    }

    /// `user,<metric>...` with one row per user.
    pub fn write_per_user_csv(&self, path: &Path) -> Result<()> {
        let metrics: BTreeSet<&String> = self.per_user.values().flat_map(|m| m.keys()).collect();
        let mut buf = Vec::new();
        let header: Vec<&str> = std::iter::once("user").chain(metrics.iter().map(|s| s.as_str())).collect();
        writeln!(buf, "{}", header.join(",")).map_err(|e| Error::io("csv", e))?;
        for (user, values) in &self.per_user {
            let mut row = vec![user.to_string()];
            row.extend(metrics.iter().map(|m| values.get(*m).map(|v| v.to_string()).unwrap_or_default()));
            writeln!(buf, "{}", row.join(",")).map_err(|e| Error::io("csv", e))?;
        }
        crate::rundir::write_atomic(path, &buf)
    }
}

/// Compute the whole catalog. Metrics that are undefined on this input
/// (no qualifying pairs, an empty group) are left out of `aggregate`.
pub fn evaluate(recs: &BTreeMap<UserId, MatchedRecommendation>, ctx: &EvalContext) -> MetricReport {
    let mut report = MetricReport::default();
    let missing = ctx.truth.keys().filter(|u| !recs.contains_key(*u)).count();
    if missing > 0 {
        tracing::warn!(missing, "users without a recommendation are scored as empty lists");
        report
            .warnings
            .push(format!("{missing} scored users had no recommendation and were scored as empty"));
    }
    let failed = recs
        .iter()
        .filter(|(u, r)| ctx.truth.contains_key(*u) && r.parse_failed)
        .count();
    if failed > 0 {
        report.warnings.push(format!("{failed} responses yielded no parsable list"));
    }

    let ndcg_col = ndcg(recs, ctx);
    let columns: Vec<(&str, PerUser)> = vec![
        (HR, hit_rate(recs, ctx)),
        (NDCG, ndcg_col.clone()),
        (APLT, aplt(recs, ctx)),
        (SERENDIPITY, serendipity(recs, ctx, SerendipityVariant::Useful)),
        (SERENDIPITY_LITERAL, serendipity(recs, ctx, SerendipityVariant::Literal)),
        (SELF_INFO, self_information(recs, ctx, &mut report.warnings)),
        (ARP, arp(recs, ctx)),
        (HALLUCINATION, hallucination_rate(recs, ctx)),
        (OFF_POOL, off_pool_rate(recs, ctx)),
    ];
    for (name, col) in columns {
        if let Some(m) = mean(col.values()) {
            report.aggregate.insert(name.to_owned(), m);
        }
        for (u, v) in col {
            report.per_user.entry(u).or_default().insert(name.to_owned(), v);
        }
    }
    let globals = [
        (POP_REO, pop_reo(recs, ctx, DEFAULT_POP_GROUPS, &mut report.warnings)),
        (ITEM_COVERAGE, item_coverage(recs, ctx)),
        (OIC, overlap_item_coverage(recs, ctx)),
        (GINI, gini(recs, ctx)),
        (DPD, dpd(&ndcg_col, ctx)),
        (JAIN, jains_index(&ndcg_col)),
    ];
    for (name, value) in globals {
        match value {
            Some(v) => {
                report.aggregate.insert(name.to_owned(), v);
            }
            None => report.warnings.push(format!("{name} is undefined on this input")),
        }
    }
    report.metadata.k = ctx.k;
    report.metadata.serendipity_variant = "useful".into();
    report.metadata.significance_test = "paired t-test when users coincide, Welch otherwise".into();
    report
}
