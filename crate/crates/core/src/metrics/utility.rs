use std::collections::BTreeMap;

use super::{scored_users, EvalContext, PerUser};
use crate::ids::UserId;
use crate::parsing::{MatchScope, MatchedRecommendation};

/// 1-based slot of the held-out item among in-pool matches.
fn hit_rank(rec: Option<&MatchedRecommendation>, target: &crate::ids::ItemId) -> Option<usize> {
    rec?.scored().find(|(_, i)| *i == target).map(|(r, _)| r)
}

pub fn hit_rate(recs: &BTreeMap<UserId, MatchedRecommendation>, ctx: &EvalContext) -> PerUser {
    scored_users(recs, ctx)
        .map(|(u, y, r)| (u.clone(), if hit_rank(r, y).is_some() { 1.0 } else { 0.0 }))
        .collect()
}

/// One positive per user, so the ideal DCG is 1.
pub fn ndcg(recs: &BTreeMap<UserId, MatchedRecommendation>, ctx: &EvalContext) -> PerUser {
    scored_users(recs, ctx)
        .map(|(u, y, r)| {
            let gain = hit_rank(r, y).map_or(0.0, |rank| 1.0 / ((rank + 1) as f64).log2());
            (u.clone(), gain)
        })
        .collect()
}

fn scope_share(recs: &BTreeMap<UserId, MatchedRecommendation>, ctx: &EvalContext, scope: MatchScope) -> PerUser {
    scored_users(recs, ctx)
        .map(|(u, _, r)| {
            let n = r.map_or(0, |r| r.count(scope));
            (u.clone(), n as f64 / ctx.k as f64)
        })
        .collect()
}

/// Share of the `K` slots holding a title that matches no catalog item.
pub fn hallucination_rate(recs: &BTreeMap<UserId, MatchedRecommendation>, ctx: &EvalContext) -> PerUser {
    scope_share(recs, ctx, MatchScope::Unmatched)
}

/// Share of the `K` slots holding a real item from outside the pool.
pub fn off_pool_rate(recs: &BTreeMap<UserId, MatchedRecommendation>, ctx: &EvalContext) -> PerUser {
    scope_share(recs, ctx, MatchScope::InCatalogOnly)
}
