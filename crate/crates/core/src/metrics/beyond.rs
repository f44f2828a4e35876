//! Novelty, popularity, diversity and fairness metrics.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{in_pool_items, mean, scored_users, EvalContext, PerUser};
use crate::ids::{ItemId, UserId};
use crate::parsing::MatchedRecommendation;

type Recs = BTreeMap<UserId, MatchedRecommendation>;

/// Per user, `(1/K) · Σ_{i ∈ R_u} f(i)` over in-pool matches.
fn per_item_mean(recs: &Recs, ctx: &EvalContext, f: impl Fn(&UserId, &ItemId, &ItemId) -> f64) -> PerUser {
    scored_users(recs, ctx)
        .map(|(u, y, r)| {
            let sum: f64 = in_pool_items(r).into_iter().map(|i| f(u, y, i)).sum();
            (u.clone(), sum / ctx.k as f64)
        })
        .collect()
}

pub fn aplt(recs: &Recs, ctx: &EvalContext) -> PerUser {
    per_item_mean(recs, ctx, |_, _, i| f64::from(u8::from(ctx.popularity.long_tail.contains(i))))
}

pub fn arp(recs: &Recs, ctx: &EvalContext) -> PerUser {
    per_item_mean(recs, ctx, |_, _, i| ctx.popularity.pop_of(i) as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SerendipityVariant {
    /// Hits the MostPop reference did not make.
    #[default]
    Useful,
    /// Any recommended item outside the MostPop reference.
    Literal,
}

pub fn serendipity(recs: &Recs, ctx: &EvalContext, variant: SerendipityVariant) -> PerUser {
    per_item_mean(recs, ctx, |u, y, i| {
        let unexpected = !ctx
            .mostpop
            .get(u)
            .is_some_and(|m| m.top(ctx.k).contains(i));
        let useful = variant == SerendipityVariant::Literal || i == y;
        f64::from(u8::from(unexpected && useful))
    })
}

/// `log2(|U| / |U_i|)` averaged over the `K` slots. Items no user knows are
/// skipped and the divisor shrinks accordingly.
pub fn self_information(recs: &Recs, ctx: &EvalContext, warnings: &mut Vec<String>) -> PerUser {
    let total = ctx.popularity.num_users as f64;
    let mut skipped_any = 0usize;
    let out = scored_users(recs, ctx)
        .map(|(u, _, r)| {
            let (mut sum, mut skipped) = (0.0, 0usize);
            for i in in_pool_items(r) {
                match ctx.popularity.user_counts.get(i).copied().unwrap_or(0) {
                    0 => skipped += 1,
                    n => sum += (total / n as f64).log2(),
                }
            }
            skipped_any += skipped;
            let divisor = ctx.k.saturating_sub(skipped);
            (u.clone(), if divisor == 0 { 0.0 } else { sum / divisor as f64 })
        })
        .collect();
    if skipped_any > 0 {
        warnings.push(format!("self-information skipped {skipped_any} items with no known users"));
    }
    out
}

/// Coefficient of variation (population std / mean) of per-group true
/// positive rates. Catalog items are cut into `groups` equal popularity
/// bands by ascending rank; bands holding no held-out item are left out.
pub fn pop_reo(recs: &Recs, ctx: &EvalContext, groups: usize, warnings: &mut Vec<String>) -> Option<f64> {
    let ascending = ctx.popularity.ascending();
    let n = ascending.len();
    if n == 0 || groups == 0 {
        return None;
    }
    let group_of: HashMap<&ItemId, usize> = ascending
        .into_iter()
        .enumerate()
        .map(|(rank, i)| (i, rank * groups / n))
        .collect();
    let mut hits = vec![0usize; groups];
    let mut targets = vec![0usize; groups];
    for (_, y, r) in scored_users(recs, ctx) {
        let Some(&g) = group_of.get(y) else { continue };
        targets[g] += 1;
        if in_pool_items(r).contains(y) {
            hits[g] += 1;
        }
    }
    let rates: Vec<f64> = (0..groups)
        .filter(|&g| targets[g] > 0)
        .map(|g| hits[g] as f64 / targets[g] as f64)
        .collect();
    if rates.len() < groups {
        warnings.push(format!("PopREO: {} of {groups} popularity groups hold no target", groups - rates.len()));
    }
    let mu = mean(rates.iter())?;
    if mu == 0.0 {
        return None;
    }
    let var = rates.iter().map(|r| (r - mu).powi(2)).sum::<f64>() / rates.len() as f64;
    Some(var.sqrt() / mu)
}

pub fn item_coverage(recs: &Recs, ctx: &EvalContext) -> Option<f64> {
    let mut recommended = BTreeSet::new();
    let mut candidates = BTreeSet::new();
    for (u, _, r) in scored_users(recs, ctx) {
        recommended.extend(in_pool_items(r));
        if let Some(p) = ctx.pools.get(u) {
            candidates.extend(p.items.iter());
        }
    }
    (!candidates.is_empty()).then(|| recommended.len() as f64 / candidates.len() as f64)
}

/// Mean over unordered user pairs whose pools intersect.
pub fn overlap_item_coverage(recs: &Recs, ctx: &EvalContext) -> Option<f64> {
    let users: Vec<(BTreeSet<&ItemId>, BTreeSet<&ItemId>)> = scored_users(recs, ctx)
        .map(|(u, _, r)| {
            let cand = ctx.pools.get(u).map(|p| p.items.iter().collect()).unwrap_or_default();
            (cand, in_pool_items(r))
        })
        .collect();
    let mut ratios = Vec::new();
    for (a, (cand_a, rec_a)) in users.iter().enumerate() {
        for (cand_b, rec_b) in &users[a + 1..] {
            let shared = cand_a.intersection(cand_b).count();
            if shared > 0 {
                ratios.push(rec_a.intersection(rec_b).count() as f64 / shared as f64);
            }
        }
    }
    mean(ratios.iter())
}

/// Gini over recommendation frequencies of every catalog item, unrecommended
/// items counting as zero. `None` when nothing was recommended.
pub fn gini(recs: &Recs, ctx: &EvalContext) -> Option<f64> {
    let mut freq: BTreeMap<&ItemId, f64> = ctx.popularity.pop.keys().map(|i| (i, 0.0)).collect();
    for (_, _, r) in scored_users(recs, ctx) {
        for i in in_pool_items(r) {
            *freq.entry(i).or_default() += 1.0;
        }
    }
    let mut f: Vec<f64> = freq.into_values().collect();
    let total: f64 = f.iter().sum();
    if total == 0.0 {
        return None;
    }
    f.sort_by(f64::total_cmp);
    let n = f.len();
    // Σ_x Σ_y |f_x − f_y| = 2 Σ_i (2i − n + 1) f_(i) over ascending order.
    let pair_sum: f64 = 2.0
        * f.iter()
            .enumerate()
            .map(|(i, v)| (2.0 * i as f64 - n as f64 + 1.0) * v)
            .sum::<f64>();
    Some(pair_sum / (2.0 * n as f64 * total))
}

fn median(values: &mut [usize]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_unstable();
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2] as f64
    } else {
        (values[n / 2 - 1] + values[n / 2]) as f64 / 2.0
    })
}

/// Users with history longer than the median are active.
pub fn dpd(ndcg: &PerUser, ctx: &EvalContext) -> Option<f64> {
    let len_of = |u: &UserId| ctx.history_lengths.get(u).copied().unwrap_or(0);
    let mut lens: Vec<usize> = ndcg.keys().map(len_of).collect();
    let med = median(&mut lens)?;
    let (active, inactive): (Vec<(&UserId, &f64)>, Vec<_>) = ndcg.iter().partition(|(u, _)| len_of(u) as f64 > med);
    let a = mean(active.iter().map(|(_, v)| *v))?;
    let b = mean(inactive.iter().map(|(_, v)| *v))?;
    Some((a - b).abs())
}

/// `None` when every score is zero.
pub fn jains_index(scores: &PerUser) -> Option<f64> {
    let n = scores.len() as f64;
    let sum: f64 = scores.values().sum();
    let sq: f64 = scores.values().map(|s| s * s).sum();
    (sq > 0.0).then(|| sum * sum / (n * sq))
}
