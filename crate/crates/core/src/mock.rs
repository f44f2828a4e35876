//! Scripted stand-ins for a language model. They read the structured
//! snapshot of each prompt and answer with a numbered title list, so they
//! exercise the same parse and match path as a real endpoint.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::ids::{ItemId, UserId};
use crate::prompting::PromptRecord;
use crate::seed;
use crate::text::tokenize;

/// One model answer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Response {
    pub text: String,
    pub from_cache: bool,
    pub attempt_count: u32,
    pub latency_ms: u64,
}

impl Response {
    pub fn local(text: String) -> Self {
        Self {
            text,
            from_cache: false,
            attempt_count: 1,
            latency_ms: 0,
        }
    }
}

/// Anything that turns prompts into text, in prompt order.
pub trait Responder: Sync {
    fn name(&self) -> String;
    fn respond(&self, prompts: &[PromptRecord]) -> Vec<Result<Response>>;
}

fn numbered(catalog: &BTreeMap<ItemId, String>, items: &[ItemId]) -> Result<String> {
    items
        .iter()
        .enumerate()
        .map(|(n, i)| {
            catalog
                .get(i)
                .map(|t| format!("{}. {t}", n + 1))
                .ok_or_else(|| Error::invalid(format!("item `{i}` has no title")))
        })
        .collect::<Result<Vec<_>>>()
        .map(|lines| lines.join("\n"))
}

/// Shared shape of the ranking mocks: order the pool, print the top K.
fn rank_with<F>(catalog: &BTreeMap<ItemId, String>, prompts: &[PromptRecord], order: F) -> Vec<Result<Response>>
where
    F: Fn(&PromptRecord) -> Vec<ItemId>,
{
    prompts
        .iter()
        .map(|p| {
            let mut items = order(p);
            items.truncate(p.k);
            numbered(catalog, &items).map(Response::local)
        })
        .collect()
}

/// Always answers with the first K candidates as listed.
pub struct FirstK<'a> {
    pub catalog: &'a BTreeMap<ItemId, String>,
}

impl Responder for FirstK<'_> {
    fn name(&self) -> String {
        "mock-first-k".into()
    }

    fn respond(&self, prompts: &[PromptRecord]) -> Vec<Result<Response>> {
        rank_with(self.catalog, prompts, |p| p.pool_snapshot.clone())
    }
}

/// Ranks candidates by item id, ignoring where they are listed.
pub struct ItemIdOrder<'a> {
    pub catalog: &'a BTreeMap<ItemId, String>,
}

impl Responder for ItemIdOrder<'_> {
    fn name(&self) -> String {
        "mock-item-order".into()
    }

    fn respond(&self, prompts: &[PromptRecord]) -> Vec<Result<Response>> {
        rank_with(self.catalog, prompts, |p| {
            let mut items = p.pool_snapshot.clone();
            items.sort();
            items
        })
    }
}

/// Uniform permutation keyed by `(seed, user)`.
pub struct RandomOrder<'a> {
    pub catalog: &'a BTreeMap<ItemId, String>,
    pub seed: u64,
}

impl Responder for RandomOrder<'_> {
    fn name(&self) -> String {
        "mock-random".into()
    }

    fn respond(&self, prompts: &[PromptRecord]) -> Vec<Result<Response>> {
        rank_with(self.catalog, prompts, |p| {
            let mut items = p.pool_snapshot.clone();
            let mut rng = seed::rng_for(seed::derive_seed(self.seed, p.user_id.as_str()), "mock-random");
            items.shuffle(&mut rng);
            items
        })
    }
}

/// Ranks candidates by how many distinct title tokens they share with
/// whatever user context the prompt carries: history titles and profile
/// text alike. Ties go by item id.
pub struct Lexical<'a> {
    pub catalog: &'a BTreeMap<ItemId, String>,
}

impl Lexical<'_> {
    fn context(&self, p: &PromptRecord) -> BTreeSet<String> {
        let mut ctx: BTreeSet<String> = p
            .history_snapshot
            .iter()
            .filter_map(|i| self.catalog.get(i))
            .flat_map(|t| tokenize(t))
            .collect();
        if let Some(profile) = &p.profile_text {
            ctx.extend(tokenize(profile));
        }
        ctx
    }
}

impl Responder for Lexical<'_> {
    fn name(&self) -> String {
        "mock-lexical".into()
    }

    fn respond(&self, prompts: &[PromptRecord]) -> Vec<Result<Response>> {
        rank_with(self.catalog, prompts, |p| {
            let ctx = self.context(p);
            let mut scored: Vec<(usize, &ItemId)> = p
                .pool_snapshot
                .iter()
                .map(|i| {
                    let toks: BTreeSet<String> = self.catalog.get(i).map(|t| tokenize(t)).unwrap_or_default().into_iter().collect();
                    (toks.intersection(&ctx).count(), i)
                })
                .collect();
            scored.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)));
            scored.into_iter().map(|(_, i)| i.clone()).collect()
        })
    }
}

/// Knows the answer and reveals it more often as more history is shown:
/// a user is hit when a fixed per-user uniform draw falls below
/// `min(1, L / saturation)`, so hits never disappear as `L` grows. Misses
/// push the positive to the end of the list.
pub struct Monotone<'a> {
    pub catalog: &'a BTreeMap<ItemId, String>,
    pub truth: &'a BTreeMap<UserId, ItemId>,
    pub saturation: usize,
    pub seed: u64,
}

impl Monotone<'_> {
    pub fn hit_probability(&self, shown: usize) -> f64 {
        if self.saturation == 0 {
            1.0
        } else {
            (shown as f64 / self.saturation as f64).min(1.0)
        }
    }
}

impl Responder for Monotone<'_> {
    fn name(&self) -> String {
        "mock-monotone".into()
    }

    fn respond(&self, prompts: &[PromptRecord]) -> Vec<Result<Response>> {
        rank_with(self.catalog, prompts, |p| {
            let mut items = p.pool_snapshot.clone();
            let Some(pos) = self.truth.get(&p.user_id).and_then(|y| items.iter().position(|i| i == y)) else {
                return items;
            };
            let draw: f64 = seed::rng_for(self.seed, p.user_id.as_str()).random();
            let positive = items.remove(pos);
            if draw < self.hit_probability(p.history_snapshot.len()) {
                items.insert(0, positive);
            } else {
                items.push(positive);
            }
            items
        })
    }
}

/// Profile generator that copies the history titles verbatim.
pub struct EchoProfile<'a> {
    pub catalog: &'a BTreeMap<ItemId, String>,
}

impl Responder for EchoProfile<'_> {
    fn name(&self) -> String {
        "mock-echo-profile".into()
    }

    fn respond(&self, prompts: &[PromptRecord]) -> Vec<Result<Response>> {
        prompts
            .iter()
            .map(|p| {
                let titles: Vec<&str> = p
                    .history_snapshot
                    .iter()
                    .filter_map(|i| self.catalog.get(i).map(String::as_str))
                    .collect();
                Ok(Response::local(titles.join("\n")))
            })
            .collect()
    }
}

/// Profile generator that says nothing.
pub struct EmptyProfile;

impl Responder for EmptyProfile {
    fn name(&self) -> String {
        "mock-empty-profile".into()
    }

    fn respond(&self, prompts: &[PromptRecord]) -> Vec<Result<Response>> {
        prompts.iter().map(|_| Ok(Response::local(String::new()))).collect()
    }
}

/// The gateway as a responder; one request per prompt.
pub struct GatewayResponder<'a> {
    pub gateway: &'a crate::gateway::Gateway,
}

impl Responder for GatewayResponder<'_> {
    fn name(&self) -> String {
        self.gateway.config().model.clone()
    }

    fn respond(&self, prompts: &[PromptRecord]) -> Vec<Result<Response>> {
        let requests: Vec<_> = prompts.iter().map(|p| self.gateway.request(&p.text)).collect();
        self.gateway
            .complete_batch(&requests)
            .into_iter()
            .map(|r| {
                r.map(|c| Response {
                    text: c.text,
                    from_cache: c.from_cache,
                    attempt_count: c.attempt_count,
                    latency_ms: c.latency_ms,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parsing::parse_ranked_list;
    use crate::prompting::Strategy;

    fn catalog() -> BTreeMap<ItemId, String> {
        [("a", "Rose Lip Balm"), ("b", "Mint Shampoo"), ("c", "Rose Hand Cream"), ("d", "Charcoal Soap")]
            .iter()
            .map(|(i, t)| (ItemId::from(*i), t.to_string()))
            .collect()
    }

    fn prompt(pool: &[&str], history: &[&str], k: usize) -> PromptRecord {
        PromptRecord {
            user_id: "u".into(),
            strategy: Strategy::Base,
            text: String::new(),
            pool_snapshot: pool.iter().map(|s| ItemId::from(*s)).collect(),
            history_snapshot: history.iter().map(|s| ItemId::from(*s)).collect(),
            profile_text: None,
            template_version: "t".into(),
            k,
            demonstration_users: vec![],
        }
    }

    fn titles(r: &Result<Response>) -> Vec<String> {
        parse_ranked_list(&r.as_ref().unwrap().text, 10)
    }

    #[test]
    fn ranking_mocks() {
        let cat = catalog();
        let p = [prompt(&["d", "b", "c", "a"], &["a"], 2)];
        assert_eq!(titles(&FirstK { catalog: &cat }.respond(&p)[0]), ["Charcoal Soap", "Mint Shampoo"]);
        assert_eq!(titles(&ItemIdOrder { catalog: &cat }.respond(&p)[0]), ["Rose Lip Balm", "Mint Shampoo"]);
        assert_eq!(titles(&Lexical { catalog: &cat }.respond(&p)[0]), ["Rose Lip Balm", "Rose Hand Cream"]);
        let r1 = RandomOrder { catalog: &cat, seed: 1 }.respond(&p);
        let r2 = RandomOrder { catalog: &cat, seed: 1 }.respond(&p);
        assert_eq!(r1[0].as_ref().unwrap(), r2[0].as_ref().unwrap());
    }

    #[test]
    fn echo_profile_feeds_lexical_like_history() {
        let cat = catalog();
        let with_history = prompt(&["d", "b", "c", "a"], &["a"], 2);
        let echoed = EchoProfile { catalog: &cat }.respond(std::slice::from_ref(&with_history));
        let mut with_profile = prompt(&["d", "b", "c", "a"], &[], 2);
        with_profile.profile_text = Some(echoed[0].as_ref().unwrap().text.clone());
        let lex = Lexical { catalog: &cat };
        assert_eq!(titles(&lex.respond(&[with_history])[0]), titles(&lex.respond(&[with_profile])[0]));
    }

    #[test]
    fn monotone_hits_grow_with_history() {
        let cat = catalog();
        let truth: BTreeMap<UserId, ItemId> = [("u".into(), "c".into())].into_iter().collect();
        let m = Monotone { catalog: &cat, truth: &truth, saturation: 4, seed: 3 };
        let mut hit_before = false;
        for len in 0..6 {
            let history: Vec<&str> = ["a", "b", "d", "a", "b"].iter().take(len).copied().collect();
            let out = titles(&m.respond(&[prompt(&["a", "b", "c", "d"], &history, 1)])[0]);
            let hit = out[0] == "Rose Hand Cream";
            assert!(hit || !hit_before);
            hit_before = hit;
        }
        assert!(hit_before, "saturated history always hits");
    }
}
