//! Prompt rendering.
//!
//! Templates are plain text with the placeholders `{history}`,
//! `{candidates}`, `{K}`, `{profile}` and `{demonstration}`, filled in a
//! single pass so titles containing braces are never re-expanded. Items are
//! referred to by title only.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::candidates::CandidatePool;
use crate::corpus::SplitDataset;
use crate::error::{Error, Result};
use crate::ids::{ItemId, UserId};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Base,
    Recency,
    #[serde(rename = "incontext")]
    InContext,
    ProfileOnly,
    ProfilePlusHistory,
    /// Profile generation rather than recommendation.
    ProfileGeneration,
}

impl Strategy {
    pub const RECOMMEND: [Strategy; 5] = [
        Strategy::Base,
        Strategy::Recency,
        Strategy::InContext,
        Strategy::ProfileOnly,
        Strategy::ProfilePlusHistory,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Base => "base",
            Strategy::Recency => "recency",
            Strategy::InContext => "incontext",
            Strategy::ProfileOnly => "profile_only",
            Strategy::ProfilePlusHistory => "profile_plus_history",
            Strategy::ProfileGeneration => "profile_generation",
        }
    }

    pub fn needs_profile(self) -> bool {
        matches!(self, Strategy::ProfileOnly | Strategy::ProfilePlusHistory)
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::RECOMMEND
            .into_iter()
            .chain([Strategy::ProfileGeneration])
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown strategy `{s}`")))
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

const FILES: [(&str, &str); 7] = [
    ("base", include_str!("../templates/base.txt")),
    ("recency", include_str!("../templates/recency.txt")),
    ("incontext", include_str!("../templates/incontext.txt")),
    ("profile_only", include_str!("../templates/profile_only.txt")),
    ("profile_plus_history", include_str!("../templates/profile_plus_history.txt")),
    ("profile_generation", include_str!("../templates/profile_generation.txt")),
    ("demonstration", include_str!("../templates/demonstration.txt")),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<String, String>,
    /// Digest of every template's name and text.
    pub version: String,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::from_map(FILES.iter().map(|(n, t)| ((*n).to_owned(), (*t).to_owned())).collect())
    }
}

impl TemplateSet {
    fn from_map(templates: BTreeMap<String, String>) -> Self {
        let mut all = String::new();
        for (name, text) in &templates {
            let _ = write!(all, "{name}\0{text}\0");
        }
        let version = format!("tpl-{}", &seed::sha256_hex(all.as_bytes())[..12]);
        Self { templates, version }
    }

    /// Built-in templates overridden by any `<name>.txt` found in `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut map: BTreeMap<String, String> =
            FILES.iter().map(|(n, t)| ((*n).to_owned(), (*t).to_owned())).collect();
        for (name, _) in FILES {
            let p = dir.join(format!("{name}.txt"));
            if p.exists() {
                let text = fs::read_to_string(&p).map_err(|e| Error::io(p.display().to_string(), e))?;
                map.insert(name.to_owned(), text);
            }
        }
        Ok(Self::from_map(map))
    }

    pub fn get(&self, name: &str) -> &str {
        self.templates.get(name).map(String::as_str).unwrap_or("")
    }
}

/// Replace `{name}` placeholders in one left-to-right pass; unknown names
/// are left verbatim.
pub fn fill(template: &str, values: &BTreeMap<&str, String>) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}').map(|close| (&after[..close], close)) {
            Some((name, close)) if values.contains_key(name) => {
                out.push_str(&values[name]);
                rest = &after[close + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileText {
    pub user_id: UserId,
    pub text: String,
    pub source_history_length: usize,
    pub generator_model: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub user_id: UserId,
    pub strategy: Strategy,
    pub text: String,
    pub pool_snapshot: Vec<ItemId>,
    pub history_snapshot: Vec<ItemId>,
    pub profile_text: Option<String>,
    pub template_version: String,
    pub k: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub demonstration_users: Vec<UserId>,
}

/// One example user for the in-context strategy.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub user_id: UserId,
    pub history: Vec<ItemId>,
    pub next: ItemId,
}

pub trait DemonstrationSelector {
    fn select(&self, user: &UserId, history_len: usize, split: &SplitDataset) -> Vec<Demonstration>;
}

/// Picks the `count` other users whose training sequence length is closest
/// to the target's history length. Each demonstration shows a user's
/// training sequence minus its last item, and that item as the answer.
/// Ties are broken by a seeded hash of the user id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryLengthSelector {
    pub count: usize,
    pub seed: u64,
    /// Longest history shown per demonstration.
    pub max_history: usize,
}

impl Default for HistoryLengthSelector {
    fn default() -> Self {
        Self {
            count: 3,
            seed: 0,
            max_history: 10,
        }
    }
}

impl DemonstrationSelector for HistoryLengthSelector {
    fn select(&self, user: &UserId, history_len: usize, split: &SplitDataset) -> Vec<Demonstration> {
        let mut ranked: Vec<(usize, u64, &UserId, &Vec<ItemId>)> = split
            .train
            .iter()
            .filter(|(u, seq)| *u != user && seq.len() >= 2)
            .map(|(u, seq)| {
                let shown = (seq.len() - 1).min(self.max_history);
                (shown.abs_diff(history_len), seed::derive_seed(self.seed, u.as_str()), u, seq)
            })
            .collect();
        ranked.sort();
        ranked
            .into_iter()
            .take(self.count)
            .map(|(_, _, u, seq)| {
                let (next, prefix) = seq.split_last().expect("at least two items");
                let start = prefix.len().saturating_sub(self.max_history);
                Demonstration {
                    user_id: u.clone(),
                    history: prefix[start..].to_vec(),
                    next: next.clone(),
                }
            })
            .collect()
    }
}

/// Everything one recommendation prompt depends on.
#[derive(Clone, Copy, Debug)]
pub struct PromptInput<'a> {
    pub strategy: Strategy,
    pub user: &'a UserId,
    /// Chronological, most recent last.
    pub history: &'a [ItemId],
    pub pool: &'a CandidatePool,
    pub profile: Option<&'a ProfileText>,
    pub k: usize,
    pub demonstrations: &'a [Demonstration],
}

pub struct PromptRenderer<'a> {
    pub templates: &'a TemplateSet,
    pub catalog: &'a BTreeMap<ItemId, String>,
}

impl<'a> PromptRenderer<'a> {
    pub fn new(templates: &'a TemplateSet, catalog: &'a BTreeMap<ItemId, String>) -> Self {
        Self { templates, catalog }
    }

    fn title(&self, item: &ItemId) -> Result<&str> {
        self.catalog
            .get(item)
            .map(String::as_str)
            .ok_or_else(|| Error::invalid(format!("item `{item}` has no title")))
    }

    fn numbered(&self, items: &[ItemId]) -> Result<String> {
        let mut out = String::new();
        for (n, item) in items.iter().enumerate() {
            if n > 0 {
                out.push('\n');
            }
            let _ = write!(out, "{}. {}", n + 1, self.title(item)?);
        }
        Ok(out)
    }

    fn demonstration_block(&self, demos: &[Demonstration]) -> Result<String> {
        let mut out = self.templates.get("demonstration").trim_end().to_owned();
        for (n, d) in demos.iter().enumerate() {
            let _ = write!(
                out,
                "\n\nExample {}\nInteraction history:\n{}\nNext item: {}",
                n + 1,
                self.numbered(&d.history)?,
                self.title(&d.next)?
            );
        }
        Ok(out)
    }

    pub fn render(&self, input: PromptInput<'_>) -> Result<PromptRecord> {
        let st = input.strategy;
        if st == Strategy::ProfileGeneration {
            return Err(Error::StrategyMismatch {
                strategy: st.name(),
                problem: "is rendered by render_profile_prompt",
            });
        }
        if st.needs_profile() != input.profile.is_some() {
            return Err(Error::StrategyMismatch {
                strategy: st.name(),
                problem: if st.needs_profile() {
                    "requires a profile"
                } else {
                    "does not take a profile"
                },
            });
        }
        if st == Strategy::InContext && input.demonstrations.is_empty() {
            return Err(Error::StrategyMismatch {
                strategy: st.name(),
                problem: "needs at least one demonstration",
            });
        }
        let mut values = BTreeMap::new();
        values.insert("candidates", self.numbered(&input.pool.items)?);
        values.insert("K", input.k.to_string());
        let history_shown = st != Strategy::ProfileOnly;
        values.insert(
            "history",
            if history_shown {
                self.numbered(input.history)?
            } else {
                String::new()
            },
        );
        values.insert("profile", input.profile.map(|p| p.text.clone()).unwrap_or_default());
        let demos = if st == Strategy::InContext { input.demonstrations } else { &[] };
        values.insert("demonstration", self.demonstration_block(demos)?);
        Ok(PromptRecord {
            user_id: input.user.clone(),
            strategy: st,
            text: fill(self.templates.get(st.name()), &values),
            pool_snapshot: input.pool.items.clone(),
            history_snapshot: if history_shown { input.history.to_vec() } else { Vec::new() },
            profile_text: input.profile.map(|p| p.text.clone()),
            template_version: self.templates.version.clone(),
            k: input.k,
            demonstration_users: demos.iter().map(|d| d.user_id.clone()).collect(),
        })
    }

    pub fn render_profile_prompt(&self, user: &UserId, history: &[ItemId]) -> Result<PromptRecord> {
        if history.is_empty() {
            return Err(Error::EmptyHistory(user.clone()));
        }
        let values = BTreeMap::from([("history", self.numbered(history)?)]);
        Ok(PromptRecord {
            user_id: user.clone(),
            strategy: Strategy::ProfileGeneration,
            text: fill(self.templates.get(Strategy::ProfileGeneration.name()), &values),
            pool_snapshot: Vec::new(),
            history_snapshot: history.to_vec(),
            profile_text: None,
            template_version: self.templates.version.clone(),
            k: 0,
            demonstration_users: Vec::new(),
        })
    }
}

pub fn save_prompts<'a>(path: &Path, prompts: impl IntoIterator<Item = &'a PromptRecord>) -> Result<()> {
    crate::rundir::write_jsonl(path, prompts)
}

pub fn load_prompts(path: &Path) -> Result<Vec<PromptRecord>> {
    crate::rundir::read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::candidates::Provenance;
    use proptest::prelude::*;
    use super::Strategy;

    fn catalog(n: usize) -> BTreeMap<ItemId, String> {
        (0..n).map(|i| (ItemId::new(format!("i{i:02}")), format!("Product number {i} deluxe"))).collect()
    }

    fn ids(range: std::ops::Range<usize>) -> Vec<ItemId> {
        range.map(|i| ItemId::new(format!("i{i:02}"))).collect()
    }

    fn pool20() -> CandidatePool {
        CandidatePool {
            user_id: "u".into(),
            positive_item: "i39".into(),
            items: ids(20..40),
            positive_index: Some(19),
            provenance: Provenance::Ranking,
            seed: 0,
        }
    }

    fn input<'a>(st: Strategy, user: &'a UserId, h: &'a [ItemId], pool: &'a CandidatePool) -> PromptInput<'a> {
        PromptInput {
            strategy: st,
            user,
            history: h,
            pool,
            profile: None,
            k: 5,
            demonstrations: &[],
        }
    }

    #[test]
    fn base_structure() {
        let cat = catalog(40);
        let t = TemplateSet::default();
        let r = PromptRenderer::new(&t, &cat);
        let (u, h, p) = (UserId::from("u"), ids(0..2), pool20());
        let rec = r.render(input(Strategy::Base, &u, &h, &p)).unwrap();
        let positions: Vec<usize> = h.iter().chain(&p.items).map(|i| rec.text.find(&format!(". {}\n", cat[i])).or_else(|| rec.text.find(&format!(". {}", cat[i]))).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "history then pool, in order");
        for i in h.iter().chain(&p.items) {
            assert_eq!(rec.text.matches(&format!(". {}\n", cat[i])).count(), 1);
        }
        assert!(rec.text.contains("top 5 items"));
        assert_eq!(rec.pool_snapshot, p.items);
        assert_eq!(rec.history_snapshot, h);
        assert_eq!(rec.template_version, t.version);
    }

    #[test]
    fn recency_adds_exactly_one_sentence() {
        let cat = catalog(40);
        let t = TemplateSet::default();
        let r = PromptRenderer::new(&t, &cat);
        let (u, h, p) = (UserId::from("u"), ids(0..3), pool20());
        let base = r.render(input(Strategy::Base, &u, &h, &p)).unwrap().text;
        let rec = r.render(input(Strategy::Recency, &u, &h, &p)).unwrap().text;
        let bl: Vec<&str> = base.lines().collect();
        let rl: Vec<&str> = rec.lines().collect();
        assert_eq!(rl.len(), bl.len() + 1);
        let extra: Vec<&&str> = rl.iter().filter(|l| !bl.contains(l)).collect();
        assert_eq!(extra.len(), 1);
        assert!(extra[0].contains("most recent"));
    }

    #[test]
    fn profile_strategies() {
        let cat = catalog(40);
        let t = TemplateSet::default();
        let r = PromptRenderer::new(&t, &cat);
        let (u, h, p) = (UserId::from("u"), ids(0..4), pool20());
        let profile = ProfileText {
            user_id: u.clone(),
            text: "Prefers fragrance-free skincare.".into(),
            source_history_length: 4,
            generator_model: "m".into(),
        };
        let mut inp = input(Strategy::ProfileOnly, &u, &h, &p);
        assert!(matches!(r.render(inp), Err(Error::StrategyMismatch { .. })));
        inp.profile = Some(&profile);
        let only = r.render(inp).unwrap();
        assert!(only.text.contains(&profile.text));
        assert!(h.iter().all(|i| !only.text.contains(&format!(". {}\n", cat[i]))));
        assert!(only.history_snapshot.is_empty());
        inp.strategy = Strategy::ProfilePlusHistory;
        let both = r.render(inp).unwrap();
        assert!(both.text.contains(&profile.text));
        assert!(h.iter().all(|i| both.text.contains(&cat[i])));
        inp.strategy = Strategy::Base;
        assert!(matches!(r.render(inp), Err(Error::StrategyMismatch { .. })));
    }

    #[test]
    fn profile_prompt_lists_history() {
        let cat = catalog(10);
        let t = TemplateSet::default();
        let r = PromptRenderer::new(&t, &cat);
        let u = UserId::from("u");
        let one = r.render_profile_prompt(&u, &ids(3..4)).unwrap();
        assert_eq!(cat.values().filter(|title| one.text.contains(title.as_str())).count(), 1);
        let all = r.render_profile_prompt(&u, &ids(0..10)).unwrap();
        let pos: Vec<usize> = (0..10).map(|i| all.text.find(&format!("{}. ", i + 1)).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert!(matches!(r.render_profile_prompt(&u, &[]), Err(Error::EmptyHistory(_))));
    }

    #[test]
    fn incontext_has_demonstrations() {
        let cat = catalog(40);
        let split = SplitDataset {
            train: [("a", 0..4), ("b", 4..6), ("c", 6..16), ("u", 16..19)]
                .into_iter()
                .map(|(u, r)| (UserId::from(u), ids(r)))
                .collect(),
            valid: BTreeMap::new(),
            test: BTreeMap::new(),
            histories: BTreeMap::new(),
        };
        let sel = HistoryLengthSelector { count: 2, ..Default::default() };
        let u = UserId::from("u");
        let demos = sel.select(&u, 3, &split);
        let users: Vec<&str> = demos.iter().map(|d| d.user_id.as_str()).collect();
        assert_eq!(users, ["a", "b"]);
        assert_eq!(demos[0].next, ItemId::from("i03"));
        let t = TemplateSet::default();
        let r = PromptRenderer::new(&t, &cat);
        let (h, p) = (ids(16..19), pool20());
        let mut inp = input(Strategy::InContext, &u, &h, &p);
        assert!(r.render(inp).is_err());
        inp.demonstrations = &demos;
        let rec = r.render(inp).unwrap();
        assert!(rec.text.starts_with(t.get("demonstration").trim_end()));
        assert!(rec.text.contains("Next item: Product number 3 deluxe"));
        assert_eq!(rec.demonstration_users, vec![UserId::from("a"), UserId::from("b")]);
    }

    #[test]
    fn fill_is_single_pass() {
        let values = BTreeMap::from([("history", "{K}".to_string()), ("K", "5".to_string())]);
        assert_eq!(fill("{history} / {K} / {other} / {", &values), "{K} / 5 / {other} / {");
    }

    proptest! {
        #[test]
        fn rendering_is_deterministic_and_round_trips(len in 0usize..15, st in 0usize..3) {
            let cat = catalog(40);
            let t = TemplateSet::default();
            let r = PromptRenderer::new(&t, &cat);
            let (u, h, p) = (UserId::from("u"), ids(0..len), pool20());
            let demos = [Demonstration { user_id: "d".into(), history: ids(0..2), next: "i02".into() }];
            let mut inp = input(Strategy::RECOMMEND[st], &u, &h, &p);
            inp.demonstrations = &demos;
            let a = r.render(inp).unwrap();
            let b = r.render(inp).unwrap();
            prop_assert_eq!(&a, &b);
            let json = serde_json::to_string(&a).unwrap();
            let back: PromptRecord = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(&back.pool_snapshot, &p.items);
            prop_assert_eq!(&back.history_snapshot, &h);
        }
    }
}
