//! Turn free-text model responses into item ids.
//!
//! Titles are extracted from list-shaped lines, normalized with
//! [`normalize_title`] and matched by exact canonical equality, first
//! against the user's pool and then against the whole catalog. Anything
//! left over is an imaginary item.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::candidates::CandidatePool;
use crate::ids::{ItemId, UserId};
pub use crate::text::normalize_title;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchScope {
    InPool,
    /// A real item the model was not offered.
    InCatalogOnly,
    Unmatched,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchedEntry {
    pub raw_title: String,
    #[serde(rename = "item_id")]
    pub item: Option<ItemId>,
    #[serde(rename = "match_scope")]
    pub scope: MatchScope,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchedRecommendation {
    pub user_id: UserId,
    /// At most `k` entries; matched item ids are unique.
    pub entries: Vec<MatchedEntry>,
    pub k: usize,
    #[serde(default)]
    pub parse_failed: bool,
}

impl MatchedRecommendation {
    pub fn empty(user: UserId, k: usize, parse_failed: bool) -> Self {
        Self {
            user_id: user,
            entries: Vec::new(),
            k,
            parse_failed,
        }
    }

    /// In-pool items with their 1-based rank. Ranks count every entry, so an
    /// unmatched title still occupies its slot.
    pub fn scored(&self) -> impl Iterator<Item = (usize, &ItemId)> {
        self.entries.iter().enumerate().filter_map(|(i, e)| match (&e.item, e.scope) {
            (Some(item), MatchScope::InPool) => Some((i + 1, item)),
            _ => None,
        })
    }

    pub fn count(&self, scope: MatchScope) -> usize {
        self.entries.iter().filter(|e| e.scope == scope).count()
    }
}

static NUMBERED: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^(?:\*\*|__)?(?:(?i:rank)\s*)?(?:#?\d{1,3}\s*[.):\]]|\(\d{1,3}\)|\[\d{1,3}\])(?:\*\*|__)?\s+(.+)$")
        .expect("static regex")
});
static BULLETED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^[-*•+]\s+(.+)$").expect("static regex"));
static QUOTED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r#""([^"]+)"|“([^”]+)”"#).expect("static regex"));

const COMMENTARY: [&str; 5] = [" — ", " – ", " -- ", " | ", "\t"];

/// Strip markup, quoting and trailing commentary from one list entry.
fn clean_entry(raw: &str) -> String {
    let mut s = raw.trim();
    for (open, close) in [("**", "**"), ("__", "__"), ("`", "`"), ("\"", "\""), ("“", "”"), ("'", "'")] {
        if let Some(rest) = s.strip_prefix(open) {
            // A closing mark inside a word is an apostrophe, not the end.
            let end = rest.match_indices(close).map(|(i, _)| i).find(|&i| {
                i > 0 && !rest[i + close.len()..].starts_with(|c: char| c.is_alphanumeric())
            });
            if let Some(end) = end {
                s = &rest[..end];
                break;
            }
        }
    }
    for sep in COMMENTARY {
        if let Some(pos) = s.find(sep) {
            s = &s[..pos];
        }
    }
    s.trim()
        .trim_end_matches([',', ';'])
        .trim_matches(|c: char| c == '*' || c == '_' || c == '`')
        .trim()
        .to_owned()
}

/// Entries of an inline list such as `Top 5: "A", "B", "C"` or `A; B; C`.
fn inline_entries(text: &str) -> Vec<String> {
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let body = match line.split_once(':') {
            Some((label, rest)) if !rest.trim().is_empty() && label.split_whitespace().count() <= 4 => rest.trim(),
            _ => line,
        };
        let quoted: Vec<String> = QUOTED
            .captures_iter(body)
            .filter_map(|c| c.get(1).or_else(|| c.get(2)))
            .map(|m| m.as_str().trim().to_owned())
            .collect();
        if quoted.len() >= 2 {
            return quoted;
        }
        let sep = if body.contains(';') {
            ';'
        } else if body.contains(',') {
            ','
        } else {
            continue;
        };
        let parts: Vec<String> = body.split(sep).map(clean_entry).filter(|p| !p.is_empty()).collect();
        if parts.len() >= 2 {
            return parts;
        }
    }
    Vec::new()
}

/// Up to `k` titles in response order. Numbered lines win over bullets
/// (bullets under numbered items are usually commentary); inline lists are
/// a fallback. An empty result is a parse failure.
pub fn parse_ranked_list(response: &str, k: usize) -> Vec<String> {
    let lines: Vec<&str> = response.lines().map(str::trim).collect();
    let grab = |re: &Regex| -> Vec<String> {
        lines
            .iter()
            .filter_map(|l| re.captures(l))
            .map(|c| clean_entry(&c[1]))
            .filter(|t| !t.is_empty())
            .collect()
    };
    let mut titles = grab(&NUMBERED);
    if titles.is_empty() {
        titles = grab(&BULLETED);
    }
    if titles.is_empty() {
        titles = inline_entries(response);
    }
    titles.truncate(k);
    titles
}

/// Canonical title → item ids sharing it, ascending.
#[derive(Clone, Debug, Default)]
pub struct TitleIndex {
    by_title: HashMap<String, Vec<ItemId>>,
    titles: BTreeMap<ItemId, String>,
}

impl TitleIndex {
    pub fn new(catalog: &BTreeMap<ItemId, String>) -> Self {
        let mut by_title: HashMap<String, Vec<ItemId>> = HashMap::new();
        let mut titles = BTreeMap::new();
        for (item, title) in catalog {
            let canon = normalize_title(title);
            by_title.entry(canon.clone()).or_default().push(item.clone());
            titles.insert(item.clone(), canon);
        }
        Self { by_title, titles }
    }

    pub fn canonical(&self, item: &ItemId) -> Option<&str> {
        self.titles.get(item).map(String::as_str)
    }

    pub fn lookup(&self, canonical: &str) -> &[ItemId] {
        self.by_title.get(canonical).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchOptions {
    /// Minimum normalized Levenshtein similarity for a second, fuzzy pass
    /// over titles left unmatched. `None` keeps exact matching only.
    pub fuzzy_threshold: Option<f64>,
}

fn fuzzy_best<'a>(
    canon: &str,
    candidates: impl Iterator<Item = (&'a ItemId, &'a str)>,
    used: &HashSet<ItemId>,
    threshold: f64,
) -> Option<ItemId> {
    let mut best: Option<(f64, &ItemId)> = None;
    for (item, title) in candidates {
        if used.contains(item) {
            continue;
        }
        let sim = strsim::normalized_levenshtein(canon, title);
        if sim >= threshold && best.is_none_or(|(b, bi)| sim > b || (sim == b && item < bi)) {
            best = Some((sim, item));
        }
    }
    best.map(|(_, i)| i.clone())
}

/// Match raw titles to pool items first, then catalog items. A title whose
/// item was already matched is dropped.
pub fn match_titles(
    user: &UserId,
    raw_titles: &[String],
    pool: &CandidatePool,
    index: &TitleIndex,
    k: usize,
    opts: MatchOptions,
) -> MatchedRecommendation {
    let pool_set: HashSet<&ItemId> = pool.items.iter().collect();
    let mut used: HashSet<ItemId> = HashSet::new();
    let mut entries = Vec::new();
    for raw in raw_titles.iter().take(k) {
        let canon = normalize_title(raw);
        let same = index.lookup(&canon);
        let in_pool = pool
            .items
            .iter()
            .find(|i| !used.contains(*i) && index.canonical(i) == Some(canon.as_str()))
            .cloned();
        let (item, scope) = if canon.is_empty() {
            (None, MatchScope::Unmatched)
        } else if let Some(i) = in_pool {
            (Some(i), MatchScope::InPool)
        } else if let Some(i) = same.iter().find(|i| !used.contains(*i) && !pool_set.contains(i)) {
            (Some(i.clone()), MatchScope::InCatalogOnly)
        } else if !same.is_empty() {
            // Every item with this title is already taken.
            continue;
        } else {
            (None, MatchScope::Unmatched)
        };
        let (item, scope) = match (&item, opts.fuzzy_threshold) {
            (None, Some(t)) if !canon.is_empty() => {
                let pool_titles = pool.items.iter().filter_map(|i| index.canonical(i).map(|c| (i, c)));
                if let Some(i) = fuzzy_best(&canon, pool_titles, &used, t) {
                    (Some(i), MatchScope::InPool)
                } else {
                    let all = index.titles.iter().map(|(i, c)| (i, c.as_str()));
                    match fuzzy_best(&canon, all, &used, t) {
                        Some(i) if pool_set.contains(&i) => (Some(i), MatchScope::InPool),
                        Some(i) => (Some(i), MatchScope::InCatalogOnly),
                        None => (None, MatchScope::Unmatched),
                    }
                }
            }
            _ => (item, scope),
        };
        if let Some(i) = &item {
            used.insert(i.clone());
        }
        entries.push(MatchedEntry {
            raw_title: raw.clone(),
            item,
            scope,
        });
    }
    MatchedRecommendation {
        user_id: user.clone(),
        entries,
        k,
        parse_failed: raw_titles.is_empty(),
    }
}

/// Parse and match one response.
pub fn parse_and_match(
    user: &UserId,
    response: &str,
    pool: &CandidatePool,
    index: &TitleIndex,
    k: usize,
    opts: MatchOptions,
) -> MatchedRecommendation {
    let titles = parse_ranked_list(response, k);
    match_titles(user, &titles, pool, index, k, opts)
}
