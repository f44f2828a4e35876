//! Interaction logs, k-core filtering, leave-one-out splitting, history
//! truncation and popularity statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{ItemId, UserId};

/// Fraction of the catalog, by ascending popularity, treated as long tail.
pub const LONG_TAIL_FRACTION: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: UserId,
    pub item: ItemId,
    pub ts: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogFormat {
    Jsonl,
    Tsv,
}

impl FromStr for LogFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(LogFormat::Jsonl),
            "tsv" => Ok(LogFormat::Tsv),
            other => Err(Error::invalid(format!("unknown log format `{other}`"))),
        }
    }
}

#[derive(Deserialize)]
struct CatalogRecord {
    item: ItemId,
    title: String,
}

#[derive(Serialize)]
struct CatalogRecordRef<'a> {
    item: &'a ItemId,
    title: &'a str,
}

/// Timestamped user–item events plus the item catalog.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionLog {
    interactions: Vec<Interaction>,
    catalog: BTreeMap<ItemId, String>,
}

impl InteractionLog {
    /// Build a log, checking that every interaction refers to a catalog item
    /// and every title is non-empty.
    pub fn new(interactions: Vec<Interaction>, catalog: BTreeMap<ItemId, String>) -> Result<Self> {
        if let Some((item, _)) = catalog.iter().find(|(_, t)| t.trim().is_empty()) {
            return Err(Error::invalid(format!("item `{item}` has an empty title")));
        }
        for (idx, ev) in interactions.iter().enumerate() {
            if !catalog.contains_key(&ev.item) {
                return Err(Error::UnknownItem {
                    path: "<memory>".into(),
                    line: idx + 1,
                    item: ev.item.clone(),
                });
            }
        }
        Ok(Self {
            interactions,
            catalog,
        })
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn catalog(&self) -> &BTreeMap<ItemId, String> {
        &self.catalog
    }

    pub fn title(&self, item: &ItemId) -> Option<&str> {
        self.catalog.get(item).map(String::as_str)
    }

    pub fn num_users(&self) -> usize {
        self.interactions
            .iter()
            .map(|e| &e.user)
            .collect::<BTreeSet<_>>()
            .len()
    }

    /// Interaction density in percent, as `|D| / (|U| · |I|) · 100`.
    pub fn density_percent(&self) -> f64 {
        let denom = self.num_users() as f64 * self.catalog.len() as f64;
        if denom == 0.0 {
            return 0.0;
        }
        self.interactions.len() as f64 / denom * 100.0
    }

    /// Per-user item sequences in chronological order. Ties on the timestamp
    /// are broken by item id.
    pub fn user_sequences(&self) -> BTreeMap<UserId, Vec<ItemId>> {
        let mut events: BTreeMap<&UserId, Vec<(i64, &ItemId)>> = BTreeMap::new();
        for ev in &self.interactions {
            events.entry(&ev.user).or_default().push((ev.ts, &ev.item));
        }
        events
            .into_iter()
            .map(|(user, mut evs)| {
                evs.sort();
                (user.clone(), evs.into_iter().map(|(_, i)| i.clone()).collect())
            })
            .collect()
    }

    pub fn write_interactions(&self, path: &Path, format: LogFormat) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut out = BufWriter::new(file);
        let ctx = || path.display().to_string();
        for ev in &self.interactions {
            match format {
                LogFormat::Jsonl => {
                    serde_json::to_writer(&mut out, ev)?;
                    writeln!(out).map_err(|e| Error::io(ctx(), e))?;
                }
                LogFormat::Tsv => {
                    writeln!(out, "{}\t{}\t{}", ev.user, ev.item, ev.ts).map_err(|e| Error::io(ctx(), e))?;
                }
            }
        }
        out.flush().map_err(|e| Error::io(ctx(), e))
    }

    pub fn write_catalog(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut out = BufWriter::new(file);
        for (item, title) in &self.catalog {
            serde_json::to_writer(&mut out, &CatalogRecordRef { item, title })?;
            writeln!(out).map_err(|e| Error::io(path.display().to_string(), e))?;
        }
        out.flush().map_err(|e| Error::io(path.display().to_string(), e))
    }
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(BufReader::new(file).lines().enumerate().map(|(i, l)| (i + 1, l)))
}

/// Read a catalog file of `{"item": ..., "title": ...}` records.
pub fn read_catalog(path: &Path) -> Result<BTreeMap<ItemId, String>> {
    let shown = path.display().to_string();
    let mut catalog = BTreeMap::new();
    for (line_no, line) in open_lines(path)? {
        let line = line.map_err(|e| Error::io(shown.clone(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CatalogRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: shown.clone(),
            line: line_no,
            message: e.to_string(),
        })?;
        if rec.title.trim().is_empty() {
            return Err(Error::Parse {
                path: shown,
                line: line_no,
                message: format!("empty title for item `{}`", rec.item),
            });
        }
        catalog.insert(rec.item, rec.title);
    }
    Ok(catalog)
}

fn parse_interaction(line: &str, format: LogFormat) -> std::result::Result<Interaction, String> {
    match format {
        LogFormat::Jsonl => serde_json::from_str(line).map_err(|e| e.to_string()),
        LogFormat::Tsv => {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(format!("expected 3 tab-separated columns, found {}", cols.len()));
            }
            let ts = cols[2]
                .trim()
                .parse::<i64>()
                .map_err(|e| format!("bad timestamp `{}`: {e}", cols[2]))?;
            if cols[0].is_empty() || cols[1].is_empty() {
                return Err("empty user or item id".into());
            }
            Ok(Interaction {
                user: UserId::new(cols[0]),
                item: ItemId::new(cols[1]),
                ts,
            })
        }
    }
}

/// Load an interaction file together with its companion catalog.
///
/// Interaction records referencing items missing from the catalog are
/// rejected with the offending line number. Repeated `(user, item, ts)`
/// triples are kept.
pub fn load_interactions(path: &Path, format: LogFormat, catalog_path: &Path) -> Result<InteractionLog> {
    let catalog = read_catalog(catalog_path)?;
    let shown = path.display().to_string();
    let mut interactions = Vec::new();
    for (line_no, line) in open_lines(path)? {
        let line = line.map_err(|e| Error::io(shown.clone(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ev = parse_interaction(&line, format).map_err(|message| Error::Parse {
            path: shown.clone(),
            line: line_no,
            message,
        })?;
        if !catalog.contains_key(&ev.item) {
            return Err(Error::UnknownItem {
                path: shown,
                line: line_no,
                item: ev.item,
            });
        }
        interactions.push(ev);
    }
    Ok(InteractionLog {
        interactions,
        catalog,
    })
}

/// Iteratively drop users and items with fewer than `k` interactions until
/// nothing changes. The catalog shrinks to the surviving items.
pub fn k_core_filter(log: &InteractionLog, k: usize) -> Result<InteractionLog> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mut alive: Vec<bool> = vec![true; log.interactions.len()];
    loop {
        let mut user_counts: HashMap<&UserId, usize> = HashMap::new();
        let mut item_counts: HashMap<&ItemId, usize> = HashMap::new();
        for (ev, _) in log.interactions.iter().zip(&alive).filter(|(_, a)| **a) {
            *user_counts.entry(&ev.user).or_default() += 1;
            *item_counts.entry(&ev.item).or_default() += 1;
        }
        let mut changed = false;
        for (ev, a) in log.interactions.iter().zip(alive.iter_mut()) {
            if *a && (user_counts[&ev.user] < k || item_counts[&ev.item] < k) {
                *a = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let interactions: Vec<Interaction> = log
        .interactions
        .iter()
        .zip(&alive)
        .filter(|(_, a)| **a)
        .map(|(ev, _)| ev.clone())
        .collect();
    if interactions.is_empty() {
        return Err(Error::EmptyAfterFiltering { k });
    }
    let surviving: BTreeSet<&ItemId> = interactions.iter().map(|e| &e.item).collect();
    let catalog = log
        .catalog
        .iter()
        .filter(|(item, _)| surviving.contains(item))
        .map(|(i, t)| (i.clone(), t.clone()))
        .collect();
    Ok(InteractionLog {
        interactions,
        catalog,
    })
}

/// Leave-one-out partition of every user's chronological sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub train: BTreeMap<UserId, Vec<ItemId>>,
    pub valid: BTreeMap<UserId, ItemId>,
    pub test: BTreeMap<UserId, ItemId>,
    /// Full chronological sequence, test item included.
    pub histories: BTreeMap<UserId, Vec<ItemId>>,
}

impl SplitDataset {
    /// Everything the user did strictly before the test interaction.
    pub fn history_before_test(&self, user: &UserId) -> &[ItemId] {
        self.histories
            .get(user)
            .map(|h| &h[..h.len() - 1])
            .unwrap_or(&[])
    }

    pub fn test_users(&self) -> impl Iterator<Item = &UserId> {
        self.test.keys()
    }

    pub fn num_users(&self) -> usize {
        self.histories.len()
    }
}

/// Last event → test, second-to-last → valid, the rest → train.
pub fn leave_one_out_split(log: &InteractionLog) -> Result<SplitDataset> {
    let mut split = SplitDataset {
        train: BTreeMap::new(),
        valid: BTreeMap::new(),
        test: BTreeMap::new(),
        histories: BTreeMap::new(),
    };
    for (user, seq) in log.user_sequences() {
        let n = seq.len();
        if n < 3 {
            return Err(Error::TooFewInteractions { user, count: n });
        }
        split.train.insert(user.clone(), seq[..n - 2].to_vec());
        split.valid.insert(user.clone(), seq[n - 2].clone());
        split.test.insert(user.clone(), seq[n - 1].clone());
        split.histories.insert(user, seq);
    }
    Ok(split)
}

/// A sequential training example: the items seen before `target`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TrainingSample {
    pub user: UserId,
    pub history: Vec<ItemId>,
    pub target: ItemId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Truncation {
    pub length: usize,
    /// Most recent `length` items before each user's test interaction.
    pub eval_histories: BTreeMap<UserId, Vec<ItemId>>,
    /// Training samples restricted to the same window.
    pub reduced_train: Vec<TrainingSample>,
}

/// Every non-test sequential sample `(u, prefix, next)`, first event included.
pub fn training_samples(split: &SplitDataset) -> Vec<TrainingSample> {
    let mut out = Vec::new();
    for (user, seq) in &split.histories {
        let before = &seq[..seq.len() - 1];
        for (pos, target) in before.iter().enumerate() {
            out.push(TrainingSample {
                user: user.clone(),
                history: before[..pos].to_vec(),
                target: target.clone(),
            });
        }
    }
    out
}

/// Restrict evaluation histories and training samples to the last `length`
/// events before each user's final interaction.
///
/// The window covers everything strictly before the test event, so the
/// validation item is inside it. Window membership is positional: a repeated
/// item id outside the window does not count as inside it.
pub fn truncate_for_length(split: &SplitDataset, length: usize) -> Truncation {
    let mut eval_histories = BTreeMap::new();
    let mut reduced_train = Vec::new();
    for (user, seq) in &split.histories {
        let before = &seq[..seq.len() - 1];
        let start = before.len().saturating_sub(length);
        eval_histories.insert(user.clone(), before[start..].to_vec());
        for pos in start..before.len() {
            reduced_train.push(TrainingSample {
                user: user.clone(),
                history: before[start..pos].to_vec(),
                target: before[pos].clone(),
            });
        }
    }
    Truncation {
        length,
        eval_histories,
        reduced_train,
    }
}

/// Item popularity statistics and the long-tail set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopularityTable {
    /// Interaction count in the train split; every catalog item is present.
    pub pop: BTreeMap<ItemId, u64>,
    /// Distinct users per item over the full log.
    pub user_counts: BTreeMap<ItemId, u64>,
    pub long_tail: BTreeSet<ItemId>,
    pub num_users: usize,
}

impl PopularityTable {
    pub fn pop_of(&self, item: &ItemId) -> u64 {
        self.pop.get(item).copied().unwrap_or(0)
    }

    /// Catalog items in ascending popularity, ties by item id.
    pub fn ascending(&self) -> Vec<&ItemId> {
        let mut items: Vec<(&ItemId, u64)> = self.pop.iter().map(|(i, p)| (i, *p)).collect();
        items.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(b.0)));
        items.into_iter().map(|(i, _)| i).collect()
    }
}

pub fn popularity_table(split: &SplitDataset, catalog: &BTreeMap<ItemId, String>) -> PopularityTable {
    let mut pop: BTreeMap<ItemId, u64> = catalog.keys().map(|i| (i.clone(), 0)).collect();
    for seq in split.train.values() {
        for item in seq {
            *pop.entry(item.clone()).or_default() += 1;
        }
    }
    let mut user_counts: BTreeMap<ItemId, u64> = catalog.keys().map(|i| (i.clone(), 0)).collect();
    for seq in split.histories.values() {
        for item in seq.iter().collect::<BTreeSet<_>>() {
            *user_counts.entry(item.clone()).or_default() += 1;
        }
    }
    let mut table = PopularityTable {
        pop,
        user_counts,
        long_tail: BTreeSet::new(),
        num_users: split.num_users(),
    };
    let tail_len = (LONG_TAIL_FRACTION * table.pop.len() as f64).floor() as usize;
    table.long_tail = table.ascending().into_iter().take(tail_len).cloned().collect();
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(u: &str, i: &str, ts: i64) -> Interaction {
        Interaction {
            user: u.into(),
            item: i.into(),
            ts,
        }
    }

    fn catalog_of(items: &[&str]) -> BTreeMap<ItemId, String> {
        items.iter().map(|i| (ItemId::from(*i), format!("Title {i}"))).collect()
    }

    fn log_of(events: Vec<Interaction>) -> InteractionLog {
        let items: BTreeSet<String> = events.iter().map(|e| e.item.0.clone()).collect();
        let names: Vec<&str> = items.iter().map(String::as_str).collect();
        InteractionLog::new(events, catalog_of(&names)).unwrap()
    }

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loads_small_tsv() {
        let dir = tempfile::tempdir().unwrap();
        let cat = write(
            dir.path(),
            "cat.jsonl",
            "{\"item\":\"a\",\"title\":\"Alpha\"}\n{\"item\":\"b\",\"title\":\"Beta\"}\n",
        );
        let tsv = write(dir.path(), "log.tsv", "u1\ta\t1\nu1\tb\t2\nu2\ta\t3\n");
        let log = load_interactions(&tsv, LogFormat::Tsv, &cat).unwrap();
        assert_eq!(log.interactions().len(), 3);
        assert_eq!(log.catalog().len(), 2);
        assert_eq!(log.num_users(), 2);
    }

    #[test]
    fn unknown_item_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let cat = write(dir.path(), "cat.jsonl", "{\"item\":\"a\",\"title\":\"Alpha\"}\n");
        let log = write(
            dir.path(),
            "log.jsonl",
            "{\"user\":\"u\",\"item\":\"a\",\"ts\":1}\n{\"user\":\"u\",\"item\":\"zzz\",\"ts\":2}\n",
        );
        let err = load_interactions(&log, LogFormat::Jsonl, &cat).unwrap_err();
        match err {
            Error::UnknownItem { line, item, .. } => {
                assert_eq!(line, 2);
                assert_eq!(item.as_str(), "zzz");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_record_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let cat = write(dir.path(), "cat.jsonl", "{\"item\":\"a\",\"title\":\"Alpha\"}\n");
        let tsv = write(dir.path(), "log.tsv", "u1\ta\t1\nu1\ta\tnot-a-time\n");
        let err = load_interactions(&tsv, LogFormat::Tsv, &cat).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn duplicate_triples_are_kept() {
        let log = log_of(vec![ev("u", "a", 1), ev("u", "a", 1)]);
        assert_eq!(log.interactions().len(), 2);
    }

    #[test]
    fn k_core_toy_graph() {
        let log = log_of(vec![
            ev("u1", "a", 1),
            ev("u1", "b", 2),
            ev("u1", "c", 3),
            ev("u2", "a", 1),
            ev("u2", "b", 2),
            ev("u3", "a", 1),
        ]);
        let filtered = k_core_filter(&log, 2).unwrap();
        let seqs = filtered.user_sequences();
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[&UserId::from("u1")], vec![ItemId::from("a"), ItemId::from("b")]);
        assert_eq!(seqs[&UserId::from("u2")], vec![ItemId::from("a"), ItemId::from("b")]);
        assert_eq!(filtered.catalog().len(), 2);
    }

    #[test]
    fn k_core_fixpoint_is_unchanged() {
        let log = log_of(vec![ev("u1", "a", 1), ev("u1", "b", 2), ev("u2", "a", 1), ev("u2", "b", 2)]);
        assert_eq!(k_core_filter(&log, 2).unwrap(), log);
    }

    #[test]
    fn k_core_empty_result_is_an_error() {
        let log = log_of(vec![ev("u1", "a", 1)]);
        assert!(matches!(k_core_filter(&log, 2), Err(Error::EmptyAfterFiltering { k: 2 })));
    }

    #[test]
    fn loo_split_basic_and_boundary() {
        let log = log_of(vec![
            ev("u", "a", 1),
            ev("u", "b", 2),
            ev("u", "c", 3),
            ev("u", "d", 4),
            ev("v", "x", 5),
            ev("v", "y", 6),
            ev("v", "z", 7),
        ]);
        let split = leave_one_out_split(&log).unwrap();
        let u = UserId::from("u");
        assert_eq!(split.train[&u], vec![ItemId::from("a"), ItemId::from("b")]);
        assert_eq!(split.valid[&u], ItemId::from("c"));
        assert_eq!(split.test[&u], ItemId::from("d"));
        assert_eq!(split.train[&UserId::from("v")].len(), 1);
    }

    #[test]
    fn loo_split_rejects_short_users() {
        let log = log_of(vec![ev("u", "a", 1), ev("u", "b", 2)]);
        match leave_one_out_split(&log) {
            Err(Error::TooFewInteractions { user, count }) => {
                assert_eq!(user.as_str(), "u");
                assert_eq!(count, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn timestamp_ties_break_by_item_id() {
        let log = log_of(vec![ev("u", "c", 5), ev("u", "a", 5), ev("u", "b", 1)]);
        let seq = &log.user_sequences()[&UserId::from("u")];
        assert_eq!(seq, &vec![ItemId::from("b"), ItemId::from("a"), ItemId::from("c")]);
    }

    #[test]
    fn truncation_example() {
        let log = log_of(
            ["a", "b", "c", "d", "e"]
                .iter()
                .enumerate()
                .map(|(t, i)| ev("u", i, t as i64))
                .collect(),
        );
        let split = leave_one_out_split(&log).unwrap();
        let t = truncate_for_length(&split, 2);
        let u = UserId::from("u");
        assert_eq!(t.eval_histories[&u], vec![ItemId::from("c"), ItemId::from("d")]);
        let mut got = t.reduced_train.clone();
        got.sort();
        assert_eq!(
            got,
            vec![
                TrainingSample {
                    user: u.clone(),
                    history: vec![],
                    target: "c".into()
                },
                TrainingSample {
                    user: u.clone(),
                    history: vec!["c".into()],
                    target: "d".into()
                },
            ]
        );
        let zero = truncate_for_length(&split, 0);
        assert!(zero.eval_histories[&u].is_empty());
        assert!(zero.reduced_train.is_empty());
    }

    #[test]
    fn long_tail_ties_break_lexicographically() {
        let items: Vec<String> = (0..10).map(|i| format!("i{i}")).collect();
        let names: Vec<&str> = items.iter().map(String::as_str).collect();
        let mut events = Vec::new();
        for (n, item) in names.iter().enumerate() {
            for u in 0..3 {
                events.push(ev(&format!("u{u}"), item, n as i64));
            }
        }
        let log = InteractionLog::new(events, catalog_of(&names)).unwrap();
        let split = leave_one_out_split(&log).unwrap();
        let mut pop = popularity_table(&split, log.catalog());
        // flatten counts so the tiebreak alone decides membership
        for v in pop.pop.values_mut() {
            *v = 1;
        }
        let tail: BTreeSet<ItemId> = pop.ascending().into_iter().take(8).cloned().collect();
        let expected: BTreeSet<ItemId> = names[..8].iter().map(|s| ItemId::from(*s)).collect();
        assert_eq!(tail, expected);
        assert_eq!(popularity_table(&split, log.catalog()).long_tail.len(), 8);
    }

    #[test]
    fn popularity_counts_train_only_and_distinct_users() {
        let log = log_of(vec![
            ev("u1", "a", 1),
            ev("u1", "a", 2),
            ev("u1", "b", 3),
            ev("u1", "c", 4),
            ev("u2", "b", 1),
            ev("u2", "c", 2),
            ev("u2", "a", 3),
        ]);
        let split = leave_one_out_split(&log).unwrap();
        let pop = popularity_table(&split, log.catalog());
        // train: u1 -> [a, a], u2 -> [b]
        assert_eq!(pop.pop_of(&"a".into()), 2);
        assert_eq!(pop.pop_of(&"b".into()), 1);
        assert_eq!(pop.pop_of(&"c".into()), 0);
        assert_eq!(pop.user_counts[&ItemId::from("a")], 2);
        assert_eq!(pop.num_users, 2);
    }

    fn arb_log() -> impl Strategy<Value = InteractionLog> {
        proptest::collection::vec((0u8..6, 0u8..8, 0i64..20), 1..60).prop_map(|raw| {
            let events: Vec<Interaction> = raw
                .into_iter()
                .map(|(u, i, t)| ev(&format!("u{u}"), &format!("i{i}"), t))
                .collect();
            let names: Vec<String> = (0..8).map(|i| format!("i{i}")).collect();
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            InteractionLog::new(events, catalog_of(&refs)).unwrap()
        })
    }

    proptest! {
        #[test]
        fn k_core_is_idempotent(log in arb_log(), k in 1usize..4) {
            if let Ok(once) = k_core_filter(&log, k) {
                prop_assert_eq!(k_core_filter(&once, k).unwrap(), once);
            }
        }

        #[test]
        fn loo_partitions_each_history(log in arb_log()) {
            if let Ok(core) = k_core_filter(&log, 3) {
                let split = leave_one_out_split(&core).unwrap();
                for (u, h) in &split.histories {
                    prop_assert_eq!(split.train[u].len() + 2, h.len());
                    prop_assert_eq!(&split.test[u], h.last().unwrap());
                }
            }
        }

        #[test]
        fn long_tail_cardinality(log in arb_log()) {
            if let Ok(core) = k_core_filter(&log, 3) {
                let split = leave_one_out_split(&core).unwrap();
                let pop = popularity_table(&split, core.catalog());
                prop_assert_eq!(pop.long_tail.len(), (0.8 * core.catalog().len() as f64).floor() as usize);
            }
        }

        #[test]
        fn jsonl_and_tsv_round_trip(log in arb_log()) {
            let dir = tempfile::tempdir().unwrap();
            let cat = dir.path().join("cat.jsonl");
            log.write_catalog(&cat).unwrap();
            for format in [LogFormat::Jsonl, LogFormat::Tsv] {
                let p = dir.path().join("log");
                log.write_interactions(&p, format).unwrap();
                prop_assert_eq!(&load_interactions(&p, format, &cat).unwrap(), &log);
            }
        }
    }
}
