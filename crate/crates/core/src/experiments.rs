//! End-to-end experiment designs built from the stage functions below.
//!
//! Every stage is a plain function over in-memory values so the command
//! line can run them one at a time against a run directory, while the
//! drivers on [`Experiment`] chain them for whole studies.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{bm25_rank, history_document, mostpop_rank, random_rank, run_file_rank, Bm25Corpus, Bm25Params, RankedList};
use crate::candidates::{
    arrange_pool, build_ranking_pool, build_rerank_pool, CandidatePool, Placement, RunFile, DEFAULT_NEGATIVES,
    DEFAULT_RERANK_SIZE,
};
use crate::corpus::{
    k_core_filter, leave_one_out_split, load_interactions, popularity_table, truncate_for_length, InteractionLog,
    LogFormat, PopularityTable, SplitDataset,
};
use crate::error::{Error, Result};
use crate::gateway::{Gateway, GatewayConfig};
use crate::ids::{ItemId, UserId};
use crate::metrics::cand_dif;
use crate::metrics::{self, evaluate, EvalContext, MetricReport, PerUser, ReferenceScope, ReportMetadata};
use crate::mock::{self, Responder};
use crate::parsing::{parse_and_match, MatchOptions, MatchedRecommendation, TitleIndex};
use crate::prompting::{
    DemonstrationSelector, HistoryLengthSelector, ProfileText, PromptInput, PromptRecord, PromptRenderer, Strategy,
    TemplateSet,
};
use crate::sampling::{sample_until_accepted, SampleConfig, UserSample, DEFAULT_ALPHA, DEFAULT_MAX_ATTEMPTS};
use crate::seed;

pub type Pools = BTreeMap<UserId, CandidatePool>;
pub type Recs = BTreeMap<UserId, MatchedRecommendation>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Ranking,
    Rerank,
}

/// How pools are ordered for the main pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arrangement {
    #[default]
    Shuffled,
    PositiveFirst,
    AsBuilt,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[default]
    #[serde(rename = "llm")]
    Llm,
    #[serde(rename = "mostpop")]
    MostPop,
    #[serde(rename = "bm25")]
    Bm25,
    #[serde(rename = "random")]
    Random,
    /// Replays an external run file's order over the pool.
    #[serde(rename = "run_file")]
    RunFile,
    #[serde(rename = "mock_first_k")]
    MockFirstK,
    #[serde(rename = "mock_item_order")]
    MockItemOrder,
    #[serde(rename = "mock_random")]
    MockRandom,
    #[serde(rename = "mock_lexical")]
    MockLexical,
    #[serde(rename = "mock_monotone")]
    MockMonotone,
}

impl ModelKind {
    /// Rankers score pools directly; the others answer prompts with text.
    pub fn is_ranker(self) -> bool {
        matches!(self, ModelKind::MostPop | ModelKind::Bm25 | ModelKind::Random | ModelKind::RunFile)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileGenerator {
    #[default]
    Llm,
    MockEcho,
    MockEmpty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub interactions: PathBuf,
    pub catalog: PathBuf,
    #[serde(default = "default_format")]
    pub format: LogFormat,
    #[serde(default = "default_k_core")]
    pub k_core: usize,
}

fn default_format() -> LogFormat {
    LogFormat::Tsv
}

fn default_k_core() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub task: Task,
    pub k: usize,
    pub negatives: usize,
    pub sample_n: usize,
    pub seed: u64,
    pub alpha: f64,
    pub max_attempts: u32,
    pub arrangement: Arrangement,
    pub strategy: Strategy,
    /// Most recent events shown; `None` shows the whole history.
    pub history_length: Option<usize>,
    /// Lengths visited by the sweep and profile studies.
    pub history_lengths: Vec<usize>,
    /// Passes with independently shuffled pools, averaged.
    pub repeats: usize,
    pub bucket_width: usize,
    pub run_files: Vec<PathBuf>,
    pub rerank_size: usize,
    pub serendipity_reference: ReferenceScope,
    pub fuzzy_threshold: Option<f64>,
    pub demonstrations: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Ranking,
            k: 5,
            negatives: DEFAULT_NEGATIVES,
            sample_n: 1000,
            seed: 2024,
            alpha: DEFAULT_ALPHA,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            arrangement: Arrangement::Shuffled,
            strategy: Strategy::Base,
            history_length: None,
            history_lengths: vec![0, 1, 2, 5, 10],
            repeats: 1,
            bucket_width: 4,
            run_files: Vec::new(),
            rerank_size: DEFAULT_RERANK_SIZE,
            serendipity_reference: ReferenceScope::Pool,
            fuzzy_threshold: None,
            demonstrations: 3,
        }
    }
}

impl RunConfig {
    pub fn pool_size(&self) -> usize {
        match self.task {
            Task::Ranking => self.negatives + 1,
            Task::Rerank => self.rerank_size,
        }
    }

    pub fn match_options(&self) -> MatchOptions {
        MatchOptions {
            fuzzy_threshold: self.fuzzy_threshold,
        }
    }

    /// Shuffle seed of repeat `r`; identical for every model in the study.
    pub fn arrangement_seed(&self, repeat: usize) -> u64 {
        seed::derive_seed(self.seed, &format!("arrange-{repeat}"))
    }

    pub fn placement(&self, repeat: usize) -> Placement {
        match self.arrangement {
            Arrangement::Shuffled => Placement::Shuffled(self.arrangement_seed(repeat)),
            Arrangement::PositiveFirst => Placement::PositiveFirst,
            Arrangement::AsBuilt => Placement::AsBuilt,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Label in reports; derived from the kind when absent.
    pub name: Option<String>,
    /// Run file replayed by `run_file`.
    pub run_file: Option<PathBuf>,
    /// History length at which `mock_monotone` always hits.
    pub saturation: Option<usize>,
}

impl ModelConfig {
    pub fn of(kind: ModelKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn label(&self, gateway: &GatewayConfig) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        match self.kind {
            ModelKind::Llm => gateway.model.clone(),
            ModelKind::MostPop => "MostPop".into(),
            ModelKind::Bm25 => "BM25".into(),
            ModelKind::Random => "Random".into(),
            ModelKind::RunFile => self
                .run_file
                .as_ref()
                .and_then(|p| p.file_stem())
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "run".into()),
            ModelKind::MockFirstK => "mock-first-k".into(),
            ModelKind::MockItemOrder => "mock-item-order".into(),
            ModelKind::MockRandom => "mock-random".into(),
            ModelKind::MockLexical => "mock-lexical".into(),
            ModelKind::MockMonotone => "mock-monotone".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileConfig {
    pub generator: ProfileGenerator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub gateway: GatewayConfig,
    #[serde(default)]
    pub profile: ProfileConfig,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut cfg = Self::from_toml(&text)?;
        let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let base = std::fs::canonicalize(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.dataset.interactions);
        resolve(base, &mut self.dataset.catalog);
        for p in &mut self.run.run_files {
            resolve(base, p);
        }
        if let Some(p) = &mut self.model.run_file {
            resolve(base, p);
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("config serialization: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.run;
        let fail = |m: String| Err(Error::invalid(m));
        if r.k == 0 {
            return fail("k must be at least 1".into());
        }
        if r.k > r.pool_size() {
            return fail(format!("k = {} exceeds the pool size {}", r.k, r.pool_size()));
        }
        if r.sample_n == 0 {
            return fail("sample_n must be at least 1".into());
        }
        if r.repeats == 0 || r.bucket_width == 0 {
            return fail("repeats and bucket_width must be at least 1".into());
        }
        if self.dataset.k_core == 0 {
            return fail("k_core must be at least 1".into());
        }
        if r.task == Task::Rerank && r.run_files.is_empty() {
            return fail("the rerank task needs at least one run file".into());
        }
        if self.model.kind == ModelKind::RunFile && self.model.run_file.is_none() {
            return fail("model kind `run_file` needs `model.run_file`".into());
        }
        if r.strategy == Strategy::ProfileGeneration {
            return fail("`profile_generation` is not a recommendation strategy".into());
        }
        if let Some(t) = r.fuzzy_threshold {
            if !(t > 0.0 && t <= 1.0) {
                return fail(format!("fuzzy_threshold {t} must lie in (0, 1]"));
            }
        }
        Ok(())
    }

    pub fn model_label(&self) -> String {
        self.model.label(&self.gateway)
    }
}

/// A filtered, split dataset with its popularity statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub catalog: BTreeMap<ItemId, String>,
    pub split: SplitDataset,
    pub popularity: PopularityTable,
}

pub fn prepare_log(log: &InteractionLog, k_core: usize) -> Result<Prepared> {
    let filtered = k_core_filter(log, k_core)?;
    let split = leave_one_out_split(&filtered)?;
    let popularity = popularity_table(&split, filtered.catalog());
    Ok(Prepared {
        catalog: filtered.catalog().clone(),
        split,
        popularity,
    })
}

pub fn prepare_data(ds: &DatasetConfig) -> Result<Prepared> {
    let log = load_interactions(&ds.interactions, ds.format, &ds.catalog)?;
    prepare_log(&log, ds.k_core)
}

/// MostPop NDCG@K on a ranking pool for every test user: the score the
/// sample gate compares against.
pub fn reference_scores(prep: &Prepared, run: &RunConfig) -> Result<PerUser> {
    let mut pools = Pools::new();
    for user in prep.split.test_users() {
        pools.insert(
            user.clone(),
            build_ranking_pool(user, &prep.split, &prep.catalog, run.negatives, run.seed)?,
        );
    }
    let recs: Recs = pools
        .values()
        .map(|p| (p.user_id.clone(), mostpop_rank(p, &prep.popularity).to_matched(run.k)))
        .collect();
    let ctx = EvalContext::new(run.k, pools, prep.popularity.clone(), BTreeMap::new(), ReferenceScope::Pool);
    Ok(metrics::ndcg(&recs, &ctx))
}

pub fn draw_sample(prep: &Prepared, reference: &PerUser, run: &RunConfig) -> Result<UserSample> {
    let cfg = SampleConfig {
        n: run.sample_n,
        alpha: run.alpha,
        seed: run.seed,
        max_attempts: run.max_attempts,
    };
    sample_until_accepted(&prep.split, reference, cfg)
}

/// Users covered by at least one run file, in input order.
pub fn covered_users(users: &[UserId], runs: &[RunFile]) -> Vec<UserId> {
    users
        .iter()
        .filter(|u| runs.iter().any(|r| r.lists.contains_key(*u)))
        .cloned()
        .collect()
}

/// Unarranged pools: negatives then the positive for ranking, round-robin
/// aggregates of the run files for re-ranking.
pub fn build_pools(prep: &Prepared, users: &[UserId], run: &RunConfig, runs: &[RunFile]) -> Result<Pools> {
    users
        .iter()
        .map(|u| {
            let pool = match run.task {
                Task::Ranking => build_ranking_pool(u, &prep.split, &prep.catalog, run.negatives, run.seed)?,
                Task::Rerank => {
                    let positive = prep
                        .split
                        .test
                        .get(u)
                        .ok_or_else(|| Error::invalid(format!("user `{u}` has no test item")))?;
                    build_rerank_pool(u, positive, runs, run.rerank_size)?
                }
            };
            Ok((u.clone(), pool))
        })
        .collect()
}

pub fn arrange(pools: &Pools, placement: Placement) -> Result<Pools> {
    pools
        .iter()
        .map(|(u, p)| Ok((u.clone(), arrange_pool(p, placement)?)))
        .collect()
}

/// The last `length` events before each user's test item (all of them for
/// `None`), most recent last.
pub fn visible_histories(prep: &Prepared, users: impl IntoIterator<Item = UserId>, length: Option<usize>) -> BTreeMap<UserId, Vec<ItemId>> {
    users
        .into_iter()
        .map(|u| {
            let before = prep.split.history_before_test(&u);
            let start = length.map_or(0, |l| before.len().saturating_sub(l));
            let h = before[start..].to_vec();
            (u, h)
        })
        .collect()
}

/// Training samples restricted to the window of `length` events, written
/// for external trainers.
pub fn export_reduced_train(prep: &Prepared, length: usize, path: &Path) -> Result<usize> {
    let t = truncate_for_length(&prep.split, length);
    crate::rundir::write_jsonl(path, t.reduced_train.iter())?;
    Ok(t.reduced_train.len())
}

pub fn render_prompts(
    prep: &Prepared,
    templates: &TemplateSet,
    pools: &Pools,
    histories: &BTreeMap<UserId, Vec<ItemId>>,
    strategy: Strategy,
    profiles: Option<&BTreeMap<UserId, ProfileText>>,
    run: &RunConfig,
) -> Result<Vec<PromptRecord>> {
    let renderer = PromptRenderer::new(templates, &prep.catalog);
    let selector = HistoryLengthSelector {
        count: run.demonstrations,
        seed: run.seed,
        ..HistoryLengthSelector::default()
    };
    let empty = Vec::new();
    pools
        .iter()
        .map(|(u, pool)| {
            let history = histories.get(u).unwrap_or(&empty);
            let demonstrations = if strategy == Strategy::InContext {
                selector.select(u, history.len(), &prep.split)
            } else {
                Vec::new()
            };
            renderer.render(PromptInput {
                strategy,
                user: u,
                history,
                pool,
                profile: profiles.and_then(|p| p.get(u)),
                k: run.k,
                demonstrations: &demonstrations,
            })
        })
        .collect()
}

pub fn profile_responder<'a>(
    generator: ProfileGenerator,
    prep: &'a Prepared,
    gateway: Option<&'a Gateway>,
) -> Result<Box<dyn Responder + 'a>> {
    Ok(match generator {
        ProfileGenerator::Llm => Box::new(mock::GatewayResponder {
            gateway: gateway.ok_or_else(|| Error::invalid("the llm profile generator needs a gateway"))?,
        }),
        ProfileGenerator::MockEcho => Box::new(mock::EchoProfile { catalog: &prep.catalog }),
        ProfileGenerator::MockEmpty => Box::new(mock::EmptyProfile),
    })
}

/// One generation pass per user. An empty history yields an empty profile
/// without a model call.
pub fn generate_profiles(
    prep: &Prepared,
    templates: &TemplateSet,
    histories: &BTreeMap<UserId, Vec<ItemId>>,
    generator: &dyn Responder,
) -> Result<BTreeMap<UserId, ProfileText>> {
    let renderer = PromptRenderer::new(templates, &prep.catalog);
    let prompts = histories
        .iter()
        .filter(|(_, h)| !h.is_empty())
        .map(|(u, h)| renderer.render_profile_prompt(u, h))
        .collect::<Result<Vec<_>>>()?;
    let answers = generator.respond(&prompts);
    let mut out = BTreeMap::new();
    for (p, a) in prompts.iter().zip(answers) {
        let text = a?.text;
        out.insert(
            p.user_id.clone(),
            ProfileText {
                user_id: p.user_id.clone(),
                text,
                source_history_length: p.history_snapshot.len(),
                generator_model: generator.name(),
            },
        );
    }
    for (u, h) in histories {
        if h.is_empty() {
            out.insert(
                u.clone(),
                ProfileText {
                    user_id: u.clone(),
                    text: String::new(),
                    source_history_length: 0,
                    generator_model: generator.name(),
                },
            );
        }
    }
    Ok(out)
}

/// Raw output of one model for one user: text for prompt-driven models,
/// a ranked item list for rankers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub user_id: UserId,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub items: Option<Vec<ItemId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub from_cache: bool,
    pub attempt_count: u32,
    pub latency_ms: u64,
}

/// What a model may consult besides the prompt.
#[derive(Clone, Copy)]
pub struct ModelEnv<'a> {
    pub prep: &'a Prepared,
    pub gateway: Option<&'a Gateway>,
    pub gateway_config: &'a GatewayConfig,
    pub seed: u64,
}

fn text_responder<'a>(model: &ModelConfig, env: ModelEnv<'a>) -> Result<Box<dyn Responder + 'a>> {
    let catalog = &env.prep.catalog;
    Ok(match model.kind {
        ModelKind::Llm => Box::new(mock::GatewayResponder {
            gateway: env.gateway.ok_or_else(|| Error::invalid("the llm model needs a gateway"))?,
        }),
        ModelKind::MockFirstK => Box::new(mock::FirstK { catalog }),
        ModelKind::MockItemOrder => Box::new(mock::ItemIdOrder { catalog }),
        ModelKind::MockRandom => Box::new(mock::RandomOrder { catalog, seed: env.seed }),
        ModelKind::MockLexical => Box::new(mock::Lexical { catalog }),
        ModelKind::MockMonotone => Box::new(mock::Monotone {
            catalog,
            truth: &env.prep.split.test,
            saturation: model.saturation.unwrap_or(10),
            seed: env.seed,
        }),
        other => return Err(Error::invalid(format!("{other:?} is a ranker, not a text model"))),
    })
}

fn rank_pools(model: &ModelConfig, env: ModelEnv<'_>, prompts: &[PromptRecord], pools: &Pools) -> Result<Vec<RankedList>> {
    let prep = env.prep;
    let bm25 = (model.kind == ModelKind::Bm25).then(|| {
        let docs: Vec<Vec<String>> = prep
            .split
            .histories
            .keys()
            .map(|u| {
                let titles: Vec<&str> = prep
                    .split
                    .history_before_test(u)
                    .iter()
                    .filter_map(|i| prep.catalog.get(i).map(String::as_str))
                    .collect();
                history_document(&titles)
            })
            .collect();
        Bm25Corpus::from_documents(&docs)
    });
    let run = match (model.kind, &model.run_file) {
        (ModelKind::RunFile, Some(path)) => Some(RunFile::load(path, None)?),
        _ => None,
    };
    prompts
        .iter()
        .map(|p| {
            let pool = pools
                .get(&p.user_id)
                .ok_or_else(|| Error::invalid(format!("no pool for user `{}`", p.user_id)))?;
            Ok(match model.kind {
                ModelKind::MostPop => mostpop_rank(pool, &prep.popularity),
                ModelKind::Random => random_rank(pool, env.seed),
                ModelKind::RunFile => run_file_rank(pool, run.as_ref().and_then(|r| r.lists.get(&p.user_id))),
                ModelKind::Bm25 => {
                    let titles: Vec<&str> = p
                        .history_snapshot
                        .iter()
                        .filter_map(|i| prep.catalog.get(i).map(String::as_str))
                        .collect();
                    let corpus = bm25.as_ref().expect("built for bm25");
                    bm25_rank(pool, &titles, corpus, &prep.catalog, Bm25Params::default())
                }
                other => return Err(Error::invalid(format!("{other:?} is not a ranker"))),
            })
        })
        .collect()
}

/// Run the model over every prompt. Per-user failures are recorded and
/// later scored as empty lists; if every call failed the first error is
/// returned instead.
pub fn respond(model: &ModelConfig, env: ModelEnv<'_>, prompts: &[PromptRecord], pools: &Pools) -> Result<Vec<ResponseRecord>> {
    let name = model.label(env.gateway_config);
    if model.kind.is_ranker() {
        return Ok(rank_pools(model, env, prompts, pools)?
            .into_iter()
            .map(|r| ResponseRecord {
                user_id: r.user_id,
                model: name.clone(),
                text: None,
                items: Some(r.items),
                error: None,
                from_cache: false,
                attempt_count: 0,
                latency_ms: 0,
            })
            .collect());
    }
    let responder = text_responder(model, env)?;
    let answers = responder.respond(prompts);
    let mut first_error = None;
    let mut records = Vec::with_capacity(prompts.len());
    for (p, a) in prompts.iter().zip(answers) {
        records.push(match a {
            Ok(r) => ResponseRecord {
                user_id: p.user_id.clone(),
                model: name.clone(),
                text: Some(r.text),
                items: None,
                error: None,
                from_cache: r.from_cache,
                attempt_count: r.attempt_count,
                latency_ms: r.latency_ms,
            },
            Err(e) => {
                tracing::warn!(user = %p.user_id, error = %e, "model call failed");
                let record = ResponseRecord {
                    user_id: p.user_id.clone(),
                    model: name.clone(),
                    text: None,
                    items: None,
                    error: Some(e.to_string()),
                    from_cache: false,
                    attempt_count: 0,
                    latency_ms: 0,
                };
                first_error.get_or_insert(e);
                record
            }
        });
    }
    match first_error {
        Some(e) if records.iter().all(|r| r.error.is_some()) => Err(e),
        _ => Ok(records),
    }
}

/// Map every response onto its user's pool. Failed calls and unknown users
/// become empty lists marked as parse failures.
pub fn parse_responses(
    responses: &[ResponseRecord],
    pools: &Pools,
    catalog: &BTreeMap<ItemId, String>,
    k: usize,
    opts: MatchOptions,
) -> Result<Recs> {
    let index = TitleIndex::new(catalog);
    responses
        .iter()
        .map(|r| {
            let pool = pools
                .get(&r.user_id)
                .ok_or_else(|| Error::invalid(format!("response for user `{}` has no pool", r.user_id)))?;
            let rec = match (&r.items, &r.text) {
                (Some(items), _) => RankedList {
                    user_id: r.user_id.clone(),
                    items: items.clone(),
                    scores: Vec::new(),
                }
                .to_matched(k),
                (None, Some(text)) => parse_and_match(&r.user_id, text, pool, &index, k, opts),
                (None, None) => MatchedRecommendation::empty(r.user_id.clone(), k, true),
            };
            Ok((r.user_id.clone(), rec))
        })
        .collect()
}

pub fn evaluate_run(
    recs: &Recs,
    pools: &Pools,
    histories: &BTreeMap<UserId, Vec<ItemId>>,
    prep: &Prepared,
    run: &RunConfig,
) -> MetricReport {
    let lengths = histories.iter().map(|(u, h)| (u.clone(), h.len())).collect();
    let ctx = EvalContext::new(run.k, pools.clone(), prep.popularity.clone(), lengths, run.serendipity_reference);
    evaluate(recs, &ctx)
}

/// Mean of several reports over the same users: per-user values and
/// aggregates are averaged metric by metric.
pub fn average_reports(reports: &[MetricReport]) -> Option<MetricReport> {
    let first = reports.first()?;
    if reports.len() == 1 {
        return Some(first.clone());
    }
    let mut out = MetricReport {
        metadata: first.metadata.clone(),
        ..MetricReport::default()
    };
    let mut per_user: BTreeMap<UserId, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    let mut aggregate: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in reports {
        for (u, m) in &r.per_user {
            for (k, v) in m {
                per_user.entry(u.clone()).or_default().entry(k.clone()).or_default().push(*v);
            }
        }
        for (k, v) in &r.aggregate {
            aggregate.entry(k.clone()).or_default().push(*v);
        }
        for w in &r.warnings {
            if !out.warnings.contains(w) {
                out.warnings.push(w.clone());
            }
        }
    }
    out.per_user = per_user
        .into_iter()
        .map(|(u, m)| (u, m.into_iter().filter_map(|(k, v)| metrics::mean(&v).map(|x| (k, x))).collect()))
        .collect();
    for (k, v) in aggregate {
        if v.len() == reports.len() {
            out.aggregate.insert(k, metrics::mean(&v).expect("non-empty"));
        } else {
            out.warnings.push(format!("{k} was undefined in some repeats and is omitted"));
        }
    }
    out.metadata.notes.insert("repeats".into(), reports.len().to_string());
    Some(out)
}

/// Everything one pass produced.
#[derive(Clone, Debug)]
pub struct Pass {
    pub pools: Pools,
    pub prompts: Vec<PromptRecord>,
    pub responses: Vec<ResponseRecord>,
    pub recs: Recs,
    pub report: MetricReport,
}

/// What distinguishes one pass from another within an experiment.
#[derive(Clone, Copy, Debug)]
pub struct PassSpec<'a> {
    pub model: &'a ModelConfig,
    pub placement: Placement,
    pub strategy: Strategy,
    pub length: Option<usize>,
    pub profiles: Option<&'a BTreeMap<UserId, ProfileText>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileVariant {
    HistoryOnly,
    ProfileOnly,
    ProfilePlusHistory,
}

impl ProfileVariant {
    pub const ALL: [ProfileVariant; 3] = [
        ProfileVariant::HistoryOnly,
        ProfileVariant::ProfileOnly,
        ProfileVariant::ProfilePlusHistory,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProfileVariant::HistoryOnly => "history_only",
            ProfileVariant::ProfileOnly => "profile_only",
            ProfileVariant::ProfilePlusHistory => "profile_plus_history",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionBucket {
    /// First 0-based input position in the bucket.
    pub start: usize,
    /// One past the last position.
    pub end: usize,
    pub users: usize,
    pub hits: usize,
    pub hr: Option<f64>,
    pub ndcg: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionSummary {
    pub model: String,
    pub users: usize,
    pub acc_random_hr: f64,
    pub acc_first_hr: f64,
    pub acc_random_ndcg: f64,
    pub acc_first_ndcg: f64,
    pub cand_dif_hr: f64,
    pub cand_dif_ndcg: f64,
    /// Hit profile by where the positive sat in the shuffled pools.
    pub buckets: Vec<PositionBucket>,
}

#[derive(Clone, Debug)]
pub struct PositionBias {
    pub shuffled: Pass,
    pub first: Pass,
    pub summary: PositionSummary,
}

#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub length: usize,
    pub pass: Pass,
}

#[derive(Clone, Debug)]
pub struct ProfileRun {
    pub variant: ProfileVariant,
    pub length: usize,
    pub profiles: Option<BTreeMap<UserId, ProfileText>>,
    pub pass: Pass,
}

#[derive(Clone, Debug)]
pub struct RerankResult {
    pub model: Pass,
    /// MostPop, BM25 and Random on the same arranged pools.
    pub baselines: Vec<(String, Pass)>,
    /// Over the pools that contain the positive; `None` when none do.
    pub position: Option<PositionSummary>,
}

/// Group users by where the positive sat; each user lands in exactly one
/// bucket, so bucket hits sum to the total.
pub fn position_buckets(pools: &Pools, report: &MetricReport, width: usize) -> Vec<PositionBucket> {
    let size = pools.values().map(CandidatePool::len).max().unwrap_or(0);
    let hr = report.column(metrics::HR);
    let ndcg = report.column(metrics::NDCG);
    let n = size.div_ceil(width.max(1));
    let mut buckets: Vec<(PositionBucket, Vec<f64>, Vec<f64>)> = (0..n)
        .map(|b| {
            (
                PositionBucket {
                    start: b * width,
                    end: ((b + 1) * width).min(size),
                    users: 0,
                    hits: 0,
                    hr: None,
                    ndcg: None,
                },
                Vec::new(),
                Vec::new(),
            )
        })
        .collect();
    for (u, pool) in pools {
        let Some(idx) = pool.positive_index else { continue };
        let (b, hs, ns) = &mut buckets[idx / width];
        let h = hr.get(u).copied().unwrap_or(0.0);
        b.users += 1;
        b.hits += (h > 0.0) as usize;
        hs.push(h);
        ns.push(ndcg.get(u).copied().unwrap_or(0.0));
    }
    buckets
        .into_iter()
        .map(|(mut b, hs, ns)| {
            b.hr = metrics::mean(&hs);
            b.ndcg = metrics::mean(&ns);
            b
        })
        .collect()
}

/// One configured study over a prepared dataset.
pub struct Experiment<'a> {
    pub cfg: &'a ExperimentConfig,
    pub prep: &'a Prepared,
    pub templates: &'a TemplateSet,
    pub gateway: Option<&'a Gateway>,
    /// External runs, required by the rerank task.
    pub runs: &'a [RunFile],
}

impl<'a> Experiment<'a> {
    fn env(&self) -> ModelEnv<'a> {
        ModelEnv {
            prep: self.prep,
            gateway: self.gateway,
            gateway_config: &self.cfg.gateway,
            seed: self.cfg.run.seed,
        }
    }

    /// Reference scores plus the gated sample.
    pub fn sample(&self) -> Result<UserSample> {
        let reference = reference_scores(self.prep, &self.cfg.run)?;
        draw_sample(self.prep, &reference, &self.cfg.run)
    }

    /// Unarranged pools for `users`. For re-ranking, users no run file
    /// covers are dropped.
    pub fn pools(&self, users: &[UserId]) -> Result<Pools> {
        match self.cfg.run.task {
            Task::Ranking => build_pools(self.prep, users, &self.cfg.run, self.runs),
            Task::Rerank => {
                let covered = covered_users(users, self.runs);
                if covered.len() < users.len() {
                    tracing::warn!(dropped = users.len() - covered.len(), "users without run-file coverage");
                }
                build_pools(self.prep, &covered, &self.cfg.run, self.runs)
            }
        }
    }

    pub fn metadata(&self, spec: &PassSpec<'_>, task: &str, template_version: &str) -> ReportMetadata {
        let run = &self.cfg.run;
        let mut notes = BTreeMap::new();
        if !spec.model.kind.is_ranker() {
            notes.insert("temperature".into(), self.cfg.gateway.temperature.to_string());
            notes.insert("max_tokens".into(), self.cfg.gateway.max_tokens.to_string());
        }
        notes.insert(
            "matching".into(),
            match run.fuzzy_threshold {
                Some(t) => format!("exact then fuzzy >= {t}"),
                None => "exact".into(),
            },
        );
        if spec.strategy == Strategy::InContext {
            notes.insert("demonstrations".into(), format!("{} by closest history length", run.demonstrations));
        }
        if let Some(p) = spec.profiles.and_then(|p| p.values().next()) {
            notes.insert("profile_generator".into(), p.generator_model.clone());
        }
        ReportMetadata {
            task: task.into(),
            model: spec.model.label(&self.cfg.gateway),
            strategy: spec.strategy.name().into(),
            arrangement: spec.placement.label(),
            k: run.k,
            history_length: spec.length,
            seeds: BTreeMap::from([
                ("run".to_string(), run.seed),
                (
                    "arrangement".to_string(),
                    match spec.placement {
                        Placement::Shuffled(s) => s,
                        _ => 0,
                    },
                ),
            ]),
            template_version: (!spec.model.kind.is_ranker()).then(|| template_version.to_owned()),
            serendipity_variant: "useful".into(),
            serendipity_reference: run.serendipity_reference,
            significance_test: "paired t-test when users coincide, Welch otherwise".into(),
            notes,
        }
    }

    /// arrange → prompts → model → parse → metrics.
    pub fn pass(&self, pools: &Pools, spec: PassSpec<'_>) -> Result<Pass> {
        let run = &self.cfg.run;
        let arranged = arrange(pools, spec.placement)?;
        let histories = visible_histories(self.prep, arranged.keys().cloned(), spec.length);
        let prompts = render_prompts(self.prep, self.templates, &arranged, &histories, spec.strategy, spec.profiles, run)?;
        let responses = respond(spec.model, self.env(), &prompts, &arranged)?;
        let recs = parse_responses(&responses, &arranged, &self.prep.catalog, run.k, run.match_options())?;
        let mut report = evaluate_run(&recs, &arranged, &histories, self.prep, run);
        let task = match run.task {
            Task::Ranking => "ranking",
            Task::Rerank => "rerank",
        };
        report.metadata = self.metadata(&spec, task, &self.templates.version);
        Ok(Pass {
            pools: arranged,
            prompts,
            responses,
            recs,
            report,
        })
    }

    fn main_spec(&self) -> PassSpec<'a> {
        PassSpec {
            model: &self.cfg.model,
            placement: self.cfg.run.placement(0),
            strategy: self.cfg.run.strategy,
            length: self.cfg.run.history_length,
            profiles: None,
        }
    }

    /// The configured model on the configured pools, averaged over repeats
    /// that differ only in the shuffle seed.
    pub fn run_ranking_eval(&self, users: &[UserId]) -> Result<MetricReport> {
        let pools = self.pools(users)?;
        let profiles = self.profiles_for(&pools, self.cfg.run.history_length)?;
        let mut reports = Vec::new();
        for r in 0..self.cfg.run.repeats {
            let spec = PassSpec {
                placement: self.cfg.run.placement(r),
                profiles: profiles.as_ref(),
                ..self.main_spec()
            };
            reports.push(self.pass(&pools, spec)?.report);
        }
        Ok(average_reports(&reports).expect("repeats >= 1"))
    }

    fn profiles_for(&self, pools: &Pools, length: Option<usize>) -> Result<Option<BTreeMap<UserId, ProfileText>>> {
        if !self.cfg.run.strategy.needs_profile() {
            return Ok(None);
        }
        let histories = visible_histories(self.prep, pools.keys().cloned(), length);
        let generator = profile_responder(self.cfg.profile.generator, self.prep, self.gateway)?;
        generate_profiles(self.prep, self.templates, &histories, generator.as_ref()).map(Some)
    }

    /// One pass per history length on shared pools and arrangement.
    pub fn run_history_sweep(&self, users: &[UserId], lengths: &[usize]) -> Result<Vec<SweepPoint>> {
        let pools = self.pools(users)?;
        lengths
            .iter()
            .map(|&l| {
                let profiles = self.profiles_for(&pools, Some(l))?;
                let spec = PassSpec {
                    length: Some(l),
                    profiles: profiles.as_ref(),
                    ..self.main_spec()
                };
                Ok(SweepPoint {
                    length: l,
                    pass: self.pass(&pools, spec)?,
                })
            })
            .collect()
    }

    fn position_on(&self, pools: &Pools, model: &ModelConfig) -> Result<PositionBias> {
        let profiles = self.profiles_for(pools, self.cfg.run.history_length)?;
        let base = PassSpec {
            model,
            profiles: profiles.as_ref(),
            ..self.main_spec()
        };
        let shuffled = self.pass(
            pools,
            PassSpec {
                placement: Placement::Shuffled(self.cfg.run.arrangement_seed(0)),
                ..base
            },
        )?;
        let first = self.pass(
            pools,
            PassSpec {
                placement: Placement::PositiveFirst,
                ..base
            },
        )?;
        let get = |r: &MetricReport, m: &str| r.get(m).unwrap_or(0.0);
        let (rh, fh) = (get(&shuffled.report, metrics::HR), get(&first.report, metrics::HR));
        let (rn, fn_) = (get(&shuffled.report, metrics::NDCG), get(&first.report, metrics::NDCG));
        let summary = PositionSummary {
            model: model.label(&self.cfg.gateway),
            users: pools.len(),
            acc_random_hr: rh,
            acc_first_hr: fh,
            acc_random_ndcg: rn,
            acc_first_ndcg: fn_,
            cand_dif_hr: cand_dif(fh, rh)?,
            cand_dif_ndcg: cand_dif(fn_, rn)?,
            buckets: position_buckets(&shuffled.pools, &shuffled.report, self.cfg.run.bucket_width),
        };
        Ok(PositionBias {
            shuffled,
            first,
            summary,
        })
    }

    /// Shuffled versus positive-first passes over the same pools.
    pub fn run_position_bias(&self, users: &[UserId]) -> Result<PositionBias> {
        let pools = self.pools(users)?;
        let with_positive: Pools = pools.into_iter().filter(|(_, p)| p.contains_positive()).collect();
        if with_positive.is_empty() {
            return Err(Error::invalid("no pool contains its positive item"));
        }
        self.position_on(&with_positive, &self.cfg.model)
    }

    /// History-only, profile-only and profile-plus-history passes for each
    /// length, on identical pools and arrangement.
    pub fn run_profile_eval(&self, users: &[UserId], lengths: &[usize]) -> Result<Vec<ProfileRun>> {
        let pools = self.pools(users)?;
        let generator = profile_responder(self.cfg.profile.generator, self.prep, self.gateway)?;
        let history_strategy = match self.cfg.run.strategy {
            s if s.needs_profile() => Strategy::Base,
            s => s,
        };
        let mut out = Vec::new();
        for &l in lengths {
            let histories = visible_histories(self.prep, pools.keys().cloned(), Some(l));
            let profiles = generate_profiles(self.prep, self.templates, &histories, generator.as_ref())?;
            for variant in ProfileVariant::ALL {
                let (strategy, profs) = match variant {
                    ProfileVariant::HistoryOnly => (history_strategy, None),
                    ProfileVariant::ProfileOnly => (Strategy::ProfileOnly, Some(&profiles)),
                    ProfileVariant::ProfilePlusHistory => (Strategy::ProfilePlusHistory, Some(&profiles)),
                };
                let spec = PassSpec {
                    strategy,
                    length: Some(l),
                    profiles: profs,
                    ..self.main_spec()
                };
                let mut pass = self.pass(&pools, spec)?;
                pass.report.metadata.notes.insert("variant".into(), variant.name().into());
                out.push(ProfileRun {
                    variant,
                    length: l,
                    profiles: profs.cloned(),
                    pass,
                });
            }
        }
        Ok(out)
    }

    /// The model on round-robin pools, the baseline rankers on the same
    /// arranged pools, and position bias over pools holding the positive.
    pub fn run_rerank_eval(&self, users: &[UserId]) -> Result<RerankResult> {
        if self.runs.is_empty() {
            return Err(Error::invalid("re-ranking needs at least one run file"));
        }
        let pools = self.pools(users)?;
        let model = self.pass(&pools, self.main_spec())?;
        let mut baselines = Vec::new();
        for kind in [ModelKind::MostPop, ModelKind::Bm25, ModelKind::Random] {
            let m = ModelConfig::of(kind);
            let pass = self.pass(
                &pools,
                PassSpec {
                    model: &m,
                    ..self.main_spec()
                },
            )?;
            baselines.push((m.label(&self.cfg.gateway), pass));
        }
        let with_positive: Pools = pools.into_iter().filter(|(_, p)| p.contains_positive()).collect();
        let position = if with_positive.is_empty() {
            None
        } else {
            Some(self.position_on(&with_positive, &self.cfg.model)?.summary)
        };
        Ok(RerankResult {
            model,
            baselines,
            position,
        })
    }
}

#[cfg(test)]
pub(crate) mod synthetic {
    use super::*;
    use crate::corpus::Interaction;
    use rand::seq::IndexedRandom;
    use rand::Rng;

    /// A popularity-skewed log where every user has `min_len..max_len`
    /// events and every item title is distinct.
    pub fn log(users: usize, items: usize, min_len: usize, max_len: usize, seed: u64) -> InteractionLog {
        let mut rng = crate::seed::rng_for(seed, "synthetic-log");
        let catalog: BTreeMap<ItemId, String> = (0..items)
            .map(|i| (ItemId::new(format!("i{i:04}")), format!("Product {i} {}", ["Rose", "Mint", "Clay", "Oud"][i % 4])))
            .collect();
        let ids: Vec<&ItemId> = catalog.keys().collect();
        let weights: Vec<usize> = (0..items).collect();
        let mut interactions = Vec::new();
        for u in 0..users {
            let len = rng.random_range(min_len..=max_len);
            for t in 0..len {
                // Low indices are drawn more often.
                let a = *weights.choose(&mut rng).expect("items");
                let b = *weights.choose(&mut rng).expect("items");
                interactions.push(Interaction {
                    user: UserId::new(format!("u{u:04}")),
                    item: ids[a.min(b)].clone(),
                    ts: t as i64,
                });
            }
        }
        InteractionLog::new(interactions, catalog).expect("valid synthetic log")
    }

    pub fn prepared(users: usize, items: usize, seed: u64) -> Prepared {
        prepare_log(&log(users, items, 6, 14, seed), 1).expect("prepared")
    }

    pub fn config() -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetConfig {
                interactions: "unused".into(),
                catalog: "unused".into(),
                format: LogFormat::Tsv,
                k_core: 1,
            },
            run: RunConfig {
                sample_n: 100,
                ..RunConfig::default()
            },
            model: ModelConfig::default(),
            gateway: GatewayConfig::default(),
            profile: ProfileConfig::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::synthetic::{config, prepared};
    use super::*;

    fn users(prep: &Prepared, n: usize) -> Vec<UserId> {
        prep.split.test_users().take(n).cloned().collect()
    }

    #[test]
    fn config_round_trips_and_validates() {
        let text = r#"
            [dataset]
            interactions = "data/log.tsv"
            catalog = "data/items.jsonl"

            [run]
            k = 5
            strategy = "recency"
            arrangement = "positive_first"

            [model]
            kind = "mock_first_k"
        "#;
        let mut cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.run.negatives, 19);
        assert_eq!(cfg.run.strategy, Strategy::Recency);
        assert_eq!(cfg.model.kind, ModelKind::MockFirstK);
        cfg.resolve_paths(Path::new("/base"));
        assert_eq!(cfg.dataset.interactions, PathBuf::from("/base/data/log.tsv"));
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);

        let mut bad = cfg.clone();
        bad.run.k = 21;
        assert!(bad.validate().is_err());
        bad = cfg.clone();
        bad.run.task = Task::Rerank;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn first_k_mock_hits_when_positive_sits_in_front() {
        let prep = prepared(60, 80, 1);
        let mut cfg = config();
        cfg.model = ModelConfig::of(ModelKind::MockFirstK);
        let templates = TemplateSet::default();
        let exp = Experiment {
            cfg: &cfg,
            prep: &prep,
            templates: &templates,
            gateway: None,
            runs: &[],
        };
        let u = users(&prep, 40);
        let pools = exp.pools(&u).unwrap();
        let pass = exp.pass(&pools, exp.main_spec()).unwrap();
        let expected = pass
            .pools
            .values()
            .filter(|p| p.positive_index.unwrap() < cfg.run.k)
            .count() as f64
            / pass.pools.len() as f64;
        assert_eq!(pass.report.get(metrics::HR).unwrap(), expected);
        assert_eq!(pass.report.get(metrics::HALLUCINATION).unwrap(), 0.0);
    }

    #[test]
    fn arrangement_is_shared_across_models() {
        let prep = prepared(40, 60, 2);
        let templates = TemplateSet::default();
        let mut orders = Vec::new();
        for kind in [ModelKind::MockLexical, ModelKind::MostPop] {
            let mut cfg = config();
            cfg.model = ModelConfig::of(kind);
            let exp = Experiment {
                cfg: &cfg,
                prep: &prep,
                templates: &templates,
                gateway: None,
                runs: &[],
            };
            let pools = exp.pools(&users(&prep, 20)).unwrap();
            let pass = exp.pass(&pools, exp.main_spec()).unwrap();
            orders.push(serde_json::to_string(&pass.pools.values().collect::<Vec<_>>()).unwrap());
        }
        assert_eq!(orders[0], orders[1]);
    }

    #[test]
    fn baselines_have_no_position_bias() {
        let prep = prepared(80, 60, 3);
        let templates = TemplateSet::default();
        for kind in [ModelKind::MostPop, ModelKind::Bm25, ModelKind::Random] {
            let mut cfg = config();
            cfg.model = ModelConfig::of(kind);
            let exp = Experiment {
                cfg: &cfg,
                prep: &prep,
                templates: &templates,
                gateway: None,
                runs: &[],
            };
            let pb = exp.run_position_bias(&users(&prep, 60)).unwrap();
            assert_eq!(pb.summary.cand_dif_hr, 0.0, "{kind:?}");
            assert_eq!(pb.summary.cand_dif_ndcg, 0.0, "{kind:?}");
            let hits: usize = pb.summary.buckets.iter().map(|b| b.hits).sum();
            let total = pb.shuffled.report.column(metrics::HR).values().filter(|v| **v > 0.0).count();
            assert_eq!(hits, total);
            assert_eq!(pb.summary.buckets.len(), 5);
        }
    }

    #[test]
    fn sweep_with_huge_length_matches_untruncated() {
        let prep = prepared(40, 60, 4);
        let mut cfg = config();
        cfg.model = ModelConfig::of(ModelKind::MockLexical);
        let templates = TemplateSet::default();
        let exp = Experiment {
            cfg: &cfg,
            prep: &prep,
            templates: &templates,
            gateway: None,
            runs: &[],
        };
        let u = users(&prep, 30);
        let full = exp.run_ranking_eval(&u).unwrap();
        let sweep = exp.run_history_sweep(&u, &[0, 1000]).unwrap();
        assert_eq!(sweep[1].pass.report.per_user, full.per_user);
        assert_eq!(sweep[1].pass.report.aggregate, full.aggregate);
        assert!(sweep[0].pass.prompts.iter().all(|p| p.history_snapshot.is_empty()));
    }

    #[test]
    fn monotone_mock_sweep_is_non_decreasing() {
        let prep = prepared(80, 60, 5);
        let mut cfg = config();
        cfg.model = ModelConfig {
            saturation: Some(4),
            ..ModelConfig::of(ModelKind::MockMonotone)
        };
        let templates = TemplateSet::default();
        let exp = Experiment {
            cfg: &cfg,
            prep: &prep,
            templates: &templates,
            gateway: None,
            runs: &[],
        };
        let sweep = exp.run_history_sweep(&users(&prep, 60), &[0, 1, 2, 4, 8]).unwrap();
        let hr: Vec<f64> = sweep.iter().map(|p| p.pass.report.get(metrics::HR).unwrap()).collect();
        assert!(hr.windows(2).all(|w| w[0] <= w[1]), "{hr:?}");
        assert_eq!(hr[0], 0.0);
        assert_eq!(*hr.last().unwrap(), 1.0);
    }

    #[test]
    fn echo_profile_matches_history_only() {
        let prep = prepared(40, 60, 6);
        let mut cfg = config();
        cfg.model = ModelConfig::of(ModelKind::MockLexical);
        cfg.profile.generator = ProfileGenerator::MockEcho;
        let templates = TemplateSet::default();
        let exp = Experiment {
            cfg: &cfg,
            prep: &prep,
            templates: &templates,
            gateway: None,
            runs: &[],
        };
        let runs = exp.run_profile_eval(&users(&prep, 30), &[3]).unwrap();
        assert_eq!(runs.len(), 3);
        let hr = |v: ProfileVariant| {
            runs.iter().find(|r| r.variant == v).unwrap().pass.report.per_user.clone()
        };
        assert_eq!(hr(ProfileVariant::HistoryOnly), hr(ProfileVariant::ProfileOnly));

        let mut empty_cfg = cfg.clone();
        empty_cfg.profile.generator = ProfileGenerator::MockEmpty;
        let exp = Experiment { cfg: &empty_cfg, ..exp };
        let empty = exp.run_profile_eval(&users(&prep, 30), &[3]).unwrap();
        let zero = exp.run_history_sweep(&users(&prep, 30), &[0]).unwrap();
        let profile_only = empty.iter().find(|r| r.variant == ProfileVariant::ProfileOnly).unwrap();
        assert_eq!(profile_only.pass.report.per_user, zero[0].pass.report.per_user);
    }

    #[test]
    fn rerank_fixpoint_preserves_source_order() {
        let prep = prepared(40, 60, 7);
        let u = users(&prep, 30);
        // A source run whose lists plant the positive for every other user.
        let mut run = RunFile::new("source");
        for (n, user) in u.iter().enumerate() {
            let mut items: Vec<ItemId> = prep
                .catalog
                .keys()
                .filter(|i| Some(*i) != prep.split.test.get(user))
                .take(20)
                .cloned()
                .collect();
            if n % 2 == 0 {
                items[n % 7] = prep.split.test[user].clone();
            }
            let scores = (0..items.len()).map(|r| (20 - r) as f64).collect();
            run.insert(user.clone(), items, scores).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("source.jsonl");
        run.save(&path).unwrap();
        let mut cfg = config();
        cfg.run.task = Task::Rerank;
        cfg.run.run_files = vec![path.clone()];
        cfg.run.arrangement = Arrangement::AsBuilt;
        cfg.model = ModelConfig {
            run_file: Some(path),
            ..ModelConfig::of(ModelKind::RunFile)
        };
        let templates = TemplateSet::default();
        let runs = [run.clone()];
        let exp = Experiment {
            cfg: &cfg,
            prep: &prep,
            templates: &templates,
            gateway: None,
            runs: &runs,
        };
        let result = exp.run_rerank_eval(&u).unwrap();
        for (user, rec) in &result.model.recs {
            let got: Vec<&ItemId> = rec.scored().map(|(_, i)| i).collect();
            let want: Vec<&ItemId> = run.lists[user].items.iter().take(5).collect();
            assert_eq!(got, want);
        }
        let brute = u
            .iter()
            .filter(|user| run.lists[*user].items[..5].contains(&prep.split.test[*user]))
            .count() as f64
            / u.len() as f64;
        assert_eq!(result.model.report.get(metrics::HR).unwrap(), brute);
        assert_eq!(result.baselines.len(), 3);
        assert!(result.position.is_some());
    }

    #[test]
    fn repeats_average_over_shuffles() {
        let prep = prepared(40, 60, 8);
        let mut cfg = config();
        cfg.model = ModelConfig::of(ModelKind::MockFirstK);
        cfg.run.repeats = 3;
        let templates = TemplateSet::default();
        let exp = Experiment {
            cfg: &cfg,
            prep: &prep,
            templates: &templates,
            gateway: None,
            runs: &[],
        };
        let u = users(&prep, 30);
        let avg = exp.run_ranking_eval(&u).unwrap();
        let pools = exp.pools(&u).unwrap();
        let hrs: Vec<f64> = (0..3)
            .map(|r| {
                let spec = PassSpec {
                    placement: cfg.run.placement(r),
                    ..exp.main_spec()
                };
                exp.pass(&pools, spec).unwrap().report.get(metrics::HR).unwrap()
            })
            .collect();
        approx::assert_abs_diff_eq!(avg.get(metrics::HR).unwrap(), hrs.iter().sum::<f64>() / 3.0, epsilon = 1e-12);
        assert_eq!(avg.metadata.notes["repeats"], "3");
    }
}
