//! One function per subcommand. Each reads its inputs from the run
//! directory, writes its outputs there and records both in the manifest,
//! so a rerun on unchanged inputs is a no-op.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use beyondrec::candidates::{load_pools, save_pools, RunFile};
use beyondrec::corpus::{read_catalog, PopularityTable, SplitDataset};
use beyondrec::experiments::{
    self, export_reduced_train, generate_profiles, parse_responses, profile_responder, render_prompts, respond,
    visible_histories, Experiment, ExperimentConfig, ModelEnv, ModelKind, Pass, PassSpec, Pools, PositionSummary,
    Prepared, ResponseRecord,
};
use beyondrec::gateway::Gateway;
use beyondrec::parsing::MatchedRecommendation;
use beyondrec::prompting::{load_prompts, save_prompts, TemplateSet};
use beyondrec::report::{self, history_series, position_series};
use beyondrec::rundir::{read_json, read_jsonl, write_atomic, write_json, write_jsonl, RunDirectory};
use beyondrec::sampling::UserSample;
use beyondrec::{metrics, UserId};
use serde_json::json;

use crate::Command;

const CONFIG: &str = "config.toml";
const SPLIT: &str = "data/split.json";
const POPULARITY: &str = "data/popularity.json";
const CATALOG: &str = "data/catalog.jsonl";
const REFERENCE: &str = "sample/reference.json";
const SAMPLE: &str = "sample/sample.json";
const POOLS: &str = "pools/pools.jsonl";
const ARRANGED: &str = "pools/arranged.jsonl";
const PROMPTS: &str = "prompts/prompts.jsonl";
const PROFILES: &str = "prompts/profiles.jsonl";
const RESPONSES: &str = "responses/responses.jsonl";
const RECS: &str = "recs/recs.jsonl";
const REPORT: &str = "eval/report.json";
const PER_USER: &str = "eval/per_user.csv";
const STATUS: &str = "status.json";

const DATA: [&str; 4] = [CONFIG, SPLIT, POPULARITY, CATALOG];

struct Run {
    dir: RunDirectory,
    force: bool,
}

impl Run {
    /// Skip when up to date; otherwise run `body`, which returns the
    /// outputs it wrote, and record them. The outcome lands in status.json.
    fn stage(&self, name: &str, inputs: &[&str], body: impl FnOnce() -> Result<Vec<String>>) -> Result<()> {
        if !self.force && self.dir.is_up_to_date(name, inputs)? {
            println!("{name}: up to date");
            return Ok(());
        }
        match body() {
            Ok(outputs) => {
                let refs: Vec<&str> = outputs.iter().map(String::as_str).collect();
                self.dir.record_stage(name, inputs, &refs)?;
                write_json(&self.dir.path(STATUS), &json!({ "stage": name, "ok": true }))?;
                println!("{name}: wrote {} artifact(s)", outputs.len());
                Ok(())
            }
            Err(e) => {
                let status = json!({ "stage": name, "ok": false, "error": format!("{e:#}") });
                let _ = write_json(&self.dir.path(STATUS), &status);
                Err(e)
            }
        }
    }

    fn config(&self) -> Result<ExperimentConfig> {
        let path = self.dir.require(CONFIG, "prepare")?;
        Ok(ExperimentConfig::load(&path)?)
    }

    fn prepared(&self) -> Result<Prepared> {
        Ok(Prepared {
            split: read_json::<SplitDataset>(&self.dir.require(SPLIT, "prepare")?)?,
            popularity: read_json::<PopularityTable>(&self.dir.require(POPULARITY, "prepare")?)?,
            catalog: read_catalog(&self.dir.require(CATALOG, "prepare")?)?,
        })
    }

    fn sample(&self) -> Result<Vec<UserId>> {
        let s: UserSample = read_json(&self.dir.require(SAMPLE, "sample")?)?;
        Ok(s.user_ids)
    }

    fn arranged(&self) -> Result<Pools> {
        Ok(load_pools(&self.dir.require(ARRANGED, "pools")?)?)
    }

    fn runs(&self, cfg: &ExperimentConfig) -> Result<Vec<RunFile>> {
        cfg.run
            .run_files
            .iter()
            .map(|p| RunFile::load(p, None).with_context(|| format!("loading run file {}", p.display())))
            .collect()
    }

    /// A gateway is only built when a model that talks to one will run.
    fn gateway(&self, cfg: &ExperimentConfig, profiles: bool) -> Result<Option<Gateway>> {
        let needs = cfg.model.kind == ModelKind::Llm
            || (profiles && cfg.profile.generator == experiments::ProfileGenerator::Llm);
        if !needs {
            return Ok(None);
        }
        Ok(Some(Gateway::new(
            cfg.gateway.clone(),
            &self.dir.path("cache"),
            Some(&self.dir.path("audit.jsonl")),
        )?))
    }

    fn write_pass(&self, dir: &str, pass: &Pass) -> Result<Vec<String>> {
        let rel = |f: &str| format!("{dir}/{f}");
        save_pools(&self.dir.path(&rel("pools.jsonl")), pass.pools.values())?;
        save_prompts(&self.dir.path(&rel("prompts.jsonl")), &pass.prompts)?;
        write_jsonl(&self.dir.path(&rel("responses.jsonl")), &pass.responses)?;
        write_jsonl(&self.dir.path(&rel("recs.jsonl")), pass.recs.values())?;
        pass.report.write_json(&self.dir.path(&rel("report.json")))?;
        pass.report.write_per_user_csv(&self.dir.path(&rel("per_user.csv")))?;
        Ok(["pools.jsonl", "prompts.jsonl", "responses.jsonl", "recs.jsonl", "report.json", "per_user.csv"]
            .map(rel)
            .to_vec())
    }
}

pub fn run(root: &Path, force: bool, command: &Command) -> Result<()> {
    if let Command::Prepare { config } = command {
        return prepare(RunDirectory::create(root)?, force, config);
    }
    let run = Run {
        dir: RunDirectory::open(root)?,
        force,
    };
    match command {
        Command::Prepare { .. } => unreachable!("handled above"),
        Command::Sample => sample(&run),
        Command::Pools => pools(&run),
        Command::Prompts => prompts(&run),
        Command::Invoke => invoke(&run),
        Command::Parse => parse(&run),
        Command::Eval => eval(&run),
        Command::Sweep { lengths } => sweep(&run, lengths.as_deref()),
        Command::Position => position(&run),
        Command::Profile { lengths } => profile(&run, lengths.as_deref()),
        Command::Rerank => rerank(&run),
        Command::Report { reference, svg } => report_stage(&run, reference.as_deref(), *svg),
    }
}

fn prepare(dir: RunDirectory, force: bool, config: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config).with_context(|| format!("reading {}", config.display()))?;
    // The snapshot carries absolute paths so the run directory stands alone.
    let snapshot = cfg.to_toml()?;
    let current = std::fs::read_to_string(dir.path(CONFIG)).ok();
    if current.as_deref() != Some(snapshot.as_str()) {
        write_atomic(&dir.path(CONFIG), snapshot.as_bytes())?;
    }
    let run = Run { dir, force };
    run.stage("prepare", &[CONFIG], || {
        let prep = experiments::prepare_data(&cfg.dataset)?;
        write_json(&run.dir.path(SPLIT), &prep.split)?;
        write_json(&run.dir.path(POPULARITY), &prep.popularity)?;
        let rows: Vec<_> = prep.catalog.iter().map(|(item, title)| json!({ "item": item, "title": title })).collect();
        write_jsonl(&run.dir.path(CATALOG), &rows)?;
        println!(
            "prepare: {} users, {} items after {}-core",
            prep.split.num_users(),
            prep.catalog.len(),
            cfg.dataset.k_core
        );
        Ok(vec![SPLIT.into(), POPULARITY.into(), CATALOG.into()])
    })
}

fn sample(run: &Run) -> Result<()> {
    run.stage("sample", &DATA, || {
        let cfg = run.config()?;
        let prep = run.prepared()?;
        let reference = experiments::reference_scores(&prep, &cfg.run)?;
        write_json(&run.dir.path(REFERENCE), &reference)?;
        let sample = experiments::draw_sample(&prep, &reference, &cfg.run)?;
        write_json(&run.dir.path(SAMPLE), &sample)?;
        println!(
            "sample: {} users accepted after {} attempt(s) (D = {:.4}, p = {:.4})",
            sample.user_ids.len(),
            sample.gate.attempts,
            sample.gate.statistic,
            sample.gate.p_value
        );
        Ok(vec![REFERENCE.into(), SAMPLE.into()])
    })
}

fn pools(run: &Run) -> Result<()> {
    run.dir.require(SAMPLE, "sample")?;
    let inputs = [&DATA[..], &[SAMPLE]].concat();
    run.stage("pools", &inputs, || {
        let cfg = run.config()?;
        let prep = run.prepared()?;
        let runs = run.runs(&cfg)?;
        let templates = TemplateSet::default();
        let exp = Experiment {
            cfg: &cfg,
            prep: &prep,
            templates: &templates,
            gateway: None,
            runs: &runs,
        };
        let built = exp.pools(&run.sample()?)?;
        let arranged = experiments::arrange(&built, cfg.run.placement(0))?;
        save_pools(&run.dir.path(POOLS), built.values())?;
        save_pools(&run.dir.path(ARRANGED), arranged.values())?;
        Ok(vec![POOLS.into(), ARRANGED.into()])
    })
}

fn prompts(run: &Run) -> Result<()> {
    run.dir.require(ARRANGED, "pools")?;
    let inputs = [&DATA[..], &[ARRANGED]].concat();
    run.stage("prompts", &inputs, || {
        let cfg = run.config()?;
        let prep = run.prepared()?;
        let pools = run.arranged()?;
        let templates = TemplateSet::default();
        let histories = visible_histories(&prep, pools.keys().cloned(), cfg.run.history_length);
        let mut outputs = vec![PROMPTS.to_string()];
        let profiles = if cfg.run.strategy.needs_profile() {
            let gateway = run.gateway(&cfg, true)?;
            let generator = profile_responder(cfg.profile.generator, &prep, gateway.as_ref())?;
            let p = generate_profiles(&prep, &templates, &histories, generator.as_ref())?;
            write_jsonl(&run.dir.path(PROFILES), p.values())?;
            outputs.push(PROFILES.into());
            Some(p)
        } else {
            None
        };
        let prompts = render_prompts(&prep, &templates, &pools, &histories, cfg.run.strategy, profiles.as_ref(), &cfg.run)?;
        save_prompts(&run.dir.path(PROMPTS), &prompts)?;
        Ok(outputs)
    })
}

fn invoke(run: &Run) -> Result<()> {
    run.dir.require(PROMPTS, "prompts")?;
    let inputs = [&DATA[..], &[ARRANGED, PROMPTS]].concat();
    run.stage("invoke", &inputs, || {
        let cfg = run.config()?;
        let prep = run.prepared()?;
        let pools = run.arranged()?;
        let prompts = load_prompts(&run.dir.path(PROMPTS))?;
        let gateway = run.gateway(&cfg, false)?;
        let env = ModelEnv {
            prep: &prep,
            gateway: gateway.as_ref(),
            gateway_config: &cfg.gateway,
            seed: cfg.run.seed,
        };
        let responses = respond(&cfg.model, env, &prompts, &pools)?;
        let failed = responses.iter().filter(|r| r.error.is_some()).count();
        if failed > 0 {
            eprintln!("invoke: {failed} of {} calls failed; they score as empty lists", responses.len());
        }
        write_jsonl(&run.dir.path(RESPONSES), &responses)?;
        Ok(vec![RESPONSES.into()])
    })
}

fn parse(run: &Run) -> Result<()> {
    run.dir.require(RESPONSES, "invoke")?;
    let inputs = [&DATA[..], &[ARRANGED, RESPONSES]].concat();
    run.stage("parse", &inputs, || {
        let cfg = run.config()?;
        let prep = run.prepared()?;
        let pools = run.arranged()?;
        let responses: Vec<ResponseRecord> = read_jsonl(&run.dir.path(RESPONSES))?;
        let recs = parse_responses(&responses, &pools, &prep.catalog, cfg.run.k, cfg.run.match_options())?;
        write_jsonl(&run.dir.path(RECS), recs.values())?;
        Ok(vec![RECS.into()])
    })
}

fn eval(run: &Run) -> Result<()> {
    run.dir.require(RECS, "parse")?;
    let inputs = [&DATA[..], &[ARRANGED, RECS]].concat();
    run.stage("eval", &inputs, || {
        let cfg = run.config()?;
        let prep = run.prepared()?;
        let pools = run.arranged()?;
        let recs: BTreeMap<UserId, MatchedRecommendation> = read_jsonl::<MatchedRecommendation>(&run.dir.path(RECS))?
            .into_iter()
            .map(|r| (r.user_id.clone(), r))
            .collect();
        let histories = visible_histories(&prep, pools.keys().cloned(), cfg.run.history_length);
        let mut report = experiments::evaluate_run(&recs, &pools, &histories, &prep, &cfg.run);
        let templates = TemplateSet::default();
        let exp = Experiment {
            cfg: &cfg,
            prep: &prep,
            templates: &templates,
            gateway: None,
            runs: &[],
        };
        let spec = PassSpec {
            model: &cfg.model,
            placement: cfg.run.placement(0),
            strategy: cfg.run.strategy,
            length: cfg.run.history_length,
            profiles: None,
        };
        let task = match cfg.run.task {
            experiments::Task::Ranking => "ranking",
            experiments::Task::Rerank => "rerank",
        };
        report.metadata = exp.metadata(&spec, task, &templates.version);
        report.write_json(&run.dir.path(REPORT))?;
        report.write_per_user_csv(&run.dir.path(PER_USER))?;
        for m in [metrics::HR, metrics::NDCG, metrics::HALLUCINATION] {
            if let Some(v) = report.get(m) {
                println!("eval: {m} = {v:.4}");
            }
        }
        Ok(vec![REPORT.into(), PER_USER.into()])
    })
}

/// Shared setup of the study subcommands.
fn with_experiment<T>(run: &Run, profiles: bool, f: impl FnOnce(&Experiment<'_>, &[UserId]) -> Result<T>) -> Result<T> {
    let cfg = run.config()?;
    let prep = run.prepared()?;
    let runs = run.runs(&cfg)?;
    let profiles = profiles || cfg.run.strategy.needs_profile();
    let gateway = run.gateway(&cfg, profiles)?;
    let templates = TemplateSet::default();
    let users = run.sample()?;
    let exp = Experiment {
        cfg: &cfg,
        prep: &prep,
        templates: &templates,
        gateway: gateway.as_ref(),
        runs: &runs,
    };
    f(&exp, &users)
}

fn sweep(run: &Run, lengths: Option<&[usize]>) -> Result<()> {
    run.dir.require(SAMPLE, "sample")?;
    let inputs = [&DATA[..], &[SAMPLE]].concat();
    run.stage(&study_stage("sweep", lengths), &inputs, || {
        with_experiment(run, false, |exp, users| {
            let lengths = lengths.map(<[usize]>::to_vec).unwrap_or_else(|| exp.cfg.run.history_lengths.clone());
            let points = exp.run_history_sweep(users, &lengths)?;
            let mut outputs = Vec::new();
            for p in &points {
                let dir = format!("sweep/L{}", p.length);
                outputs.extend(run.write_pass(&dir, &p.pass)?);
                let train = format!("{dir}/reduced_train.jsonl");
                export_reduced_train(exp.prep, p.length, &run.dir.path(&train))?;
                outputs.push(train);
            }
            let series: Vec<(usize, &metrics::MetricReport)> = points.iter().map(|p| (p.length, &p.pass.report)).collect();
            let table = history_series(&series, &[metrics::HR, metrics::NDCG]);
            write_atomic(&run.dir.path("sweep/series.csv"), table.to_csv().as_bytes())?;
            outputs.push("sweep/series.csv".into());
            for p in &points {
                println!("sweep: L = {:>3}  HR = {:.4}", p.length, p.pass.report.get(metrics::HR).unwrap_or(0.0));
            }
            Ok(outputs)
        })
    })
}

/// Explicit lengths are part of the stage identity.
fn study_stage(name: &str, lengths: Option<&[usize]>) -> String {
    match lengths {
        Some(l) => format!("{name}{l:?}"),
        None => name.to_string(),
    }
}

fn write_summary(run: &Run, dir: &str, summary: &PositionSummary) -> Result<Vec<String>> {
    let json_path = format!("{dir}/summary.json");
    let csv_path = format!("{dir}/buckets.csv");
    write_json(&run.dir.path(&json_path), summary)?;
    write_atomic(&run.dir.path(&csv_path), position_series(&summary.buckets).to_csv().as_bytes())?;
    println!(
        "{dir}: acc_random = {:.4}, acc_first = {:.4}, CandDif(HR) = {:.4}, CandDif(NDCG) = {:.4}",
        summary.acc_random_hr, summary.acc_first_hr, summary.cand_dif_hr, summary.cand_dif_ndcg
    );
    Ok(vec![json_path, csv_path])
}

fn position(run: &Run) -> Result<()> {
    run.dir.require(SAMPLE, "sample")?;
    let inputs = [&DATA[..], &[SAMPLE]].concat();
    run.stage("position", &inputs, || {
        with_experiment(run, false, |exp, users| {
            let pb = exp.run_position_bias(users)?;
            let mut outputs = run.write_pass("position/shuffled", &pb.shuffled)?;
            outputs.extend(run.write_pass("position/positive_first", &pb.first)?);
            outputs.extend(write_summary(run, "position", &pb.summary)?);
            Ok(outputs)
        })
    })
}

fn profile(run: &Run, lengths: Option<&[usize]>) -> Result<()> {
    run.dir.require(SAMPLE, "sample")?;
    let inputs = [&DATA[..], &[SAMPLE]].concat();
    run.stage(&study_stage("profile", lengths), &inputs, || {
        with_experiment(run, true, |exp, users| {
            let lengths = lengths.map(<[usize]>::to_vec).unwrap_or_else(|| exp.cfg.run.history_lengths.clone());
            let mut outputs = Vec::new();
            for r in exp.run_profile_eval(users, &lengths)? {
                let dir = format!("profile/{}_L{}", r.variant.name(), r.length);
                outputs.extend(run.write_pass(&dir, &r.pass)?);
                if let Some(p) = &r.profiles {
                    let path = format!("{dir}/profiles.jsonl");
                    write_jsonl(&run.dir.path(&path), p.values())?;
                    outputs.push(path);
                }
                println!(
                    "profile: {:<22} L = {:>3}  HR = {:.4}",
                    r.variant.name(),
                    r.length,
                    r.pass.report.get(metrics::HR).unwrap_or(0.0)
                );
            }
            Ok(outputs)
        })
    })
}

fn rerank(run: &Run) -> Result<()> {
    run.dir.require(SAMPLE, "sample")?;
    let inputs = [&DATA[..], &[SAMPLE]].concat();
    run.stage("rerank", &inputs, || {
        with_experiment(run, false, |exp, users| {
            let result = exp.run_rerank_eval(users)?;
            let mut outputs = run.write_pass("rerank/model", &result.model)?;
            for (name, pass) in &result.baselines {
                outputs.extend(run.write_pass(&format!("rerank/{}", name.to_lowercase()), pass)?);
            }
            if let Some(s) = &result.position {
                outputs.extend(write_summary(run, "rerank/position", s)?);
            }
            println!("rerank: HR = {:.4}", result.model.report.get(metrics::HR).unwrap_or(0.0));
            Ok(outputs)
        })
    })
}

fn report_stage(run: &Run, reference: Option<&str>, svg: bool) -> Result<()> {
    let reports: Vec<String> = report::collect_reports(run.dir.root())?
        .into_iter()
        .filter(|(l, _)| !l.starts_with("report"))
        .map(|(l, _)| format!("{l}/report.json"))
        .collect();
    let mut inputs: Vec<&str> = reports.iter().map(String::as_str).collect();
    if run.dir.path("position/summary.json").exists() {
        inputs.push("position/summary.json");
    }
    // Options change the output, so they are part of the stage identity.
    let mut stage = "report".to_string();
    if let Some(r) = reference {
        stage.push_str(&format!("[ref={r}]"));
    }
    if svg {
        stage.push_str("[svg]");
    }
    run.stage(&stage, &inputs, || {
        let written = report::render_run_directory(run.dir.root(), reference, svg)?;
        print!("{}", std::fs::read_to_string(run.dir.path("report/table.md"))?);
        Ok(written)
    })
}
