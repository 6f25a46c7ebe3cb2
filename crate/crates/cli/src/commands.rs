use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::json;

use kipg::evaluation::{complexity_distribution, evaluate};
use kipg::gateway::Gateway;
use kipg::jsonl;
use kipg::pipeline::{answer_batch, PipelineContext, PipelineTrace, RetrievalMode, RetrievalSetup};
use kipg::preference::{
    self, build_dataset, deployable_programs, emit_dpo_dataset, generate_candidates,
    load_candidates, run_iteration, score_candidates, IterationConfig, ScoreSheet,
};
use kipg::retrieval::LexicalIndex;
use kipg::store::{
    load_documents_with, load_instances, split_instances, DocumentCollection, InstanceSet, Split,
    Taxonomy,
};

use crate::config::RunConfig;
use crate::Common;

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let paths = &mut config.paths;
    for (slot, flag) in [
        (&mut paths.documents, &common.documents),
        (&mut paths.instances, &common.instances),
        (&mut paths.programs, &common.programs),
        (&mut paths.scores, &common.scores),
        (&mut paths.output_dir, &common.output_dir),
    ] {
        if flag.is_some() {
            *slot = flag.clone();
        }
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(i) = common.iteration {
        config.iteration_index = i;
    }
    if let Some(p) = common.parallelism {
        config.parallelism = p;
        config.scoring.parallelism = p;
    }
    Ok(config)
}

fn documents(config: &RunConfig) -> Result<DocumentCollection> {
    let path = config.require("documents", &config.paths.documents)?;
    let legal = Taxonomy::legal();
    let declared = config.paths.legal_taxonomy.then_some(&legal);
    load_documents_with(path, declared).with_context(|| format!("loading {}", path.display()))
}

fn instances(config: &RunConfig, collection: &DocumentCollection) -> Result<InstanceSet> {
    let path = config.require("instances", &config.paths.instances)?;
    load_instances(path, collection).with_context(|| format!("loading {}", path.display()))
}

fn in_output(config: &RunConfig, explicit: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    match explicit {
        Some(p) => Ok(p.clone()),
        None => Ok(config.output_dir()?.join(name)),
    }
}

#[derive(Serialize)]
struct ExchangeTiming<'a> {
    role: String,
    backend: &'a str,
    prompt_sha256: &'a str,
    latency_ms: f64,
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
    error: Option<&'a str>,
}

/// Latencies never enter the primary artifacts; they go to a sidecar.
fn write_exchange_timings(config: &RunConfig, gateway: &Gateway, command: &str) -> Result<()> {
    let exchanges = gateway.exchanges();
    let rows: Vec<ExchangeTiming<'_>> = exchanges
        .iter()
        .map(|e| ExchangeTiming {
            role: e.role.to_string(),
            backend: &e.backend,
            prompt_sha256: &e.prompt_sha256,
            latency_ms: e.latency_ms,
            prompt_tokens: e.prompt_tokens,
            completion_tokens: e.completion_tokens,
            error: e.error.as_deref(),
        })
        .collect();
    let path = config.output_dir()?.join(format!("{command}.timings.jsonl"));
    jsonl::write(&path, &rows).with_context(|| format!("writing {}", path.display()))
}

pub fn ingest(common: &Common, small_fraction: Option<f64>, write_to: Option<&Path>) -> Result<()> {
    let config = load_config(common)?;
    config.validate()?;
    let collection = documents(&config)?;
    let mut set = match &config.paths.instances {
        Some(_) => instances(&config, &collection)?,
        None => InstanceSet::default(),
    };
    if let Some(f) = small_fraction {
        set = split_instances(&set, f, config.seed)?;
        if let Some(path) = write_to {
            jsonl::write_atomic(path, set.to_jsonl().as_bytes())
                .with_context(|| format!("writing {}", path.display()))?;
        }
    }

    let mut docs_by_type: BTreeMap<&str, usize> = BTreeMap::new();
    for d in collection.iter() {
        *docs_by_type.entry(d.case_type.as_str()).or_default() += 1;
    }
    let mut by_type: BTreeMap<&str, [usize; 3]> = BTreeMap::new();
    for i in set.iter() {
        let col = match i.split {
            Split::Train => 0,
            Split::SmallTrain => 1,
            Split::Test => 2,
        };
        by_type.entry(i.case_type.as_str()).or_default()[col] += 1;
    }
    println!("documents: {}", collection.len());
    println!("instances: {}", set.len());
    println!(
        "{:<24} {:>5} {:>6} {:>11} {:>5} {:>6}",
        "case_type", "docs", "train", "small_train", "test", "total"
    );
    let mut types: Vec<&str> = docs_by_type.keys().chain(by_type.keys()).copied().collect();
    types.sort();
    types.dedup();
    for t in types {
        let c = by_type.get(t).copied().unwrap_or_default();
        println!(
            "{:<24} {:>5} {:>6} {:>11} {:>5} {:>6}",
            t,
            docs_by_type.get(t).copied().unwrap_or(0),
            c[0],
            c[1],
            c[2],
            c.iter().sum::<usize>()
        );
    }
    Ok(())
}

pub fn gen(common: &Common, n_samples: Option<usize>) -> Result<()> {
    let mut config = load_config(common)?;
    if let Some(n) = n_samples {
        config.sampling.n_samples = n;
    }
    config.validate()?;
    let collection = documents(&config)?;
    let gateway = config.gateway()?;
    let result = generate_candidates(
        &collection,
        &gateway,
        &config.sampling,
        &config.lint,
        config.iteration_index,
    );
    write_exchange_timings(&config, &gateway, "gen")?;
    let candidates = result?;
    let path = config.output_dir()?.join(preference::PROGRAMS_FILE);
    jsonl::write(&path, &candidates).with_context(|| format!("writing {}", path.display()))?;
    let unparsed = candidates.iter().filter(|c| c.metadata.is_none()).count();
    println!(
        "{} candidates for {} documents ({} without a parseable header) -> {}",
        candidates.len(),
        collection.len(),
        unparsed,
        path.display()
    );
    Ok(())
}

fn candidates_path(config: &RunConfig) -> Result<PathBuf> {
    in_output(config, &config.paths.programs, preference::PROGRAMS_FILE)
}

fn read_sheet(path: &Path) -> Result<ScoreSheet> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn score(common: &Common, small_set_threshold: Option<f64>) -> Result<()> {
    let mut config = load_config(common)?;
    if small_set_threshold.is_some() {
        config.scoring.small_set_threshold = small_set_threshold;
    }
    config.validate()?;
    let collection = documents(&config)?;
    let set = instances(&config, &collection)?;
    let candidates = load_candidates(&candidates_path(&config)?, &config.lint)?;
    let gateway = config.gateway()?;
    let result = score_candidates(
        &candidates,
        &collection,
        &set,
        &gateway,
        &config.limits,
        &config.scoring,
        config.iteration_index,
    );
    write_exchange_timings(&config, &gateway, "score")?;
    let sheet = result?;
    let path = config.output_dir()?.join(preference::SCORES_FILE);
    jsonl::write_pretty(&path, &sheet).with_context(|| format!("writing {}", path.display()))?;
    for d in &sheet.documents {
        let best = d.selected.as_deref().unwrap_or("(none)");
        let scores: Vec<String> = d.scores.iter().map(|s| s.score.to_string()).collect();
        println!("{:<12} best {:<24} scores [{}]", d.document_id, best, scores.join(", "));
    }
    Ok(())
}

pub fn build_dpo(common: &Common) -> Result<()> {
    let config = load_config(common)?;
    config.validate()?;
    let collection = documents(&config)?;
    let candidates = load_candidates(&candidates_path(&config)?, &config.lint)?;
    let sheet = read_sheet(&in_output(&config, &config.paths.scores, preference::SCORES_FILE)?)?;
    let pairs = build_dataset(&sheet, &candidates, &collection, &config.prompts()?)?;
    let out = config.output_dir()?;
    let manifest = emit_dpo_dataset(&pairs, &out, &config.training, sheet.iteration_index)?;
    println!(
        "{} preference pairs -> {}",
        manifest.n_pairs,
        out.join(&manifest.dataset_path).display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TraceTiming<'a> {
    instance_id: &'a str,
    stages_ms: BTreeMap<String, f64>,
    execution_wall_ms: Option<f64>,
}

fn split_filter(name: &str) -> Result<Option<Split>> {
    match name {
        "all" => Ok(None),
        other => other.parse().map(Some).map_err(anyhow::Error::msg),
    }
}

pub fn infer(common: &Common, mode: Option<RetrievalMode>, split: &str) -> Result<()> {
    let mut config = load_config(common)?;
    if let Some(m) = mode {
        config.retrieval.mode = m;
    }
    config.validate()?;
    let wanted = split_filter(split)?;
    let collection = documents(&config)?;
    let set = instances(&config, &collection)?;
    let programs = match &config.paths.programs {
        Some(path) => {
            let candidates = load_candidates(path, &config.lint)?;
            let sheet = config.paths.scores.as_deref().map(read_sheet).transpose()?;
            deployable_programs(&candidates, sheet.as_ref())
        }
        None => {
            log::warn!("no program store configured; every answer is degraded");
            Default::default()
        }
    };

    let out = config.output_dir()?;
    let index = match config.retrieval.mode {
        RetrievalMode::Lexical => {
            let path = config
                .retrieval
                .index_path
                .clone()
                .unwrap_or_else(|| out.join("lexical_index.json"));
            Some(LexicalIndex::load_or_build(&path, &collection)?)
        }
        _ => None,
    };
    let setup = RetrievalSetup {
        mode: config.retrieval.mode,
        collection: &collection,
        index: index.as_ref(),
        k: config.retrieval.k,
        recall_threshold: config.retrieval.recall_threshold,
    };
    let gateway = config.gateway()?;
    let mut ctx = PipelineContext::new(&gateway, &config.limits);
    ctx.extraction_retries = config.scoring.extraction_retries;
    let selected: Vec<_> = set
        .iter()
        .filter(|i| wanted.is_none_or(|s| i.split == s))
        .collect();
    let result = answer_batch(&selected, &setup, &programs, &ctx, config.parallelism());
    write_exchange_timings(&config, &gateway, "infer")?;
    let traces = result?;

    let path = out.join("traces.jsonl");
    jsonl::write(&path, &traces).with_context(|| format!("writing {}", path.display()))?;
    let timings: Vec<TraceTiming<'_>> = traces
        .iter()
        .map(|t| TraceTiming {
            instance_id: &t.instance_id,
            stages_ms: t
                .stage_timings
                .iter()
                .map(|(s, d)| (json!(s).as_str().unwrap_or_default().to_string(), d.as_secs_f64() * 1e3))
                .collect(),
            execution_wall_ms: t.execution.as_ref().map(|e| e.wall_time.as_secs_f64() * 1e3),
        })
        .collect();
    let tpath = out.join("traces.timings.jsonl");
    jsonl::write(&tpath, &timings).with_context(|| format!("writing {}", tpath.display()))?;

    let degraded = traces.iter().filter(|t| t.degraded).count();
    println!(
        "{} traces ({} degraded) -> {}",
        traces.len(),
        degraded,
        path.display()
    );
    if config.retrieval.mode != RetrievalMode::Oracle {
        let hits = traces
            .iter()
            .filter(|t| t.retrieval.as_ref().is_some_and(|r| r.matched_oracle))
            .count();
        println!("retrieval matched the gold document for {hits}/{}", traces.len());
    }
    Ok(())
}

fn read_traces(path: &Path) -> Result<Vec<PipelineTrace>> {
    jsonl::read_records(path)
        .with_context(|| format!("reading {}", path.display()))?
        .into_iter()
        .map(|(line, text)| {
            serde_json::from_str(&text).with_context(|| format!("{}:{line}", path.display()))
        })
        .collect()
}

pub fn eval(common: &Common, traces: Option<PathBuf>, complexity: bool) -> Result<()> {
    let config = load_config(common)?;
    config.validate()?;
    let collection = documents(&config)?;
    let set = instances(&config, &collection)?;
    let trace_path = in_output(&config, &traces, "traces.jsonl")?;
    let traces = read_traces(&trace_path)?;
    let report = evaluate(&traces, &set)?;
    let out = config.output_dir()?;
    jsonl::write_pretty(&out.join("report.json"), &report)?;
    print!("{}", report.render_table());

    if complexity {
        let sheet = read_sheet(&in_output(&config, &config.paths.scores, preference::SCORES_FILE)?)?;
        let points: Vec<(usize, f64)> = sheet
            .documents
            .iter()
            .flat_map(|d| &d.scores)
            .filter_map(|s| s.logic_line_count.map(|n| (n, s.score.as_f64())))
            .collect();
        if points.is_empty() {
            bail!("scores contain no programs with a line count");
        }
        let dist = complexity_distribution(&points);
        let path = out.join("complexity.csv");
        jsonl::write_atomic(&path, dist.to_csv().as_bytes())?;
        match dist.rank_correlation {
            Some(r) => println!("line count vs accuracy rank correlation: {r:.4}"),
            None => println!("line count vs accuracy rank correlation: undefined"),
        }
    }
    Ok(())
}

pub fn run_loop(common: &Common) -> Result<()> {
    let config = load_config(common)?;
    config.validate()?;
    let collection = documents(&config)?;
    let set = instances(&config, &collection)?;
    let gateway = config.gateway()?;
    let iteration = IterationConfig {
        iteration_index: config.iteration_index,
        sampling: config.sampling.clone(),
        lint: config.lint.clone(),
        scoring: config.scoring.clone(),
        training: config.training.clone(),
        limits: config.limits.clone(),
    };
    let out = config.output_dir()?;
    let result = run_iteration(&iteration, &collection, &set, &gateway, &out);
    write_exchange_timings(&config, &gateway, "loop")?;
    let report = result?;
    for d in &report.documents {
        let best = d
            .selected
            .as_ref()
            .map_or("(none)".to_string(), |(id, s)| format!("{id} ({s:.4})"));
        println!(
            "{:<12} {} candidates, {} pairs, best {}",
            d.document_id, d.candidate_count, d.pair_count, best
        );
    }
    println!("average accuracy of selected programs: {:.4}", report.accuracy.average);
    if report.dataset.is_none() {
        println!("no preference pairs this iteration");
    }
    Ok(())
}
