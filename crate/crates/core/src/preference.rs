//! Program scoring, negative filtering and preference-pair datasets.
//!
//! Every sampled program is scored by routing the training queries of its
//! document through the pipeline. A program that crashes, declares fuzzy
//! parameters or uses a hallucination keyword is negative (score -1). Valid
//! programs are preferred over every lower-scoring valid program and over
//! every negative one; equal scores give no pair.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{trace_is_correct, AccuracyReport};
use crate::executor::ExecutionStatus;
use crate::gateway::{Gateway, GatewayError, PromptSet, SamplingConfig};
use crate::jsonl;
use crate::pipeline::{answer_query, PipelineContext, PipelineError, PipelineTrace};
use crate::program::{
    count_logic_lines, lint_program, parse_metadata, KnowledgeIntensiveProgram, LintConfig,
    LintReport, MetadataError, ProgramMetadata,
};
use crate::store::{CalculationInstance, DocumentCollection, InstanceSet, Split};

#[derive(Debug, Error)]
pub enum PreferenceError {
    #[error("no preference pairs to emit")]
    EmptyPairSet,
    #[error("no verified traces to emit")]
    EmptyTraceSet,
    #[error("no source text for program {0:?}")]
    MissingSource(String),
    #[error("unknown document {0:?}")]
    UnknownDocument(String),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PreferenceError + '_ {
    move |source| PreferenceError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeReason {
    RuntimeError,
    FuzzyParams,
    HallucinationKeyword,
}

/// A program's correctness: an exact fraction, or the negative sentinel.
/// Negatives order below every valid score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Score {
    Negative,
    Valid(Ratio<u32>),
}

impl Score {
    pub fn as_f64(self) -> f64 {
        match self {
            Score::Negative => -1.0,
            Score::Valid(r) => *r.numer() as f64 / *r.denom() as f64,
        }
    }

    pub fn is_valid(self) -> bool {
        matches!(self, Score::Valid(_))
    }
}

impl Ord for Score {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Score::Negative, Score::Negative) => Ordering::Equal,
            (Score::Negative, Score::Valid(_)) => Ordering::Less,
            (Score::Valid(_), Score::Negative) => Ordering::Greater,
            (Score::Valid(a), Score::Valid(b)) => a.cmp(b),
        }
    }
}

impl PartialOrd for Score {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Score::Negative => f.write_str("-1"),
            Score::Valid(r) => write!(f, "{}/{}", r.numer(), r.denom()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgramScore {
    pub program_id: String,
    pub score: Score,
    pub n_instances: u32,
    pub n_correct: u32,
    pub negative_reasons: Vec<NegativeReason>,
    /// `None` for programs whose header could not be parsed.
    pub logic_line_count: Option<usize>,
}

impl ProgramScore {
    /// Builds a score from counts; any negative reason forces -1.
    pub fn new(
        program_id: impl Into<String>,
        n_correct: u32,
        n_instances: u32,
        mut negative_reasons: Vec<NegativeReason>,
        logic_line_count: Option<usize>,
    ) -> Self {
        negative_reasons.sort();
        negative_reasons.dedup();
        let score = if !negative_reasons.is_empty() {
            Score::Negative
        } else if n_instances == 0 {
            Score::Valid(Ratio::from_integer(0))
        } else {
            Score::Valid(Ratio::new(n_correct, n_instances))
        };
        ProgramScore {
            program_id: program_id.into(),
            score,
            n_instances,
            n_correct,
            negative_reasons,
            logic_line_count,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ProgramScoreRecord {
    program_id: String,
    score: f64,
    n_instances: u32,
    n_correct: u32,
    negative_reasons: Vec<NegativeReason>,
    #[serde(default)]
    logic_line_count: Option<usize>,
}

impl Serialize for ProgramScore {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        ProgramScoreRecord {
            program_id: self.program_id.clone(),
            score: self.score.as_f64(),
            n_instances: self.n_instances,
            n_correct: self.n_correct,
            negative_reasons: self.negative_reasons.clone(),
            logic_line_count: self.logic_line_count,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ProgramScore {
    /// The exact score is rebuilt from the counts; the float is informational.
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = ProgramScoreRecord::deserialize(d)?;
        Ok(ProgramScore::new(
            r.program_id,
            r.n_correct,
            r.n_instances,
            r.negative_reasons,
            r.logic_line_count,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    ScoreOrdered,
    ValidOverNegative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub chosen_id: String,
    pub rejected_id: String,
    pub chosen_score: f64,
    pub rejected_score: f64,
    pub pair_kind: PairKind,
}

/// Every (chosen, rejected) pair licensed by the ranking rule, sorted by
/// (chosen id, rejected id).
pub fn build_pairs(
    scored: &[ProgramScore],
    prompt: &str,
    sources: &BTreeMap<String, String>,
) -> Result<Vec<PreferencePair>, PreferenceError> {
    let source = |id: &str| {
        sources
            .get(id)
            .cloned()
            .ok_or_else(|| PreferenceError::MissingSource(id.to_string()))
    };
    let mut pairs = Vec::new();
    for w in scored.iter().filter(|s| s.score.is_valid()) {
        for l in scored {
            if l.score >= w.score {
                continue;
            }
            let pair_kind = if l.score.is_valid() {
                PairKind::ScoreOrdered
            } else {
                PairKind::ValidOverNegative
            };
            pairs.push(PreferencePair {
                prompt: prompt.to_string(),
                chosen: source(&w.program_id)?,
                rejected: source(&l.program_id)?,
                chosen_id: w.program_id.clone(),
                rejected_id: l.program_id.clone(),
                chosen_score: w.score.as_f64(),
                rejected_score: l.score.as_f64(),
                pair_kind,
            });
        }
    }
    pairs.sort_by(|a, b| {
        (a.chosen_id.as_str(), a.rejected_id.as_str()).cmp(&(b.chosen_id.as_str(), b.rejected_id.as_str()))
    });
    Ok(pairs)
}

/// Hyperparameters handed to the external preference trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingParams {
    pub beta: f64,
    pub epochs: u32,
    pub learning_rate: f64,
    pub adapter_rank: u32,
    pub batch_size: u32,
}

impl Default for TrainingParams {
    fn default() -> Self {
        TrainingParams {
            beta: 0.1,
            epochs: 3,
            learning_rate: 5e-5,
            adapter_rank: 8,
            batch_size: 16,
        }
    }
}

impl TrainingParams {
    pub fn validate(&self) -> Result<(), String> {
        let positive = self.beta > 0.0
            && self.epochs > 0
            && self.learning_rate > 0.0
            && self.adapter_rank > 0
            && self.batch_size > 0;
        positive
            .then_some(())
            .ok_or_else(|| "training parameters must all be positive".to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    /// Relative to the manifest's directory.
    pub dataset_path: String,
    pub n_pairs: usize,
    pub beta: f64,
    pub epochs: u32,
    pub learning_rate: f64,
    pub adapter_rank: u32,
    pub batch_size: u32,
    pub iteration_index: u32,
}

#[derive(Serialize)]
struct DpoRecord<'a> {
    prompt: &'a str,
    chosen: &'a str,
    rejected: &'a str,
}

pub const DPO_FILE: &str = "dpo.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `dpo.jsonl` and `manifest.json` into `dir`.
pub fn emit_dpo_dataset(
    pairs: &[PreferencePair],
    dir: &Path,
    params: &TrainingParams,
    iteration_index: u32,
) -> Result<TrainingManifest, PreferenceError> {
    if pairs.is_empty() {
        return Err(PreferenceError::EmptyPairSet);
    }
    let records: Vec<DpoRecord<'_>> = pairs
        .iter()
        .map(|p| DpoRecord {
            prompt: &p.prompt,
            chosen: &p.chosen,
            rejected: &p.rejected,
        })
        .collect();
    let dataset = dir.join(DPO_FILE);
    jsonl::write(&dataset, &records).map_err(io_err(&dataset))?;
    let manifest = TrainingManifest {
        dataset_path: DPO_FILE.to_string(),
        n_pairs: pairs.len(),
        beta: params.beta,
        epochs: params.epochs,
        learning_rate: params.learning_rate,
        adapter_rank: params.adapter_rank,
        batch_size: params.batch_size,
        iteration_index,
    };
    let path = dir.join(MANIFEST_FILE);
    jsonl::write_pretty(&path, &manifest).map_err(io_err(&path))?;
    Ok(manifest)
}

/// Highest valid score; ties go to fewer logic lines, then the smaller id.
pub fn select_best_program(scored: &[ProgramScore]) -> Option<String> {
    scored
        .iter()
        .filter(|s| s.score.is_valid())
        .min_by(|a, b| {
            b.score
                .cmp(&a.score)
                .then_with(|| {
                    a.logic_line_count
                        .unwrap_or(usize::MAX)
                        .cmp(&b.logic_line_count.unwrap_or(usize::MAX))
                })
                .then_with(|| a.program_id.cmp(&b.program_id))
        })
        .map(|s| s.program_id.clone())
}

pub const DEFAULT_SMALL_SET_THRESHOLD: f64 = 0.25;

/// Ids of valid programs whose small-set score reaches `threshold`.
pub fn small_set_filter(scored_on_small: &[ProgramScore], threshold: f64) -> Vec<String> {
    scored_on_small
        .iter()
        .filter(|s| match s.score {
            Score::Negative => false,
            Score::Valid(r) => *r.numer() as f64 >= threshold * *r.denom() as f64 - 1e-12,
        })
        .map(|s| s.program_id.clone())
        .collect()
}

/// Score plus the traces it was computed from.
#[derive(Debug, Clone)]
pub struct ScoredProgram {
    pub score: ProgramScore,
    pub traces: Vec<PipelineTrace>,
}

fn lint_reasons(lint: &LintReport) -> Vec<NegativeReason> {
    let mut reasons = Vec::new();
    if !lint.fuzzy_params.is_empty() {
        reasons.push(NegativeReason::FuzzyParams);
    }
    if !lint.hallucination_hits.is_empty() {
        reasons.push(NegativeReason::HallucinationKeyword);
    }
    reasons
}

fn fold_score(
    program: &KnowledgeIntensiveProgram,
    lint: &LintReport,
    traces: Vec<PipelineTrace>,
    instances: &[&CalculationInstance],
) -> ScoredProgram {
    let mut reasons = lint_reasons(lint);
    let mut n_correct = 0;
    for (t, inst) in traces.iter().zip(instances) {
        let crashed = t
            .execution
            .as_ref()
            .is_some_and(|e| e.status != ExecutionStatus::Success);
        if crashed {
            reasons.push(NegativeReason::RuntimeError);
        }
        if trace_is_correct(t, inst.reference_answer) {
            n_correct += 1;
        }
    }
    ScoredProgram {
        score: ProgramScore::new(
            program.id.clone(),
            n_correct,
            instances.len() as u32,
            reasons,
            Some(program.logic_line_count),
        ),
        traces,
    }
}

/// Scores one program on the given instances of its document.
///
/// Runtime failures (error, timeout, protocol violation) on any instance and
/// the lint rules make the program negative. Extraction failures only count
/// as wrong answers.
pub fn score_program(
    program: &KnowledgeIntensiveProgram,
    instances: &[&CalculationInstance],
    collection: &DocumentCollection,
    lint: &LintReport,
    ctx: &PipelineContext<'_>,
) -> Result<ScoredProgram, PreferenceError> {
    let document = collection
        .get(&program.document_id)
        .ok_or_else(|| PreferenceError::UnknownDocument(program.document_id.clone()))?;
    let ctx = PipelineContext {
        conclude_degraded: false,
        ..*ctx
    };
    let traces = instances
        .iter()
        .map(|i| answer_query(i, document, program, &ctx))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(fold_score(program, lint, traces, instances))
}

/// Scores several programs of one document, fanning (program, instance)
/// jobs out over `parallelism` workers.
pub fn score_programs(
    programs: &[(&KnowledgeIntensiveProgram, &LintReport)],
    instances: &[&CalculationInstance],
    collection: &DocumentCollection,
    ctx: &PipelineContext<'_>,
    parallelism: usize,
) -> Result<Vec<ScoredProgram>, PreferenceError> {
    use rayon::prelude::*;
    let ctx = PipelineContext {
        conclude_degraded: false,
        ..*ctx
    };
    let jobs: Vec<(usize, usize)> = (0..programs.len())
        .flat_map(|p| (0..instances.len()).map(move |i| (p, i)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .expect("worker pool");
    let traces: Vec<PipelineTrace> = pool.install(|| {
        jobs.par_iter()
            .map(|&(p, i)| -> Result<PipelineTrace, PreferenceError> {
                let program = programs[p].0;
                let document = collection
                    .get(&program.document_id)
                    .ok_or_else(|| PreferenceError::UnknownDocument(program.document_id.clone()))?;
                Ok(answer_query(instances[i], document, program, &ctx)?)
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    let mut traces = traces.into_iter();
    Ok(programs
        .iter()
        .map(|(program, lint)| {
            let chunk: Vec<PipelineTrace> = traces.by_ref().take(instances.len()).collect();
            fold_score(program, lint, chunk, instances)
        })
        .collect())
}

/// One sampled program as persisted in `programs.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub id: String,
    pub document_id: String,
    #[serde(default)]
    pub iteration_index: u32,
    pub source_text: String,
    #[serde(default)]
    pub truncated: bool,
    #[serde(default)]
    pub metadata: Option<ProgramMetadata>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata_error: Option<MetadataError>,
    #[serde(default)]
    pub logic_line_count: usize,
    #[serde(default)]
    pub lint: Option<LintReport>,
}

impl CandidateRecord {
    /// Parses and lints a program source.
    pub fn analyze(
        id: String,
        document_id: String,
        iteration_index: u32,
        source_text: String,
        truncated: bool,
        lint: &LintConfig,
    ) -> Self {
        let logic_line_count = count_logic_lines(&source_text);
        let mut rec = CandidateRecord {
            id,
            document_id,
            iteration_index,
            source_text,
            truncated,
            metadata: None,
            metadata_error: None,
            logic_line_count,
            lint: None,
        };
        match parse_metadata(&rec.source_text) {
            Ok(m) => {
                rec.metadata = Some(m);
                let program = rec.program().expect("header parsed");
                rec.lint = Some(lint_program(&program, lint));
            }
            Err(e) => rec.metadata_error = Some(e),
        }
        rec
    }

    /// Re-derives metadata and lint from the source text.
    pub fn reanalyzed(self, lint: &LintConfig) -> Self {
        Self::analyze(
            self.id,
            self.document_id,
            self.iteration_index,
            self.source_text,
            self.truncated,
            lint,
        )
    }

    pub fn program(&self) -> Option<KnowledgeIntensiveProgram> {
        self.metadata.as_ref().map(|m| KnowledgeIntensiveProgram {
            id: self.id.clone(),
            document_id: self.document_id.clone(),
            source_text: self.source_text.clone(),
            metadata: m.clone(),
            logic_line_count: self.logic_line_count,
        })
    }
}

/// Reads `programs.jsonl`. Metadata and lint are always re-derived from the
/// source text, so hand-written records need only `id`, `document_id` and
/// `source_text`.
pub fn load_candidates(path: &Path, lint: &LintConfig) -> Result<Vec<CandidateRecord>, PreferenceError> {
    let records = jsonl::read_records(path).map_err(io_err(path))?;
    let mut out = Vec::with_capacity(records.len());
    let mut seen = BTreeSet::new();
    for (line, text) in records {
        let rec: CandidateRecord = serde_json::from_str(&text).map_err(|e| PreferenceError::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        if !seen.insert(rec.id.clone()) {
            return Err(PreferenceError::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("duplicate program id {:?}", rec.id),
            });
        }
        out.push(rec.reanalyzed(lint));
    }
    Ok(out)
}

/// Samples, parses and lints candidate programs for every document.
pub fn generate_candidates(
    collection: &DocumentCollection,
    gateway: &Gateway,
    sampling: &SamplingConfig,
    lint: &LintConfig,
    iteration_index: u32,
) -> Result<Vec<CandidateRecord>, PreferenceError> {
    let mut out = Vec::new();
    for doc in collection.iter() {
        let generated = gateway.generate_programs(doc, sampling)?;
        if generated.fallback_sampling {
            log::warn!(
                "{}: backend lacks diverse beam search; used {} temperature samples",
                doc.id,
                sampling.n_samples
            );
        }
        for (k, c) in generated.candidates.into_iter().enumerate() {
            out.push(CandidateRecord::analyze(
                format!("{}.i{}.c{}", doc.id, iteration_index, k),
                doc.id.clone(),
                iteration_index,
                c.text,
                c.truncated,
                lint,
            ));
        }
    }
    Ok(out)
}

/// Which instances a document's programs are scored on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSplit {
    #[default]
    Train,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringConfig {
    pub split: ScoreSplit,
    /// Pre-screen on `small_train` and keep programs at or above this score.
    pub small_set_threshold: Option<f64>,
    pub parallelism: usize,
    pub extraction_retries: usize,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            split: ScoreSplit::Train,
            small_set_threshold: None,
            parallelism: 4,
            extraction_retries: 2,
        }
    }
}

/// Scores of all candidates of one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentScores {
    pub document_id: String,
    /// Final scores: negatives from any stage, full-set scores of programs
    /// that passed the small-set screen. Screened-out programs are absent.
    pub scores: Vec<ProgramScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub small_set_scores: Option<Vec<ProgramScore>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retained: Option<Vec<String>>,
    pub selected: Option<String>,
    /// Per-instance correctness of the selected program.
    pub selected_results: BTreeMap<String, bool>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSheet {
    pub iteration_index: u32,
    pub documents: Vec<DocumentScores>,
}

fn scoring_instances<'a>(
    instances: &'a InstanceSet,
    document_id: &str,
    split: ScoreSplit,
) -> Vec<&'a CalculationInstance> {
    instances
        .for_document(document_id)
        .filter(|i| split == ScoreSplit::All || i.split.is_train())
        .collect()
}

/// Scores every candidate, document by document.
pub fn score_candidates(
    candidates: &[CandidateRecord],
    collection: &DocumentCollection,
    instances: &InstanceSet,
    gateway: &Gateway,
    limits: &crate::executor::ExecutionLimits,
    config: &ScoringConfig,
    iteration_index: u32,
) -> Result<ScoreSheet, PreferenceError> {
    let mut ctx = PipelineContext::new(gateway, limits);
    ctx.extraction_retries = config.extraction_retries;

    let mut by_doc: BTreeMap<&str, Vec<&CandidateRecord>> = BTreeMap::new();
    for c in candidates {
        if collection.get(&c.document_id).is_none() {
            return Err(PreferenceError::UnknownDocument(c.document_id.clone()));
        }
        by_doc.entry(c.document_id.as_str()).or_default().push(c);
    }

    let mut documents = Vec::new();
    for doc in collection.iter() {
        let Some(cands) = by_doc.get(doc.id.as_str()) else {
            continue;
        };
        let mut notes = Vec::new();
        let mut negatives: Vec<ProgramScore> = Vec::new();
        let mut parsed: Vec<(KnowledgeIntensiveProgram, LintReport)> = Vec::new();
        for c in cands {
            match (c.program(), &c.lint) {
                (Some(p), Some(l)) => parsed.push((p, l.clone())),
                _ => {
                    // No usable header means no parameter definitions at all.
                    notes.push(format!(
                        "{}: header unparseable ({})",
                        c.id,
                        c.metadata_error
                            .as_ref()
                            .map_or("missing lint".to_string(), |e| e.to_string())
                    ));
                    negatives.push(ProgramScore::new(
                        c.id.clone(),
                        0,
                        0,
                        vec![NegativeReason::FuzzyParams],
                        None,
                    ));
                }
            }
        }

        let full_set = scoring_instances(instances, &doc.id, config.split);
        let mut small_set_scores = None;
        let mut retained = None;
        let mut to_score: Vec<&(KnowledgeIntensiveProgram, LintReport)> = parsed.iter().collect();

        if let Some(threshold) = config.small_set_threshold {
            let small: Vec<&CalculationInstance> = instances
                .for_document(&doc.id)
                .filter(|i| i.split == Split::SmallTrain)
                .collect();
            let jobs: Vec<_> = parsed.iter().map(|(p, l)| (p, l)).collect();
            let scored = score_programs(&jobs, &small, collection, &ctx, config.parallelism)?;
            let small_scores: Vec<ProgramScore> = scored.into_iter().map(|s| s.score).collect();
            let keep = small_set_filter(&small_scores, threshold);
            negatives.extend(small_scores.iter().filter(|s| !s.score.is_valid()).cloned());
            to_score.retain(|(p, _)| keep.contains(&p.id));
            small_set_scores = Some(small_scores);
            retained = Some(keep);
        }

        let jobs: Vec<_> = to_score.iter().map(|(p, l)| (p, l)).collect();
        let scored = score_programs(&jobs, &full_set, collection, &ctx, config.parallelism)?;

        let mut scores: Vec<ProgramScore> = negatives;
        let mut results_by_id: BTreeMap<String, BTreeMap<String, bool>> = BTreeMap::new();
        for s in scored {
            let results = s
                .traces
                .iter()
                .zip(&full_set)
                .map(|(t, i)| (i.id.clone(), trace_is_correct(t, i.reference_answer)))
                .collect();
            results_by_id.insert(s.score.program_id.clone(), results);
            scores.push(s.score);
        }
        scores.sort_by(|a, b| a.program_id.cmp(&b.program_id));
        let selected = select_best_program(&scores);
        let selected_results = selected
            .as_ref()
            .and_then(|id| results_by_id.remove(id))
            .unwrap_or_default();
        if full_set.is_empty() {
            notes.push("no scoring instances; valid programs score 0".into());
        }
        documents.push(DocumentScores {
            document_id: doc.id.clone(),
            scores,
            small_set_scores,
            retained,
            selected,
            selected_results,
            notes,
        });
    }
    Ok(ScoreSheet {
        iteration_index,
        documents,
    })
}

/// Preference pairs for every document in a score sheet.
pub fn build_dataset(
    sheet: &ScoreSheet,
    candidates: &[CandidateRecord],
    collection: &DocumentCollection,
    prompts: &PromptSet,
) -> Result<Vec<PreferencePair>, PreferenceError> {
    let sources: BTreeMap<String, String> = candidates
        .iter()
        .map(|c| (c.id.clone(), c.source_text.clone()))
        .collect();
    let prompt_gateway = Gateway::new(prompts.clone());
    let mut pairs = Vec::new();
    for d in &sheet.documents {
        if d.scores.is_empty() {
            continue;
        }
        let doc = collection
            .get(&d.document_id)
            .ok_or_else(|| PreferenceError::UnknownDocument(d.document_id.clone()))?;
        let prompt = prompt_gateway.generation_prompt(doc)?;
        pairs.extend(build_pairs(&d.scores, &prompt, &sources)?);
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentIteration {
    pub document_id: String,
    pub candidate_count: usize,
    pub scores: Vec<(String, f64)>,
    pub pair_count: usize,
    pub selected: Option<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration_index: u32,
    pub documents: Vec<DocumentIteration>,
    /// Accuracy of the selected programs on the scoring instances.
    pub accuracy: AccuracyReport,
    pub dataset: Option<TrainingManifest>,
}

pub const PROGRAMS_FILE: &str = "programs.jsonl";
pub const SCORES_FILE: &str = "scores.json";
pub const REPORT_FILE: &str = "iteration_report.json";

/// Per-document pair counts over the dataset.
fn pair_counts(pairs: &[PreferencePair], candidates: &[CandidateRecord]) -> BTreeMap<String, usize> {
    let doc_of: BTreeMap<&str, &str> = candidates
        .iter()
        .map(|c| (c.id.as_str(), c.document_id.as_str()))
        .collect();
    let mut counts = BTreeMap::new();
    for p in pairs {
        if let Some(d) = doc_of.get(p.chosen_id.as_str()) {
            *counts.entry(d.to_string()).or_insert(0) += 1;
        }
    }
    counts
}

pub fn iteration_report(
    sheet: &ScoreSheet,
    candidates: &[CandidateRecord],
    pairs: &[PreferencePair],
    instances: &InstanceSet,
    split: ScoreSplit,
    dataset: Option<TrainingManifest>,
) -> IterationReport {
    let counts = pair_counts(pairs, candidates);
    let mut judged: Vec<(&str, &str, bool)> = Vec::new();
    let mut documents = Vec::new();
    for d in &sheet.documents {
        for inst in scoring_instances(instances, &d.document_id, split) {
            let correct = d.selected_results.get(&inst.id).copied().unwrap_or(false);
            judged.push((inst.case_type.as_str(), inst.id.as_str(), correct));
        }
        let score_of = |id: &str| {
            d.scores
                .iter()
                .find(|s| s.program_id == id)
                .map_or(-1.0, |s| s.score.as_f64())
        };
        documents.push(DocumentIteration {
            document_id: d.document_id.clone(),
            candidate_count: candidates
                .iter()
                .filter(|c| c.document_id == d.document_id)
                .count(),
            scores: d
                .scores
                .iter()
                .map(|s| (s.program_id.clone(), s.score.as_f64()))
                .collect(),
            pair_count: counts.get(&d.document_id).copied().unwrap_or(0),
            selected: d.selected.as_ref().map(|id| (id.clone(), score_of(id))),
        });
    }
    IterationReport {
        iteration_index: sheet.iteration_index,
        documents,
        accuracy: AccuracyReport::from_judgements(judged),
        dataset,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationConfig {
    pub iteration_index: u32,
    pub sampling: SamplingConfig,
    pub lint: LintConfig,
    pub scoring: ScoringConfig,
    pub training: TrainingParams,
    pub limits: crate::executor::ExecutionLimits,
}

impl Default for IterationConfig {
    fn default() -> Self {
        IterationConfig {
            iteration_index: 1,
            sampling: SamplingConfig::default(),
            lint: LintConfig::default(),
            scoring: ScoringConfig::default(),
            training: TrainingParams::default(),
            limits: crate::executor::ExecutionLimits::default(),
        }
    }
}

/// One round of the improvement loop: generate, score, pair, emit.
///
/// Artifacts land in `out_dir`. Datasets are never merged with earlier
/// iterations; the next round starts from a retrained generator endpoint.
pub fn run_iteration(
    config: &IterationConfig,
    collection: &DocumentCollection,
    instances: &InstanceSet,
    gateway: &Gateway,
    out_dir: &Path,
) -> Result<IterationReport, PreferenceError> {
    let candidates = generate_candidates(
        collection,
        gateway,
        &config.sampling,
        &config.lint,
        config.iteration_index,
    )?;
    let path = out_dir.join(PROGRAMS_FILE);
    jsonl::write(&path, &candidates).map_err(io_err(&path))?;

    let sheet = score_candidates(
        &candidates,
        collection,
        instances,
        gateway,
        &config.limits,
        &config.scoring,
        config.iteration_index,
    )?;
    let path = out_dir.join(SCORES_FILE);
    jsonl::write_pretty(&path, &sheet).map_err(io_err(&path))?;

    let pairs = build_dataset(&sheet, &candidates, collection, gateway.prompts())?;
    let dataset = match emit_dpo_dataset(&pairs, out_dir, &config.training, config.iteration_index) {
        Ok(m) => Some(m),
        Err(PreferenceError::EmptyPairSet) => None,
        Err(e) => return Err(e),
    };
    let report = iteration_report(
        &sheet,
        &candidates,
        &pairs,
        instances,
        config.scoring.split,
        dataset,
    );
    let path = out_dir.join(REPORT_FILE);
    jsonl::write_pretty(&path, &report).map_err(io_err(&path))?;
    Ok(report)
}

#[derive(Serialize)]
struct SftRecord<'a> {
    prompt: &'a str,
    completion: String,
}

/// Writes extraction fine-tuning records from traces whose extraction
/// succeeded and whose final answer matched the reference.
pub fn emit_extraction_sft_dataset(
    traces: &[PipelineTrace],
    instances: &InstanceSet,
    path: &Path,
) -> Result<usize, PreferenceError> {
    let records: Vec<SftRecord<'_>> = traces
        .iter()
        .filter(|t| !t.extraction_failed)
        .filter(|t| {
            instances
                .get(&t.instance_id)
                .is_some_and(|i| trace_is_correct(t, i.reference_answer))
        })
        .filter_map(|t| {
            t.extraction_prompt.as_deref().map(|prompt| SftRecord {
                prompt,
                completion: serde_json::to_string(&t.bindings).expect("bindings serialize"),
            })
        })
        .collect();
    if records.is_empty() {
        return Err(PreferenceError::EmptyTraceSet);
    }
    jsonl::write(path, &records).map_err(io_err(path))?;
    Ok(records.len())
}

/// Deployed program per document: the selected program of each scored
/// document, or the first parseable candidate when no scores are given.
pub fn deployable_programs(
    candidates: &[CandidateRecord],
    sheet: Option<&ScoreSheet>,
) -> crate::pipeline::ProgramStore {
    let mut store = crate::pipeline::ProgramStore::new();
    match sheet {
        Some(sheet) => {
            let wanted: BTreeSet<&str> = sheet
                .documents
                .iter()
                .filter_map(|d| d.selected.as_deref())
                .collect();
            for c in candidates.iter().filter(|c| wanted.contains(c.id.as_str())) {
                if let Some(p) = c.program() {
                    store.insert(p.document_id.clone(), p);
                }
            }
        }
        None => {
            for c in candidates {
                if let Some(p) = c.program() {
                    store.entry(p.document_id.clone()).or_insert(p);
                }
            }
        }
    }
    store
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn score(id: &str, s: i32, lines: usize) -> ProgramScore {
        // s in quarters; -1 is negative.
        if s < 0 {
            ProgramScore::new(id, 0, 4, vec![NegativeReason::RuntimeError], Some(lines))
        } else {
            ProgramScore::new(id, s as u32, 4, vec![], Some(lines))
        }
    }

    fn sources(scored: &[ProgramScore]) -> BTreeMap<String, String> {
        scored
            .iter()
            .map(|s| (s.program_id.clone(), format!("src-{}", s.program_id)))
            .collect()
    }

    #[test]
    fn rational_scores() {
        let s = ProgramScore::new("p", 3, 4, vec![], None);
        assert_eq!(s.score, Score::Valid(Ratio::new(3, 4)));
        assert_eq!(s.score.as_f64(), 0.75);
        let n = ProgramScore::new("p", 4, 4, vec![NegativeReason::HallucinationKeyword], None);
        assert_eq!(n.score, Score::Negative);
        assert!(Score::Negative < Score::Valid(Ratio::from_integer(0)));
    }

    #[test]
    fn score_json_round_trip_rebuilds_exact_value() {
        let s = ProgramScore::new("p", 1, 3, vec![], Some(7));
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("\"score\":0.3333333333333333"));
        let back: ProgramScore = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn pairs_for_mixed_vector() {
        // 0.8 is not a quarter; use 4/5 directly.
        let scored = vec![
            ProgramScore::new("a", 4, 5, vec![], None),
            ProgramScore::new("b", 1, 2, vec![], None),
            ProgramScore::new("c", 1, 2, vec![], None),
            ProgramScore::new("d", 0, 5, vec![NegativeReason::FuzzyParams], None),
        ];
        let pairs = build_pairs(&scored, "p", &sources(&scored)).unwrap();
        let ids: Vec<(&str, &str)> = pairs
            .iter()
            .map(|p| (p.chosen_id.as_str(), p.rejected_id.as_str()))
            .collect();
        assert_eq!(ids, [("a", "b"), ("a", "c"), ("a", "d"), ("b", "d"), ("c", "d")]);
        assert_eq!(pairs[0].pair_kind, PairKind::ScoreOrdered);
        assert_eq!(pairs[2].pair_kind, PairKind::ValidOverNegative);
        assert_eq!(pairs[0].chosen, "src-a");
    }

    #[test]
    fn ties_and_minimal_cases() {
        let equal = vec![score("a", 2, 1), score("b", 2, 1), score("c", 2, 1)];
        assert!(build_pairs(&equal, "p", &sources(&equal)).unwrap().is_empty());

        let minimal = vec![score("a", 0, 1), score("b", -1, 1)];
        let pairs = build_pairs(&minimal, "p", &sources(&minimal)).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].pair_kind, PairKind::ValidOverNegative);

        let negatives = vec![score("a", -1, 1), score("b", -1, 1)];
        assert!(build_pairs(&negatives, "p", &sources(&negatives)).unwrap().is_empty());

        assert!(matches!(
            build_pairs(&minimal, "p", &BTreeMap::new()),
            Err(PreferenceError::MissingSource(_))
        ));
    }

    #[test]
    fn best_program_tie_breaks() {
        let s = vec![score("a", 3, 9), score("b", 3, 5), score("c", -1, 1)];
        assert_eq!(select_best_program(&s).as_deref(), Some("b"));
        let s = vec![score("z", 3, 5), score("y", 3, 5)];
        assert_eq!(select_best_program(&s).as_deref(), Some("y"));
        assert_eq!(select_best_program(&[score("a", -1, 1), score("b", -1, 1)]), None);
        assert_eq!(select_best_program(&[score("only", 0, 1)]).as_deref(), Some("only"));
        assert_eq!(select_best_program(&[]), None);
    }

    #[test]
    fn small_set_threshold() {
        let s = vec![
            ProgramScore::new("a", 9, 10, vec![], None),
            ProgramScore::new("b", 4, 10, vec![], None),
            ProgramScore::new("c", 0, 10, vec![NegativeReason::RuntimeError], None),
        ];
        assert_eq!(small_set_filter(&s, 0.5), ["a"]);
        assert_eq!(small_set_filter(&s, 0.0), ["a", "b"]);
        assert_eq!(small_set_filter(&[score("q", 1, 1)], 0.25), ["q"]);
    }

    #[test]
    fn dataset_emission() {
        let dir = tempfile::tempdir().unwrap();
        let scored = vec![
            ProgramScore::new("a", 4, 5, vec![], None),
            ProgramScore::new("b", 1, 2, vec![], None),
            ProgramScore::new("c", 1, 2, vec![], None),
            ProgramScore::new("d", 0, 5, vec![NegativeReason::FuzzyParams], None),
        ];
        let pairs = build_pairs(&scored, "prompt", &sources(&scored)).unwrap();
        let m = emit_dpo_dataset(&pairs, dir.path(), &TrainingParams::default(), 2).unwrap();
        assert_eq!(m.beta, 0.1);
        assert_eq!(m.epochs, 3);
        assert_eq!(m.learning_rate, 5e-5);
        assert_eq!(m.adapter_rank, 8);
        assert_eq!(m.batch_size, 16);
        assert_eq!(m.iteration_index, 2);
        let text = std::fs::read_to_string(dir.path().join(DPO_FILE)).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert_eq!(
            text.lines().next().unwrap(),
            r#"{"prompt":"prompt","chosen":"src-a","rejected":"src-b"}"#
        );
        let manifest = std::fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
        emit_dpo_dataset(&pairs, dir.path(), &TrainingParams::default(), 2).unwrap();
        assert_eq!(std::fs::read_to_string(dir.path().join(DPO_FILE)).unwrap(), text);
        assert_eq!(std::fs::read(dir.path().join(MANIFEST_FILE)).unwrap(), manifest);

        assert!(matches!(
            emit_dpo_dataset(&[], dir.path(), &TrainingParams::default(), 1),
            Err(PreferenceError::EmptyPairSet)
        ));
    }

    #[test]
    fn training_params_must_be_positive() {
        assert!(TrainingParams::default().validate().is_ok());
        let bad = TrainingParams {
            epochs: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    /// Independent statement of the ranking rule over raw score values.
    fn brute_force(values: &[i32]) -> BTreeSet<(usize, usize)> {
        let mut out = BTreeSet::new();
        for w in 0..values.len() {
            for l in 0..values.len() {
                let (sw, sl) = (values[w], values[l]);
                if (sw > sl && sl >= 0) || (sw >= 0 && sl == -1) {
                    out.insert((w, l));
                }
            }
        }
        out
    }

    proptest! {
        #[test]
        fn pairs_match_brute_force(values in proptest::collection::vec(
            proptest::sample::select(vec![-1, 0, 1, 2, 3, 4]), 0..=8)) {
            let scored: Vec<ProgramScore> = values
                .iter()
                .enumerate()
                .map(|(i, &v)| score(&format!("p{i}"), v, 1))
                .collect();
            let pairs = build_pairs(&scored, "p", &sources(&scored)).unwrap();
            let got: BTreeSet<(usize, usize)> = pairs
                .iter()
                .map(|p| (p.chosen_id[1..].parse().unwrap(), p.rejected_id[1..].parse().unwrap()))
                .collect();
            prop_assert_eq!(got.len(), pairs.len());
            prop_assert_eq!(got, brute_force(&values));
            for p in &pairs {
                prop_assert!(p.chosen_score > p.rejected_score);
            }
        }

        #[test]
        fn score_times_count_is_exact(n in 1u32..50, c in 0u32..50) {
            let c = c.min(n);
            let s = ProgramScore::new("p", c, n, vec![], None);
            match s.score {
                Score::Valid(r) => prop_assert_eq!(r * Ratio::from_integer(n), Ratio::from_integer(c)),
                Score::Negative => prop_assert!(false),
            }
        }
    }
}
