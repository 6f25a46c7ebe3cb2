//! Query answering: extract inputs, run the program, conclude.
//!
//! When extraction or execution fails the pipeline does not abort; it asks
//! the concluder to answer from the query and document alone and marks the
//! trace as degraded.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::extract_numeric;
use crate::executor::{execute, ExecutionLimits, ExecutionResult, ExecutorError, VariableBindings};
use crate::gateway::{Gateway, GatewayError};
use crate::program::KnowledgeIntensiveProgram;
use crate::retrieval::{retrieve_llm, LexicalIndex, LlmRecall, RetrievalError, DEFAULT_RECALL_THRESHOLD};
use crate::store::{CalculationInstance, Domain, DocumentCollection, KnowledgeDocument};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Executor(#[from] ExecutorError),
    #[error("program {program} encodes document {program_document}, not {document}")]
    ProgramDocumentMismatch {
        program: String,
        program_document: String,
        document: String,
    },
    #[error("instance {0} cites a document missing from the collection")]
    MissingDocument(String),
    #[error("lexical retrieval requested without an index")]
    NoIndex,
}

impl From<RetrievalError> for PipelineError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::Gateway(g) => PipelineError::Gateway(g),
            RetrievalError::EmptyCollection | RetrievalError::IndexFile { .. } => PipelineError::NoIndex,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Retrieval,
    Extraction,
    Execution,
    Conclusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    Oracle,
    Lexical,
    Llm,
}

impl std::str::FromStr for RetrievalMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "oracle" => Ok(RetrievalMode::Oracle),
            "lexical" => Ok(RetrievalMode::Lexical),
            "llm" => Ok(RetrievalMode::Llm),
            other => Err(format!("unknown retrieval mode {other:?}")),
        }
    }
}

/// How the answering document was chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub mode: RetrievalMode,
    pub gold_document_id: String,
    pub chosen_document_id: Option<String>,
    pub matched_oracle: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub top_k: Vec<(String, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall: Option<LlmRecall>,
    /// The chosen document has no deployed program.
    pub no_program_for_document: bool,
}

/// Full record of answering one instance. Equality ignores timings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub instance_id: String,
    pub document_id: String,
    pub program_id: Option<String>,
    pub bindings: VariableBindings,
    pub extraction_failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extraction_prompt: Option<String>,
    pub execution: Option<ExecutionResult>,
    pub response_text: String,
    #[serde(with = "opt_decimal")]
    pub extracted_numeric: Option<Decimal>,
    pub degraded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<RetrievalRecord>,
    /// Written to the timing sidecar, never to trace files.
    #[serde(skip)]
    pub stage_timings: BTreeMap<Stage, Duration>,
}

mod opt_decimal {
    use rust_decimal::Decimal;
    use serde::{Deserialize, Deserializer, Serializer};
    use std::str::FromStr;

    pub fn serialize<S: Serializer>(v: &Option<Decimal>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(d) => s.serialize_str(&d.to_string()),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Decimal>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|t| Decimal::from_str(&t).map_err(serde::de::Error::custom))
            .transpose()
    }
}

impl PartialEq for PipelineTrace {
    fn eq(&self, other: &Self) -> bool {
        self.instance_id == other.instance_id
            && self.document_id == other.document_id
            && self.program_id == other.program_id
            && self.bindings == other.bindings
            && self.extraction_failed == other.extraction_failed
            && self.extraction_prompt == other.extraction_prompt
            && self.execution == other.execution
            && self.response_text == other.response_text
            && self.extracted_numeric == other.extracted_numeric
            && self.degraded == other.degraded
            && self.retrieval == other.retrieval
    }
}

impl PipelineTrace {
    pub fn total_time(&self) -> Duration {
        self.stage_timings.values().sum()
    }

    pub fn has_outcome(&self) -> bool {
        self.execution.as_ref().is_some_and(|e| e.outcome.is_some())
    }
}

/// Shared handles for running the pipeline.
#[derive(Clone, Copy)]
pub struct PipelineContext<'a> {
    pub gateway: &'a Gateway,
    pub limits: &'a ExecutionLimits,
    pub extraction_retries: usize,
    /// Skip the concluder when the program path fails. Scoring uses this:
    /// a failed run already decides the program's score.
    pub conclude_degraded: bool,
}

impl<'a> PipelineContext<'a> {
    pub fn new(gateway: &'a Gateway, limits: &'a ExecutionLimits) -> Self {
        PipelineContext {
            gateway,
            limits,
            extraction_retries: 2,
            conclude_degraded: true,
        }
    }
}

fn timed<T>(timings: &mut BTreeMap<Stage, Duration>, stage: Stage, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    *timings.entry(stage).or_default() += start.elapsed();
    out
}

fn run(
    instance: &CalculationInstance,
    document: &KnowledgeDocument,
    program: Option<&KnowledgeIntensiveProgram>,
    ctx: &PipelineContext<'_>,
    mut timings: BTreeMap<Stage, Duration>,
) -> Result<PipelineTrace, PipelineError> {
    let mut trace = PipelineTrace {
        instance_id: instance.id.clone(),
        document_id: document.id.clone(),
        program_id: program.map(|p| p.id.clone()),
        bindings: VariableBindings::new(),
        extraction_failed: false,
        extraction_prompt: None,
        execution: None,
        response_text: String::new(),
        extracted_numeric: None,
        degraded: true,
        retrieval: None,
        stage_timings: BTreeMap::new(),
    };

    if let Some(program) = program {
        if program.document_id != document.id {
            return Err(PipelineError::ProgramDocumentMismatch {
                program: program.id.clone(),
                program_document: program.document_id.clone(),
                document: document.id.clone(),
            });
        }
        let extraction = timed(&mut timings, Stage::Extraction, || {
            ctx.gateway
                .extract_variables(&instance.query, &program.metadata, ctx.extraction_retries)
        })?;
        trace.extraction_prompt = Some(extraction.prompt);
        trace.extraction_failed = extraction.extraction_failed;
        trace.bindings = extraction.bindings;
        if !trace.extraction_failed {
            let result = timed(&mut timings, Stage::Execution, || {
                execute(program, &trace.bindings, ctx.limits)
            })?;
            trace.degraded = !result.is_success();
            trace.execution = Some(result);
        }
    }

    let outcome = trace
        .execution
        .as_ref()
        .filter(|_| !trace.degraded)
        .and_then(|e| e.outcome.as_ref());
    if outcome.is_some() || ctx.conclude_degraded {
        let empty = VariableBindings::new();
        let bindings = if outcome.is_some() { &trace.bindings } else { &empty };
        let conclusion = timed(&mut timings, Stage::Conclusion, || {
            ctx.gateway.conclude(&instance.query, document, bindings, outcome)
        })?;
        trace.response_text = conclusion.text;
        trace.extracted_numeric = extract_numeric(&trace.response_text);
    }
    trace.stage_timings = timings;
    Ok(trace)
}

/// Answers `instance` from `document` through `program`.
pub fn answer_query(
    instance: &CalculationInstance,
    document: &KnowledgeDocument,
    program: &KnowledgeIntensiveProgram,
    ctx: &PipelineContext<'_>,
) -> Result<PipelineTrace, PipelineError> {
    run(instance, document, Some(program), ctx, BTreeMap::new())
}

/// Answers from the document alone.
pub fn answer_without_program(
    instance: &CalculationInstance,
    document: &KnowledgeDocument,
    ctx: &PipelineContext<'_>,
) -> Result<PipelineTrace, PipelineError> {
    run(instance, document, None, ctx, BTreeMap::new())
}

/// Deployed program per document id.
pub type ProgramStore = BTreeMap<String, KnowledgeIntensiveProgram>;

/// Inputs of the retrieval step.
pub struct RetrievalSetup<'a> {
    pub mode: RetrievalMode,
    pub collection: &'a DocumentCollection,
    pub index: Option<&'a LexicalIndex>,
    /// Candidates kept in the trace; only the first is answered from.
    pub k: usize,
    pub recall_threshold: f64,
}

impl<'a> RetrievalSetup<'a> {
    pub fn oracle(collection: &'a DocumentCollection) -> Self {
        RetrievalSetup {
            mode: RetrievalMode::Oracle,
            collection,
            index: None,
            k: 1,
            recall_threshold: DEFAULT_RECALL_THRESHOLD,
        }
    }
}

fn pseudo_document(id: &str, title: &str, body: &str) -> KnowledgeDocument {
    KnowledgeDocument {
        id: id.into(),
        domain: Domain::Other("retrieved".into()),
        case_type: String::new(),
        subtype: String::new(),
        title: title.into(),
        body: body.into(),
    }
}

/// Chooses a document for the instance, then answers through its deployed
/// program (or degraded, when the document has none).
pub fn answer_with_retrieval(
    instance: &CalculationInstance,
    setup: &RetrievalSetup<'_>,
    programs: &ProgramStore,
    ctx: &PipelineContext<'_>,
) -> Result<PipelineTrace, PipelineError> {
    let gold = instance.primary_document().to_string();
    let mut timings = BTreeMap::new();
    let mut record = RetrievalRecord {
        mode: setup.mode,
        gold_document_id: gold.clone(),
        chosen_document_id: None,
        matched_oracle: false,
        top_k: Vec::new(),
        recall: None,
        no_program_for_document: false,
    };

    let mut fallback_document = None;
    timed(&mut timings, Stage::Retrieval, || -> Result<(), PipelineError> {
        match setup.mode {
            RetrievalMode::Oracle => record.chosen_document_id = Some(gold.clone()),
            RetrievalMode::Lexical => {
                let index = setup.index.ok_or(PipelineError::NoIndex)?;
                record.top_k = index.retrieve(&instance.query, setup.k.max(1));
                record.chosen_document_id = record.top_k.first().map(|(id, _)| id.clone());
            }
            RetrievalMode::Llm => {
                let recall = retrieve_llm(
                    &instance.query,
                    ctx.gateway,
                    setup.collection,
                    setup.recall_threshold,
                )?;
                if recall.hallucinated {
                    fallback_document = Some(pseudo_document(
                        "llm-recall",
                        "Recalled article",
                        &recall.recalled_text,
                    ));
                } else {
                    record.chosen_document_id = recall.matched_document_id.clone();
                }
                record.recall = Some(recall);
            }
        }
        Ok(())
    })?;
    record.matched_oracle = record.chosen_document_id.as_deref() == Some(gold.as_str());

    let document = match &record.chosen_document_id {
        Some(id) => setup
            .collection
            .get(id)
            .cloned()
            .ok_or_else(|| PipelineError::MissingDocument(instance.id.clone()))?,
        None => fallback_document
            .unwrap_or_else(|| pseudo_document("none", "No document retrieved", "(no document)")),
    };
    let program = record
        .chosen_document_id
        .as_ref()
        .and_then(|id| programs.get(id));
    record.no_program_for_document = program.is_none();

    let mut trace = run(instance, &document, program, ctx, timings)?;
    trace.retrieval = Some(record);
    Ok(trace)
}

/// Answers many instances on a pool of `parallelism` workers, in input order.
pub fn answer_batch(
    instances: &[&CalculationInstance],
    setup: &RetrievalSetup<'_>,
    programs: &ProgramStore,
    ctx: &PipelineContext<'_>,
    parallelism: usize,
) -> Result<Vec<PipelineTrace>, PipelineError> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .expect("worker pool");
    pool.install(|| {
        instances
            .par_iter()
            .map(|i| answer_with_retrieval(i, setup, programs, ctx))
            .collect()
    })
}
