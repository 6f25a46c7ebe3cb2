mod common;

use kipg::evaluation::{evaluate, trace_is_correct};
use kipg::executor::ExecutionStatus;
use kipg::gateway::{Gateway, PromptSet};
use kipg::pipeline::{
    answer_batch, answer_query, answer_with_retrieval, PipelineContext, PipelineError,
    ProgramStore, RetrievalMode, RetrievalSetup, Stage,
};
use kipg::preference::deployable_programs;
use kipg::retrieval::{LexicalIndex, DEFAULT_RECALL_THRESHOLD};
use rust_decimal::Decimal;
use serde_json::json;

use common::*;

#[test]
fn litigation_fee_end_to_end() {
    let (docs, set) = corpus();
    let g = gateway(None);
    let limits = limits();
    let ctx = PipelineContext::new(&g, &limits);
    let t = answer_query(
        set.get("q-lit-1").unwrap(),
        docs.get("art-13").unwrap(),
        &gold("art-13"),
        &ctx,
    )
    .unwrap();
    assert!(!t.degraded);
    let exec = t.execution.as_ref().unwrap();
    assert_eq!(exec.status, ExecutionStatus::Success);
    assert_eq!(exec.outcome.as_ref().unwrap().get("total_fee"), Some(&json!(1450.0)));
    assert!(t.response_text.ends_with("So the answer is 1450 yuan."), "{}", t.response_text);
    assert_eq!(t.extracted_numeric, Some(Decimal::from(1450)));
    assert!(t.stage_timings.contains_key(&Stage::Execution));
}

#[test]
fn concluder_answers_the_queried_output() {
    let (docs, set) = corpus();
    let g = gateway(None);
    let limits = limits();
    let ctx = PipelineContext::new(&g, &limits);
    let t = answer_query(
        set.get("q-lit-2").unwrap(),
        docs.get("art-13").unwrap(),
        &gold("art-13"),
        &ctx,
    )
    .unwrap();
    assert!(t.response_text.ends_with("So the answer is 1700 yuan."));
}

#[test]
fn post_calculation_happens_in_the_concluder() {
    let (docs, set) = corpus();
    let g = gateway(None);
    let limits = limits();
    let ctx = PipelineContext::new(&g, &limits);
    let inst = set.get("q-lit-4").unwrap();
    let t = answer_query(inst, docs.get("art-13").unwrap(), &gold("art-13"), &ctx).unwrap();
    // The program knows nothing about installments.
    let outcome = t.execution.as_ref().unwrap().outcome.as_ref().unwrap();
    assert_eq!(outcome.get("total_fee"), Some(&json!(1450.0)));
    assert_eq!(t.extracted_numeric, Some("120.8333".parse().unwrap()));
    assert!(trace_is_correct(&t, inst.reference_answer));
}

#[test]
fn lost_wages_reference_case() {
    let (docs, set) = corpus();
    let g = gateway(None);
    let limits = limits();
    let ctx = PipelineContext::new(&g, &limits);
    let inst = set.get("q-wage-1").unwrap();
    let t = answer_query(inst, docs.get("art-7").unwrap(), &gold("art-7"), &ctx).unwrap();
    assert_eq!(t.bindings.get("industry_salary"), Some(&json!(80000)));
    assert_eq!(t.extracted_numeric, Some("1095.89".parse().unwrap()));
}

#[test]
fn oracle_batch_is_fully_correct_and_repeatable() {
    let (docs, set) = corpus();
    let g = gateway(None);
    let limits = limits();
    let ctx = PipelineContext::new(&g, &limits);
    let store = deployable_programs(&gold_programs(), None);
    let all: Vec<_> = set.iter().collect();
    let setup = RetrievalSetup::oracle(&docs);
    let first = answer_batch(&all, &setup, &store, &ctx, 4).unwrap();
    let report = evaluate(&first, &set).unwrap();
    assert_eq!(report.average, 1.0, "{:?}", report.failures);
    assert!(first.iter().all(|t| !t.degraded));

    let second = answer_batch(&all, &setup, &store, &ctx, 2).unwrap();
    assert_eq!(first, second);

    // Oracle retrieval answers exactly as the direct call does.
    let direct = answer_query(all[0], docs.get("art-13").unwrap(), &gold("art-13"), &ctx).unwrap();
    assert_eq!(first[0].response_text, direct.response_text);
    assert_eq!(first[0].execution, direct.execution);
}

#[test]
fn lexical_retrieval_logs_candidates() {
    let (docs, set) = corpus();
    let g = gateway(None);
    let limits = limits();
    let ctx = PipelineContext::new(&g, &limits);
    let index = LexicalIndex::build(&docs).unwrap();
    let setup = RetrievalSetup {
        mode: RetrievalMode::Lexical,
        collection: &docs,
        index: Some(&index),
        k: 3,
        recall_threshold: DEFAULT_RECALL_THRESHOLD,
    };
    let store = deployable_programs(&gold_programs(), None);
    let t = answer_with_retrieval(set.get("q-fine-2").unwrap(), &setup, &store, &ctx).unwrap();
    let r = t.retrieval.unwrap();
    assert_eq!(r.chosen_document_id.as_deref(), Some("art-57"));
    assert!(r.matched_oracle);
    assert!(!r.top_k.is_empty() && r.top_k.len() <= 3);

    let no_index = RetrievalSetup { index: None, ..setup };
    assert!(matches!(
        answer_with_retrieval(set.get("q-fine-2").unwrap(), &no_index, &store, &ctx),
        Err(PipelineError::NoIndex)
    ));
}

#[test]
fn llm_recall_matches_or_flags_hallucination() {
    let (docs, set) = corpus();
    let g = gateway(None);
    let limits = limits();
    let ctx = PipelineContext::new(&g, &limits);
    let store = deployable_programs(&gold_programs(), None);
    let setup = RetrievalSetup {
        mode: RetrievalMode::Llm,
        ..RetrievalSetup::oracle(&docs)
    };
    let t = answer_with_retrieval(set.get("q-fine-1").unwrap(), &setup, &store, &ctx).unwrap();
    assert_eq!(t.retrieval.as_ref().unwrap().chosen_document_id.as_deref(), Some("art-57"));
    assert!(!t.degraded);

    let t = answer_with_retrieval(set.get("q-lit-3").unwrap(), &setup, &store, &ctx).unwrap();
    let r = t.retrieval.as_ref().unwrap();
    assert!(r.recall.as_ref().unwrap().hallucinated);
    assert_eq!(r.chosen_document_id, None);
    assert!(t.degraded);
    assert_eq!(t.document_id, "llm-recall");
}

#[test]
fn missing_program_degrades() {
    let (docs, set) = corpus();
    let g = gateway(None);
    let limits = limits();
    let ctx = PipelineContext::new(&g, &limits);
    let all: Vec<_> = set.iter().collect();
    let traces =
        answer_batch(&all, &RetrievalSetup::oracle(&docs), &ProgramStore::new(), &ctx, 4).unwrap();
    assert!(traces.iter().all(|t| t.degraded && t.execution.is_none()));
    assert!(traces.iter().all(|t| t.retrieval.as_ref().unwrap().no_program_for_document));
    assert!(traces[0].response_text.contains("restate the rule"));
}

#[test]
fn failed_extraction_skips_execution() {
    let (docs, set) = corpus();
    let g = gateway(None);
    let limits = limits();
    let ctx = PipelineContext::new(&g, &limits);
    let t = answer_query(
        set.get("q-fine-1").unwrap(),
        docs.get("art-57").unwrap(),
        &gold("art-13"),
        &ctx,
    );
    assert!(matches!(t, Err(PipelineError::ProgramDocumentMismatch { .. })));

    // The fine extractor reply names no input of the litigation program.
    let mut wrong = gold("art-13");
    wrong.document_id = "art-57".into();
    let t = answer_query(set.get("q-fine-1").unwrap(), docs.get("art-57").unwrap(), &wrong, &ctx)
        .unwrap();
    assert!(t.extraction_failed);
    assert!(t.execution.is_none());
    assert!(t.degraded);
}

#[test]
fn unbound_role_is_an_error() {
    let (docs, set) = corpus();
    let g = Gateway::new(PromptSet::default());
    let limits = limits();
    let ctx = PipelineContext::new(&g, &limits);
    let r = answer_query(
        set.get("q-lit-1").unwrap(),
        docs.get("art-13").unwrap(),
        &gold("art-13"),
        &ctx,
    );
    assert!(matches!(r, Err(PipelineError::Gateway(_))));
}
