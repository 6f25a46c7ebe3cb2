#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use kipg::executor::ExecutionLimits;
use kipg::gateway::{Endpoint, Gateway, MockBackend, ModelRole, PromptSet};
use kipg::preference::{load_candidates, CandidateRecord};
use kipg::program::{KnowledgeIntensiveProgram, LintConfig};
use kipg::store::{load_documents, load_instances, DocumentCollection, InstanceSet};

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn corpus() -> (DocumentCollection, InstanceSet) {
    let docs = load_documents(&fixtures().join("corpus/documents.jsonl")).unwrap();
    let set = load_instances(&fixtures().join("corpus/instances.jsonl"), &docs).unwrap();
    (docs, set)
}

pub fn gold_programs() -> Vec<CandidateRecord> {
    load_candidates(&fixtures().join("corpus/programs.jsonl"), &LintConfig::default()).unwrap()
}

pub fn gold(document_id: &str) -> KnowledgeIntensiveProgram {
    gold_programs()
        .into_iter()
        .find(|c| c.document_id == document_id)
        .and_then(|c| c.program())
        .unwrap()
}

pub fn program_file(rel: &str, document_id: &str) -> KnowledgeIntensiveProgram {
    let src = std::fs::read_to_string(fixtures().join(rel)).unwrap();
    KnowledgeIntensiveProgram::new(rel, document_id, src).unwrap()
}

/// Extractor, concluder and retriever bound to the scripted role mock; the
/// generator, when given, to one of the generation mocks.
pub fn gateway(generator: Option<&str>) -> Gateway {
    let roles = Endpoint::new(Arc::new(MockBackend::load(&fixtures().join("mock/roles")).unwrap()));
    let mut g = Gateway::new(PromptSet::default());
    for role in [ModelRole::Extractor, ModelRole::Concluder, ModelRole::LlmRetriever] {
        g.bind(role, roles.clone());
    }
    if let Some(dir) = generator {
        let backend = MockBackend::load(&fixtures().join("mock").join(dir)).unwrap();
        g.bind(ModelRole::Generator, Endpoint::new(Arc::new(backend)));
    }
    g
}

pub fn limits() -> ExecutionLimits {
    ExecutionLimits {
        wall_timeout: Duration::from_secs(2),
        ..ExecutionLimits::default()
    }
}
