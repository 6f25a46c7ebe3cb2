//! Document ranking: a BM25 lexical index and LLM recall.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{sha256_hex, Gateway, GatewayError};
use crate::jsonl;
use crate::store::DocumentCollection;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot index an empty collection")]
    EmptyCollection,
    #[error("index file {path}: {message}")]
    IndexFile { path: String, message: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub lowercase: bool,
    pub stopwords: Vec<String>,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        const STOP: &[&str] = &[
            "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "how", "i", "if",
            "in", "is", "it", "much", "my", "of", "on", "or", "our", "shall", "should", "that",
            "the", "this", "to", "was", "we", "what", "which", "will", "with",
        ];
        TokenizerConfig {
            lowercase: true,
            stopwords: STOP.iter().map(|s| s.to_string()).collect(),
        }
    }
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3400..=0x4DBF | 0x4E00..=0x9FFF | 0xF900..=0xFAFF | 0x20000..=0x2FA1F
        | 0x3040..=0x30FF | 0xAC00..=0xD7AF)
}

impl TokenizerConfig {
    /// Words for non-CJK spans, overlapping bigrams for CJK runs (a lone CJK
    /// character is its own token).
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        let mut tokens = Vec::new();
        let mut word = String::new();
        let mut cjk: Vec<char> = Vec::new();

        let flush_word = |word: &mut String, tokens: &mut Vec<String>| {
            if !word.is_empty() {
                let w = if self.lowercase { word.to_lowercase() } else { word.clone() };
                if !self.stopwords.contains(&w) {
                    tokens.push(w);
                }
                word.clear();
            }
        };
        let flush_cjk = |cjk: &mut Vec<char>, tokens: &mut Vec<String>| {
            match cjk.len() {
                0 => {}
                1 => tokens.push(cjk[0].to_string()),
                _ => tokens.extend(cjk.windows(2).map(|w| w.iter().collect())),
            }
            cjk.clear();
        };

        for c in text.chars() {
            if is_cjk(c) {
                flush_word(&mut word, &mut tokens);
                cjk.push(c);
            } else if c.is_alphanumeric() {
                flush_cjk(&mut cjk, &mut tokens);
                word.push(c);
            } else {
                flush_word(&mut word, &mut tokens);
                flush_cjk(&mut cjk, &mut tokens);
            }
        }
        flush_word(&mut word, &mut tokens);
        flush_cjk(&mut cjk, &mut tokens);
        tokens
    }
}

/// Okapi BM25 statistics over a document collection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexicalIndex {
    pub k1: f64,
    pub b: f64,
    pub tokenizer: TokenizerConfig,
    /// Hash of the source collection and index parameters.
    pub fingerprint: String,
    doc_ids: Vec<String>,
    doc_lens: Vec<usize>,
    avg_len: f64,
    doc_freq: BTreeMap<String, usize>,
    term_freqs: Vec<BTreeMap<String, u32>>,
}

fn fingerprint(collection: &DocumentCollection, k1: f64, b: f64, tok: &TokenizerConfig) -> String {
    let params = serde_json::to_string(&(k1, b, tok)).expect("params serialize");
    sha256_hex(&format!("{}\n{params}", collection.to_jsonl()))
}

impl LexicalIndex {
    pub const DEFAULT_K1: f64 = 1.2;
    pub const DEFAULT_B: f64 = 0.75;

    pub fn build(collection: &DocumentCollection) -> Result<Self, RetrievalError> {
        Self::build_with(collection, Self::DEFAULT_K1, Self::DEFAULT_B, TokenizerConfig::default())
    }

    pub fn build_with(
        collection: &DocumentCollection,
        k1: f64,
        b: f64,
        tokenizer: TokenizerConfig,
    ) -> Result<Self, RetrievalError> {
        if collection.is_empty() {
            return Err(RetrievalError::EmptyCollection);
        }
        let mut doc_ids = Vec::new();
        let mut doc_lens = Vec::new();
        let mut term_freqs = Vec::new();
        let mut doc_freq: BTreeMap<String, usize> = BTreeMap::new();
        for doc in collection.iter() {
            let tokens = tokenizer.tokenize(&format!("{}\n{}", doc.title, doc.body));
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for t in tf.keys() {
                *doc_freq.entry(t.clone()).or_default() += 1;
            }
            doc_ids.push(doc.id.clone());
            doc_lens.push(tokens.len());
            term_freqs.push(tf);
        }
        let avg_len = doc_lens.iter().sum::<usize>() as f64 / doc_lens.len() as f64;
        Ok(LexicalIndex {
            k1,
            b,
            fingerprint: fingerprint(collection, k1, b, &tokenizer),
            tokenizer,
            doc_ids,
            doc_lens,
            avg_len,
            doc_freq,
            term_freqs,
        })
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    fn idf(&self, term: &str) -> f64 {
        let n = self.doc_ids.len() as f64;
        let df = *self.doc_freq.get(term).unwrap_or(&0) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Top `k` documents with a positive score, best first; ties by id.
    pub fn retrieve(&self, query: &str, k: usize) -> Vec<(String, f64)> {
        let terms = self.tokenizer.tokenize(query);
        let mut scored: Vec<(String, f64)> = Vec::new();
        for (i, tf) in self.term_freqs.iter().enumerate() {
            let len_norm = if self.avg_len > 0.0 {
                1.0 - self.b + self.b * self.doc_lens[i] as f64 / self.avg_len
            } else {
                1.0
            };
            let mut score = 0.0;
            for t in &terms {
                if let Some(&f) = tf.get(t) {
                    let f = f as f64;
                    score += self.idf(t) * f * (self.k1 + 1.0) / (f + self.k1 * len_norm);
                }
            }
            if score > 0.0 {
                scored.push((self.doc_ids[i].clone(), score));
            }
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored.truncate(k);
        scored
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        jsonl::write_pretty(path, self).map_err(|e| RetrievalError::IndexFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Loads the index at `path` if it was built from `collection` with the
    /// default parameters; otherwise rebuilds and rewrites it.
    pub fn load_or_build(path: &Path, collection: &DocumentCollection) -> Result<Self, RetrievalError> {
        let expected = fingerprint(
            collection,
            Self::DEFAULT_K1,
            Self::DEFAULT_B,
            &TokenizerConfig::default(),
        );
        if let Ok(text) = std::fs::read_to_string(path) {
            if let Ok(index) = serde_json::from_str::<LexicalIndex>(&text) {
                if index.fingerprint == expected {
                    return Ok(index);
                }
            }
        }
        let index = Self::build(collection)?;
        index.save(path)?;
        Ok(index)
    }
}

/// Outcome of asking the retriever role to recall an article.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRecall {
    pub recalled_text: String,
    pub matched_document_id: Option<String>,
    pub similarity: f64,
    pub hallucinated: bool,
}

pub const DEFAULT_RECALL_THRESHOLD: f64 = 0.5;

/// Share of the distinct recalled tokens that also occur in the document.
fn overlap(recalled: &BTreeSet<String>, doc: &BTreeSet<String>) -> f64 {
    if recalled.is_empty() {
        return 0.0;
    }
    recalled.intersection(doc).count() as f64 / recalled.len() as f64
}

/// Matches recalled text to the most similar stored document.
pub fn match_recall(
    recalled_text: &str,
    collection: &DocumentCollection,
    tokenizer: &TokenizerConfig,
    threshold: f64,
) -> LlmRecall {
    let recalled: BTreeSet<String> = tokenizer.tokenize(recalled_text).into_iter().collect();
    let mut best: Option<(String, f64)> = None;
    if !recalled.is_empty() {
        for doc in collection.iter() {
            let doc_tokens: BTreeSet<String> = tokenizer
                .tokenize(&format!("{}\n{}", doc.title, doc.body))
                .into_iter()
                .collect();
            let s = overlap(&recalled, &doc_tokens);
            if best.as_ref().is_none_or(|(_, b)| s > *b) {
                best = Some((doc.id.clone(), s));
            }
        }
    }
    let similarity = best.as_ref().map_or(0.0, |b| b.1);
    LlmRecall {
        recalled_text: recalled_text.to_string(),
        matched_document_id: best.map(|b| b.0),
        similarity,
        hallucinated: similarity < threshold,
    }
}

pub fn retrieve_llm(
    query: &str,
    gateway: &Gateway,
    collection: &DocumentCollection,
    threshold: f64,
) -> Result<LlmRecall, RetrievalError> {
    let text = gateway.recall_document(query)?;
    Ok(match_recall(&text, collection, &TokenizerConfig::default(), threshold))
}
