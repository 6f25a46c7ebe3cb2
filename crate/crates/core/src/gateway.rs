//! Model roles, prompt templates and chat-completion backends.
//!
//! A [`Gateway`] binds each [`ModelRole`] to one backend endpoint. Two
//! backends ship: [`HttpBackend`] speaks the common chat-completion HTTP
//! protocol, and [`MockBackend`] replays fixture replies from a directory so
//! whole pipelines run deterministically offline.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::executor::{OutcomeMap, VariableBindings};
use crate::program::ProgramMetadata;
use crate::store::KnowledgeDocument;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Generator,
    Extractor,
    Concluder,
    LlmRetriever,
}

impl ModelRole {
    pub const ALL: [ModelRole; 4] = [
        ModelRole::Generator,
        ModelRole::Extractor,
        ModelRole::Concluder,
        ModelRole::LlmRetriever,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelRole::Generator => "generator",
            ModelRole::Extractor => "extractor",
            ModelRole::Concluder => "concluder",
            ModelRole::LlmRetriever => "llm_retriever",
        }
    }
}

impl fmt::Display for ModelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("no backend bound to role {0}")]
    RoleUnbound(ModelRole),
    #[error("{role} backend unavailable: {message}")]
    BackendUnavailable { role: ModelRole, message: String },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("mock fixtures: {0}")]
    MockFixture(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("{role} template is missing placeholder values: {missing:?}")]
    MissingPlaceholder {
        role: ModelRole,
        missing: Vec<String>,
    },
    #[error("cannot read template {path}: {message}")]
    Unreadable { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    DiverseBeam,
    Temperature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub n_samples: usize,
    pub strategy: SamplingStrategy,
    pub diversity_penalty: f64,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            n_samples: 8,
            strategy: SamplingStrategy::DiverseBeam,
            diversity_penalty: 1.0,
            temperature: 0.8,
            max_tokens: 2048,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_samples == 0 {
            return Err("n_samples must be at least 1".into());
        }
        if !(self.diversity_penalty >= 0.0) {
            return Err("diversity_penalty must be non-negative".into());
        }
        Ok(())
    }

    fn greedy(max_tokens: u32) -> Self {
        SamplingConfig {
            n_samples: 1,
            strategy: SamplingStrategy::Temperature,
            diversity_penalty: 0.0,
            temperature: 0.0,
            max_tokens,
        }
    }
}

fn placeholder_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{\{\s*([A-Za-z0-9_.]+)\s*\}\}").unwrap())
}

/// Substitutes `{{name}}` placeholders, failing on any unbound name.
fn substitute(text: &str, vars: &BTreeMap<String, String>) -> Result<String, Vec<String>> {
    let re = placeholder_pattern();
    let missing: BTreeSet<String> = re
        .captures_iter(text)
        .map(|c| c[1].to_string())
        .filter(|n| !vars.contains_key(n))
        .collect();
    if !missing.is_empty() {
        return Err(missing.into_iter().collect());
    }
    Ok(re
        .replace_all(text, |c: &regex::Captures| vars[&c[1]].clone())
        .into_owned())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub role: ModelRole,
    pub template_text: String,
    pub required_placeholders: Vec<String>,
}

impl PromptTemplate {
    pub fn new(role: ModelRole, template_text: impl Into<String>) -> Self {
        let template_text = template_text.into();
        let required: BTreeSet<String> = placeholder_pattern()
            .captures_iter(&template_text)
            .map(|c| c[1].to_string())
            .collect();
        PromptTemplate {
            role,
            template_text,
            required_placeholders: required.into_iter().collect(),
        }
    }

    pub fn render(&self, vars: &BTreeMap<String, String>) -> Result<String, TemplateError> {
        substitute(&self.template_text, vars).map_err(|missing| TemplateError::MissingPlaceholder {
            role: self.role,
            missing,
        })
    }
}

/// One template per role.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    templates: BTreeMap<ModelRole, PromptTemplate>,
}

impl Default for PromptSet {
    fn default() -> Self {
        let defaults = [
            (ModelRole::Generator, include_str!("../assets/prompts/generator.txt")),
            (ModelRole::Extractor, include_str!("../assets/prompts/extractor.txt")),
            (ModelRole::Concluder, include_str!("../assets/prompts/concluder.txt")),
            (ModelRole::LlmRetriever, include_str!("../assets/prompts/llm_retriever.txt")),
        ];
        PromptSet {
            templates: defaults
                .into_iter()
                .map(|(r, t)| (r, PromptTemplate::new(r, t)))
                .collect(),
        }
    }
}

impl PromptSet {
    /// Defaults, overridden by any `<role>.txt` present in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = PromptSet::default();
        for role in ModelRole::ALL {
            let path = dir.join(format!("{role}.txt"));
            if path.exists() {
                let text = std::fs::read_to_string(&path).map_err(|e| TemplateError::Unreadable {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
                set.set(PromptTemplate::new(role, text));
            }
        }
        Ok(set)
    }

    pub fn set(&mut self, template: PromptTemplate) {
        self.templates.insert(template.role, template);
    }

    pub fn get(&self, role: ModelRole) -> &PromptTemplate {
        &self.templates[&role]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub role: ModelRole,
    pub prompt: String,
    /// Values the prompt was rendered from; mock replies may reference them.
    pub vars: BTreeMap<String, String>,
    /// Explicit fixture id (the document id for generation requests).
    pub fixture_key: Option<String>,
    pub n: usize,
    /// Index of the first sample; retries advance it.
    pub sample_offset: usize,
    pub sampling: SamplingConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Choice {
    pub text: String,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CompletionResponse {
    pub choices: Vec<Choice>,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
    /// Diverse beam search was requested but plain sampling was used.
    pub fallback_sampling: bool,
}

pub trait Backend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, GatewayError>;

    fn name(&self) -> String;
}

/// Client for a chat-completion HTTP server.
pub struct HttpBackend {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub supports_diverse_beam: bool,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub const API_KEY_VAR: &'static str = "KIPG_API_KEY";

    pub fn new(
        base_url: impl Into<String>,
        model: impl Into<String>,
        supports_diverse_beam: bool,
        timeout: Duration,
    ) -> Self {
        HttpBackend {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key: std::env::var(Self::API_KEY_VAR).ok().filter(|k| !k.is_empty()),
            supports_diverse_beam,
            client: reqwest::blocking::Client::builder()
                .timeout(timeout)
                .build()
                .expect("http client"),
        }
    }

    pub fn request_body(&self, request: &CompletionRequest) -> (Value, bool) {
        let s = &request.sampling;
        let mut body = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "n": request.n,
            "max_tokens": s.max_tokens,
        });
        let mut fallback = false;
        match s.strategy {
            SamplingStrategy::DiverseBeam if self.supports_diverse_beam && request.n > 1 => {
                body["use_beam_search"] = true.into();
                body["best_of"] = request.n.into();
                body["num_beam_groups"] = request.n.into();
                body["diversity_penalty"] = s.diversity_penalty.into();
                body["temperature"] = 0.0.into();
            }
            SamplingStrategy::DiverseBeam if request.n > 1 => {
                fallback = true;
                body["temperature"] = s.temperature.into();
            }
            _ => body["temperature"] = s.temperature.into(),
        }
        (body, fallback)
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatUsage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

impl Backend for HttpBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        let unavailable = |message: String| GatewayError::BackendUnavailable {
            role: request.role,
            message,
        };
        let (body, fallback_sampling) = self.request_body(request);
        let mut http = self
            .client
            .post(format!("{}/chat/completions", self.base_url))
            .json(&body);
        if let Some(key) = &self.api_key {
            http = http.bearer_auth(key);
        }
        let resp = http.send().map_err(|e| unavailable(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(unavailable(format!("HTTP {status}: {text}")));
        }
        let parsed: ChatResponse = resp
            .json()
            .map_err(|e| unavailable(format!("bad response body: {e}")))?;
        Ok(CompletionResponse {
            choices: parsed
                .choices
                .into_iter()
                .map(|c| Choice {
                    text: c.message.content.unwrap_or_default(),
                    truncated: c.finish_reason.as_deref() == Some("length"),
                })
                .collect(),
            prompt_tokens: parsed.usage.as_ref().and_then(|u| u.prompt_tokens),
            completion_tokens: parsed.usage.as_ref().and_then(|u| u.completion_tokens),
            fallback_sampling,
        })
    }

    fn name(&self) -> String {
        format!("http:{}#{}", self.base_url, self.model)
    }
}

/// Replays canned replies from a fixture directory.
///
/// `manifest.json` in the directory lists rules. A rule applies to one role
/// and matches when every matcher it sets holds: `key` (the explicit fixture
/// id), `prompt_sha256` (hash of the rendered prompt) and `contains` (all
/// substrings present in the prompt). The first matching rule wins. Replies
/// are inline strings or `{"file": ..., "truncated": bool}` objects; with
/// `"template": true` a reply may reference `{{name}}` request values, and a
/// reply that cannot be rendered passes the request on to the next rule.
#[derive(Debug, Clone)]
pub struct MockBackend {
    dir: PathBuf,
    rules: Vec<MockRule>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct MockManifest {
    rules: Vec<MockRuleSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct MockRuleSpec {
    role: ModelRole,
    #[serde(default)]
    key: Option<String>,
    #[serde(default)]
    prompt_sha256: Option<String>,
    #[serde(default)]
    contains: Vec<String>,
    #[serde(default)]
    template: bool,
    replies: Vec<MockReplySpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum MockReplySpec {
    Inline(String),
    File {
        file: PathBuf,
        #[serde(default)]
        truncated: bool,
    },
    Text {
        text: String,
        #[serde(default)]
        truncated: bool,
    },
}

#[derive(Debug, Clone)]
struct MockRule {
    role: ModelRole,
    key: Option<String>,
    prompt_sha256: Option<String>,
    contains: Vec<String>,
    template: bool,
    replies: Vec<Choice>,
}

pub fn sha256_hex(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl MockBackend {
    pub fn load(dir: &Path) -> Result<Self, GatewayError> {
        let manifest_path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| {
            GatewayError::MockFixture(format!("{}: {e}", manifest_path.display()))
        })?;
        let manifest: MockManifest = serde_json::from_str(&text).map_err(|e| {
            GatewayError::MockFixture(format!("{}: {e}", manifest_path.display()))
        })?;
        let mut rules = Vec::new();
        for spec in manifest.rules {
            let mut replies = Vec::new();
            for r in spec.replies {
                replies.push(match r {
                    MockReplySpec::Inline(text) => Choice {
                        text,
                        truncated: false,
                    },
                    MockReplySpec::Text { text, truncated } => Choice { text, truncated },
                    MockReplySpec::File { file, truncated } => {
                        let path = dir.join(&file);
                        let text = std::fs::read_to_string(&path).map_err(|e| {
                            GatewayError::MockFixture(format!("{}: {e}", path.display()))
                        })?;
                        Choice { text, truncated }
                    }
                });
            }
            if replies.is_empty() {
                return Err(GatewayError::MockFixture(format!(
                    "a {} rule has no replies",
                    spec.role
                )));
            }
            rules.push(MockRule {
                role: spec.role,
                key: spec.key,
                prompt_sha256: spec.prompt_sha256,
                contains: spec.contains,
                template: spec.template,
                replies,
            });
        }
        Ok(MockBackend {
            dir: dir.to_path_buf(),
            rules,
        })
    }

    fn matches(rule: &MockRule, req: &CompletionRequest, prompt_hash: &str) -> bool {
        rule.role == req.role
            && rule
                .key
                .as_ref()
                .is_none_or(|k| req.fixture_key.as_deref() == Some(k))
            && rule
                .prompt_sha256
                .as_ref()
                .is_none_or(|h| h.eq_ignore_ascii_case(prompt_hash))
            && rule.contains.iter().all(|s| req.prompt.contains(s.as_str()))
    }
}

impl Backend for MockBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        let hash = sha256_hex(&req.prompt);
        'rules: for rule in self.rules.iter().filter(|r| Self::matches(r, req, &hash)) {
            let mut picked = Vec::new();
            for i in 0..req.n.max(1) {
                let idx = req.sample_offset + i;
                match rule.replies.get(idx) {
                    Some(c) => picked.push(c.clone()),
                    None if i == 0 => picked.push(rule.replies.last().unwrap().clone()),
                    None => break,
                }
            }
            if rule.template {
                for c in &mut picked {
                    match substitute(&c.text, &req.vars) {
                        Ok(t) => c.text = t,
                        Err(_) => continue 'rules,
                    }
                }
            }
            return Ok(CompletionResponse {
                choices: picked,
                prompt_tokens: None,
                completion_tokens: None,
                fallback_sampling: false,
            });
        }
        Err(GatewayError::BackendUnavailable {
            role: req.role,
            message: format!(
                "mock {} has no fixture for this {} prompt (sha256 {hash})",
                self.dir.display(),
                req.role
            ),
        })
    }

    fn name(&self) -> String {
        format!("mock:{}", self.dir.display())
    }
}

/// Blocks callers beyond a concurrency cap and an optional request rate.
#[derive(Debug)]
pub struct Limiter {
    max_in_flight: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
    rate: Option<f64>,
    bucket: Mutex<(f64, Instant)>,
}

impl Limiter {
    pub fn new(max_in_flight: usize, requests_per_second: Option<f64>) -> Self {
        let rate = requests_per_second.filter(|r| *r > 0.0);
        Limiter {
            max_in_flight: max_in_flight.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            rate,
            bucket: Mutex::new((rate.unwrap_or(0.0).max(1.0), Instant::now())),
        }
    }

    pub fn unlimited() -> Self {
        Self::new(usize::MAX, None)
    }

    fn take_token(&self) {
        let Some(rate) = self.rate else { return };
        let capacity = rate.max(1.0);
        loop {
            let wait = {
                let mut b = self.bucket.lock().unwrap();
                let now = Instant::now();
                b.0 = (b.0 + now.duration_since(b.1).as_secs_f64() * rate).min(capacity);
                b.1 = now;
                if b.0 >= 1.0 {
                    b.0 -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - b.0) / rate)
            };
            std::thread::sleep(wait);
        }
    }

    pub fn acquire(&self) -> LimiterGuard<'_> {
        self.take_token();
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.max_in_flight {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        LimiterGuard { limiter: self }
    }

    pub fn in_flight(&self) -> usize {
        *self.in_flight.lock().unwrap()
    }
}

pub struct LimiterGuard<'a> {
    limiter: &'a Limiter,
}

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        *self.limiter.in_flight.lock().unwrap() -= 1;
        self.limiter.freed.notify_one();
    }
}

#[derive(Clone)]
pub struct Endpoint {
    pub backend: Arc<dyn Backend>,
    pub limiter: Arc<Limiter>,
}

impl Endpoint {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Endpoint {
            backend,
            limiter: Arc::new(Limiter::unlimited()),
        }
    }

    pub fn with_limits(mut self, max_in_flight: usize, requests_per_second: Option<f64>) -> Self {
        self.limiter = Arc::new(Limiter::new(max_in_flight, requests_per_second));
        self
    }
}

/// One request/reply exchange, as recorded by the gateway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeRecord {
    pub role: ModelRole,
    pub backend: String,
    pub prompt_sha256: String,
    pub prompt: String,
    pub replies: Vec<Choice>,
    pub error: Option<String>,
    pub latency_ms: f64,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
    pub fallback_sampling: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedPrograms {
    pub prompt: String,
    pub candidates: Vec<Candidate>,
    pub fallback_sampling: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extraction {
    pub prompt: String,
    pub bindings: VariableBindings,
    pub extraction_failed: bool,
    pub attempts: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conclusion {
    pub prompt: String,
    pub text: String,
}

/// Text shown to the concluder when no program outputs are available.
pub const NO_PROGRAM_OUTPUT: &str =
    "No program outputs are available; answer from the document alone.";

/// Routes role requests to their endpoints and records every exchange.
pub struct Gateway {
    endpoints: HashMap<ModelRole, Endpoint>,
    prompts: PromptSet,
    log: Mutex<Vec<ExchangeRecord>>,
}

/// Formats a JSON value for prompt text: integral numbers lose their `.0`.
pub fn display_value(v: &Value) -> String {
    match v {
        Value::Number(n) => match n.as_f64() {
            Some(f) if !(n.is_i64() || n.is_u64()) && f.fract() == 0.0 && f.abs() < 1e15 => {
                format!("{}", f as i64)
            }
            _ => n.to_string(),
        },
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn parse_json_object(reply: &str) -> Option<Map<String, Value>> {
    let t = reply.trim();
    let unfenced = t
        .strip_prefix("```json")
        .or_else(|| t.strip_prefix("```"))
        .and_then(|r| r.trim_end().strip_suffix("```"))
        .unwrap_or(t)
        .trim();
    if let Ok(Value::Object(m)) = serde_json::from_str(unfenced) {
        return Some(m);
    }
    let start = unfenced.find('{')?;
    let end = unfenced.rfind('}')?;
    match serde_json::from_str(unfenced.get(start..=end)?) {
        Ok(Value::Object(m)) => Some(m),
        _ => None,
    }
}

impl Gateway {
    pub fn new(prompts: PromptSet) -> Self {
        Gateway {
            endpoints: HashMap::new(),
            prompts,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn bind(&mut self, role: ModelRole, endpoint: Endpoint) -> &mut Self {
        self.endpoints.insert(role, endpoint);
        self
    }

    /// Binds every role to the same backend.
    pub fn with_backend(prompts: PromptSet, backend: Arc<dyn Backend>) -> Self {
        let mut g = Gateway::new(prompts);
        let endpoint = Endpoint::new(backend);
        for role in ModelRole::ALL {
            g.bind(role, endpoint.clone());
        }
        g
    }

    pub fn is_bound(&self, role: ModelRole) -> bool {
        self.endpoints.contains_key(&role)
    }

    pub fn prompts(&self) -> &PromptSet {
        &self.prompts
    }

    /// A copy of all recorded exchanges, in completion order.
    pub fn exchanges(&self) -> Vec<ExchangeRecord> {
        self.log.lock().unwrap().clone()
    }

    fn call(&self, request: CompletionRequest) -> Result<CompletionResponse, GatewayError> {
        let endpoint = self
            .endpoints
            .get(&request.role)
            .ok_or(GatewayError::RoleUnbound(request.role))?;
        let start = Instant::now();
        let result = {
            let _guard = endpoint.limiter.acquire();
            endpoint.backend.complete(&request)
        };
        let latency_ms = start.elapsed().as_secs_f64() * 1e3;
        let record = ExchangeRecord {
            role: request.role,
            backend: endpoint.backend.name(),
            prompt_sha256: sha256_hex(&request.prompt),
            prompt: request.prompt,
            replies: result.as_ref().map(|r| r.choices.clone()).unwrap_or_default(),
            error: result.as_ref().err().map(|e| e.to_string()),
            latency_ms,
            prompt_tokens: result.as_ref().ok().and_then(|r| r.prompt_tokens),
            completion_tokens: result.as_ref().ok().and_then(|r| r.completion_tokens),
            fallback_sampling: result.as_ref().is_ok_and(|r| r.fallback_sampling),
        };
        self.log.lock().unwrap().push(record);
        result
    }

    fn generation_vars(document: &KnowledgeDocument) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("document_id".into(), document.id.clone()),
            ("title".into(), document.title.clone()),
            ("case_type".into(), document.case_type.clone()),
            ("subtype".into(), document.subtype.clone()),
            ("domain".into(), document.domain.to_string()),
            ("body".into(), document.body.clone()),
        ])
    }

    /// The rendered generation prompt; also the prompt of preference records.
    pub fn generation_prompt(&self, document: &KnowledgeDocument) -> Result<String, GatewayError> {
        Ok(self
            .prompts
            .get(ModelRole::Generator)
            .render(&Self::generation_vars(document))?)
    }

    /// Samples up to `n_samples` distinct candidate programs for a document.
    pub fn generate_programs(
        &self,
        document: &KnowledgeDocument,
        sampling: &SamplingConfig,
    ) -> Result<GeneratedPrograms, GatewayError> {
        sampling.validate().map_err(|m| GatewayError::BackendUnavailable {
            role: ModelRole::Generator,
            message: m,
        })?;
        let vars = Self::generation_vars(document);
        let prompt = self.prompts.get(ModelRole::Generator).render(&vars)?;
        let resp = self.call(CompletionRequest {
            role: ModelRole::Generator,
            prompt: prompt.clone(),
            vars,
            fixture_key: Some(document.id.clone()),
            n: sampling.n_samples,
            sample_offset: 0,
            sampling: sampling.clone(),
        })?;
        let mut seen = BTreeSet::new();
        let candidates = resp
            .choices
            .into_iter()
            .take(sampling.n_samples)
            .filter(|c| seen.insert(c.text.clone()))
            .map(|c| Candidate {
                text: c.text,
                truncated: c.truncated,
            })
            .collect();
        Ok(GeneratedPrograms {
            prompt,
            candidates,
            fallback_sampling: resp.fallback_sampling,
        })
    }

    pub fn extraction_prompt(
        &self,
        query: &str,
        metadata: &ProgramMetadata,
    ) -> Result<String, GatewayError> {
        Ok(self
            .prompts
            .get(ModelRole::Extractor)
            .render(&Self::extraction_vars(query, metadata))?)
    }

    fn extraction_vars(query: &str, metadata: &ProgramMetadata) -> BTreeMap<String, String> {
        let inputs = if metadata.inputs.is_empty() {
            "(none)".to_string()
        } else {
            metadata
                .inputs
                .iter()
                .map(|p| {
                    format!(
                        "- {} ({}, {}): {}",
                        p.name,
                        p.semantic_type,
                        p.unit.as_deref().unwrap_or("unspecified unit"),
                        p.definition
                    )
                })
                .collect::<Vec<_>>()
                .join("\n")
        };
        BTreeMap::from([
            ("query".into(), query.to_string()),
            ("knowledge_source".into(), metadata.knowledge_source.clone()),
            ("inputs".into(), inputs),
        ])
    }

    /// Extracts input values for `metadata` from the query, retrying
    /// unusable replies up to `retries` times. A final failure is reported
    /// through `extraction_failed` with empty bindings.
    pub fn extract_variables(
        &self,
        query: &str,
        metadata: &ProgramMetadata,
        retries: usize,
    ) -> Result<Extraction, GatewayError> {
        let vars = Self::extraction_vars(query, metadata);
        let prompt = self.prompts.get(ModelRole::Extractor).render(&vars)?;
        for attempt in 0..=retries {
            let resp = self.call(CompletionRequest {
                role: ModelRole::Extractor,
                prompt: prompt.clone(),
                vars: vars.clone(),
                fixture_key: None,
                n: 1,
                sample_offset: attempt,
                sampling: SamplingConfig::greedy(512),
            })?;
            let Some(reply) = resp.choices.first() else {
                continue;
            };
            let Some(raw) = parse_json_object(&reply.text) else {
                continue;
            };
            let (bindings, _) = VariableBindings::coerce(&raw, metadata);
            if bindings.is_empty() && !metadata.inputs.is_empty() {
                continue;
            }
            return Ok(Extraction {
                prompt,
                bindings,
                extraction_failed: false,
                attempts: attempt + 1,
            });
        }
        Ok(Extraction {
            prompt,
            bindings: VariableBindings::new(),
            extraction_failed: true,
            attempts: retries + 1,
        })
    }

    /// Concludes an answer from the query, the document and the program's
    /// inputs and outputs. `outcome = None` is the degraded form.
    pub fn conclude(
        &self,
        query: &str,
        document: &KnowledgeDocument,
        bindings: &VariableBindings,
        outcome: Option<&OutcomeMap>,
    ) -> Result<Conclusion, GatewayError> {
        let mut vars = BTreeMap::from([
            ("query".to_string(), query.to_string()),
            ("title".to_string(), document.title.clone()),
            ("body".to_string(), document.body.clone()),
            ("document_id".to_string(), document.id.clone()),
        ]);
        let io_pack = match outcome {
            Some(out) => {
                for (k, v) in &bindings.0 {
                    vars.insert(format!("in.{k}"), display_value(v));
                }
                for (k, v) in &out.0 {
                    vars.insert(format!("out.{k}"), display_value(v));
                }
                serde_json::to_string_pretty(&serde_json::json!({
                    "inputs": bindings,
                    "outputs": out,
                }))
                .expect("json")
            }
            None => NO_PROGRAM_OUTPUT.to_string(),
        };
        vars.insert("io_pack".into(), io_pack);
        let prompt = self.prompts.get(ModelRole::Concluder).render(&vars)?;
        let resp = self.call(CompletionRequest {
            role: ModelRole::Concluder,
            prompt: prompt.clone(),
            vars,
            fixture_key: None,
            n: 1,
            sample_offset: 0,
            sampling: SamplingConfig::greedy(1024),
        })?;
        let text = resp
            .choices
            .into_iter()
            .next()
            .map(|c| c.text)
            .unwrap_or_default();
        Ok(Conclusion { prompt, text })
    }

    /// Asks the retriever role to recall the article a query needs.
    pub fn recall_document(&self, query: &str) -> Result<String, GatewayError> {
        let vars = BTreeMap::from([("query".to_string(), query.to_string())]);
        let prompt = self.prompts.get(ModelRole::LlmRetriever).render(&vars)?;
        let resp = self.call(CompletionRequest {
            role: ModelRole::LlmRetriever,
            prompt,
            vars,
            fixture_key: None,
            n: 1,
            sample_offset: 0,
            sampling: SamplingConfig::greedy(2048),
        })?;
        Ok(resp
            .choices
            .into_iter()
            .next()
            .map(|c| c.text)
            .unwrap_or_default())
    }
}
