use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use kipg::executor::ExecutionLimits;
use kipg::gateway::{Endpoint, Gateway, HttpBackend, MockBackend, ModelRole, PromptSet, SamplingConfig};
use kipg::pipeline::RetrievalMode;
use kipg::preference::{ScoringConfig, TrainingParams};
use kipg::program::LintConfig;
use kipg::retrieval::DEFAULT_RECALL_THRESHOLD;

/// One experiment, as read from a TOML file. Relative paths resolve against
/// the file's directory.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub iteration_index: u32,
    pub parallelism: usize,
    pub paths: Paths,
    pub backends: BTreeMap<ModelRole, BackendConfig>,
    pub sampling: SamplingConfig,
    pub limits: ExecutionLimits,
    pub retrieval: RetrievalConfig,
    pub scoring: ScoringConfig,
    pub training: TrainingParams,
    pub lint: LintConfig,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub documents: Option<PathBuf>,
    pub instances: Option<PathBuf>,
    /// Deployed programs for `infer`; candidates for `score` default to the
    /// output directory's `programs.jsonl`.
    pub programs: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Require every document's (case_type, subtype) to be in the legal table.
    pub legal_taxonomy: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    Mock {
        dir: PathBuf,
    },
    Http {
        base_url: String,
        model: String,
        #[serde(default)]
        supports_diverse_beam: bool,
        #[serde(default = "default_http_timeout")]
        timeout_secs: f64,
        #[serde(default = "default_in_flight")]
        max_in_flight: usize,
        #[serde(default)]
        requests_per_second: Option<f64>,
    },
}

fn default_http_timeout() -> f64 {
    120.0
}

fn default_in_flight() -> usize {
    8
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub mode: RetrievalMode,
    pub k: usize,
    pub index_path: Option<PathBuf>,
    pub recall_threshold: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            mode: RetrievalMode::Oracle,
            k: 3,
            index_path: None,
            recall_threshold: DEFAULT_RECALL_THRESHOLD,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut config: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve(base);
        Ok(config)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.paths.documents);
        fix(&mut self.paths.instances);
        fix(&mut self.paths.programs);
        fix(&mut self.paths.scores);
        fix(&mut self.paths.prompts);
        fix(&mut self.paths.output_dir);
        fix(&mut self.retrieval.index_path);
        for b in self.backends.values_mut() {
            if let BackendConfig::Mock { dir } = b {
                if dir.is_relative() {
                    *dir = base.join(&*dir);
                }
            }
        }
    }

    /// Checks value ranges and that every referenced input path exists.
    pub fn validate(&self) -> Result<()> {
        if let Err(m) = self.sampling.validate() {
            bail!("sampling: {m}");
        }
        if self.limits.wall_timeout.is_zero() {
            bail!("limits: wall_timeout must be positive");
        }
        if let Err(m) = self.training.validate() {
            bail!("training: {m}");
        }
        if let Some(t) = self.scoring.small_set_threshold {
            if !(0.0..=1.0).contains(&t) {
                bail!("scoring: small_set_threshold must lie in [0, 1]");
            }
        }
        for (name, p) in [
            ("documents", &self.paths.documents),
            ("instances", &self.paths.instances),
            ("programs", &self.paths.programs),
            ("scores", &self.paths.scores),
            ("prompts", &self.paths.prompts),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    bail!("paths.{name}: {} does not exist", p.display());
                }
            }
        }
        for (role, b) in &self.backends {
            if let BackendConfig::Mock { dir } = b {
                if !dir.join("manifest.json").exists() {
                    bail!("backends.{role}: no manifest.json in {}", dir.display());
                }
            }
        }
        Ok(())
    }

    pub fn require<'a>(&self, name: &str, p: &'a Option<PathBuf>) -> Result<&'a Path> {
        p.as_deref()
            .with_context(|| format!("paths.{name} is not set (config or --{name})"))
    }

    pub fn output_dir(&self) -> Result<PathBuf> {
        let dir = self.paths.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
        std::fs::create_dir_all(&dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(dir)
    }

    pub fn prompts(&self) -> Result<PromptSet> {
        match &self.paths.prompts {
            Some(dir) => Ok(PromptSet::load_dir(dir)?),
            None => Ok(PromptSet::default()),
        }
    }

    /// A gateway with every configured role bound. Mock directories shared
    /// between roles are loaded once.
    pub fn gateway(&self) -> Result<Gateway> {
        let mut gateway = Gateway::new(self.prompts()?);
        let mut mocks: BTreeMap<PathBuf, Endpoint> = BTreeMap::new();
        for (role, b) in &self.backends {
            let endpoint = match b {
                BackendConfig::Mock { dir } => match mocks.get(dir) {
                    Some(e) => e.clone(),
                    None => {
                        let e = Endpoint::new(Arc::new(MockBackend::load(dir)?));
                        mocks.insert(dir.clone(), e.clone());
                        e
                    }
                },
                BackendConfig::Http {
                    base_url,
                    model,
                    supports_diverse_beam,
                    timeout_secs,
                    max_in_flight,
                    requests_per_second,
                } => Endpoint::new(Arc::new(HttpBackend::new(
                    base_url.clone(),
                    model.clone(),
                    *supports_diverse_beam,
                    Duration::from_secs_f64(*timeout_secs),
                )))
                .with_limits(*max_in_flight, *requests_per_second),
            };
            gateway.bind(*role, endpoint);
        }
        Ok(gateway)
    }

    pub fn parallelism(&self) -> usize {
        self.parallelism.max(1)
    }
}
