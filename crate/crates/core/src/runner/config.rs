//! Run configuration (TOML on disk) and construction of the backends it names.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{
    ChatGateway, CompletionParams, Gateway, HttpBackend, MockBackend, MockMode, RateLimiter,
    RetryPolicy,
};
use crate::instruction::{Instruction, InstructionId};
use crate::objectives::{
    CharTrigramScorer, EvalSplitPolicy, KeywordCoverageTask, ObjectiveCache, ObjectiveEvaluator,
    PerplexityScorer, RemoteEvaluator, RemoteScorer, Split, TaskEvaluator,
    DEFAULT_DEGENERATE_SENTINEL,
};
use crate::operators::TemplateSet;

pub const DEFAULT_POPULATION: usize = 100;
pub const DEFAULT_GENERATIONS: u32 = 10;
pub const DEFAULT_INJECTION_RATE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedInstruction {
    pub definition: String,
    #[serde(default)]
    pub example: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task_name: String,
    #[serde(default = "default_population")]
    pub population_size: usize,
    #[serde(default = "default_generations")]
    pub generations: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub guidance_enabled: bool,
    #[serde(default = "default_injection_rate")]
    pub injection_rate: f64,
    /// Abort a generation when more than this fraction of M operator calls fail.
    #[serde(default = "default_failure_fraction")]
    pub max_operator_failure_fraction: f64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub seed_instructions: Vec<SeedInstruction>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Custom operator template file; the bundled one when absent.
    #[serde(default)]
    pub templates: Option<PathBuf>,
    /// Skip checksum verification of a custom template file.
    #[serde(default)]
    pub allow_custom_templates: bool,
    #[serde(default)]
    pub gateway: GatewayConfig,
    #[serde(default)]
    pub evaluator: EvaluatorConfig,
    #[serde(default)]
    pub scorer: ScorerConfig,
}

fn default_population() -> usize {
    DEFAULT_POPULATION
}
fn default_generations() -> u32 {
    DEFAULT_GENERATIONS
}
fn default_true() -> bool {
    true
}
fn default_injection_rate() -> f64 {
    DEFAULT_INJECTION_RATE
}
fn default_failure_fraction() -> f64 {
    0.2
}
fn default_workers() -> usize {
    4
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/latest")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendChoice {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub backend: BackendChoice,
    pub base_url: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub requests_per_minute: Option<u32>,
    pub mock_mode: MockMode,
    pub mock_seed: u64,
    pub params: CompletionParams,
    pub retry: RetryPolicy,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            backend: BackendChoice::Mock,
            base_url: "https://api.openai.com/v1".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 60,
            requests_per_minute: None,
            mock_mode: MockMode::SeededEdit,
            mock_seed: 0,
            params: CompletionParams::default(),
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EvaluatorConfig {
    /// Bundled keyword-coverage task, or a JSONL dataset in the same layout.
    KeywordTask {
        #[serde(default)]
        dataset: Option<PathBuf>,
        #[serde(default = "default_true")]
        use_validation: bool,
        #[serde(default = "default_sentinel")]
        degenerate_sentinel: f64,
    },
    Remote {
        endpoint: String,
        #[serde(default = "default_true")]
        has_validation: bool,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
        #[serde(default = "default_sentinel")]
        degenerate_sentinel: f64,
    },
}

fn default_sentinel() -> f64 {
    DEFAULT_DEGENERATE_SENTINEL
}
fn default_timeout() -> u64 {
    60
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        EvaluatorConfig::KeywordTask {
            dataset: None,
            use_validation: true,
            degenerate_sentinel: DEFAULT_DEGENERATE_SENTINEL,
        }
    }
}

impl EvaluatorConfig {
    fn sentinel(&self) -> f64 {
        match self {
            EvaluatorConfig::KeywordTask { degenerate_sentinel, .. }
            | EvaluatorConfig::Remote { degenerate_sentinel, .. } => *degenerate_sentinel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScorerConfig {
    CharTrigram {
        #[serde(default)]
        corpus: Option<PathBuf>,
    },
    Remote {
        endpoint: String,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
    },
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig::CharTrigram { corpus: None }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Minimal offline configuration around the given seeds.
    pub fn offline(task_name: &str, seeds: Vec<SeedInstruction>, output_dir: PathBuf) -> Self {
        Self {
            task_name: task_name.into(),
            population_size: DEFAULT_POPULATION,
            generations: DEFAULT_GENERATIONS,
            seed: 0,
            guidance_enabled: true,
            injection_rate: DEFAULT_INJECTION_RATE,
            max_operator_failure_fraction: default_failure_fraction(),
            workers: default_workers(),
            seed_instructions: seeds,
            output_dir,
            templates: None,
            allow_custom_templates: false,
            gateway: GatewayConfig::default(),
            evaluator: EvaluatorConfig::default(),
            scorer: ScorerConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.population_size < 2 {
            return Err(Error::Config("population_size must be at least 2".into()));
        }
        if self.generations < 1 {
            return Err(Error::Config("generations must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.injection_rate) {
            return Err(Error::Config("injection_rate must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.max_operator_failure_fraction) {
            return Err(Error::Config("max_operator_failure_fraction must lie in [0, 1]".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.task_name.trim().is_empty() {
            return Err(Error::Config("task_name is empty".into()));
        }
        if self.seed_instructions.is_empty() {
            return Err(Error::Config("at least one seed instruction is required".into()));
        }
        if let Some(i) = self
            .seed_instructions
            .iter()
            .position(|s| s.definition.trim().is_empty())
        {
            return Err(Error::Config(format!("seed instruction {i} has a blank definition")));
        }
        let params = &self.gateway.params;
        if params.temperature.is_nan() || params.temperature < 0.0 || params.max_tokens == 0 {
            return Err(Error::Config("temperature must be >= 0 and max_tokens > 0".into()));
        }
        if self.gateway.backend == BackendChoice::Http && params.model_name.is_empty() {
            return Err(Error::Config("gateway.params.model_name is required for the http backend".into()));
        }
        Ok(())
    }

    /// Seed instructions with ids `0..k`.
    pub fn seed_instructions(&self) -> Result<Vec<Instruction>> {
        self.seed_instructions
            .iter()
            .enumerate()
            .map(|(i, s)| Instruction::new(InstructionId(i as u64), &s.definition, &s.example))
            .collect()
    }
}

/// Live backends for a run.
pub struct Backends {
    pub gateway: Arc<dyn ChatGateway>,
    pub evaluator: ObjectiveEvaluator,
    pub templates: TemplateSet,
    pub params: CompletionParams,
}

impl Backends {
    /// Builds everything the config names. `cache` is typically the run's
    /// persistent cache; `gateway_log` receives gateway telemetry.
    pub fn from_config(config: &RunConfig, cache: ObjectiveCache, gateway_log: Option<&Path>) -> Result<Self> {
        let gateway = build_gateway(&config.gateway, gateway_log)?;
        let evaluator = build_evaluator(config, cache)?;
        let templates = match &config.templates {
            Some(path) => TemplateSet::from_file(path, !config.allow_custom_templates)?,
            None => TemplateSet::bundled()?,
        };
        Ok(Self {
            gateway,
            evaluator,
            templates,
            params: config.gateway.params.clone(),
        })
    }
}

pub fn build_gateway(config: &GatewayConfig, log: Option<&Path>) -> Result<Arc<dyn ChatGateway>> {
    let backend: Box<dyn crate::gateway::CompletionBackend> = match config.backend {
        BackendChoice::Mock => Box::new(MockBackend::new(config.mock_mode, config.mock_seed)),
        BackendChoice::Http => Box::new(HttpBackend::from_env(
            &config.base_url,
            &config.api_key_env,
            Duration::from_secs(config.timeout_secs),
        )?),
    };
    let mut gateway = Gateway::new(
        backend,
        config.retry.clone(),
        RateLimiter::new(config.requests_per_minute),
    );
    if let Some(path) = log {
        gateway = gateway.with_event_log(path).map_err(|e| Error::io(path, e))?;
    }
    Ok(Arc::new(gateway))
}

pub fn build_evaluator(config: &RunConfig, cache: ObjectiveCache) -> Result<ObjectiveEvaluator> {
    let task: Arc<dyn TaskEvaluator> = match &config.evaluator {
        EvaluatorConfig::KeywordTask { dataset, use_validation, .. } => {
            let task = match dataset {
                Some(path) => KeywordCoverageTask::from_jsonl(
                    &std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?,
                )?,
                None => KeywordCoverageTask::bundled()?,
            };
            Arc::new(if *use_validation { task } else { task.without_validation() })
        }
        EvaluatorConfig::Remote { endpoint, has_validation, timeout_secs, .. } => Arc::new(
            RemoteEvaluator::new(endpoint, *has_validation, Duration::from_secs(*timeout_secs))?,
        ),
    };
    let scorer: Arc<dyn PerplexityScorer> = match &config.scorer {
        ScorerConfig::CharTrigram { corpus: None } => Arc::new(CharTrigramScorer::bundled().clone()),
        ScorerConfig::CharTrigram { corpus: Some(path) } => Arc::new(CharTrigramScorer::train(
            &std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?,
        )),
        ScorerConfig::Remote { endpoint, timeout_secs } => {
            Arc::new(RemoteScorer::new(endpoint, Duration::from_secs(*timeout_secs))?)
        }
    };
    let mut evaluator = ObjectiveEvaluator::new(task, scorer, cache);
    evaluator.split = EvalSplitPolicy { prefer: Split::Validation };
    evaluator.sentinel = config.evaluator.sentinel();
    Ok(evaluator)
}
