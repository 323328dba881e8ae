//! Fitness evaluation: performance reciprocal, exact length and perplexity,
//! with pluggable task evaluators / perplexity scorers and a persistent
//! memoization cache keyed by rendered instruction text.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::instruction::{Instruction, ObjectiveVector, TaskExample};

/// Performance objective used when every metric is zero.
pub const DEFAULT_DEGENERATE_SENTINEL: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

impl MetricBundle {
    pub fn new(accuracy: f64, f1: f64, precision: f64, recall: f64) -> Result<Self> {
        let bundle = Self {
            accuracy,
            f1,
            precision,
            recall,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("accuracy", self.accuracy),
            ("f1", self.f1),
            ("precision", self.precision),
            ("recall", self.recall),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Evaluation(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.accuracy + self.f1 + self.precision + self.recall
    }
}

/// `1 / sum(metrics)`, or `sentinel` (flagged `true`) when the sum is zero.
pub fn performance_from_metrics(metrics: &MetricBundle, sentinel: f64) -> (f64, bool) {
    let sum = metrics.sum();
    if sum > 0.0 {
        (1.0 / sum, false)
    } else {
        (sentinel, true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// Validation is used when the evaluator has it; otherwise the test split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSplitPolicy {
    pub prefer: Split,
}

impl Default for EvalSplitPolicy {
    fn default() -> Self {
        Self {
            prefer: Split::Validation,
        }
    }
}

impl EvalSplitPolicy {
    pub fn choose(&self, evaluator: &dyn TaskEvaluator) -> Split {
        match self.prefer {
            Split::Validation if evaluator.has_split(Split::Validation) => Split::Validation,
            _ => Split::Test,
        }
    }
}

/// Scores a rendered instruction on a task split.
pub trait TaskEvaluator: Send + Sync {
    fn has_split(&self, split: Split) -> bool;
    fn evaluate(&self, rendered: &str, split: Split) -> Result<MetricBundle>;
}

/// Perplexity of a rendered instruction.
pub trait PerplexityScorer: Send + Sync {
    fn perplexity(&self, text: &str) -> Result<f64>;
}

pub fn eval_performance(
    instr: &Instruction,
    evaluator: &dyn TaskEvaluator,
    policy: EvalSplitPolicy,
    sentinel: f64,
) -> Result<(f64, bool)> {
    let split = policy.choose(evaluator);
    let metrics = evaluator.evaluate(&instr.render(), split)?;
    metrics.validate()?;
    Ok(performance_from_metrics(&metrics, sentinel))
}

/// Number of Unicode scalar values.
pub fn text_length(text: &str) -> u64 {
    text.chars().count() as u64
}

pub fn eval_length(instr: &Instruction) -> u64 {
    text_length(&instr.render())
}

pub fn eval_perplexity(instr: &Instruction, scorer: &dyn PerplexityScorer) -> Result<f64> {
    let rendered = instr.render();
    if rendered.is_empty() {
        return Ok(1.0);
    }
    scorer.perplexity(&rendered)
}

/// Character trigram model with add-one smoothing.
#[derive(Debug, Clone)]
pub struct CharTrigramScorer {
    trigrams: HashMap<[char; 3], u32>,
    contexts: HashMap<[char; 2], u32>,
    vocab: HashSet<char>,
}

const BOUNDARY: char = '\u{2}';
const UNKNOWN: char = '\u{1a}';

pub const BUNDLED_CORPUS: &str = include_str!("../assets/corpus_en.txt");

impl CharTrigramScorer {
    /// Trains on `corpus`, one sequence per non-empty line, lowercased.
    pub fn train(corpus: &str) -> Self {
        let mut trigrams = HashMap::new();
        let mut contexts = HashMap::new();
        let mut vocab: HashSet<char> = HashSet::new();
        vocab.insert(UNKNOWN);
        for line in corpus.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let chars: Vec<char> = line.to_lowercase().chars().collect();
            vocab.extend(chars.iter().copied());
            let mut a = BOUNDARY;
            let mut b = BOUNDARY;
            for &c in &chars {
                *trigrams.entry([a, b, c]).or_insert(0) += 1;
                *contexts.entry([a, b]).or_insert(0) += 1;
                a = b;
                b = c;
            }
        }
        Self {
            trigrams,
            contexts,
            vocab,
        }
    }

    pub fn bundled() -> &'static Self {
        static MODEL: OnceLock<CharTrigramScorer> = OnceLock::new();
        MODEL.get_or_init(|| Self::train(BUNDLED_CORPUS))
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn log_prob(&self, context: [char; 2], c: char) -> f64 {
        let c = if self.vocab.contains(&c) { c } else { UNKNOWN };
        let num = f64::from(self.trigrams.get(&[context[0], context[1], c]).copied().unwrap_or(0)) + 1.0;
        let den = f64::from(self.contexts.get(&context).copied().unwrap_or(0)) + self.vocab.len() as f64;
        (num / den).ln()
    }

    /// `exp` of the mean per-character negative log-likelihood; 1 for empty text.
    pub fn score(&self, text: &str) -> f64 {
        let chars: Vec<char> = text.to_lowercase().chars().collect();
        if chars.is_empty() {
            return 1.0;
        }
        let mut a = BOUNDARY;
        let mut b = BOUNDARY;
        let mut nll = 0.0;
        for &c in &chars {
            nll -= self.log_prob([a, b], c);
            a = b;
            b = c;
        }
        (nll / chars.len() as f64).exp()
    }
}

impl PerplexityScorer for CharTrigramScorer {
    fn perplexity(&self, text: &str) -> Result<f64> {
        Ok(self.score(text))
    }
}

/// Bundled offline task: an instruction "knows" a label when it mentions the
/// label word, and the classifier answers correctly exactly for samples
/// whose gold label it knows. Everything else is predicted as no label.
#[derive(Debug, Clone)]
pub struct KeywordCoverageTask {
    labels: Vec<String>,
    validation: Vec<TaskExample>,
    test: Vec<TaskExample>,
}

pub const BUNDLED_TASK: &str = include_str!("../assets/oracle_task.jsonl");

#[derive(Deserialize)]
struct TaskRow {
    split: Split,
    input: String,
    output: String,
}

impl KeywordCoverageTask {
    pub fn new(labels: Vec<String>, validation: Vec<TaskExample>, test: Vec<TaskExample>) -> Result<Self> {
        if test.is_empty() {
            return Err(Error::Config("keyword task needs a non-empty test split".into()));
        }
        Ok(Self {
            labels,
            validation,
            test,
        })
    }

    /// Sentiment task over `positive` / `negative` / `neutral`.
    pub fn bundled() -> Result<Self> {
        Self::from_jsonl(BUNDLED_TASK)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut validation = Vec::new();
        let mut test = Vec::new();
        let mut labels: Vec<String> = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let row: TaskRow = serde_json::from_str(line)
                .map_err(|e| Error::parse(format!("line {}", n + 1), e.to_string()))?;
            if !labels.contains(&row.output) {
                labels.push(row.output.clone());
            }
            let example = TaskExample::new(row.input, row.output)?;
            match row.split {
                Split::Validation => validation.push(example),
                Split::Test => test.push(example),
            }
        }
        labels.sort();
        Self::new(labels, validation, test)
    }

    /// Drops the validation split, forcing evaluation on test.
    pub fn without_validation(mut self) -> Self {
        self.validation.clear();
        self
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn split(&self, split: Split) -> &[TaskExample] {
        match split {
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    fn known_labels(&self, rendered: &str) -> HashSet<&str> {
        let words: HashSet<String> = rendered
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect();
        self.labels
            .iter()
            .filter(|l| words.contains(&l.to_lowercase()))
            .map(String::as_str)
            .collect()
    }
}

impl TaskEvaluator for KeywordCoverageTask {
    fn has_split(&self, split: Split) -> bool {
        !self.split(split).is_empty()
    }

    fn evaluate(&self, rendered: &str, split: Split) -> Result<MetricBundle> {
        let data = self.split(split);
        if data.is_empty() {
            return Err(Error::Evaluation(format!("split {} is empty", split.as_str())));
        }
        let known = self.known_labels(rendered);
        let predictions: Vec<Option<&str>> = data
            .iter()
            .map(|ex| known.contains(ex.output.as_str()).then_some(ex.output.as_str()))
            .collect();
        Ok(macro_metrics(&self.labels, data, &predictions))
    }
}

/// Accuracy plus macro-averaged precision / recall / F1 over `labels`;
/// a label never predicted has precision 0.
pub fn macro_metrics(labels: &[String], gold: &[TaskExample], predicted: &[Option<&str>]) -> MetricBundle {
    let n = gold.len() as f64;
    let correct = gold
        .iter()
        .zip(predicted)
        .filter(|(g, p)| **p == Some(g.output.as_str()))
        .count() as f64;
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    for label in labels {
        let tp = gold
            .iter()
            .zip(predicted)
            .filter(|(g, p)| g.output == *label && **p == Some(label.as_str()))
            .count() as f64;
        let predicted_count = predicted.iter().filter(|p| **p == Some(label.as_str())).count() as f64;
        let gold_count = gold.iter().filter(|g| g.output == *label).count() as f64;
        let precision = if predicted_count > 0.0 { tp / predicted_count } else { 0.0 };
        let recall = if gold_count > 0.0 { tp / gold_count } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        p_sum += precision;
        r_sum += recall;
        f_sum += f1;
    }
    let k = labels.len().max(1) as f64;
    MetricBundle {
        accuracy: if n > 0.0 { correct / n } else { 0.0 },
        f1: f_sum / k,
        precision: p_sum / k,
        recall: r_sum / k,
    }
}

/// Evaluator running in another process, reached over HTTP.
///
/// Request: `{"instruction": "<rendered>", "split": "validation" | "test"}`.
/// Response: `{"accuracy": x, "f1": x, "precision": x, "recall": x}`.
pub struct RemoteEvaluator {
    endpoint: String,
    has_validation: bool,
    client: reqwest::blocking::Client,
}

impl RemoteEvaluator {
    pub fn new(endpoint: &str, has_validation: bool, timeout: Duration) -> Result<Self> {
        Ok(Self {
            endpoint: endpoint.to_owned(),
            has_validation,
            client: http_client(timeout)?,
        })
    }
}

impl TaskEvaluator for RemoteEvaluator {
    fn has_split(&self, split: Split) -> bool {
        split == Split::Test || self.has_validation
    }

    fn evaluate(&self, rendered: &str, split: Split) -> Result<MetricBundle> {
        let body = json!({ "instruction": rendered, "split": split.as_str() });
        let bundle: MetricBundle = post_json(&self.client, &self.endpoint, &body)?;
        bundle.validate()?;
        Ok(bundle)
    }
}

/// Perplexity scorer reached over HTTP.
///
/// Request: `{"text": "<rendered>"}`. Response: `{"perplexity": x}` with `x >= 1`.
pub struct RemoteScorer {
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl RemoteScorer {
    pub fn new(endpoint: &str, timeout: Duration) -> Result<Self> {
        Ok(Self {
            endpoint: endpoint.to_owned(),
            client: http_client(timeout)?,
        })
    }
}

#[derive(Deserialize)]
struct ScoreResponse {
    perplexity: f64,
}

impl PerplexityScorer for RemoteScorer {
    fn perplexity(&self, text: &str) -> Result<f64> {
        let resp: ScoreResponse = post_json(&self.client, &self.endpoint, &json!({ "text": text }))?;
        if !resp.perplexity.is_finite() || resp.perplexity < 1.0 {
            return Err(Error::Evaluation(format!(
                "scorer returned invalid perplexity {}",
                resp.perplexity
            )));
        }
        Ok(resp.perplexity)
    }
}

fn http_client(timeout: Duration) -> Result<reqwest::blocking::Client> {
    reqwest::blocking::Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| Error::Config(format!("building HTTP client: {e}")))
}

fn post_json<T: serde::de::DeserializeOwned>(
    client: &reqwest::blocking::Client,
    endpoint: &str,
    body: &serde_json::Value,
) -> Result<T> {
    let resp = client
        .post(endpoint)
        .json(body)
        .send()
        .map_err(|e| Error::Evaluation(format!("{endpoint} unreachable: {e}")))?;
    let status = resp.status();
    let text = resp
        .text()
        .map_err(|e| Error::Evaluation(format!("reading {endpoint}: {e}")))?;
    if !status.is_success() {
        return Err(Error::Evaluation(format!("{endpoint} returned {status}: {text}")));
    }
    serde_json::from_str(&text).map_err(|e| Error::Evaluation(format!("bad response from {endpoint}: {e}")))
}

/// Cache key: hex SHA-256 of the rendered text.
pub fn cache_key(rendered: &str) -> String {
    hex::encode(Sha256::digest(rendered.as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CachedScore {
    pub objectives: ObjectiveVector,
    pub degenerate: bool,
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    key: String,
    objectives: ObjectiveVector,
    #[serde(default)]
    degenerate: bool,
    created_ms: u64,
}

type Slot = Arc<Mutex<Option<CachedScore>>>;

/// Memoizes objective vectors by rendered text. Concurrent requests for the
/// same key wait on one computation.
#[derive(Default)]
pub struct ObjectiveCache {
    slots: Mutex<HashMap<String, Slot>>,
    file: Option<Mutex<BufWriter<File>>>,
    path: Option<PathBuf>,
}

impl ObjectiveCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads any existing records at `path` and appends new ones there.
    pub fn persistent(path: &Path) -> Result<Self> {
        let mut slots = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
            for (n, line) in reader.lines().enumerate() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CacheRecord = serde_json::from_str(&line)
                    .map_err(|e| Error::parse(format!("cache line {}", n + 1), e.to_string()))?;
                let score = CachedScore {
                    objectives: rec.objectives,
                    degenerate: rec.degenerate,
                };
                slots.insert(rec.key, Arc::new(Mutex::new(Some(score))));
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            slots: Mutex::new(slots),
            file: Some(Mutex::new(BufWriter::new(file))),
            path: Some(path.to_owned()),
        })
    }

    pub fn len(&self) -> usize {
        self.slots
            .lock()
            .unwrap()
            .values()
            .filter(|s| s.lock().unwrap().is_some())
            .count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, rendered: &str) -> Option<CachedScore> {
        let slot = self.slots.lock().unwrap().get(&cache_key(rendered)).cloned()?;
        let value = *slot.lock().unwrap();
        value
    }

    /// Returns the cached score or runs `compute` once for this key.
    /// The flag is `true` on a cache hit.
    pub fn get_or_compute(
        &self,
        rendered: &str,
        compute: impl FnOnce() -> Result<CachedScore>,
    ) -> Result<(CachedScore, bool)> {
        let key = cache_key(rendered);
        let slot = self
            .slots
            .lock()
            .unwrap()
            .entry(key.clone())
            .or_default()
            .clone();
        let mut guard = slot.lock().unwrap();
        if let Some(score) = *guard {
            return Ok((score, true));
        }
        let score = compute()?;
        *guard = Some(score);
        drop(guard);
        self.append(&key, &score)?;
        Ok((score, false))
    }

    fn append(&self, key: &str, score: &CachedScore) -> Result<()> {
        let Some(file) = &self.file else {
            return Ok(());
        };
        let created_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64);
        let line = serde_json::to_string(&CacheRecord {
            key: key.to_owned(),
            objectives: score.objectives,
            degenerate: score.degenerate,
            created_ms,
        })?;
        let path = self.path.clone().unwrap_or_default();
        let mut w = file.lock().unwrap();
        writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
        w.flush().map_err(|e| Error::io(&path, e))
    }
}

/// Result of scoring one instruction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub objectives: ObjectiveVector,
    pub cached: bool,
    /// The metric sum was zero and the sentinel was used.
    pub degenerate: bool,
}

/// Everything needed to turn an instruction into its objective vector.
pub struct ObjectiveEvaluator {
    pub task: Arc<dyn TaskEvaluator>,
    pub scorer: Arc<dyn PerplexityScorer>,
    pub split: EvalSplitPolicy,
    pub sentinel: f64,
    pub cache: ObjectiveCache,
}

impl ObjectiveEvaluator {
    pub fn new(task: Arc<dyn TaskEvaluator>, scorer: Arc<dyn PerplexityScorer>, cache: ObjectiveCache) -> Self {
        Self {
            task,
            scorer,
            split: EvalSplitPolicy::default(),
            sentinel: DEFAULT_DEGENERATE_SENTINEL,
            cache,
        }
    }

    pub fn evaluate(&self, instr: &Instruction) -> Result<Evaluation> {
        evaluate(
            instr,
            &self.cache,
            self.task.as_ref(),
            self.scorer.as_ref(),
            self.split,
            self.sentinel,
        )
    }
}

/// Cache-backed `(m, l, r)`; a hit makes no evaluator or scorer calls.
pub fn evaluate(
    instr: &Instruction,
    cache: &ObjectiveCache,
    evaluator: &dyn TaskEvaluator,
    scorer: &dyn PerplexityScorer,
    split: EvalSplitPolicy,
    sentinel: f64,
) -> Result<Evaluation> {
    let rendered = instr.render();
    let (score, cached) = cache.get_or_compute(&rendered, || {
        let (performance, degenerate) = eval_performance(instr, evaluator, split, sentinel)?;
        let length = eval_length(instr);
        let perplexity = eval_perplexity(instr, scorer)?;
        let objectives = ObjectiveVector::new(performance, length, perplexity)
            .map_err(|e| Error::Evaluation(e.to_string()))?;
        Ok(CachedScore {
            objectives,
            degenerate,
        })
    })?;
    Ok(Evaluation {
        objectives: score.objectives,
        cached,
        degenerate: score.degenerate,
    })
}
