//! Benchmark runs against a multimodal model, response grading and accuracy
//! reports.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use async_trait::async_trait;
use futures::stream::{self, StreamExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::warn;

use crate::dataset::{Manifest, ReviewFilter, SampleSource, Split};
use crate::geometry::RelationAxis;
use crate::llm::{ChatClient, ChatMessage, ChatRequest, LlmError};
use crate::matching::mentioned;
use crate::vqa::VqaItem;

pub const GRADING_SYSTEM_PROMPT: &str = include_str!("prompts/grading.txt");

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("response log {path} line {line}: {message}")]
    Log {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// One multiple-choice question of the benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkItem {
    pub sample_id: String,
    pub qa_index: usize,
    pub item: VqaItem,
    pub image_path: PathBuf,
    pub source: SampleSource,
}

impl BenchmarkItem {
    pub fn key(&self) -> (String, usize) {
        (self.sample_id.clone(), self.qa_index)
    }
}

/// Multiple-choice QAs of `split` whose review status passes `filter`.
/// Relative image paths are resolved against `image_root`.
pub fn benchmark_items(
    manifest: &Manifest,
    split: Split,
    filter: ReviewFilter,
    image_root: &Path,
) -> Vec<BenchmarkItem> {
    let mut out = Vec::new();
    for r in manifest.records() {
        if r.split != split || !filter.admits(r.review) {
            continue;
        }
        for (i, qa) in r.qas.iter().enumerate() {
            if !qa.is_multiple_choice() {
                continue;
            }
            out.push(BenchmarkItem {
                sample_id: r.sample_id.clone(),
                qa_index: i,
                item: qa.clone(),
                image_path: image_root.join(&r.image_path),
                source: r.source,
            });
        }
    }
    out
}

#[async_trait]
pub trait VisionModel: Send + Sync {
    async fn respond(&self, item: &BenchmarkItem) -> Result<String, LlmError>;
}

/// Sends the image and the question with options through a chat endpoint.
pub struct ChatVisionModel<C> {
    client: C,
    temperature: f64,
}

impl<C: ChatClient> ChatVisionModel<C> {
    pub fn new(client: C, temperature: f64) -> Self {
        Self { client, temperature }
    }
}

pub fn model_request(item: &BenchmarkItem, png: Vec<u8>, temperature: f64) -> ChatRequest {
    ChatRequest::new(
        vec![ChatMessage::user(item.item.render_prompt()).with_image(png)],
        temperature,
    )
}

#[async_trait]
impl<C: ChatClient> VisionModel for ChatVisionModel<C> {
    async fn respond(&self, item: &BenchmarkItem) -> Result<String, LlmError> {
        let png = tokio::fs::read(&item.image_path)
            .await
            .map_err(|e| LlmError::Other(format!("{}: {e}", item.image_path.display())))?;
        self.client.complete(&model_request(item, png, self.temperature)).await
    }
}

/// Answers every question correctly.
pub struct GroundTruthResponder;

#[async_trait]
impl VisionModel for GroundTruthResponder {
    async fn respond(&self, item: &BenchmarkItem) -> Result<String, LlmError> {
        let idx = item.item.answer_index.unwrap_or(0);
        Ok(format!("({}) {}", idx + 1, item.item.answer))
    }
}

/// Picks an option uniformly at random, reproducibly per question.
pub struct UniformRandomResponder {
    pub seed: u64,
}

#[async_trait]
impl VisionModel for UniformRandomResponder {
    async fn respond(&self, item: &BenchmarkItem) -> Result<String, LlmError> {
        let key = format!("{}\0{}", item.sample_id, item.qa_index);
        let d = Sha256::digest(key.as_bytes());
        let mix = u64::from_be_bytes(d[..8].try_into().expect("32-byte digest"));
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ mix);
        let options = &item.item.options;
        let k = rng.random_range(0..options.len().max(1));
        Ok(format!(
            "({}) {}",
            k + 1,
            options.get(k).map(String::as_str).unwrap_or("")
        ))
    }
}

/// Always gives the same reply.
pub struct ConstantResponder(pub String);

#[async_trait]
impl VisionModel for ConstantResponder {
    async fn respond(&self, _item: &BenchmarkItem) -> Result<String, LlmError> {
        Ok(self.0.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub sample_id: String,
    pub qa_index: usize,
    /// `None` when the endpoint failed for this item.
    pub raw_text: Option<String>,
    pub error: Option<String>,
    pub latency_ms: u64,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub concurrency: usize,
    pub limit: Option<usize>,
    /// JSONL log of responses; existing entries are reused.
    pub log_path: Option<PathBuf>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            concurrency: 8,
            limit: None,
            log_path: None,
        }
    }
}

fn read_log(path: &Path) -> Result<HashMap<(String, usize), ModelResponse>, EvalError> {
    let mut done = HashMap::new();
    if !path.exists() {
        return Ok(done);
    }
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ModelResponse>(line) {
            Ok(r) => {
                done.insert((r.sample_id.clone(), r.qa_index), r);
            }
            // a torn final line from an interrupted run is retried
            Err(_) if n + 1 == text.lines().count() => warn!(line = n + 1, "ignoring torn response log line"),
            Err(e) => {
                return Err(EvalError::Log {
                    path: path.to_path_buf(),
                    line: n + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(done)
}

/// Query `model` for each item (up to `limit`), reusing logged responses.
/// Endpoint failures are recorded on the response, not raised. Output is in
/// item order.
pub async fn run_benchmark<M: VisionModel + ?Sized>(
    model: &M,
    items: &[BenchmarkItem],
    options: &RunOptions,
) -> Result<Vec<ModelResponse>, EvalError> {
    let items = &items[..options.limit.unwrap_or(items.len()).min(items.len())];
    let mut done = match &options.log_path {
        Some(p) => read_log(p)?,
        None => HashMap::new(),
    };
    let mut log = match &options.log_path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|source| EvalError::Io {
                    path: parent.to_path_buf(),
                    source,
                })?;
            }
            Some(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|source| EvalError::Io {
                        path: p.clone(),
                        source,
                    })?,
            )
        }
        None => None,
    };
    let pending: Vec<&BenchmarkItem> = items.iter().filter(|i| !done.contains_key(&i.key())).collect();
    let mut stream = stream::iter(pending)
        .map(|item| async move {
            let start = Instant::now();
            let result = model.respond(item).await;
            let latency_ms = start.elapsed().as_millis() as u64;
            let (raw_text, error) = match result {
                Ok(text) => (Some(text), None),
                Err(e) => {
                    warn!(sample = %item.sample_id, qa = item.qa_index, error = %e, "model call failed");
                    (None, Some(e.to_string()))
                }
            };
            ModelResponse {
                sample_id: item.sample_id.clone(),
                qa_index: item.qa_index,
                raw_text,
                error,
                latency_ms,
            }
        })
        .buffer_unordered(options.concurrency.max(1));
    while let Some(resp) = stream.next().await {
        if let (Some(f), Some(path)) = (log.as_mut(), &options.log_path) {
            let mut line = serde_json::to_string(&resp).expect("responses serialize");
            line.push('\n');
            f.write_all(line.as_bytes())
                .and_then(|_| f.flush())
                .map_err(|source| EvalError::Io {
                    path: path.clone(),
                    source,
                })?;
        }
        done.insert((resp.sample_id.clone(), resp.qa_index), resp);
    }
    Ok(items
        .iter()
        .map(|i| done.remove(&i.key()).expect("every item answered"))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grader {
    Matcher,
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradeNote {
    /// No option could be identified.
    Unparsed,
    /// Several options were identified.
    Ambiguous,
    /// The model call failed.
    ModelError,
    /// The LLM judge never gave a yes/no reply, or could not be reached.
    GraderFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeVerdict {
    pub sample_id: String,
    pub qa_index: usize,
    /// `None` when the item could not be graded.
    pub correct: Option<bool>,
    pub grader: Grader,
    pub matched_option: Option<usize>,
    pub note: Option<GradeNote>,
}

impl GradeVerdict {
    fn new(response: &ModelResponse, grader: Grader) -> Self {
        Self {
            sample_id: response.sample_id.clone(),
            qa_index: response.qa_index,
            correct: None,
            grader,
            matched_option: None,
            note: None,
        }
    }
}

fn index_tokens(text: &str, option_count: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut push = |i: usize| {
        if i < option_count && !out.contains(&i) {
            out.push(i);
        }
    };
    let label_value = |c: char| -> Option<usize> {
        match c {
            '1'..='9' => Some(c as usize - '1' as usize),
            'a'..='z' => Some(c as usize - 'a' as usize),
            'A'..='Z' => Some(c as usize - 'A' as usize),
            _ => None,
        }
    };
    let chars: Vec<char> = text.chars().collect();
    for w in chars.windows(3) {
        if w[0] == '(' && w[2] == ')' {
            if let Some(i) = label_value(w[1]) {
                push(i);
            }
        }
    }
    // bare "2." / "2)" / "b)" only at the very start of the reply
    let lead: Vec<char> = text.trim_start().chars().take(3).collect();
    if lead.len() >= 2 && matches!(lead[1], '.' | ')') && lead.get(2).is_none_or(|c| c.is_whitespace()) {
        let letter_ok = lead[0].is_ascii_alphabetic() && lead[1] == ')';
        if lead[0].is_ascii_digit() || letter_ok {
            if let Some(i) = label_value(lead[0]) {
                push(i);
            }
        }
    }
    out
}

/// Deterministic grading: identify the option a reply refers to by index
/// token or by option text at word boundaries. Exactly one candidate must
/// remain; otherwise the item is marked unparsed or ambiguous and counts as
/// wrong.
pub fn grade_with_matcher(response: &ModelResponse, item: &VqaItem) -> GradeVerdict {
    let mut verdict = GradeVerdict::new(response, Grader::Matcher);
    let Some(text) = &response.raw_text else {
        verdict.note = Some(GradeNote::ModelError);
        return verdict;
    };
    let options: Vec<&str> = item.options.iter().map(String::as_str).collect();
    let mut candidates = index_tokens(text, options.len());
    for i in mentioned(text, &options) {
        if !candidates.contains(&i) {
            candidates.push(i);
        }
    }
    match candidates.as_slice() {
        [one] => {
            verdict.matched_option = Some(*one);
            verdict.correct = Some(Some(*one) == item.answer_index);
        }
        [] => {
            verdict.correct = Some(false);
            verdict.note = Some(GradeNote::Unparsed);
        }
        _ => {
            verdict.correct = Some(false);
            verdict.note = Some(GradeNote::Ambiguous);
        }
    }
    verdict
}

pub fn grading_request(item: &VqaItem, response_text: &str) -> ChatRequest {
    let user = format!(
        "{}\nCorrect answer: {}\nAnswer: {}",
        item.render_prompt(),
        item.answer,
        response_text
    );
    ChatRequest::new(
        vec![ChatMessage::system(GRADING_SYSTEM_PROMPT), ChatMessage::user(user)],
        0.0,
    )
}

fn yes_no(reply: &str) -> Option<bool> {
    let first: String = reply
        .trim_start_matches(|c: char| !c.is_alphanumeric())
        .chars()
        .take_while(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect();
    match first.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

/// Ask an LLM judge whether the reply is correct. Replies that do not start
/// with yes/no are retried up to `max_attempts` times in total.
pub async fn grade_with_llm<C: ChatClient + ?Sized>(
    grader: &C,
    item: &VqaItem,
    response: &ModelResponse,
    max_attempts: u32,
) -> GradeVerdict {
    let mut verdict = GradeVerdict::new(response, Grader::Llm);
    let Some(text) = &response.raw_text else {
        verdict.note = Some(GradeNote::ModelError);
        return verdict;
    };
    let request = grading_request(item, text);
    for attempt in 1..=max_attempts.max(1) {
        match grader.complete(&request).await {
            Ok(reply) => match yes_no(&reply) {
                Some(ok) => {
                    verdict.correct = Some(ok);
                    return verdict;
                }
                None => warn!(attempt, %reply, "grader reply is neither yes nor no"),
            },
            Err(e) => {
                warn!(error = %e, "grader request failed");
                break;
            }
        }
    }
    verdict.note = Some(GradeNote::GraderFailed);
    verdict
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub graded: usize,
    pub ungraded: usize,
}

impl Tally {
    fn add(&mut self, correct: Option<bool>) {
        match correct {
            Some(c) => {
                self.graded += 1;
                self.correct += c as usize;
            }
            None => self.ungraded += 1,
        }
    }

    /// Correct over graded items.
    pub fn accuracy(&self) -> Option<f64> {
        (self.graded > 0).then(|| self.correct as f64 / self.graded as f64)
    }

    /// Correct over all items, counting ungraded ones as wrong.
    pub fn accuracy_counting_ungraded(&self) -> Option<f64> {
        let total = self.graded + self.ungraded;
        (total > 0).then(|| self.correct as f64 / total as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: RelationAxis,
    pub both: Tally,
    pub synthetic: Tally,
    pub real: Tally,
    /// Column labels: the class names, then `unparsed`.
    pub columns: Vec<String>,
    /// Rows indexed by truth class in canonical order; matcher verdicts only.
    pub confusion: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub tasks: Vec<TaskReport>,
    pub responses: usize,
}

impl EvalReport {
    pub fn task(&self, task: RelationAxis) -> &TaskReport {
        self.tasks.iter().find(|t| t.task == task).expect("all tasks reported")
    }
}

/// Aggregate verdicts per task and per image source. Verdicts without a
/// matching item are ignored.
pub fn compute_report(model: &str, items: &[BenchmarkItem], verdicts: &[GradeVerdict]) -> EvalReport {
    let by_key: HashMap<(String, usize), &BenchmarkItem> = items.iter().map(|i| (i.key(), i)).collect();
    let mut tasks: BTreeMap<RelationAxis, TaskReport> = RelationAxis::ALL
        .iter()
        .map(|&task| {
            let n = task.class_names().len();
            let mut columns: Vec<String> = task.class_names().iter().map(|s| s.to_string()).collect();
            columns.push("unparsed".into());
            (
                task,
                TaskReport {
                    task,
                    both: Tally::default(),
                    synthetic: Tally::default(),
                    real: Tally::default(),
                    columns,
                    confusion: vec![vec![0; n + 1]; n],
                },
            )
        })
        .collect();
    let mut responses = 0;
    for v in verdicts {
        let Some(bi) = by_key.get(&(v.sample_id.clone(), v.qa_index)) else {
            continue;
        };
        responses += 1;
        let report = tasks.get_mut(&bi.item.task).expect("every task present");
        report.both.add(v.correct);
        match bi.source {
            SampleSource::Synthetic => report.synthetic.add(v.correct),
            SampleSource::Real => report.real.add(v.correct),
        }
        if v.grader == Grader::Matcher && v.correct.is_some() {
            let Some(truth) = bi.item.task.class_index(&bi.item.answer) else {
                continue;
            };
            let n = bi.item.task.class_names().len();
            let col = v
                .matched_option
                .and_then(|m| bi.item.options.get(m))
                .and_then(|o| bi.item.task.class_index(o))
                .unwrap_or(n);
            report.confusion[truth][col] += 1;
        }
    }
    EvalReport {
        model: model.to_string(),
        tasks: tasks.into_values().collect(),
        responses,
    }
}

fn pct(v: Option<f64>) -> String {
    v.map(|a| format!("{:.1}", a * 100.0)).unwrap_or_else(|| "-".into())
}

/// Accuracy table with Both/Syn/Real columns per task, followed by the
/// same numbers with ungraded items counted as wrong, and the confusion
/// matrices.
pub fn render_report_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let mut header = format!("{:<24}", "model");
    for t in &report.tasks {
        for part in ["both", "syn", "real"] {
            header.push_str(&format!(" {:>10}", format!("{}:{part}", &t.task.name()[..4])));
        }
    }
    let row = |label: &str, f: &dyn Fn(&Tally) -> Option<f64>| {
        let mut line = format!("{label:<24}");
        for t in &report.tasks {
            for tally in [&t.both, &t.synthetic, &t.real] {
                line.push_str(&format!(" {:>10}", pct(f(tally))));
            }
        }
        line
    };
    let _ = writeln!(out, "{header}");
    let _ = writeln!(out, "{}", row(&report.model, &|t| t.accuracy()));
    let _ = writeln!(
        out,
        "{}",
        row("  (ungraded as wrong)", &|t| t.accuracy_counting_ungraded())
    );
    for t in &report.tasks {
        let _ = writeln!(
            out,
            "\n{} confusion (rows: truth; graded {}, ungraded {})",
            t.task, t.both.graded, t.both.ungraded
        );
        let _ = write!(out, "{:<12}", "");
        for c in &t.columns {
            let _ = write!(out, " {c:>11}");
        }
        let _ = writeln!(out);
        for (name, row) in t.task.class_names().iter().zip(&t.confusion) {
            let _ = write!(out, "{name:<12}");
            for v in row {
                let _ = write!(out, " {v:>11}");
            }
            let _ = writeln!(out);
        }
    }
    out
}
