//! Chat backends: a remote chat-completions client with retries, and a
//! deterministic mock that answers from the knowledge graph.
//!
//! Multi-turn prompts are played out turn by turn: every user turn that is
//! not already followed by an assistant turn triggers one completion, and the
//! reply is appended before the next user turn is sent.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::image_ops::{self, RasterImage};
use crate::kg::{AnalogyQuestion, KnowledgeGraph};
use crate::prompt::{self, AnswerRequest, DialoguePrompt, ImageAttachment, PromptTask, Role, Step1Target, Turn};
use crate::seed::rng_for;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("gave up after {attempts} attempt(s): {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("oracle gap: question `{0}` has no shared relation path in the graph")]
    OracleGap(String),
    #[error("image: {0}")]
    Image(String),
    #[error("invalid backend config: {0}")]
    Config(String),
    #[error("mock oracle cannot answer a prompt without task metadata")]
    Unsupported,
}

impl ClientError {
    fn retryable(&self) -> bool {
        match self {
            ClientError::Timeout { .. } | ClientError::Transport(_) => true,
            ClientError::Http { status, .. } => *status == 408 || *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Remote,
    #[default]
    MockOracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Full chat-completions URL, e.g. `http://localhost:8000/v1/chat/completions`.
    pub endpoint: Option<String>,
    pub model: Option<String>,
    /// Name of the environment variable holding the bearer token.
    pub token_env: Option<String>,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub parallelism: usize,
    /// First retry delay; doubles on each further retry.
    pub backoff_ms: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::MockOracle,
            endpoint: None,
            model: None,
            token_env: None,
            timeout_secs: 60.0,
            max_retries: 3,
            parallelism: 1,
            backoff_ms: 500,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), ClientError> {
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return Err(ClientError::Config("timeout must be positive".into()));
        }
        if self.parallelism < 1 {
            return Err(ClientError::Config("parallelism must be at least 1".into()));
        }
        if self.kind == BackendKind::Remote && (self.endpoint.is_none() || self.model.is_none()) {
            return Err(ClientError::Config("remote backend requires endpoint and model".into()));
        }
        Ok(())
    }

    /// Short identity used in cache keys.
    pub fn identity(&self) -> String {
        match self.kind {
            BackendKind::MockOracle => "mock_oracle".to_string(),
            BackendKind::Remote => format!(
                "remote:{}@{}",
                self.model.as_deref().unwrap_or(""),
                self.endpoint.as_deref().unwrap_or("")
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub error_rate: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            error_rate: 0.0,
            seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<(), ClientError> {
        if !(0.0..=1.0).contains(&self.error_rate) {
            return Err(ClientError::Config(format!("error_rate {} outside [0, 1]", self.error_rate)));
        }
        Ok(())
    }
}

/// One played-out dialogue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub key: String,
    /// Request turns with the generated assistant replies interleaved.
    pub turns: Vec<Turn>,
    pub response: String,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<Value>,
    pub attempts: u32,
}

pub trait ChatBackend: Send + Sync {
    fn identity(&self) -> String;

    /// Plays out `prompt` and returns the transcript keyed by `key`.
    fn complete(&self, key: &str, prompt: &DialoguePrompt) -> Result<Transcript, ClientError>;
}

/// Indices of user turns that need a generated reply.
fn pending_replies(turns: &[Turn]) -> Vec<usize> {
    (0..turns.len())
        .filter(|&i| turns[i].role == Role::User && turns.get(i + 1).is_none_or(|t| t.role != Role::Assistant))
        .collect()
}

/// Plays out a dialogue with `reply` producing each missing assistant turn
/// from the history so far.
fn play<F>(key: &str, prompt: &DialoguePrompt, mut reply: F) -> Result<Transcript, ClientError>
where
    F: FnMut(&[Turn], usize) -> Result<Reply, ClientError>,
{
    let start = Instant::now();
    let mut turns: Vec<Turn> = Vec::with_capacity(prompt.turns.len() * 2);
    let pending = pending_replies(&prompt.turns);
    let mut last = None;
    let mut attempts = 0;
    for (i, turn) in prompt.turns.iter().enumerate() {
        turns.push(turn.clone());
        if pending.contains(&i) {
            let r = reply(&turns, i)?;
            attempts += r.attempts;
            turns.push(Turn::assistant(r.text.clone()));
            last = Some(r);
        }
    }
    let last = last.ok_or_else(|| ClientError::MalformedResponse("prompt has no user turn".into()))?;
    Ok(Transcript {
        key: key.to_string(),
        turns,
        response: last.text,
        latency_ms: start.elapsed().as_millis() as u64,
        usage: last.usage,
        raw: last.raw,
        attempts,
    })
}

struct Reply {
    text: String,
    usage: Option<Value>,
    raw: Option<Value>,
    attempts: u32,
}

/// Chat-completions client over HTTP.
pub struct RemoteBackend {
    config: BackendConfig,
    token: Option<String>,
    kg: Arc<KnowledgeGraph>,
    http: reqwest::blocking::Client,
}

impl RemoteBackend {
    /// Reads the bearer token from the configured environment variable.
    pub fn new(config: BackendConfig, kg: Arc<KnowledgeGraph>) -> Result<Self, ClientError> {
        config.validate()?;
        let token = match &config.token_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| ClientError::Auth(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(Self { config, token, kg, http })
    }

    fn attachment_url(&self, att: &ImageAttachment) -> Result<String, ClientError> {
        if let [only] = att.parts.as_slice() {
            if self.kg.resolve_image(&only.image_ref).is_none() {
                return Ok(only.image_ref.clone());
            }
        }
        let images = att
            .parts
            .iter()
            .map(|p| {
                let path = self
                    .kg
                    .resolve_image(&p.image_ref)
                    .ok_or_else(|| ClientError::Image(format!("cannot combine remote image {}", p.image_ref)))?;
                RasterImage::load(&path).map_err(|e| ClientError::Image(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let combined = image_ops::combine(&images).map_err(|e| ClientError::Image(e.to_string()))?;
        image_ops::encode_for_wire(&combined).map_err(|e| ClientError::Image(e.to_string()))
    }

    /// Request body for the conversation so far.
    pub fn request_body(&self, turns: &[Turn]) -> Result<Value, ClientError> {
        let messages = turns
            .iter()
            .map(|t| {
                if t.images.is_empty() {
                    return Ok(json!({ "role": t.role.name(), "content": t.text }));
                }
                let mut parts = vec![json!({ "type": "text", "text": t.text })];
                for att in &t.images {
                    parts.push(json!({ "type": "image_url", "image_url": { "url": self.attachment_url(att)? } }));
                }
                Ok(json!({ "role": t.role.name(), "content": parts }))
            })
            .collect::<Result<Vec<_>, ClientError>>()?;
        Ok(json!({ "model": self.config.model, "messages": messages }))
    }

    fn send_once(&self, body: &Value) -> Result<(String, Value), ClientError> {
        let endpoint = self.config.endpoint.as_deref().expect("validated");
        let mut req = self
            .http
            .post(endpoint)
            .header("content-type", "application/json")
            .body(body.to_string());
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                ClientError::Timeout { attempts: 1 }
            } else {
                ClientError::Transport(e.to_string())
            }
        })?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| ClientError::Transport(e.to_string()))?;
        if status == 401 || status == 403 {
            return Err(ClientError::Auth(format!("HTTP {status}")));
        }
        if !(200..300).contains(&status) {
            return Err(ClientError::Http { status, body: text });
        }
        let raw: Value = serde_json::from_str(&text).map_err(|e| ClientError::MalformedResponse(e.to_string()))?;
        let content = extract_content(&raw)?;
        Ok((content, raw))
    }

    fn send_with_retries(&self, body: &Value) -> Result<Reply, ClientError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.send_once(body) {
                Ok((text, raw)) => {
                    return Ok(Reply {
                        text,
                        usage: raw.get("usage").cloned(),
                        raw: Some(raw),
                        attempts: attempt,
                    })
                }
                Err(e) if e.retryable() && attempt <= self.config.max_retries => {
                    let delay = self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16)).min(30_000);
                    log::warn!("attempt {attempt} failed ({e}); retrying in {delay} ms");
                    std::thread::sleep(Duration::from_millis(delay));
                }
                Err(ClientError::Timeout { .. }) => return Err(ClientError::Timeout { attempts: attempt }),
                Err(e) if e.retryable() => {
                    return Err(ClientError::RetriesExhausted {
                        attempts: attempt,
                        last: e.to_string(),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// `choices[0].message.content`, as a string or a list of text parts.
pub fn extract_content(raw: &Value) -> Result<String, ClientError> {
    let content = raw
        .pointer("/choices/0/message/content")
        .ok_or_else(|| ClientError::MalformedResponse("missing choices[0].message.content".into()))?;
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join("")),
        other => Err(ClientError::MalformedResponse(format!("unexpected content {other}"))),
    }
}

impl ChatBackend for RemoteBackend {
    fn identity(&self) -> String {
        self.config.identity()
    }

    fn complete(&self, key: &str, prompt: &DialoguePrompt) -> Result<Transcript, ClientError> {
        play(key, prompt, |history, _| {
            let body = self.request_body(history)?;
            self.send_with_retries(&body)
        })
    }
}

/// Offline stand-in for a fine-tuned model: answers from the graph and errs
/// with a configured probability.
pub struct MockOracle {
    kg: Arc<KnowledgeGraph>,
    config: OracleConfig,
}

impl MockOracle {
    pub fn new(kg: Arc<KnowledgeGraph>, config: OracleConfig) -> Result<Self, ClientError> {
        config.validate()?;
        Ok(Self { kg, config })
    }

    pub fn config(&self) -> &OracleConfig {
        &self.config
    }

    fn step1_answer(&self, triplet: &crate::kg::Triplet, target: Step1Target) -> String {
        let kg = &self.kg;
        let mut rng = rng_for(
            self.config.seed,
            &["step1", &triplet.head, &triplet.relation, &triplet.tail, &format!("{target:?}")],
        );
        let wrong = rng.gen::<f64>() < self.config.error_rate;
        let (gold, pool): (&str, Vec<&str>) = match target {
            Step1Target::Head => (&triplet.head, kg.entities().map(|e| e.id.as_str()).collect()),
            Step1Target::Tail => (&triplet.tail, kg.entities().map(|e| e.id.as_str()).collect()),
            Step1Target::Relation => (&triplet.relation, kg.relations().map(|r| r.id.as_str()).collect()),
        };
        let others: Vec<&str> = pool.into_iter().filter(|id| *id != gold).collect();
        let pick = if wrong && !others.is_empty() {
            others[rng.gen_range(0..others.len())]
        } else {
            gold
        };
        match target {
            Step1Target::Relation => kg.relation(pick).map(|r| r.label.clone()),
            _ => kg.entity(pick).map(|e| e.label.clone()),
        }
        .unwrap_or_default()
    }

    fn recon_entity(&self, entity: &str) -> String {
        self.kg
            .entity(entity)
            .map(|e| {
                if e.description.trim().is_empty() {
                    e.label.clone()
                } else {
                    e.description.clone()
                }
            })
            .unwrap_or_default()
    }

    fn recon_relation(&self, head: &str, tail: &str) -> String {
        self.kg
            .relations_between(head, tail)
            .ok()
            .and_then(|rs| rs.first().and_then(|r| self.kg.relation(r)).cloned())
            .map(|r| if r.description.trim().is_empty() { r.label } else { r.description })
            .unwrap_or_else(|| "related to".to_string())
    }
}

impl ChatBackend for MockOracle {
    fn identity(&self) -> String {
        format!("mock_oracle(p={},seed={})", self.config.error_rate, self.config.seed)
    }

    fn complete(&self, key: &str, prompt: &DialoguePrompt) -> Result<Transcript, ClientError> {
        let task = prompt.task.as_ref().ok_or(ClientError::Unsupported)?;
        let final_text = match task {
            PromptTask::Step1 { triplet, target } => self.step1_answer(triplet, *target),
            PromptTask::ReconstructEntity { entity, .. } => self.recon_entity(entity),
            PromptTask::ReconstructRelation { head, tail, .. } => self.recon_relation(head, tail),
            PromptTask::Analogy { question, request } => oracle_answer(&self.config, &self.kg, question, request)?.render(),
        };
        let describe = match task {
            PromptTask::Analogy { question, .. } => prompt::describe_answer(question, &self.kg)
                .map_err(|e| ClientError::MalformedResponse(e.to_string()))?,
            _ => None,
        };
        let pending = pending_replies(&prompt.turns);
        let last = pending.last().copied();
        let mut t = play(key, prompt, |_, i| {
            let text = if Some(i) == last {
                final_text.clone()
            } else {
                describe.clone().unwrap_or_default()
            };
            Ok(Reply {
                text,
                usage: None,
                raw: None,
                attempts: 1,
            })
        })?;
        t.latency_ms = 0;
        t.raw = Some(json!({ "backend": "mock_oracle" }));
        Ok(t)
    }
}

/// Structured oracle reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleReply {
    pub relation: String,
    pub answer: String,
}

impl OracleReply {
    pub fn render(&self) -> String {
        format!("Relation: {}\nAnswer: {}", self.relation, self.answer)
    }
}

/// Relation id linking the example pair under which the query maps to the gold
/// answer. Prefers the question's gold relation when it qualifies.
pub fn answer_path(kg: &KnowledgeGraph, question: &AnalogyQuestion) -> Option<String> {
    let rels = kg.relations_between(&question.example_head, &question.example_tail).ok()?;
    let leads_to_gold = |r: &String| {
        kg.tails_for(&question.query, r)
            .map(|ts| ts.contains(&question.gold_answer))
            .unwrap_or(false)
    };
    if let Some(g) = &question.gold_relation {
        if rels.contains(g) && leads_to_gold(g) {
            return Some(g.clone());
        }
    }
    rels.into_iter().find(leads_to_gold)
}

/// Answers an analogy question from the graph.
///
/// With probability `1 - error_rate` the answer is correct: the gold label
/// (qa), the gold option letter (multiple choice) or the right judgment
/// (true/false). Otherwise a uniformly chosen wrong answer is given. The
/// relation is drawn the same way, independently. Deterministic in
/// `(seed, question id, mode)`.
pub fn oracle_answer(
    config: &OracleConfig,
    kg: &KnowledgeGraph,
    question: &AnalogyQuestion,
    request: &AnswerRequest,
) -> Result<OracleReply, ClientError> {
    let relation_id = answer_path(kg, question).ok_or_else(|| ClientError::OracleGap(question.id.clone()))?;
    let mode = request.mode();
    let mut rng = rng_for(config.seed, &["oracle", &question.id, mode.name()]);
    let answer_wrong = rng.gen::<f64>() < config.error_rate;
    let relation_wrong = rng.gen::<f64>() < config.error_rate;

    let label_of = |id: &str| kg.entity(id).map(|e| e.label.clone()).unwrap_or_else(|| id.to_string());
    let answer = match request {
        AnswerRequest::Qa => {
            if answer_wrong {
                let others: Vec<&str> = kg
                    .entities()
                    .map(|e| e.id.as_str())
                    .filter(|id| *id != question.gold_answer)
                    .collect();
                if others.is_empty() {
                    label_of(&question.gold_answer)
                } else {
                    label_of(others[rng.gen_range(0..others.len())])
                }
            } else {
                label_of(&question.gold_answer)
            }
        }
        AnswerRequest::MultipleChoice { options } => {
            let gold_idx = options
                .iter()
                .position(|o| *o == question.gold_answer)
                .ok_or_else(|| ClientError::MalformedResponse("options lack the gold answer".into()))?;
            let idx = if answer_wrong && options.len() > 1 {
                let wrong: Vec<usize> = (0..options.len()).filter(|i| *i != gold_idx).collect();
                wrong[rng.gen_range(0..wrong.len())]
            } else {
                gold_idx
            };
            prompt::option_letter(idx).to_string()
        }
        AnswerRequest::TrueFalse { candidate } => {
            let valid = *candidate == question.gold_answer;
            if valid != answer_wrong { "True" } else { "False" }.to_string()
        }
    };

    let relation = if relation_wrong {
        let others: Vec<&str> = kg
            .relations()
            .map(|r| r.id.as_str())
            .filter(|id| *id != relation_id)
            .collect();
        if others.is_empty() {
            relation_id.clone()
        } else {
            others[rng.gen_range(0..others.len())].to_string()
        }
    } else {
        relation_id
    };
    let relation = kg.relation(&relation).map(|r| r.label.clone()).unwrap_or(relation);
    Ok(OracleReply { relation, answer })
}

/// Runs `jobs` on at most `parallelism` worker threads. Results are keyed by
/// job key, so the outcome does not depend on scheduling. `on_done` is called
/// once per finished job from the worker that ran it.
pub fn complete_batch<F>(
    backend: &dyn ChatBackend,
    jobs: &[(String, DialoguePrompt)],
    parallelism: usize,
    on_done: F,
) -> BTreeMap<String, Result<Transcript, ClientError>>
where
    F: Fn(&str, &Result<Transcript, ClientError>) + Sync,
{
    let next = AtomicUsize::new(0);
    let results = Mutex::new(BTreeMap::new());
    let workers = parallelism.max(1).min(jobs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((key, prompt)) = jobs.get(i) else { break };
                let outcome = backend.complete(key, prompt);
                on_done(key, &outcome);
                results.lock().expect("results lock").insert(key.clone(), outcome);
            });
        }
    });
    results.into_inner().expect("results lock")
}

#[derive(Serialize, Deserialize)]
struct LogLine {
    key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    transcript: Option<Transcript>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

/// Append-only `transcripts.jsonl` writer. Each line is flushed as written.
pub struct TranscriptLog {
    out: Mutex<fs::File>,
}

impl TranscriptLog {
    pub fn append(path: &Path) -> std::io::Result<Self> {
        let file = fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { out: Mutex::new(file) })
    }

    pub fn record(&self, key: &str, outcome: &Result<Transcript, ClientError>) -> std::io::Result<()> {
        let line = match outcome {
            Ok(t) => LogLine {
                key: key.to_string(),
                transcript: Some(t.clone()),
                error: None,
            },
            Err(e) => LogLine {
                key: key.to_string(),
                transcript: None,
                error: Some(e.to_string()),
            },
        };
        let mut text = serde_json::to_string(&line).map_err(std::io::Error::other)?;
        text.push('\n');
        let mut f = self.out.lock().expect("transcript log lock");
        f.write_all(text.as_bytes())?;
        f.flush()
    }
}

/// Successful transcripts from a log, keyed by job key. Later lines win;
/// truncated trailing lines from an interrupted run are skipped.
pub fn load_transcripts(path: &Path) -> std::io::Result<BTreeMap<String, Transcript>> {
    let mut out = BTreeMap::new();
    if !path.exists() {
        return Ok(out);
    }
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        match serde_json::from_str::<LogLine>(&line) {
            Ok(LogLine {
                key,
                transcript: Some(t),
                ..
            }) => {
                out.insert(key, t);
            }
            Ok(_) => {}
            Err(e) => log::warn!("skipping unreadable transcript line: {e}"),
        }
    }
    Ok(out)
}
