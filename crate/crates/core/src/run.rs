//! Pipeline commands: validation, prompt rendering, corpus emission, image
//! combination, evaluation runs and reports.
//!
//! A run directory is self-describing. `results.jsonl` alone regenerates the
//! report, and `run_manifest.json` records the settings hash and seeds needed
//! for a replay. Interrupted runs resume from `transcripts.jsonl` when the
//! settings hash is unchanged.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::client::{self, answer_path, ChatBackend, ClientError, MockOracle, RemoteBackend, Transcript, TranscriptLog};
use crate::config::{ConfigError, RunConfig, VocabSource};
use crate::eval::{self, EvalError, EvalReport, QuestionResult};
use crate::files::{file_stem, jsonl, write_atomic};
use crate::ft_dataset::{self, EmissionSummary, FtError, Step2Options};
use crate::image_ops::{self, ImageError, RasterImage};
use crate::kg::{self, AnalogyQuestion, KgError, KnowledgeGraph, ModalityConfig, Slot};
use crate::mapper::{self, EmbeddingProvider, GroundedRanking, MapError, RemoteEmbedder, TrigramEmbedder, VocabIndex, VocabItem};
use crate::prompt::{self, Ablation, PromptError, PromptMode, PromptTask, PromptTemplates, Reconstruction};

pub const RESULTS_FILE: &str = "results.jsonl";
pub const TRANSCRIPTS_FILE: &str = "transcripts.jsonl";
pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const UNIFIED_FILE: &str = "unified.jsonl";
pub const RECON_CACHE_FILE: &str = "recon_cache.jsonl";
pub const ENTITY_VOCAB_CACHE: &str = "vocab_entities.txt";
pub const RELATION_VOCAB_CACHE: &str = "vocab_relations.txt";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Ft(#[from] FtError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Results { path: PathBuf, line: usize, message: String },
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error("no questions selected")]
    NoQuestions,
}

impl RunError {
    /// True for failures caused by bad inputs rather than by the run itself.
    pub fn is_validation(&self) -> bool {
        matches!(self, RunError::Config(_) | RunError::Kg(_))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Loaded graph, selected questions and templates.
pub struct Inputs {
    pub kg: Arc<KnowledgeGraph>,
    pub questions: Vec<AnalogyQuestion>,
    pub templates: PromptTemplates,
}

/// Loads everything `cfg` references. Questions outside the subtask filter
/// are dropped; the rest are sorted by id.
pub fn load_inputs(cfg: &RunConfig) -> Result<Inputs, RunError> {
    cfg.check()?;
    cfg.check_paths()?;
    let kg = kg::load_kg(&cfg.kg)?;
    let filter = cfg.subtask_filter()?;
    let mut questions = match &cfg.questions {
        Some(path) => kg::load_questions(path, &kg)?,
        None => Vec::new(),
    };
    questions.retain(|q| filter.is_empty() || filter.contains(&q.modality));
    questions.sort_by(|a, b| a.id.cmp(&b.id));
    let templates = match &cfg.templates {
        Some(p) => PromptTemplates::load(p)?,
        None => PromptTemplates::default(),
    };
    Ok(Inputs {
        kg: Arc::new(kg),
        questions,
        templates,
    })
}

/// Outcome of `validate`: one summary line plus diagnostics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Validation {
    pub summary: String,
    pub diagnostics: Vec<String>,
}

impl Validation {
    pub fn is_clean(&self) -> bool {
        self.diagnostics.is_empty()
    }
}

/// Loads the graph and questions and runs every invariant check. Load errors
/// become diagnostics.
pub fn cmd_validate(cfg: &RunConfig) -> Validation {
    let mut diagnostics = Vec::new();
    if let Err(e) = cfg.check().and_then(|_| cfg.check_paths()) {
        return Validation {
            summary: "configuration rejected".into(),
            diagnostics: vec![e.to_string()],
        };
    }
    let kg = match kg::load_kg(&cfg.kg) {
        Ok(kg) => kg,
        Err(e) => {
            return Validation {
                summary: "knowledge graph failed to load".into(),
                diagnostics: vec![e.to_string()],
            }
        }
    };
    diagnostics.extend(kg.validate());
    diagnostics.extend(kg.check_images());
    let mut summary = format!(
        "{} entities, {} relations, {} triplets",
        kg.entity_count(),
        kg.relation_count(),
        kg.triplet_count()
    );
    if let Some(path) = &cfg.questions {
        match kg::load_questions(path, &kg) {
            Ok(qs) => {
                let _ = write!(summary, ", {} questions", qs.len());
            }
            Err(e) => diagnostics.push(e.to_string()),
        }
    }
    Validation { summary, diagnostics }
}

pub fn make_backend(cfg: &RunConfig, kg: Arc<KnowledgeGraph>) -> Result<Box<dyn ChatBackend>, RunError> {
    Ok(match cfg.backend.kind {
        client::BackendKind::MockOracle => Box::new(MockOracle::new(kg, cfg.oracle)?),
        client::BackendKind::Remote => Box::new(RemoteBackend::new(cfg.backend.clone(), kg)?),
    })
}

pub fn make_embedder(cfg: &RunConfig) -> Result<Box<dyn EmbeddingProvider>, RunError> {
    Ok(match &cfg.embedding {
        None => Box::new(TrigramEmbedder::default()),
        Some(e) => {
            let token = match &e.token_env {
                Some(var) => Some(std::env::var(var).map_err(|_| ConfigError::Invalid(format!("environment variable {var} is not set")))?),
                None => None,
            };
            Box::new(RemoteEmbedder::new(&e.endpoint, &e.model, token, Duration::from_secs_f64(e.timeout_secs))?)
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub status: String,
    pub config: RunConfig,
    pub config_hash: String,
    pub seed: u64,
    pub oracle_seed: u64,
    pub templates_hash: String,
    pub backend: String,
    pub embedder: String,
    pub questions: usize,
    pub answered: usize,
    pub failed: usize,
    /// Some questions have no usable answer.
    pub partial: bool,
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest, RunError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
struct ReconEntry {
    backend: String,
    templates_hash: String,
    key: String,
    text: String,
}

fn read_recon_cache(path: &Path) -> Result<BTreeSet<ReconEntry>, RunError> {
    let mut out = BTreeSet::new();
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(out);
    };
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match serde_json::from_str(line) {
            Ok(e) => {
                out.insert(e);
            }
            Err(e) => log::warn!("{}: skipping unreadable cache line: {e}", path.display()),
        }
    }
    Ok(out)
}

/// Cache key for one reconstruction prompt: the entity (or example pair) and
/// how it was presented.
fn recon_key(question: &AnalogyQuestion, task: &PromptTask) -> Option<String> {
    let m = |slot: Slot| match question.modality.slot(slot) {
        kg::Modality::Visual => "v",
        kg::Modality::Textual => "t",
    };
    match task {
        PromptTask::ReconstructEntity { slot, entity, .. } => Some(format!("entity|{entity}|{}", m(*slot))),
        PromptTask::ReconstructRelation { head, tail, .. } => {
            Some(format!("pair|{head}|{tail}|{}{}", m(Slot::Head), m(Slot::Tail)))
        }
        _ => None,
    }
}

/// Runs (or loads from cache) the reconstruction prompts of every question.
fn reconstruct(
    cfg: &RunConfig,
    inputs: &Inputs,
    backend: &dyn ChatBackend,
    log: &TranscriptLog,
) -> Result<BTreeMap<String, Reconstruction>, RunError> {
    let cache_path = cfg.recon_cache.clone().unwrap_or_else(|| cfg.out.join(RECON_CACHE_FILE));
    let mut cache = read_recon_cache(&cache_path)?;
    let identity = backend.identity();
    let hash = inputs.templates.hash().to_string();
    let cached: BTreeMap<String, String> = cache
        .iter()
        .filter(|e| e.backend == identity && e.templates_hash == hash)
        .map(|e| (e.key.clone(), e.text.clone()))
        .collect();

    let mut plan: Vec<(String, Vec<(String, PromptTask)>)> = Vec::new();
    let mut jobs: BTreeMap<String, prompt::DialoguePrompt> = BTreeMap::new();
    for q in &inputs.questions {
        let prompts = match prompt::build_reconstruction_prompts(q, &inputs.kg, &inputs.templates) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("question {}: no reconstruction ({e})", q.id);
                continue;
            }
        };
        let mut keyed = Vec::with_capacity(prompts.len());
        for p in prompts {
            let task = p.task.clone().expect("reconstruction prompts carry a task");
            let key = recon_key(q, &task).expect("reconstruction task");
            if !cached.contains_key(&key) {
                jobs.entry(key.clone()).or_insert(p);
            }
            keyed.push((key, task));
        }
        plan.push((q.id.clone(), keyed));
    }

    let jobs: Vec<(String, prompt::DialoguePrompt)> = jobs.into_iter().collect();
    let fresh = client::complete_batch(backend, &jobs, cfg.backend.parallelism, |k, o| {
        if let Err(e) = log.record(&format!("recon|{k}"), o) {
            log::warn!("transcript log: {e}");
        }
    });
    let mut texts = cached;
    for (key, outcome) in fresh {
        match outcome {
            Ok(t) => {
                cache.insert(ReconEntry {
                    backend: identity.clone(),
                    templates_hash: hash.clone(),
                    key: key.clone(),
                    text: t.response.clone(),
                });
                texts.insert(key, t.response);
            }
            Err(e) => log::warn!("reconstruction {key} failed: {e}"),
        }
    }
    let lines = jsonl(&cache.into_iter().collect::<Vec<_>>())?;
    write_atomic(&cache_path, lines.as_bytes()).map_err(io_err(&cache_path))?;

    let mut out = BTreeMap::new();
    for (qid, keyed) in plan {
        let mut recon = Reconstruction::default();
        for (key, task) in keyed {
            let Some(text) = texts.get(&key).filter(|t| !t.trim().is_empty()) else {
                continue;
            };
            match task {
                PromptTask::ReconstructEntity { slot, .. } => {
                    recon.entity_texts.insert(slot, text.clone());
                }
                _ => recon.relation_text = Some(text.clone()),
            }
        }
        out.insert(qid, recon);
    }
    Ok(out)
}

/// Grounding vocabularies shared across questions.
struct Vocabularies {
    entities: Option<VocabIndex>,
    relations: Option<VocabIndex>,
    judgments: VocabIndex,
}

fn cached_index(items: Vec<VocabItem>, path: &Path, embedder: &dyn EmbeddingProvider) -> Result<VocabIndex, RunError> {
    if path.is_file() {
        match VocabIndex::load_cache(items.clone(), path) {
            Ok(index) if index.provider_tag() == embedder.tag() => return Ok(index),
            Ok(_) => {}
            Err(e) => log::warn!("{}: rebuilding vocabulary cache ({e})", path.display()),
        }
    }
    let index = VocabIndex::build(items, embedder)?;
    index.save_cache(path)?;
    Ok(index)
}

fn build_vocabularies(cfg: &RunConfig, inputs: &Inputs, embedder: &dyn EmbeddingProvider) -> Result<Vocabularies, RunError> {
    let kg = &inputs.kg;
    let item = |id: &str| VocabItem {
        id: id.to_string(),
        label: kg.entity(id).map(|e| e.label.clone()).unwrap_or_else(|| id.to_string()),
    };
    let entity_items: Vec<VocabItem> = match cfg.vocab {
        VocabSource::Kg => kg.entities().map(|e| item(&e.id)).collect(),
        VocabSource::QuestionOptions => inputs
            .questions
            .iter()
            .flat_map(|q| q.options.iter().flatten().chain(std::iter::once(&q.gold_answer)))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(|id| item(id))
            .collect(),
    };
    let entities = if cfg.mode == PromptMode::Qa && !entity_items.is_empty() {
        Some(cached_index(entity_items, &cfg.out.join(ENTITY_VOCAB_CACHE), embedder)?)
    } else {
        None
    };
    let relation_items: Vec<VocabItem> = kg
        .relations()
        .map(|r| VocabItem {
            id: r.id.clone(),
            label: r.label.clone(),
        })
        .collect();
    let relations = if relation_items.is_empty() {
        None
    } else {
        Some(cached_index(relation_items, &cfg.out.join(RELATION_VOCAB_CACHE), embedder)?)
    };
    let judgments = VocabIndex::build(
        vec![
            VocabItem {
                id: "false".into(),
                label: "False".into(),
            },
            VocabItem {
                id: "true".into(),
                label: "True".into(),
            },
        ],
        embedder,
    )?;
    Ok(Vocabularies {
        entities,
        relations,
        judgments,
    })
}

fn ground_with(cfg: &RunConfig, text: &str, index: &VocabIndex, embedder: &dyn EmbeddingProvider) -> Result<GroundedRanking, MapError> {
    if cfg.ablation.use_mapper {
        mapper::ground(text, index, embedder)
    } else {
        mapper::ground_exact(text, index)
    }
}

/// A prepared answer job or the reason it could not be prepared.
struct Prepared {
    question: AnalogyQuestion,
    gold: String,
    request: Option<prompt::AnswerRequest>,
    failure: Option<String>,
}

#[derive(Serialize)]
struct UnifiedLine<'a> {
    question_id: &'a str,
    subtask: String,
    #[serde(flatten)]
    prompt: prompt::UnifiedPrompt,
}

pub struct RunSummary {
    pub out_dir: PathBuf,
    pub report: EvalReport,
    pub manifest: RunManifest,
}

/// Builds the backend and embedder from `cfg` and runs.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunSummary, RunError> {
    let inputs = load_inputs(cfg)?;
    let backend = make_backend(cfg, inputs.kg.clone())?;
    let embedder = make_embedder(cfg)?;
    run_with(cfg, &inputs, backend.as_ref(), embedder.as_ref())
}

/// Full evaluation with caller-supplied backend and embedder.
pub fn run_with(
    cfg: &RunConfig,
    inputs: &Inputs,
    backend: &dyn ChatBackend,
    embedder: &dyn EmbeddingProvider,
) -> Result<RunSummary, RunError> {
    cfg.check()?;
    if inputs.questions.is_empty() {
        return Err(RunError::NoQuestions);
    }
    let out = &cfg.out;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let config_hash = cfg.results_hash();
    let transcripts_path = out.join(TRANSCRIPTS_FILE);

    let resumable = read_manifest(out).map(|m| m.config_hash == config_hash).unwrap_or(false);
    let resumed: BTreeMap<String, Transcript> = if resumable {
        client::load_transcripts(&transcripts_path).map_err(io_err(&transcripts_path))?
    } else {
        if transcripts_path.exists() {
            fs::remove_file(&transcripts_path).map_err(io_err(&transcripts_path))?;
        }
        BTreeMap::new()
    };

    let mut manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        status: "running".into(),
        config: cfg.clone(),
        config_hash,
        seed: cfg.seed,
        oracle_seed: cfg.oracle.seed,
        templates_hash: inputs.templates.hash().to_string(),
        backend: backend.identity(),
        embedder: embedder.tag(),
        questions: inputs.questions.len(),
        answered: 0,
        failed: 0,
        partial: false,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    let log = TranscriptLog::append(&transcripts_path).map_err(io_err(&transcripts_path))?;

    let recon = if cfg.ablation.use_recon {
        reconstruct(cfg, inputs, backend, &log)?
    } else {
        BTreeMap::new()
    };
    let ablation: Ablation = cfg.ablation.prompt_ablation();

    let kg = &inputs.kg;
    let mut prepared = Vec::with_capacity(inputs.questions.len());
    let mut unified = Vec::with_capacity(inputs.questions.len());
    let mut jobs = Vec::new();
    for q in &inputs.questions {
        let r = recon.get(&q.id).map(|r| ablation.apply(r));
        match prompt::build_unified(q, kg, r.as_ref(), ablation) {
            Ok(p) => unified.push(UnifiedLine {
                question_id: &q.id,
                subtask: q.modality.code(),
                prompt: p,
            }),
            Err(e) => log::warn!("question {}: no unified prompt ({e})", q.id),
        }
        let built = prompt::answer_request_for(q, kg, cfg.mode, cfg.option_count, cfg.seed, cfg.tf_corruption_rate)
            .and_then(|(request, gold)| {
                let dialogue = prompt::build_step2(q, kg, &inputs.templates, &request, r.as_ref())?;
                Ok((request, gold, dialogue))
            });
        match built {
            Ok((request, gold, dialogue)) => {
                let key = format!("answer|{}", q.id);
                if !resumed.contains_key(&key) {
                    jobs.push((key, dialogue));
                }
                prepared.push(Prepared {
                    question: q.clone(),
                    gold,
                    request: Some(request),
                    failure: None,
                });
            }
            Err(e) => prepared.push(Prepared {
                question: q.clone(),
                gold: q.gold_answer.clone(),
                request: None,
                failure: Some(format!("prompt: {e}")),
            }),
        }
    }
    let unified_path = out.join(UNIFIED_FILE);
    write_atomic(&unified_path, jsonl(&unified)?.as_bytes()).map_err(io_err(&unified_path))?;

    let mut outcomes: BTreeMap<String, Result<Transcript, ClientError>> = resumed.into_iter().map(|(k, t)| (k, Ok(t))).collect();
    outcomes.extend(client::complete_batch(backend, &jobs, cfg.backend.parallelism, |k, o| {
        if let Err(e) = log.record(k, o) {
            log::warn!("transcript log: {e}");
        }
    }));

    let vocab = build_vocabularies(cfg, inputs, embedder)?;
    let mut results = Vec::with_capacity(prepared.len());
    for p in prepared {
        let outcome = outcomes.remove(&format!("answer|{}", p.question.id));
        results.push(score_question(cfg, kg, &vocab, embedder, p, outcome));
    }
    results.sort_by(|a, b| a.question_id.cmp(&b.question_id));

    let results_path = out.join(RESULTS_FILE);
    write_atomic(&results_path, jsonl(&results)?.as_bytes()).map_err(io_err(&results_path))?;
    let report = eval::score_run(&results)?;
    write_report(out, &report)?;

    manifest.status = "complete".into();
    manifest.failed = results.iter().filter(|r| r.error.is_some()).count();
    manifest.answered = results.len() - manifest.failed;
    manifest.partial = manifest.failed > 0;
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(RunSummary {
        out_dir: out.clone(),
        report,
        manifest,
    })
}

fn score_question(
    cfg: &RunConfig,
    kg: &KnowledgeGraph,
    vocab: &Vocabularies,
    embedder: &dyn EmbeddingProvider,
    p: Prepared,
    outcome: Option<Result<Transcript, ClientError>>,
) -> QuestionResult {
    let q = &p.question;
    let mut result = QuestionResult {
        question_id: q.id.clone(),
        subtask: q.modality.code(),
        mode: cfg.mode,
        gold: p.gold.clone(),
        answer_text: None,
        ranking: Vec::new(),
        gold_rank: None,
        relation_gold: q.gold_relation.clone().or_else(|| answer_path(kg, q)),
        relation_text: None,
        relation_ranking: None,
        relation_gold_rank: None,
        error: p.failure.clone(),
    };
    let (Some(request), None) = (&p.request, &p.failure) else {
        return result;
    };
    let transcript = match outcome {
        Some(Ok(t)) => t,
        Some(Err(e)) => {
            result.error = Some(format!("backend: {e}"));
            return result;
        }
        None => {
            result.error = Some("backend: no transcript".into());
            return result;
        }
    };
    let (relation_text, answer_text) = mapper::split_reply(&transcript.response);
    result.answer_text = Some(answer_text.clone());
    result.relation_text = relation_text.clone();

    let lettered;
    let index = match request {
        prompt::AnswerRequest::Qa => match &vocab.entities {
            Some(i) => i,
            None => {
                result.error = Some("grounding: empty entity vocabulary".into());
                return result;
            }
        },
        prompt::AnswerRequest::MultipleChoice { options } => {
            let items = options
                .iter()
                .map(|id| VocabItem {
                    id: id.clone(),
                    label: kg.entity(id).map(|e| e.label.clone()).unwrap_or_else(|| id.clone()),
                })
                .collect();
            match VocabIndex::build_lettered(items, embedder) {
                Ok(i) => {
                    lettered = i;
                    &lettered
                }
                Err(e) => {
                    result.error = Some(format!("grounding: {e}"));
                    return result;
                }
            }
        }
        prompt::AnswerRequest::TrueFalse { .. } => &vocab.judgments,
    };
    match ground_with(cfg, &answer_text, index, embedder) {
        Ok(ranking) => {
            result.gold_rank = ranking.rank_of(&p.gold);
            result.ranking = ranking.truncated(cfg.ranking_depth).entries;
        }
        Err(e) => result.error = Some(format!("grounding: {e}")),
    }
    if let (Some(text), Some(gold), Some(index)) = (&relation_text, &result.relation_gold, &vocab.relations) {
        if let Ok(ranking) = ground_with(cfg, text, index, embedder) {
            result.relation_gold_rank = ranking.rank_of(gold);
            result.relation_ranking = Some(ranking.truncated(cfg.ranking_depth).entries);
        }
    }
    result
}

pub fn read_results(dir: &Path) -> Result<Vec<QuestionResult>, RunError> {
    let path = dir.join(RESULTS_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| RunError::Results {
                path: path.clone(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Writes `report.json`, `report.md` and `report.csv`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<(), RunError> {
    write_json(&dir.join("report.json"), report)?;
    let md = dir.join("report.md");
    write_atomic(&md, report.to_markdown("Evaluation report").as_bytes()).map_err(io_err(&md))?;
    let csv = dir.join("report.csv");
    write_atomic(&csv, report.to_csv().as_bytes()).map_err(io_err(&csv))
}

/// Regenerates the report of a run directory from `results.jsonl`.
pub fn cmd_report(run_dir: &Path) -> Result<EvalReport, RunError> {
    let results = read_results(run_dir)?;
    let report = eval::score_run(&results)?;
    write_report(run_dir, &report)?;
    Ok(report)
}

/// Deltas `b - a` between two run directories, in percentage points.
pub fn cmd_report_diff(a: &Path, b: &Path) -> Result<eval::DeltaTable, RunError> {
    let ra = eval::score_run(&read_results(a)?)?;
    let rb = eval::score_run(&read_results(b)?)?;
    Ok(eval::compare_reports(&ra, &rb)?)
}

/// Counts from `cmd_prompts`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PromptCounts {
    pub unified: usize,
    pub step1: usize,
    pub step2: usize,
    pub skipped: usize,
}

pub const UNIFIED_PROMPTS: &str = "unified.txt";
pub const STEP1_PROMPTS: &str = "step1.txt";

pub fn step2_prompts_file(mode: PromptMode) -> String {
    format!("step2_{}.txt", mode.short())
}

fn describe_images(parts: &[prompt::ImagePart]) -> String {
    if parts.is_empty() {
        "-".to_string()
    } else {
        parts.iter().map(|p| p.entity.as_str()).collect::<Vec<_>>().join(", ")
    }
}

/// Renders every prompt family as plain text under `out_dir`: the unified
/// template in its full and ablated forms, the step-1 triplet prompts and
/// the step-2 dialogues in the configured mode. No model is called, so graph
/// descriptions fill the text slots.
pub fn cmd_prompts(cfg: &RunConfig, inputs: &Inputs, out_dir: &Path) -> Result<PromptCounts, RunError> {
    let kg = &inputs.kg;
    let mut counts = PromptCounts::default();
    let variants = [
        ("full", Ablation::default()),
        (
            "no_tr",
            Ablation {
                include_relation_text: false,
                include_entity_text: true,
            },
        ),
        (
            "no_te",
            Ablation {
                include_relation_text: true,
                include_entity_text: false,
            },
        ),
    ];
    let mut unified = String::new();
    let mut step2 = String::new();
    for q in &inputs.questions {
        for (name, ablation) in variants {
            let _ = writeln!(unified, "# {} ({}) {name}", q.id, q.modality);
            match prompt::build_unified(q, kg, None, ablation) {
                Ok(p) => {
                    let _ = writeln!(unified, "{}\nimages: {}\n", p.token_text, describe_images(&p.image_slots));
                    counts.unified += 1;
                }
                Err(e) => {
                    let _ = writeln!(unified, "skipped: {e}\n");
                    counts.skipped += 1;
                }
            }
        }
        let _ = writeln!(step2, "# {} ({}) {}", q.id, q.modality, cfg.mode);
        let built = prompt::answer_request_for(q, kg, cfg.mode, cfg.option_count, cfg.seed, cfg.tf_corruption_rate)
            .and_then(|(request, _)| prompt::build_step2(q, kg, &inputs.templates, &request, None));
        match built {
            Ok(d) => {
                let _ = writeln!(step2, "{}", d.render_text());
                counts.step2 += 1;
            }
            Err(e) => {
                let _ = writeln!(step2, "skipped: {e}\n");
                counts.skipped += 1;
            }
        }
    }

    let mut step1 = String::new();
    let mut triplets: Vec<&kg::Triplet> = kg.triplets().iter().collect();
    triplets.sort();
    for t in triplets {
        match prompt::build_step1(t, kg, &inputs.templates) {
            Ok(prompts) => {
                for (task, p) in ["head", "relation", "tail"].iter().zip(prompts.iter()) {
                    let _ = writeln!(step1, "# {}|{}|{} {task}\n{}", t.head, t.relation, t.tail, p.render_text());
                    counts.step1 += 1;
                }
            }
            Err(e) => {
                let _ = writeln!(step1, "# {}|{}|{}\nskipped: {e}\n", t.head, t.relation, t.tail);
                counts.skipped += 1;
            }
        }
    }

    for (name, text) in [
        (UNIFIED_PROMPTS.to_string(), unified),
        (STEP1_PROMPTS.to_string(), step1),
        (step2_prompts_file(cfg.mode), step2),
    ] {
        let path = out_dir.join(name);
        write_atomic(&path, text.as_bytes()).map_err(io_err(&path))?;
    }
    Ok(counts)
}

/// Which fine-tuning stages `cmd_ftdata` emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FtStages {
    One,
    Two,
    Both,
}

pub fn cmd_ftdata(cfg: &RunConfig, inputs: &Inputs, out_dir: &Path, stages: FtStages, flat: bool) -> Result<Vec<EmissionSummary>, RunError> {
    let mut out = Vec::new();
    if matches!(stages, FtStages::One | FtStages::Both) {
        out.push(ft_dataset::gen_step1(&inputs.kg, &inputs.templates, out_dir, flat)?);
    }
    if matches!(stages, FtStages::Two | FtStages::Both) {
        let options = Step2Options {
            mode: cfg.mode,
            seed: cfg.seed,
            option_count: cfg.option_count,
            tf_corruption_rate: cfg.tf_corruption_rate,
        };
        out.push(ft_dataset::gen_step2(&inputs.questions, &inputs.kg, &inputs.templates, out_dir, &options, flat)?);
    }
    Ok(out)
}

/// Combines image files left to right into one PNG.
pub fn combine_files(inputs: &[PathBuf], out: &Path) -> Result<(u32, u32), RunError> {
    let images = inputs.iter().map(|p| RasterImage::load(p)).collect::<Result<Vec<_>, _>>()?;
    let combined = image_ops::combine(&images)?;
    combined.save_png(out)?;
    Ok((combined.width(), combined.height()))
}

/// Writes `images/combined/<head>__<tail>.png` for every triplet whose
/// entities both have local images. Returns (written, skipped).
pub fn cmd_images(kg: &KnowledgeGraph, out_dir: &Path) -> Result<(usize, usize), RunError> {
    let mut pairs: BTreeSet<(&str, &str)> = BTreeSet::new();
    for t in kg.triplets() {
        pairs.insert((&t.head, &t.tail));
    }
    let (mut written, mut skipped) = (0, 0);
    for (h, t) in pairs {
        let paths: Option<Vec<PathBuf>> = [h, t]
            .iter()
            .map(|id| kg.entity(id).and_then(|e| e.canonical_image()).and_then(|r| kg.resolve_image(r)))
            .collect();
        let Some(paths) = paths else {
            log::warn!("({h}, {t}): missing local image");
            skipped += 1;
            continue;
        };
        let dest = out_dir
            .join("images/combined")
            .join(format!("{}__{}.png", file_stem(h), file_stem(t)));
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        match combine_files(&paths, &dest) {
            Ok(_) => written += 1,
            Err(RunError::Image(e)) => {
                log::warn!("({h}, {t}): {e}");
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok((written, skipped))
}

/// Subtask code list for help text.
pub fn subtask_names() -> String {
    ModalityConfig::NAMED.iter().map(|m| m.code()).collect::<Vec<_>>().join(", ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_questions, write_synthetic, SynthSpec};

    fn setup(dir: &Path, n: usize) -> RunConfig {
        let kg = write_synthetic(&dir.join("kg"), SynthSpec::default(), 1).unwrap();
        let qs = synth_questions(&kg, n, 1).unwrap();
        kg::write_questions(&dir.join("q.jsonl"), &qs).unwrap();
        RunConfig {
            kg: dir.join("kg"),
            questions: Some(dir.join("q.jsonl")),
            out: dir.join("run"),
            ..Default::default()
        }
    }

    #[test]
    fn perfect_oracle_run_and_replay() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = setup(dir.path(), 24);
        let s = cmd_run(&cfg).unwrap();
        assert_eq!(s.report.accuracy, 1.0);
        assert_eq!(s.report.relation.as_ref().unwrap().hits_at_1, 1.0);
        assert!(!s.manifest.partial);
        let first = fs::read(cfg.out.join(RESULTS_FILE)).unwrap();
        let again = cmd_run(&cfg).unwrap();
        assert_eq!(first, fs::read(cfg.out.join(RESULTS_FILE)).unwrap());
        assert_eq!(cmd_report(&cfg.out).unwrap(), again.report);
        assert!(cmd_report_diff(&cfg.out, &cfg.out).unwrap().is_zero());
    }

    #[test]
    fn qa_and_tf_modes() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = setup(dir.path(), 12);
        for mode in [PromptMode::Qa, PromptMode::TrueFalse] {
            cfg.mode = mode;
            cfg.out = dir.path().join(mode.short());
            let s = cmd_run(&cfg).unwrap();
            assert_eq!(s.report.accuracy, 1.0, "{mode}");
        }
    }

    #[test]
    fn validate_reports_counts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = setup(dir.path(), 4);
        let v = cmd_validate(&cfg);
        assert!(v.is_clean(), "{:?}", v.diagnostics);
        assert_eq!(v.summary, "50 entities, 8 relations, 120 triplets, 4 questions");
    }
}
