//! Fine-tuning corpora: triplet tasks from the background graph (step 1) and
//! multi-turn analogy dialogues from training questions (step 2).
//!
//! Records are conversational JSONL with images referenced by paths relative
//! to the output directory. Every image a record points at is materialized as
//! a PNG under `images/entities/` or `images/combined/`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::client::answer_path;
use crate::files::{file_stem, jsonl, write_atomic};
use crate::image_ops::{self, RasterImage};
use crate::kg::{AnalogyQuestion, KnowledgeGraph, Triplet};
use crate::prompt::{self, AnswerRequest, ImageAttachment, PromptError, PromptMode, PromptTemplates, Role, Turn};
use crate::seed::sha256_hex;

pub const STEP1_FILE: &str = "step1.jsonl";
pub const STEP2_FILE: &str = "step2.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, thiserror::Error)]
pub enum FtError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FtError + '_ {
    move |source| FtError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Step1,
    Step2,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Step1 => "step1",
            Stage::Step2 => "step2",
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            Stage::Step1 => STEP1_FILE,
            Stage::Step2 => STEP2_FILE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FtMessage {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FtRecord {
    pub id: String,
    pub stage: Stage,
    pub messages: Vec<FtMessage>,
    pub target: String,
}

/// Single-string variant for toolchains without chat formatting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlatRecord {
    pub id: String,
    pub stage: Stage,
    pub prompt: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<String>,
}

impl FtRecord {
    pub fn flat(&self) -> FlatRecord {
        let prompt = self
            .messages
            .iter()
            .map(|m| {
                let mut block = format!("{}:", m.role.name());
                for _ in &m.images {
                    block.push_str(" <image>");
                }
                format!("{block} {}", m.content)
            })
            .collect::<Vec<_>>()
            .join("\n");
        FlatRecord {
            id: self.id.clone(),
            stage: self.stage,
            prompt,
            response: self.target.clone(),
            images: self.messages.iter().flat_map(|m| m.images.iter().cloned()).collect(),
        }
    }

    /// Schema check against the emitted directory.
    pub fn check(&self, out_dir: &Path) -> Result<(), String> {
        if self.target.trim().is_empty() {
            return Err(format!("{}: empty target", self.id));
        }
        if self.messages.first().map(|m| m.role) != Some(Role::User) || self.messages.last().map(|m| m.role) != Some(Role::User) {
            return Err(format!("{}: messages must start and end with a user turn", self.id));
        }
        if self.messages.windows(2).any(|w| w[0].role == w[1].role) {
            return Err(format!("{}: roles must alternate", self.id));
        }
        let images: Vec<&String> = self.messages.iter().flat_map(|m| &m.images).collect();
        if let Some(missing) = images.iter().find(|p| !out_dir.join(p.as_str()).is_file()) {
            return Err(format!("{}: image {missing} does not exist", self.id));
        }
        match self.stage {
            Stage::Step1 if self.messages.len() != 1 || images.len() != 1 => {
                Err(format!("{}: step-1 records carry one turn and one image", self.id))
            }
            Stage::Step2 if self.messages.len() != 1 && self.messages.len() != 3 => {
                Err(format!("{}: step-2 records carry one or two user turns", self.id))
            }
            _ => Ok(()),
        }
    }
}

/// Options for step-2 emission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step2Options {
    pub mode: PromptMode,
    pub seed: u64,
    pub option_count: usize,
    pub tf_corruption_rate: f64,
}

impl Default for Step2Options {
    fn default() -> Self {
        Self {
            mode: PromptMode::MultipleChoice,
            seed: 0,
            option_count: prompt::DEFAULT_OPTION_COUNT,
            tf_corruption_rate: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionSummary {
    pub stage: Stage,
    pub records: usize,
    pub skipped: usize,
    pub skip_reasons: BTreeMap<String, usize>,
    pub images_written: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<PromptMode>,
    pub flat: bool,
    pub config_hash: String,
}

impl EmissionSummary {
    fn skip(&mut self, reason: &str) {
        self.skipped += 1;
        *self.skip_reasons.entry(reason.to_string()).or_default() += 1;
    }
}

/// Writes one PNG per distinct attachment, reusing files already produced
/// during this emission.
struct ImageWriter<'a> {
    out_dir: &'a Path,
    kg: &'a KnowledgeGraph,
    written: BTreeSet<String>,
}

enum ImageSkip {
    Missing,
    Unreadable,
}

impl<'a> ImageWriter<'a> {
    fn new(out_dir: &'a Path, kg: &'a KnowledgeGraph) -> Self {
        Self {
            out_dir,
            kg,
            written: BTreeSet::new(),
        }
    }

    fn relative_path(att: &ImageAttachment) -> String {
        let stems: Vec<String> = att.parts.iter().map(|p| file_stem(&p.entity)).collect();
        if att.is_combined() {
            format!("images/combined/{}.png", stems.join("__"))
        } else {
            format!("images/entities/{}.png", stems[0])
        }
    }

    fn materialize(&mut self, att: &ImageAttachment) -> Result<Result<String, ImageSkip>, FtError> {
        let rel = Self::relative_path(att);
        if self.written.contains(&rel) {
            return Ok(Ok(rel));
        }
        let mut images = Vec::with_capacity(att.parts.len());
        for part in &att.parts {
            let Some(path) = self.kg.resolve_image(&part.image_ref) else {
                log::warn!("image {} of {} is not a local file", part.image_ref, part.entity);
                return Ok(Err(ImageSkip::Missing));
            };
            match RasterImage::load(&path) {
                Ok(img) => images.push(img),
                Err(e) => {
                    log::warn!("skipping unreadable image {}: {e}", path.display());
                    return Ok(Err(ImageSkip::Unreadable));
                }
            }
        }
        let combined = match image_ops::combine(&images) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("cannot combine images for {rel}: {e}");
                return Ok(Err(ImageSkip::Unreadable));
            }
        };
        let png = match combined.encode_png() {
            Ok(png) => png,
            Err(e) => {
                log::warn!("cannot encode {rel}: {e}");
                return Ok(Err(ImageSkip::Unreadable));
            }
        };
        let path = self.out_dir.join(&rel);
        write_atomic(&path, &png).map_err(io_err(&path))?;
        self.written.insert(rel.clone());
        Ok(Ok(rel))
    }

    /// Converts dialogue turns, writing their images.
    fn messages(&mut self, turns: &[Turn]) -> Result<Result<Vec<FtMessage>, ImageSkip>, FtError> {
        let mut out = Vec::with_capacity(turns.len());
        for t in turns {
            let mut images = Vec::with_capacity(t.images.len());
            for att in &t.images {
                match self.materialize(att)? {
                    Ok(rel) => images.push(rel),
                    Err(skip) => return Ok(Err(skip)),
                }
            }
            out.push(FtMessage {
                role: t.role,
                content: t.text.clone(),
                images,
            });
        }
        Ok(Ok(out))
    }
}

fn config_hash(value: serde_json::Value) -> String {
    sha256_hex(value.to_string().as_bytes())
}

fn write_records(out_dir: &Path, stage: Stage, records: &[FtRecord], flat: bool) -> Result<(), FtError> {
    let text = if flat {
        jsonl(&records.iter().map(FtRecord::flat).collect::<Vec<_>>())?
    } else {
        jsonl(records)?
    };
    let path = out_dir.join(stage.file_name());
    write_atomic(&path, text.as_bytes()).map_err(io_err(&path))
}

/// Merges this stage's summary into `summary.json`, keyed by stage.
fn write_summary(out_dir: &Path, summary: &EmissionSummary) -> Result<(), FtError> {
    let path = out_dir.join(SUMMARY_FILE);
    let mut all: BTreeMap<String, EmissionSummary> = match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).unwrap_or_default(),
        Err(_) => BTreeMap::new(),
    };
    all.insert(summary.stage.name().to_string(), summary.clone());
    let mut text = serde_json::to_string_pretty(&all)?;
    text.push('\n');
    write_atomic(&path, text.as_bytes()).map_err(io_err(&path))
}

pub fn read_summary(out_dir: &Path) -> Result<BTreeMap<String, EmissionSummary>, FtError> {
    let path = out_dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    Ok(serde_json::from_str(&text)?)
}

fn step1_id(t: &Triplet, task: &str) -> String {
    format!("{}|{}|{}#{task}", t.head, t.relation, t.tail)
}

/// Three records (head, relation, tail prediction) per triplet whose head and
/// tail both have images. Triplets are emitted in sorted order.
pub fn gen_step1(kg: &KnowledgeGraph, templates: &PromptTemplates, out_dir: &Path, flat: bool) -> Result<EmissionSummary, FtError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut summary = EmissionSummary {
        stage: Stage::Step1,
        records: 0,
        skipped: 0,
        skip_reasons: BTreeMap::new(),
        images_written: 0,
        seed: None,
        mode: None,
        flat,
        config_hash: config_hash(json!({ "stage": "step1", "templates": templates.hash(), "flat": flat })),
    };
    let mut triplets: Vec<&Triplet> = kg.triplets().iter().collect();
    triplets.sort();
    triplets.dedup();

    let mut writer = ImageWriter::new(out_dir, kg);
    let mut records = Vec::with_capacity(triplets.len() * 3);
    for t in triplets {
        let prompts = match prompt::build_step1(t, kg, templates) {
            Ok(p) => p,
            Err(PromptError::MissingImage { entity, .. }) => {
                log::warn!("skipping ({}, {}, {}): {entity} has no image", t.head, t.relation, t.tail);
                summary.skip("missing_image");
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let mut batch = Vec::with_capacity(3);
        let relation_label = kg.relation(&t.relation).map(|r| r.label.as_str()).unwrap_or(&t.relation);
        let head_label = kg.entity(&t.head).map(|e| e.label.as_str()).unwrap_or(&t.head);
        let tail_label = kg.entity(&t.tail).map(|e| e.label.as_str()).unwrap_or(&t.tail);
        let targets = [("head", head_label), ("relation", relation_label), ("tail", tail_label)];
        let mut skipped = None;
        for (p, (task, target)) in prompts.iter().zip(targets) {
            match writer.messages(&p.turns)? {
                Ok(messages) => batch.push(FtRecord {
                    id: step1_id(t, task),
                    stage: Stage::Step1,
                    messages,
                    target: target.to_string(),
                }),
                Err(skip) => {
                    skipped = Some(skip);
                    break;
                }
            }
        }
        match skipped {
            Some(ImageSkip::Missing) => summary.skip("missing_image"),
            Some(ImageSkip::Unreadable) => summary.skip("unreadable_image"),
            None => records.extend(batch),
        }
    }
    summary.records = records.len();
    summary.images_written = writer.written.len();
    write_records(out_dir, Stage::Step1, &records, flat)?;
    write_summary(out_dir, &summary)?;
    Ok(summary)
}

/// Expected reply for a training question: the relation statement followed
/// by the answer (option letter plus label in multiple choice).
pub fn step2_target(question: &AnalogyQuestion, kg: &KnowledgeGraph, request: &AnswerRequest) -> Option<String> {
    let relation = match &question.gold_relation {
        Some(r) => r.clone(),
        None => answer_path(kg, question)?,
    };
    let relation = kg.relation(&relation).map(|r| r.label.clone()).unwrap_or(relation);
    let label_of = |id: &str| kg.entity(id).map(|e| e.label.clone()).unwrap_or_else(|| id.to_string());
    let answer = match request {
        AnswerRequest::Qa => label_of(&question.gold_answer),
        AnswerRequest::MultipleChoice { options } => {
            let i = options.iter().position(|o| *o == question.gold_answer)?;
            format!("{}) {}", prompt::option_letter(i), label_of(&question.gold_answer))
        }
        AnswerRequest::TrueFalse { candidate } => if *candidate == question.gold_answer { "True" } else { "False" }.to_string(),
    };
    Some(format!("Relation: {relation}\nAnswer: {answer}"))
}

/// One record per question, in question-id order. Options and true/false
/// candidates are drawn from `options.seed`.
pub fn gen_step2(
    questions: &[AnalogyQuestion],
    kg: &KnowledgeGraph,
    templates: &PromptTemplates,
    out_dir: &Path,
    options: &Step2Options,
    flat: bool,
) -> Result<EmissionSummary, FtError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut summary = EmissionSummary {
        stage: Stage::Step2,
        records: 0,
        skipped: 0,
        skip_reasons: BTreeMap::new(),
        images_written: 0,
        seed: Some(options.seed),
        mode: Some(options.mode),
        flat,
        config_hash: config_hash(json!({
            "stage": "step2",
            "templates": templates.hash(),
            "options": options,
            "flat": flat,
        })),
    };
    let mut ordered: Vec<&AnalogyQuestion> = questions.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));

    let mut writer = ImageWriter::new(out_dir, kg);
    let mut records = Vec::with_capacity(ordered.len());
    for q in ordered {
        let request = match prompt::answer_request_for(q, kg, options.mode, options.option_count, options.seed, options.tf_corruption_rate) {
            Ok((r, _)) => r,
            Err(e) => {
                log::warn!("skipping question {}: {e}", q.id);
                summary.skip("options");
                continue;
            }
        };
        let dialogue = match prompt::build_step2(q, kg, templates, &request, None) {
            Ok(d) => d,
            Err(e @ (PromptError::MissingImage { .. } | PromptError::UnknownEntity(_))) => {
                log::warn!("skipping question {}: {e}", q.id);
                summary.skip("unmappable");
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let Some(target) = step2_target(q, kg, &request) else {
            log::warn!("skipping question {}: no relation links the example pair to the answer", q.id);
            summary.skip("no_relation");
            continue;
        };
        let mut turns = dialogue.turns.clone();
        if turns.len() == 2 {
            let describe = prompt::describe_answer(q, kg)?.unwrap_or_default();
            turns.insert(1, Turn::assistant(describe));
        }
        match writer.messages(&turns)? {
            Ok(messages) => records.push(FtRecord {
                id: q.id.clone(),
                stage: Stage::Step2,
                messages,
                target,
            }),
            Err(ImageSkip::Missing) => summary.skip("unmappable"),
            Err(ImageSkip::Unreadable) => summary.skip("unreadable_image"),
        }
    }
    summary.records = records.len();
    summary.images_written = writer.written.len();
    write_records(out_dir, Stage::Step2, &records, flat)?;
    write_summary(out_dir, &summary)?;
    Ok(summary)
}

/// Parses an emitted conversational file.
pub fn read_records(path: &Path) -> Result<Vec<FtRecord>, FtError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(FtError::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{Entity, ModalityConfig, Relation};

    fn fixture(dir: &Path) -> KnowledgeGraph {
        let colors = [("ice", [200, 230, 255]), ("water", [0, 90, 255]), ("steam", [220, 220, 220]), ("rock", [90, 80, 70])];
        fs::create_dir_all(dir.join("images")).unwrap();
        let mut entities = Vec::new();
        for (i, (id, rgb)) in colors.iter().enumerate() {
            RasterImage::solid(2 + i as u32, 2, *rgb)
                .unwrap()
                .save_png(&dir.join(format!("images/{id}.png")))
                .unwrap();
            entities.push(Entity {
                id: id.to_string(),
                label: id.to_string(),
                description: String::new(),
                image_refs: if *id == "rock" { vec![] } else { vec![format!("images/{id}.png")] },
            });
        }
        KnowledgeGraph::from_parts(
            entities,
            vec![Relation {
                id: "class_of".into(),
                label: "class of".into(),
                description: String::new(),
            }],
            vec![
                Triplet::new("steam", "class_of", "water"),
                Triplet::new("ice", "class_of", "water"),
                Triplet::new("rock", "class_of", "water"),
            ],
        )
        .unwrap()
        .with_base_dir(dir)
    }

    #[test]
    fn step1_counts_and_skips() {
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let kg = fixture(src.path());
        let s = gen_step1(&kg, &PromptTemplates::default(), out.path(), false).unwrap();
        assert_eq!((s.records, s.skipped), (6, 1));
        assert_eq!(s.skip_reasons["missing_image"], 1);
        let records = read_records(&out.path().join(STEP1_FILE)).unwrap();
        assert_eq!(records.len(), 6);
        assert_eq!(records[0].id, "ice|class_of|water#head");
        assert_eq!(records[1].target, "class of");
        assert_eq!(records[1].messages[0].images, ["images/combined/ice__water.png"]);
        for r in &records {
            r.check(out.path()).unwrap();
        }
        assert!(out.path().join("images/entities/steam.png").is_file());
        assert_eq!(s.images_written, 5);
    }

    #[test]
    fn step2_targets_and_turns() {
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let kg = fixture(src.path());
        let q = AnalogyQuestion {
            id: "q1".into(),
            example_head: "ice".into(),
            example_tail: "water".into(),
            query: "steam".into(),
            gold_answer: "water".into(),
            gold_relation: Some("class_of".into()),
            modality: ModalityConfig::VVT,
            options: Some(vec!["ice".into(), "water".into()]),
        };
        let s = gen_step2(&[q], &kg, &PromptTemplates::default(), out.path(), &Step2Options::default(), false).unwrap();
        assert_eq!(s.records, 1);
        let r = &read_records(&out.path().join(STEP2_FILE)).unwrap()[0];
        assert_eq!(r.target, "Relation: class of\nAnswer: B) water");
        assert_eq!(r.messages.len(), 3);
        assert_eq!(r.messages[1].role, Role::Assistant);
        r.check(out.path()).unwrap();
        let flat = r.flat();
        assert!(flat.prompt.starts_with("user: <image> "));
        assert_eq!(flat.images.len(), 1);
    }

    #[test]
    fn empty_question_list() {
        let out = tempfile::tempdir().unwrap();
        let kg = KnowledgeGraph::from_parts(vec![], vec![], vec![]).unwrap();
        let s = gen_step2(&[], &kg, &PromptTemplates::default(), out.path(), &Step2Options::default(), false).unwrap();
        assert_eq!((s.records, s.skipped), (0, 0));
        assert_eq!(fs::read_to_string(out.path().join(STEP2_FILE)).unwrap(), "");
    }
}
