//! Prompt rendering: the unified mask-prediction template, explainer
//! reconstruction prompts, step-1 triplet prompts and step-2 analogy dialogues.
//!
//! Everything here is a pure function of its inputs. Natural-language task
//! phrasings come from a [`PromptTemplates`] file so they can be edited
//! without touching code.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::kg::{AnalogyQuestion, KnowledgeGraph, Modality, Slot, Triplet};
use crate::seed::{rng_for, sha256_hex};

pub const DEFAULT_TEMPLATES: &str = include_str!("../templates/default_prompts.txt");

const REQUIRED_TEMPLATES: &[&str] = &[
    "recon_visual",
    "recon_textual",
    "recon_relation",
    "step1_head",
    "step1_relation",
    "step1_tail",
    "step2_describe",
    "step2_question",
    "step2_context",
    "answer_qa",
    "answer_mc",
    "answer_tf",
];

const OPTION_LETTERS: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ";

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("entity `{entity}` has no image for visual slot {slot}")]
    MissingImage { entity: String, slot: String },
    #[error("unknown entity `{0}`")]
    UnknownEntity(String),
    #[error("unknown relation `{0}`")]
    UnknownRelation(String),
    #[error("multiple-choice prompt requires options")]
    MissingOptions,
    #[error("true/false prompt requires a candidate answer")]
    MissingCandidate,
    #[error("too many options ({0}); at most 26 can be lettered")]
    TooManyOptions(usize),
    #[error("need {needed} distractors but only {available} entities are eligible")]
    NotEnoughEntities { needed: usize, available: usize },
    #[error("template `{0}` not defined")]
    MissingTemplate(String),
    #[error("template `{template}` uses `{{{placeholder}}}` but no value was supplied")]
    MissingValue { template: String, placeholder: String },
    #[error("template file line {line}: {message}")]
    TemplateSyntax { line: usize, message: String },
    #[error("cannot read template file: {0}")]
    Io(#[from] std::io::Error),
}

/// Answer format requested from the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Qa,
    #[serde(alias = "mc")]
    MultipleChoice,
    #[serde(alias = "tf")]
    TrueFalse,
}

impl PromptMode {
    pub fn name(self) -> &'static str {
        match self {
            PromptMode::Qa => "qa",
            PromptMode::MultipleChoice => "multiple_choice",
            PromptMode::TrueFalse => "true_false",
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            PromptMode::Qa => "qa",
            PromptMode::MultipleChoice => "mc",
            PromptMode::TrueFalse => "tf",
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "qa" => Ok(PromptMode::Qa),
            "mc" | "multiple_choice" => Ok(PromptMode::MultipleChoice),
            "tf" | "true_false" => Ok(PromptMode::TrueFalse),
            other => Err(format!("unknown mode `{other}` (expected qa, mc or tf)")),
        }
    }
}

/// Named task phrasings with `{placeholder}` substitution.
#[derive(Debug, Clone)]
pub struct PromptTemplates {
    templates: BTreeMap<String, String>,
    hash: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATES).expect("bundled templates parse")
    }
}

impl PromptTemplates {
    pub fn load(path: &Path) -> Result<Self, PromptError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let mut templates = BTreeMap::new();
        let mut current: Option<(String, Vec<&str>)> = None;
        for (i, line) in text.lines().enumerate() {
            if let Some(name) = block_header(line) {
                if let Some((n, body)) = current.take() {
                    templates.insert(n, join_body(&body));
                }
                if templates.contains_key(name) {
                    return Err(PromptError::TemplateSyntax {
                        line: i + 1,
                        message: format!("duplicate template `{name}`"),
                    });
                }
                current = Some((name.to_string(), Vec::new()));
            } else if let Some((_, body)) = current.as_mut() {
                body.push(line);
            } else if !(line.trim().is_empty() || line.starts_with('#')) {
                return Err(PromptError::TemplateSyntax {
                    line: i + 1,
                    message: "text before the first [name] block".to_string(),
                });
            }
        }
        if let Some((n, body)) = current {
            templates.insert(n, join_body(&body));
        }
        for required in REQUIRED_TEMPLATES {
            if !templates.contains_key(*required) {
                return Err(PromptError::MissingTemplate(required.to_string()));
            }
        }
        Ok(Self {
            templates,
            hash: sha256_hex(text.as_bytes()),
        })
    }

    /// SHA-256 of the template source, used as a cache key.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn render(&self, name: &str, vars: &[(&str, &str)]) -> Result<String, PromptError> {
        let template = self
            .templates
            .get(name)
            .ok_or_else(|| PromptError::MissingTemplate(name.to_string()))?;
        substitute(template, vars).map_err(|placeholder| PromptError::MissingValue {
            template: name.to_string(),
            placeholder,
        })
    }
}

fn block_header(line: &str) -> Option<&str> {
    let inner = line.trim_end().strip_prefix('[')?.strip_suffix(']')?;
    let ok = !inner.is_empty() && inner.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_');
    ok.then_some(inner)
}

fn join_body(lines: &[&str]) -> String {
    let mut end = lines.len();
    while end > 0 && lines[end - 1].trim().is_empty() {
        end -= 1;
    }
    let mut start = 0;
    while start < end && lines[start].trim().is_empty() {
        start += 1;
    }
    lines[start..end].join("\n")
}

/// Replaces `{name}` with values from `vars`. Braces not enclosing an
/// identifier are left untouched. Returns the first unknown placeholder on error.
fn substitute(template: &str, vars: &[(&str, &str)]) -> Result<String, String> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let ident_len = after
            .bytes()
            .take_while(|b| b.is_ascii_alphanumeric() || *b == b'_')
            .count();
        if ident_len > 0 && after.as_bytes().get(ident_len) == Some(&b'}') {
            let name = &after[..ident_len];
            let value = vars
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| name.to_string())?;
            out.push_str(value);
            rest = &after[ident_len + 1..];
        } else {
            out.push('{');
            rest = after;
        }
    }
    out.push_str(rest);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

/// One entity image referenced by a prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagePart {
    pub entity: String,
    pub image_ref: String,
}

/// A single attached image. More than one part means the parts are combined
/// side by side, left to right, before dispatch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageAttachment {
    pub parts: Vec<ImagePart>,
}

impl ImageAttachment {
    pub fn is_combined(&self) -> bool {
        self.parts.len() > 1
    }
}

impl fmt::Display for ImageAttachment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ids: Vec<&str> = self.parts.iter().map(|p| p.entity.as_str()).collect();
        if self.is_combined() {
            write!(f, "<image: combine({})>", ids.join(", "))
        } else {
            write!(f, "<image: {}>", ids.join(""))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<ImageAttachment>,
}

impl Turn {
    pub fn user(text: impl Into<String>, images: Vec<ImageAttachment>) -> Self {
        Self {
            role: Role::User,
            text: text.into(),
            images,
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            text: text.into(),
            images: Vec::new(),
        }
    }
}

/// What a prompt asks for. Backends that understand the task (the mock
/// oracle) use it; remote backends only see the turns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PromptTask {
    Step1 { triplet: Triplet, target: Step1Target },
    ReconstructEntity { question_id: String, slot: Slot, entity: String },
    ReconstructRelation { question_id: String, head: String, tail: String },
    Analogy { question: AnalogyQuestion, request: AnswerRequest },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step1Target {
    Head,
    Relation,
    Tail,
}

/// Ordered chat turns. The first non-system turn is a user turn and images
/// only ride on user turns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialoguePrompt {
    pub turns: Vec<Turn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<PromptTask>,
}

impl DialoguePrompt {
    pub fn new(turns: Vec<Turn>, task: Option<PromptTask>) -> Self {
        let prompt = Self { turns, task };
        debug_assert!(prompt.is_well_formed());
        prompt
    }

    pub fn is_well_formed(&self) -> bool {
        let first_user = self
            .turns
            .iter()
            .find(|t| t.role != Role::System)
            .is_some_and(|t| t.role == Role::User);
        first_user && self.turns.iter().all(|t| t.role == Role::User || t.images.is_empty())
    }

    pub fn image_count(&self) -> usize {
        self.turns.iter().map(|t| t.images.len()).sum()
    }

    /// Plain-text rendering used for golden files and inspection.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for (i, turn) in self.turns.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "[{}]", turn.role.name());
            for img in &turn.images {
                let _ = writeln!(out, "{img}");
            }
            let _ = writeln!(out, "{}", turn.text);
        }
        out
    }
}

/// Entity and relation texts generated by an explainer model.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub entity_texts: BTreeMap<Slot, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation_text: Option<String>,
}

/// Which optional text slots the unified template keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub include_relation_text: bool,
    pub include_entity_text: bool,
}

impl Ablation {
    /// `recon` with the disabled text slots removed.
    pub fn apply(&self, recon: &Reconstruction) -> Reconstruction {
        Reconstruction {
            entity_texts: if self.include_entity_text {
                recon.entity_texts.clone()
            } else {
                BTreeMap::new()
            },
            relation_text: recon.relation_text.clone().filter(|_| self.include_relation_text),
        }
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            include_relation_text: true,
            include_entity_text: true,
        }
    }
}

/// Token layout consumed by mask-prediction models.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnifiedPrompt {
    pub token_text: String,
    pub image_slots: Vec<ImagePart>,
}

impl UnifiedPrompt {
    /// Exactly one `[MASK]`, two `[R]` and two `[SEP]`, in template order.
    pub fn markers_valid(&self) -> bool {
        let t = &self.token_text;
        let count = |m: &str| t.matches(m).count();
        if count("[MASK]") != 1 || count("[R]") != 2 || count("[SEP]") != 2 || count("[CLS]") != 1 || count("||") != 1 {
            return false;
        }
        let order = ["[CLS]", "[R]", "[SEP]", "||", "[R]", "[MASK]", "[SEP]"];
        let mut pos = 0;
        for m in order {
            match t[pos..].find(m) {
                Some(p) => pos += p + m.len(),
                None => return false,
            }
        }
        true
    }
}

fn squash(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn join_tokens<'a>(pieces: impl IntoIterator<Item = &'a str>) -> String {
    pieces
        .into_iter()
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

fn entity_image(kg: &KnowledgeGraph, entity: &str, slot: &str) -> Result<ImagePart, PromptError> {
    let e = kg
        .entity(entity)
        .ok_or_else(|| PromptError::UnknownEntity(entity.to_string()))?;
    let image_ref = e.canonical_image().ok_or_else(|| PromptError::MissingImage {
        entity: entity.to_string(),
        slot: slot.to_string(),
    })?;
    Ok(ImagePart {
        entity: entity.to_string(),
        image_ref: image_ref.to_string(),
    })
}

fn label<'a>(kg: &'a KnowledgeGraph, entity: &str) -> Result<&'a str, PromptError> {
    kg.entity(entity)
        .map(|e| e.label.as_str())
        .ok_or_else(|| PromptError::UnknownEntity(entity.to_string()))
}

fn visual_parts(question: &AnalogyQuestion, kg: &KnowledgeGraph, slots: &[Slot]) -> Result<Vec<ImagePart>, PromptError> {
    slots
        .iter()
        .filter(|s| question.modality.slot(**s) == Modality::Visual)
        .map(|s| entity_image(kg, question.slot_entity(*s), s.name()))
        .collect()
}

/// Relation text used when no reconstruction is supplied: the description of
/// the first graph relation linking the example pair.
fn kg_relation_text(question: &AnalogyQuestion, kg: &KnowledgeGraph) -> String {
    kg.relations_between(&question.example_head, &question.example_tail)
        .ok()
        .and_then(|rs| rs.first().and_then(|r| kg.relation(r)).map(|r| r.description.clone()))
        .unwrap_or_default()
}

/// Renders `[CLS] T_h e_h T_r [R] T_t e_t [SEP] || T_q e_q T_r [R] [MASK] [SEP]`.
pub fn build_unified(
    question: &AnalogyQuestion,
    kg: &KnowledgeGraph,
    recon: Option<&Reconstruction>,
    ablation: Ablation,
) -> Result<UnifiedPrompt, PromptError> {
    let desc = |slot: Slot| -> Result<String, PromptError> {
        if !ablation.include_entity_text {
            return Ok(String::new());
        }
        if let Some(text) = recon.and_then(|r| r.entity_texts.get(&slot)) {
            return Ok(squash(text));
        }
        let id = question.slot_entity(slot);
        kg.entity(id)
            .map(|e| squash(&e.description))
            .ok_or_else(|| PromptError::UnknownEntity(id.to_string()))
    };
    let relation_text = if ablation.include_relation_text {
        squash(
            &recon
                .and_then(|r| r.relation_text.clone())
                .unwrap_or_else(|| kg_relation_text(question, kg)),
        )
    } else {
        String::new()
    };
    let (th, tt, tq) = (desc(Slot::Head)?, desc(Slot::Tail)?, desc(Slot::Query)?);
    let (eh, et, eq) = (
        label(kg, &question.example_head)?,
        label(kg, &question.example_tail)?,
        label(kg, &question.query)?,
    );
    let token_text = join_tokens([
        "[CLS]",
        &th,
        eh,
        &relation_text,
        "[R]",
        &tt,
        et,
        "[SEP]",
        "||",
        &tq,
        eq,
        &relation_text,
        "[R]",
        "[MASK]",
        "[SEP]",
    ]);
    Ok(UnifiedPrompt {
        token_text,
        image_slots: visual_parts(question, kg, &Slot::ALL)?,
    })
}

/// How a slot is referred to in dialogue text: the quoted label when textual,
/// its picture position when visual.
fn slot_reference(question: &AnalogyQuestion, kg: &KnowledgeGraph, slot: Slot, visual_order: &[Slot]) -> Result<String, PromptError> {
    if question.modality.slot(slot) == Modality::Textual {
        return Ok(format!("\"{}\"", label(kg, question.slot_entity(slot))?));
    }
    let pos = visual_order.iter().position(|s| *s == slot).unwrap_or(0);
    Ok(picture_position(pos, visual_order.len()))
}

fn picture_position(pos: usize, count: usize) -> String {
    match (count, pos) {
        (1, _) => "the pictured entity".to_string(),
        (2, 0) => "the entity in the left picture".to_string(),
        (2, _) => "the entity in the right picture".to_string(),
        (3, 1) => "the entity in the middle picture".to_string(),
        (3, 2) => "the entity in the right picture".to_string(),
        (_, 0) => "the entity in the left picture".to_string(),
        (_, n) => format!("the entity in picture {} from the left", n + 1),
    }
}

fn layout_phrase(count: usize) -> String {
    match count {
        1 => "one picture".to_string(),
        n => format!("{n} pictures side by side, from left to right"),
    }
}

fn visual_slots(question: &AnalogyQuestion, among: &[Slot]) -> Vec<Slot> {
    among
        .iter()
        .copied()
        .filter(|s| question.modality.slot(*s) == Modality::Visual)
        .collect()
}

/// One prompt per entity slot plus one for the example-pair relation.
pub fn build_reconstruction_prompts(
    question: &AnalogyQuestion,
    kg: &KnowledgeGraph,
    templates: &PromptTemplates,
) -> Result<Vec<DialoguePrompt>, PromptError> {
    let mut prompts = Vec::with_capacity(4);
    for slot in Slot::ALL {
        let id = question.slot_entity(slot);
        let entity = kg.entity(id).ok_or_else(|| PromptError::UnknownEntity(id.to_string()))?;
        let turn = match question.modality.slot(slot) {
            Modality::Visual => {
                let part = entity_image(kg, id, slot.name())?;
                Turn::user(
                    templates.render("recon_visual", &[])?,
                    vec![ImageAttachment { parts: vec![part] }],
                )
            }
            Modality::Textual => Turn::user(
                templates.render(
                    "recon_textual",
                    &[("label", &entity.label), ("description", &squash(&entity.description))],
                )?,
                vec![],
            ),
        };
        prompts.push(DialoguePrompt::new(
            vec![turn],
            Some(PromptTask::ReconstructEntity {
                question_id: question.id.clone(),
                slot,
                entity: id.to_string(),
            }),
        ));
    }

    let pair = [Slot::Head, Slot::Tail];
    let order = visual_slots(question, &pair);
    let head = slot_reference(question, kg, Slot::Head, &order)?;
    let tail = slot_reference(question, kg, Slot::Tail, &order)?;
    let parts = visual_parts(question, kg, &pair)?;
    let images = if parts.is_empty() {
        vec![]
    } else {
        vec![ImageAttachment { parts }]
    };
    prompts.push(DialoguePrompt::new(
        vec![Turn::user(
            templates.render("recon_relation", &[("head", &head), ("tail", &tail)])?,
            images,
        )],
        Some(PromptTask::ReconstructRelation {
            question_id: question.id.clone(),
            head: question.example_head.clone(),
            tail: question.example_tail.clone(),
        }),
    ));
    Ok(prompts)
}

/// Head, relation and tail prediction prompts for one triplet.
pub fn build_step1(triplet: &Triplet, kg: &KnowledgeGraph, templates: &PromptTemplates) -> Result<[DialoguePrompt; 3], PromptError> {
    let head_label = label(kg, &triplet.head)?;
    let tail_label = label(kg, &triplet.tail)?;
    let relation_label = kg
        .relation(&triplet.relation)
        .map(|r| r.label.as_str())
        .ok_or_else(|| PromptError::UnknownRelation(triplet.relation.clone()))?;
    let head_img = entity_image(kg, &triplet.head, "head")?;
    let tail_img = entity_image(kg, &triplet.tail, "tail")?;

    let task = |target| {
        Some(PromptTask::Step1 {
            triplet: triplet.clone(),
            target,
        })
    };
    let head = DialoguePrompt::new(
        vec![Turn::user(
            templates.render("step1_head", &[("relation", relation_label), ("tail", tail_label)])?,
            vec![ImageAttachment {
                parts: vec![head_img.clone()],
            }],
        )],
        task(Step1Target::Head),
    );
    let relation = DialoguePrompt::new(
        vec![Turn::user(
            templates.render("step1_relation", &[("head", head_label), ("tail", tail_label)])?,
            vec![ImageAttachment {
                parts: vec![head_img, tail_img.clone()],
            }],
        )],
        task(Step1Target::Relation),
    );
    let tail = DialoguePrompt::new(
        vec![Turn::user(
            templates.render("step1_tail", &[("head", head_label), ("relation", relation_label)])?,
            vec![ImageAttachment { parts: vec![tail_img] }],
        )],
        task(Step1Target::Tail),
    );
    Ok([head, relation, tail])
}

/// The answer part of a step-2 dialogue.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AnswerRequest {
    Qa,
    MultipleChoice { options: Vec<String> },
    TrueFalse { candidate: String },
}

impl AnswerRequest {
    pub fn new(mode: PromptMode, options: Option<Vec<String>>, candidate: Option<String>) -> Result<Self, PromptError> {
        match mode {
            PromptMode::Qa => Ok(AnswerRequest::Qa),
            PromptMode::MultipleChoice => match options {
                Some(options) if !options.is_empty() => {
                    if options.len() > OPTION_LETTERS.len() {
                        return Err(PromptError::TooManyOptions(options.len()));
                    }
                    Ok(AnswerRequest::MultipleChoice { options })
                }
                _ => Err(PromptError::MissingOptions),
            },
            PromptMode::TrueFalse => candidate
                .map(|candidate| AnswerRequest::TrueFalse { candidate })
                .ok_or(PromptError::MissingCandidate),
        }
    }

    pub fn mode(&self) -> PromptMode {
        match self {
            AnswerRequest::Qa => PromptMode::Qa,
            AnswerRequest::MultipleChoice { .. } => PromptMode::MultipleChoice,
            AnswerRequest::TrueFalse { .. } => PromptMode::TrueFalse,
        }
    }
}

pub fn option_letter(index: usize) -> char {
    OPTION_LETTERS[index] as char
}

/// `A) label` lines.
pub fn render_options(options: &[String], kg: &KnowledgeGraph) -> Result<String, PromptError> {
    let lines = options
        .iter()
        .enumerate()
        .map(|(i, id)| Ok(format!("{}) {}", option_letter(i), label(kg, id)?)))
        .collect::<Result<Vec<_>, PromptError>>()?;
    Ok(lines.join("\n"))
}

/// Two-turn analogy dialogue: image understanding, then the analogy question.
///
/// The first turn attaches every visual slot combined left to right in
/// (head, tail, query) order. All-textual questions get only the second turn.
pub fn build_step2(
    question: &AnalogyQuestion,
    kg: &KnowledgeGraph,
    templates: &PromptTemplates,
    request: &AnswerRequest,
    recon: Option<&Reconstruction>,
) -> Result<DialoguePrompt, PromptError> {
    let order = visual_slots(question, &Slot::ALL);
    let refs = Slot::ALL
        .iter()
        .map(|s| slot_reference(question, kg, *s, &order))
        .collect::<Result<Vec<_>, _>>()?;
    let (head, tail, query) = (&refs[0], &refs[1], &refs[2]);

    let answer = match request {
        AnswerRequest::Qa => templates.render("answer_qa", &[])?,
        AnswerRequest::MultipleChoice { options } => {
            templates.render("answer_mc", &[("options", &render_options(options, kg)?)])?
        }
        AnswerRequest::TrueFalse { candidate } => {
            let candidate = format!("\"{}\"", label(kg, candidate)?);
            templates.render(
                "answer_tf",
                &[("head", head), ("tail", tail), ("query", query), ("candidate", &candidate)],
            )?
        }
    };
    let context = match recon.filter(|r| !r.entity_texts.is_empty() || r.relation_text.is_some()) {
        Some(r) => {
            let mut notes = r
                .entity_texts
                .iter()
                .map(|(slot, text)| {
                    let idx = Slot::ALL.iter().position(|s| s == slot).expect("slot");
                    format!("- {}: {}", refs[idx], squash(text))
                })
                .collect::<Vec<_>>();
            if let Some(text) = &r.relation_text {
                notes.push(format!("- link from {head} to {tail}: {}", squash(text)));
            }
            let notes = notes.join("\n");
            templates.render("step2_context", &[("notes", &notes)])? + "\n"
        }
        None => String::new(),
    };
    let question_text = templates.render(
        "step2_question",
        &[
            ("context", &context),
            ("head", head),
            ("tail", tail),
            ("query", query),
            ("answer", &answer),
        ],
    )?;

    let mut turns = Vec::with_capacity(2);
    if !order.is_empty() {
        let parts = visual_parts(question, kg, &Slot::ALL)?;
        turns.push(Turn::user(
            templates.render("step2_describe", &[("layout", &layout_phrase(parts.len()))])?,
            vec![ImageAttachment { parts }],
        ));
    }
    turns.push(Turn::user(question_text, vec![]));
    Ok(DialoguePrompt::new(
        turns,
        Some(PromptTask::Analogy {
            question: question.clone(),
            request: request.clone(),
        }),
    ))
}

/// Reference reply to the image-understanding turn, built from graph labels.
pub fn describe_answer(question: &AnalogyQuestion, kg: &KnowledgeGraph) -> Result<Option<String>, PromptError> {
    let order = visual_slots(question, &Slot::ALL);
    if order.is_empty() {
        return Ok(None);
    }
    let lines = order
        .iter()
        .enumerate()
        .map(|(i, slot)| {
            let e = kg.require_entity(question.slot_entity(*slot)).map_err(|_| PromptError::UnknownEntity(question.slot_entity(*slot).to_string()))?;
            let mut line = format!("{}: {}", capitalize(&picture_position(i, order.len())), e.label);
            let d = squash(&e.description);
            if !d.is_empty() {
                line.push_str(&format!(" ({d})"));
            }
            Ok(line)
        })
        .collect::<Result<Vec<_>, PromptError>>()?;
    Ok(Some(lines.join("\n")))
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Entities that may serve as distractors: everything except the question's own entities.
fn eligible_distractors<'a>(question: &AnalogyQuestion, kg: &'a KnowledgeGraph) -> Vec<&'a str> {
    let excluded: BTreeSet<&str> = [
        question.gold_answer.as_str(),
        question.example_head.as_str(),
        question.example_tail.as_str(),
        question.query.as_str(),
    ]
    .into_iter()
    .collect();
    kg.entities()
        .map(|e| e.id.as_str())
        .filter(|id| !excluded.contains(id))
        .collect()
}

/// `n` distinct options containing the gold answer, in seeded shuffled order.
///
/// Distractors are drawn uniformly without replacement from entities other
/// than the question's own. The draw depends only on `(seed, question id)`.
pub fn sample_options(question: &AnalogyQuestion, kg: &KnowledgeGraph, n: usize, seed: u64) -> Result<Vec<String>, PromptError> {
    let eligible = eligible_distractors(question, kg);
    let needed = n.saturating_sub(1);
    if n == 0 || needed > eligible.len() {
        return Err(PromptError::NotEnoughEntities {
            needed,
            available: eligible.len(),
        });
    }
    let mut rng = rng_for(seed, &["options", &question.id]);
    let mut options: Vec<String> = rand::seq::index::sample(&mut rng, eligible.len(), needed)
        .into_iter()
        .map(|i| eligible[i].to_string())
        .collect();
    options.push(question.gold_answer.clone());
    options.shuffle(&mut rng);
    Ok(options)
}

/// Candidate answer for a true/false prompt: a seeded distractor with
/// probability `corruption_rate`, otherwise the gold answer.
/// Returns the candidate and whether it is the gold answer.
pub fn tf_candidate(question: &AnalogyQuestion, kg: &KnowledgeGraph, seed: u64, corruption_rate: f64) -> (String, bool) {
    let mut rng = rng_for(seed, &["true_false", &question.id]);
    let corrupt = rng.gen::<f64>() < corruption_rate;
    let eligible = eligible_distractors(question, kg);
    if corrupt && !eligible.is_empty() {
        let pick = eligible[rng.gen_range(0..eligible.len())];
        return (pick.to_string(), false);
    }
    (question.gold_answer.clone(), true)
}

/// Option count used when a question carries no options of its own.
pub const DEFAULT_OPTION_COUNT: usize = 10;

/// Answer request for `question` in `mode` and the gold id it is scored
/// against. Multiple choice uses the question's own options when present and
/// seeded samples otherwise; true/false scores against `true` or `false`.
pub fn answer_request_for(
    question: &AnalogyQuestion,
    kg: &KnowledgeGraph,
    mode: PromptMode,
    option_count: usize,
    seed: u64,
    tf_corruption_rate: f64,
) -> Result<(AnswerRequest, String), PromptError> {
    match mode {
        PromptMode::Qa => Ok((AnswerRequest::Qa, question.gold_answer.clone())),
        PromptMode::MultipleChoice => {
            let options = match &question.options {
                Some(o) => o.clone(),
                None => sample_options(question, kg, option_count, seed)?,
            };
            Ok((AnswerRequest::new(mode, Some(options), None)?, question.gold_answer.clone()))
        }
        PromptMode::TrueFalse => {
            let (candidate, valid) = tf_candidate(question, kg, seed, tf_corruption_rate);
            Ok((AnswerRequest::TrueFalse { candidate }, valid.to_string()))
        }
    }
}
