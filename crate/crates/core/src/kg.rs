//! Background multimodal knowledge graph and analogy question sets.
//!
//! A graph lives in a directory holding three line-delimited JSON files
//! (`entities.jsonl`, `relations.jsonl`, `triplets.jsonl`). Question sets are a
//! separate `questions.jsonl` validated against a loaded graph.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const ENTITIES_FILE: &str = "entities.jsonl";
pub const RELATIONS_FILE: &str = "relations.jsonl";
pub const TRIPLETS_FILE: &str = "triplets.jsonl";
pub const QUESTIONS_FILE: &str = "questions.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum KgError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: parse error: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
    #[error("{file}:{line}: invalid record: {message}")]
    InvalidRecord {
        file: String,
        line: usize,
        message: String,
    },
    #[error("{file}:{line}: duplicate {kind} id `{id}`")]
    DuplicateId {
        file: String,
        line: usize,
        kind: &'static str,
        id: String,
    },
    #[error("{file}:{line}: dangling {field} reference `{id}` in triplet {triplet}")]
    DanglingReference {
        file: String,
        line: usize,
        field: &'static str,
        id: String,
        /// `(head, relation, tail)` as written in the file.
        triplet: String,
    },
    #[error("unknown entity `{0}`")]
    UnknownEntity(String),
    #[error("unknown relation `{0}`")]
    UnknownRelation(String),
    #[error("{file}:{line}: question `{id}`: {message}")]
    InvalidQuestion {
        file: String,
        line: usize,
        id: String,
        message: String,
    },
    #[error("{file}:{line}: question `{id}` references unknown entity `{entity}`")]
    QuestionUnknownEntity {
        file: String,
        line: usize,
        id: String,
        entity: String,
    },
    #[error("{file}:{line}: malformed modality tag: {message}")]
    MalformedModality {
        file: String,
        line: usize,
        message: String,
    },
    #[error("{file}:{line}: question `{id}`: options do not contain gold answer `{gold}`")]
    OptionsMissingGold {
        file: String,
        line: usize,
        id: String,
        gold: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    pub label: String,
    #[serde(default)]
    pub description: String,
    /// Image paths or URIs. The first one is the canonical image used in prompts.
    #[serde(default, rename = "images")]
    pub image_refs: Vec<String>,
}

impl Entity {
    pub fn canonical_image(&self) -> Option<&str> {
        self.image_refs.first().map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub id: String,
    pub label: String,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triplet {
    pub fn new(head: impl Into<String>, relation: impl Into<String>, tail: impl Into<String>) -> Self {
        Self {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
        }
    }
}

impl fmt::Display for Triplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head, self.relation, self.tail)
    }
}

type PairIndex = BTreeMap<(String, String), Vec<String>>;

/// Immutable multimodal knowledge graph with lookup indexes.
///
/// Indexes are derived from the triplet list and stay sorted by id, so every
/// query result is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeGraph {
    entities: BTreeMap<String, Entity>,
    relations: BTreeMap<String, Relation>,
    triplets: Vec<Triplet>,
    by_pair: PairIndex,
    by_head_relation: PairIndex,
    base_dir: Option<PathBuf>,
}

impl KnowledgeGraph {
    /// Builds a graph from in-memory records, enforcing the same checks as [`load_kg`].
    pub fn from_parts(
        entities: Vec<Entity>,
        relations: Vec<Relation>,
        triplets: Vec<Triplet>,
    ) -> Result<Self, KgError> {
        let mut builder = Builder::default();
        for (i, e) in entities.into_iter().enumerate() {
            builder.add_entity(e, "<memory>", i + 1)?;
        }
        for (i, r) in relations.into_iter().enumerate() {
            builder.add_relation(r, "<memory>", i + 1)?;
        }
        for (i, t) in triplets.into_iter().enumerate() {
            builder.add_triplet(t, "<memory>", i + 1)?;
        }
        Ok(builder.finish(None))
    }

    pub fn entity(&self, id: &str) -> Option<&Entity> {
        self.entities.get(id)
    }

    pub fn relation(&self, id: &str) -> Option<&Relation> {
        self.relations.get(id)
    }

    pub fn require_entity(&self, id: &str) -> Result<&Entity, KgError> {
        self.entity(id).ok_or_else(|| KgError::UnknownEntity(id.to_string()))
    }

    pub fn require_relation(&self, id: &str) -> Result<&Relation, KgError> {
        self.relation(id).ok_or_else(|| KgError::UnknownRelation(id.to_string()))
    }

    /// Entities in id order.
    pub fn entities(&self) -> impl ExactSizeIterator<Item = &Entity> {
        self.entities.values()
    }

    /// Relations in id order.
    pub fn relations(&self) -> impl ExactSizeIterator<Item = &Relation> {
        self.relations.values()
    }

    /// Triplets in file order.
    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn triplet_count(&self) -> usize {
        self.triplets.len()
    }

    /// Directory the graph was loaded from; relative image paths resolve against it.
    pub fn base_dir(&self) -> Option<&Path> {
        self.base_dir.as_deref()
    }

    /// Resolves an image reference to a local path. URIs yield `None`.
    pub fn resolve_image(&self, image_ref: &str) -> Option<PathBuf> {
        if is_uri(image_ref) {
            return None;
        }
        let p = Path::new(image_ref);
        if p.is_absolute() {
            return Some(p.to_path_buf());
        }
        Some(match &self.base_dir {
            Some(base) => base.join(p),
            None => p.to_path_buf(),
        })
    }

    /// Relations `r` with `(head, r, tail)` in the graph, ordered by relation id.
    pub fn relations_between(&self, head: &str, tail: &str) -> Result<Vec<String>, KgError> {
        self.require_entity(head)?;
        self.require_entity(tail)?;
        Ok(self
            .by_pair
            .get(&(head.to_string(), tail.to_string()))
            .cloned()
            .unwrap_or_default())
    }

    /// Tails `t` with `(head, relation, t)` in the graph, ordered by entity id.
    pub fn tails_for(&self, head: &str, relation: &str) -> Result<Vec<String>, KgError> {
        self.require_entity(head)?;
        self.require_relation(relation)?;
        Ok(self
            .by_head_relation
            .get(&(head.to_string(), relation.to_string()))
            .cloned()
            .unwrap_or_default())
    }

    pub fn contains(&self, head: &str, relation: &str, tail: &str) -> bool {
        self.by_pair
            .get(&(head.to_string(), tail.to_string()))
            .is_some_and(|rs| rs.iter().any(|r| r == relation))
    }

    /// Recomputes both indexes from the triplet list and compares them with the stored ones.
    pub fn indexes_consistent(&self) -> bool {
        let (pair, head_rel) = build_indexes(&self.triplets);
        pair == self.by_pair && head_rel == self.by_head_relation
    }

    /// Structural checks: referential integrity and index consistency.
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        for t in &self.triplets {
            if !self.entities.contains_key(&t.head) {
                problems.push(format!("triplet {t}: unknown head"));
            }
            if !self.relations.contains_key(&t.relation) {
                problems.push(format!("triplet {t}: unknown relation"));
            }
            if !self.entities.contains_key(&t.tail) {
                problems.push(format!("triplet {t}: unknown tail"));
            }
        }
        if !self.indexes_consistent() {
            problems.push("indexes disagree with triplet list".to_string());
        }
        problems
    }

    /// Checks that every local image reference points to a readable file. URIs are not fetched.
    pub fn check_images(&self) -> Vec<String> {
        let mut problems = Vec::new();
        for e in self.entities.values() {
            for r in &e.image_refs {
                if let Some(path) = self.resolve_image(r) {
                    if let Err(err) = fs::File::open(&path) {
                        problems.push(format!("entity `{}`: image {}: {err}", e.id, path.display()));
                    }
                }
            }
        }
        problems
    }

    /// Writes the graph as the three record files under `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<(), KgError> {
        fs::create_dir_all(dir).map_err(|source| KgError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        write_jsonl(&dir.join(ENTITIES_FILE), self.entities.values())?;
        write_jsonl(&dir.join(RELATIONS_FILE), self.relations.values())?;
        write_jsonl(&dir.join(TRIPLETS_FILE), self.triplets.iter())?;
        Ok(())
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = Some(dir.into());
        self
    }

    /// Graph content equality, ignoring where it was loaded from.
    pub fn same_content(&self, other: &KnowledgeGraph) -> bool {
        self.entities == other.entities && self.relations == other.relations && self.triplets == other.triplets
    }
}

fn is_uri(s: &str) -> bool {
    s.contains("://") || s.starts_with("data:")
}

fn build_indexes(triplets: &[Triplet]) -> (PairIndex, PairIndex) {
    let mut pair: BTreeMap<(String, String), BTreeSet<String>> = BTreeMap::new();
    let mut head_rel: BTreeMap<(String, String), BTreeSet<String>> = BTreeMap::new();
    for t in triplets {
        pair.entry((t.head.clone(), t.tail.clone()))
            .or_default()
            .insert(t.relation.clone());
        head_rel
            .entry((t.head.clone(), t.relation.clone()))
            .or_default()
            .insert(t.tail.clone());
    }
    let flatten = |m: BTreeMap<(String, String), BTreeSet<String>>| {
        m.into_iter()
            .map(|(k, v)| (k, v.into_iter().collect()))
            .collect::<PairIndex>()
    };
    (flatten(pair), flatten(head_rel))
}

#[derive(Default)]
struct Builder {
    entities: BTreeMap<String, Entity>,
    relations: BTreeMap<String, Relation>,
    triplets: Vec<Triplet>,
}

impl Builder {
    fn add_entity(&mut self, e: Entity, file: &str, line: usize) -> Result<(), KgError> {
        if e.id.is_empty() || e.label.is_empty() {
            return Err(KgError::InvalidRecord {
                file: file.to_string(),
                line,
                message: "entity id and label must be nonempty".to_string(),
            });
        }
        if self.entities.contains_key(&e.id) {
            return Err(KgError::DuplicateId {
                file: file.to_string(),
                line,
                kind: "entity",
                id: e.id,
            });
        }
        self.entities.insert(e.id.clone(), e);
        Ok(())
    }

    fn add_relation(&mut self, r: Relation, file: &str, line: usize) -> Result<(), KgError> {
        if r.id.is_empty() {
            return Err(KgError::InvalidRecord {
                file: file.to_string(),
                line,
                message: "relation id must be nonempty".to_string(),
            });
        }
        if self.relations.contains_key(&r.id) {
            return Err(KgError::DuplicateId {
                file: file.to_string(),
                line,
                kind: "relation",
                id: r.id,
            });
        }
        self.relations.insert(r.id.clone(), r);
        Ok(())
    }

    fn add_triplet(&mut self, t: Triplet, file: &str, line: usize) -> Result<(), KgError> {
        let dangling = |field: &'static str, id: &str| KgError::DanglingReference {
            file: file.to_string(),
            line,
            field,
            id: id.to_string(),
            triplet: format!("({}, {}, {})", t.head, t.relation, t.tail),
        };
        if !self.entities.contains_key(&t.head) {
            return Err(dangling("head", &t.head));
        }
        if !self.relations.contains_key(&t.relation) {
            return Err(dangling("relation", &t.relation));
        }
        if !self.entities.contains_key(&t.tail) {
            return Err(dangling("tail", &t.tail));
        }
        self.triplets.push(t);
        Ok(())
    }

    fn finish(self, base_dir: Option<PathBuf>) -> KnowledgeGraph {
        let (by_pair, by_head_relation) = build_indexes(&self.triplets);
        KnowledgeGraph {
            entities: self.entities,
            relations: self.relations,
            triplets: self.triplets,
            by_pair,
            by_head_relation,
            base_dir,
        }
    }
}

/// Record wrapper that keeps unknown keys around so they can be reported.
#[derive(Deserialize)]
struct WithExtra<T> {
    #[serde(flatten)]
    inner: T,
    #[serde(flatten)]
    extra: BTreeMap<String, serde_json::Value>,
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, KgError> {
    let file = fs::File::open(path).map_err(|source| KgError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let name = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|source| KgError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: WithExtra<T> = serde_json::from_str(&line).map_err(|e| KgError::Parse {
            file: name.clone(),
            line: lineno,
            message: e.to_string(),
        })?;
        if !rec.extra.is_empty() {
            let keys: Vec<&str> = rec.extra.keys().map(String::as_str).collect();
            log::warn!("{name}:{lineno}: ignoring unknown keys {keys:?}");
        }
        out.push((lineno, rec.inner));
    }
    Ok(out)
}

fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, items: impl Iterator<Item = &'a T>) -> Result<(), KgError> {
    let io_err = |source| KgError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io_err)?);
    for item in items {
        let line = serde_json::to_string(item).expect("records serialize");
        writeln!(f, "{line}").map_err(io_err)?;
    }
    f.flush().map_err(io_err)
}

/// Loads a graph from a directory containing the three record files.
pub fn load_kg(dir: impl AsRef<Path>) -> Result<KnowledgeGraph, KgError> {
    let dir = dir.as_ref();
    let mut builder = Builder::default();

    let path = dir.join(ENTITIES_FILE);
    let file = path.display().to_string();
    for (line, e) in read_jsonl::<Entity>(&path)? {
        builder.add_entity(e, &file, line)?;
    }
    let path = dir.join(RELATIONS_FILE);
    let file = path.display().to_string();
    for (line, r) in read_jsonl::<Relation>(&path)? {
        builder.add_relation(r, &file, line)?;
    }
    let path = dir.join(TRIPLETS_FILE);
    let file = path.display().to_string();
    for (line, t) in read_jsonl::<Triplet>(&path)? {
        builder.add_triplet(t, &file, line)?;
    }
    Ok(builder.finish(Some(dir.to_path_buf())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Textual,
}

impl Modality {
    fn code(self) -> char {
        match self {
            Modality::Visual => 'v',
            Modality::Textual => 't',
        }
    }
}

/// Modality of the head, tail and query slots of an analogy question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModalityConfig {
    pub head: Modality,
    pub tail: Modality,
    pub query: Modality,
}

impl ModalityConfig {
    /// `(I_h, I_t) : (T_q, ?)`
    pub const VVT: Self = Self::new(Modality::Visual, Modality::Visual, Modality::Textual);
    /// `(T_h, T_t) : (I_q, ?)`
    pub const TTV: Self = Self::new(Modality::Textual, Modality::Textual, Modality::Visual);
    /// `(I_h, T_t) : (I_q, ?)`
    pub const VTV: Self = Self::new(Modality::Visual, Modality::Textual, Modality::Visual);
    /// Zero-shot verb-noun format `(T_h, I_t) : (T_q, ?)`.
    pub const TVT: Self = Self::new(Modality::Textual, Modality::Visual, Modality::Textual);

    pub const NAMED: [Self; 4] = [Self::VVT, Self::TTV, Self::VTV, Self::TVT];

    pub const fn new(head: Modality, tail: Modality, query: Modality) -> Self {
        Self { head, tail, query }
    }

    /// Three-letter code such as `vtv`.
    pub fn code(&self) -> String {
        [self.head, self.tail, self.query].iter().map(|m| m.code()).collect()
    }

    pub fn slot(&self, slot: Slot) -> Modality {
        match slot {
            Slot::Head => self.head,
            Slot::Tail => self.tail,
            Slot::Query => self.query,
        }
    }
}

impl fmt::Display for ModalityConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code())
    }
}

impl FromStr for ModalityConfig {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let chars: Vec<char> = s.trim().to_ascii_lowercase().chars().collect();
        if chars.len() != 3 {
            return Err(format!("subtask `{s}` must be three letters of v/t"));
        }
        let m = |c: char| match c {
            'v' => Ok(Modality::Visual),
            't' => Ok(Modality::Textual),
            _ => Err(format!("subtask `{s}`: `{c}` is not v or t")),
        };
        Ok(Self::new(m(chars[0])?, m(chars[1])?, m(chars[2])?))
    }
}

/// The three entity positions of an analogy question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Head,
    Tail,
    Query,
}

impl Slot {
    pub const ALL: [Slot; 3] = [Slot::Head, Slot::Tail, Slot::Query];

    pub fn name(self) -> &'static str {
        match self {
            Slot::Head => "head",
            Slot::Tail => "tail",
            Slot::Query => "query",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum QuestionIssue {
    #[error("unknown entity `{0}`")]
    UnknownEntity(String),
    #[error("unknown relation `{0}`")]
    UnknownRelation(String),
    #[error("options are not distinct")]
    DuplicateOptions,
    #[error("options do not contain the gold answer")]
    OptionsMissingGold,
    #[error("gold relation `{0}` does not link the example pair")]
    GoldRelationNotLinked(String),
}

/// `(example_head, example_tail) : (query, ?)` with gold answer `gold_answer`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalogyQuestion {
    pub id: String,
    pub example_head: String,
    pub example_tail: String,
    pub query: String,
    pub gold_answer: String,
    /// Never rendered into prompts; used for relation-inference scoring.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_relation: Option<String>,
    pub modality: ModalityConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
}

impl AnalogyQuestion {
    pub fn slot_entity(&self, slot: Slot) -> &str {
        match slot {
            Slot::Head => &self.example_head,
            Slot::Tail => &self.example_tail,
            Slot::Query => &self.query,
        }
    }

    /// Checks question invariants against `kg`.
    pub fn check(&self, kg: &KnowledgeGraph) -> Result<(), QuestionIssue> {
        for (what, id) in [
            ("example_head", &self.example_head),
            ("example_tail", &self.example_tail),
            ("query", &self.query),
            ("gold_answer", &self.gold_answer),
        ] {
            if kg.entity(id).is_none() {
                log::debug!("question {}: unknown {what}", self.id);
                return Err(QuestionIssue::UnknownEntity(id.clone()));
            }
        }
        if let Some(opts) = &self.options {
            let distinct: BTreeSet<&String> = opts.iter().collect();
            if distinct.len() != opts.len() {
                return Err(QuestionIssue::DuplicateOptions);
            }
            if let Some(bad) = opts.iter().find(|o| kg.entity(o).is_none()) {
                return Err(QuestionIssue::UnknownEntity(bad.clone()));
            }
            if !opts.contains(&self.gold_answer) {
                return Err(QuestionIssue::OptionsMissingGold);
            }
        }
        if let Some(rel) = &self.gold_relation {
            if kg.relation(rel).is_none() {
                return Err(QuestionIssue::UnknownRelation(rel.clone()));
            }
            if !kg.contains(&self.example_head, rel, &self.example_tail) {
                return Err(QuestionIssue::GoldRelationNotLinked(rel.clone()));
            }
        }
        Ok(())
    }
}

/// Loads and validates a question file against `kg`.
pub fn load_questions(path: impl AsRef<Path>, kg: &KnowledgeGraph) -> Result<Vec<AnalogyQuestion>, KgError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|source| KgError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let name = path.display().to_string();
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|source| KgError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| KgError::Parse {
            file: name.clone(),
            line: lineno,
            message: e.to_string(),
        })?;
        if let Some(m) = value.get("modality") {
            if let Err(e) = ModalityConfig::deserialize(m) {
                return Err(KgError::MalformedModality {
                    file: name.clone(),
                    line: lineno,
                    message: e.to_string(),
                });
            }
        }
        let rec: WithExtra<AnalogyQuestion> = serde_json::from_value(value).map_err(|e| KgError::Parse {
            file: name.clone(),
            line: lineno,
            message: e.to_string(),
        })?;
        if !rec.extra.is_empty() {
            let keys: Vec<&str> = rec.extra.keys().map(String::as_str).collect();
            log::warn!("{name}:{lineno}: ignoring unknown keys {keys:?}");
        }
        let q = rec.inner;
        if !seen.insert(q.id.clone()) {
            return Err(KgError::DuplicateId {
                file: name,
                line: lineno,
                kind: "question",
                id: q.id,
            });
        }
        if let Some(opts) = &q.options {
            if !opts.contains(&q.gold_answer) {
                return Err(KgError::OptionsMissingGold {
                    file: name,
                    line: lineno,
                    id: q.id.clone(),
                    gold: q.gold_answer.clone(),
                });
            }
        }
        if let Err(issue) = q.check(kg) {
            return Err(match issue {
                QuestionIssue::UnknownEntity(entity) => KgError::QuestionUnknownEntity {
                    file: name,
                    line: lineno,
                    id: q.id,
                    entity,
                },
                other => KgError::InvalidQuestion {
                    file: name,
                    line: lineno,
                    id: q.id,
                    message: other.to_string(),
                },
            });
        }
        out.push(q);
    }
    Ok(out)
}

/// Writes questions as `questions.jsonl`.
pub fn write_questions(path: &Path, questions: &[AnalogyQuestion]) -> Result<(), KgError> {
    write_jsonl(path, questions.iter())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ent(id: &str) -> Entity {
        Entity {
            id: id.into(),
            label: id.replace('_', " "),
            description: format!("about {id}"),
            image_refs: vec![],
        }
    }

    fn rel(id: &str) -> Relation {
        Relation {
            id: id.into(),
            label: id.replace('_', " "),
            description: String::new(),
        }
    }

    fn water_kg() -> KnowledgeGraph {
        KnowledgeGraph::from_parts(
            vec![ent("ice"), ent("water"), ent("steam"), ent("sea")],
            vec![rel("class_of"), rel("part_of"), rel("phase_of")],
            vec![
                Triplet::new("ice", "class_of", "water"),
                Triplet::new("ice", "phase_of", "water"),
                Triplet::new("water", "part_of", "sea"),
                Triplet::new("steam", "class_of", "water"),
                Triplet::new("ice", "class_of", "steam"),
            ],
        )
        .unwrap()
    }

    #[test]
    fn relations_between_examples() {
        let kg = water_kg();
        // parallel edges come back in id order
        assert_eq!(kg.relations_between("ice", "water").unwrap(), vec!["class_of", "phase_of"]);
        assert!(kg.relations_between("water", "ice").unwrap().is_empty());
        assert!(matches!(kg.relations_between("ice", "lava"), Err(KgError::UnknownEntity(_))));
    }

    #[test]
    fn tails_for_matches_linear_scan() {
        let kg = water_kg();
        for e in kg.entities() {
            for r in kg.relations() {
                let mut scan: Vec<String> = kg
                    .triplets()
                    .iter()
                    .filter(|t| t.head == e.id && t.relation == r.id)
                    .map(|t| t.tail.clone())
                    .collect();
                scan.sort();
                scan.dedup();
                assert_eq!(kg.tails_for(&e.id, &r.id).unwrap(), scan);
            }
        }
        assert_eq!(kg.tails_for("ice", "class_of").unwrap(), vec!["steam", "water"]);
        assert!(kg.tails_for("sea", "class_of").unwrap().is_empty());
        assert!(matches!(kg.tails_for("ice", "nope"), Err(KgError::UnknownRelation(_))));
    }

    #[test]
    fn duplicate_and_dangling_are_distinct_errors() {
        let dup = KnowledgeGraph::from_parts(vec![ent("a"), ent("a")], vec![], vec![]);
        assert!(matches!(dup, Err(KgError::DuplicateId { kind: "entity", .. })));
        let dangling = KnowledgeGraph::from_parts(vec![ent("a")], vec![rel("r")], vec![Triplet::new("a", "r", "b")]);
        assert!(matches!(dangling, Err(KgError::DanglingReference { field: "tail", .. })));
    }

    #[test]
    fn modality_codes_parse() {
        for m in ModalityConfig::NAMED {
            assert_eq!(m.code().parse::<ModalityConfig>().unwrap(), m);
        }
        assert_eq!("vtv".parse::<ModalityConfig>().unwrap(), ModalityConfig::VTV);
        assert!("vx".parse::<ModalityConfig>().is_err());
        assert!("vvx".parse::<ModalityConfig>().is_err());
    }

    #[test]
    fn question_checks() {
        let kg = water_kg();
        let mut q = AnalogyQuestion {
            id: "q".into(),
            example_head: "ice".into(),
            example_tail: "water".into(),
            query: "steam".into(),
            gold_answer: "water".into(),
            gold_relation: Some("class_of".into()),
            modality: ModalityConfig::VTV,
            options: None,
        };
        assert!(q.check(&kg).is_ok());
        q.gold_relation = Some("part_of".into());
        assert!(q.check(&kg).is_err());
        q.gold_relation = None;
        q.options = Some(vec!["water".into(), "water".into()]);
        assert!(q.check(&kg).is_err());
    }
}
