//! Grounding of free-text model output onto a graph vocabulary by cosine
//! similarity.
//!
//! The local provider embeds text as hashed character-trigram term
//! frequencies. A remote provider can call a sentence-embedding endpoint.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub const TRIGRAM_BUCKETS: usize = 4096;
const NORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum MapError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero vector")]
    ZeroVector,
    #[error("vocabulary is empty")]
    EmptyVocabulary,
    #[error("output is empty after normalization; cannot ground")]
    Ungroundable,
    #[error("embedding endpoint: {0}")]
    Remote(String),
    #[error("index cache {path}: {message}")]
    Cache { path: String, message: String },
}

/// Dense embedding vector with finite components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn normalized(&self) -> Result<Self, MapError> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(MapError::ZeroVector);
        }
        Ok(Self(self.0.iter().map(|x| x / n).collect()))
    }
}

/// `dot(a, b) / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, MapError> {
    if a.dim() != b.dim() {
        return Err(MapError::DimensionMismatch(a.dim(), b.dim()));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(MapError::ZeroVector);
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub trait EmbeddingProvider: Send + Sync {
    fn tag(&self) -> String;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, MapError>;

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, MapError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

/// Hashed character-trigram TF embedding, L2-normalized.
///
/// Texts shorter than three characters count as a single gram.
#[derive(Debug, Clone, Copy)]
pub struct TrigramEmbedder {
    buckets: usize,
}

impl Default for TrigramEmbedder {
    fn default() -> Self {
        Self {
            buckets: TRIGRAM_BUCKETS,
        }
    }
}

impl TrigramEmbedder {
    pub fn with_buckets(buckets: usize) -> Self {
        assert!(buckets > 0);
        Self { buckets }
    }

    pub fn bucket(&self, gram: &str) -> usize {
        (fnv1a(gram.as_bytes()) % self.buckets as u64) as usize
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Character trigrams of `text`, or the whole text when shorter than three characters.
pub fn char_trigrams(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    if chars.len() < 3 {
        return vec![text.to_string()];
    }
    chars.windows(3).map(|w| w.iter().collect()).collect()
}

impl EmbeddingProvider for TrigramEmbedder {
    fn tag(&self) -> String {
        format!("local-trigram-{}", self.buckets)
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, MapError> {
        if text.trim().is_empty() {
            return Err(MapError::EmptyText);
        }
        let mut v = vec![0.0; self.buckets];
        for gram in char_trigrams(text) {
            v[self.bucket(&gram)] += 1.0;
        }
        EmbeddingVector(v).normalized()
    }
}

/// Sentence-embedding endpoint speaking `{model, input:[...]}` → `{data:[{embedding}]}`.
pub struct RemoteEmbedder {
    pub endpoint: String,
    pub model: String,
    pub token: Option<String>,
    client: reqwest::blocking::Client,
}

impl RemoteEmbedder {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, token: Option<String>, timeout: Duration) -> Result<Self, MapError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| MapError::Remote(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            model: model.into(),
            token,
            client,
        })
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl EmbeddingProvider for RemoteEmbedder {
    fn tag(&self) -> String {
        format!("remote:{}", self.model)
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, MapError> {
        let mut v = self.embed_batch(&[text.to_string()])?;
        v.pop().ok_or_else(|| MapError::Remote("empty response".into()))
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, MapError> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(MapError::EmptyText);
        }
        let body = serde_json::json!({ "model": self.model, "input": texts });
        let mut req = self
            .client
            .post(&self.endpoint)
            .header("content-type", "application/json")
            .body(body.to_string());
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| MapError::Remote(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| MapError::Remote(e.to_string()))?;
        if !status.is_success() {
            return Err(MapError::Remote(format!("HTTP {status}: {text}")));
        }
        let parsed: EmbeddingResponse =
            serde_json::from_str(&text).map_err(|e| MapError::Remote(format!("malformed response: {e}")))?;
        if parsed.data.len() != texts.len() {
            return Err(MapError::Remote(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                parsed.data.len()
            )));
        }
        parsed
            .data
            .into_iter()
            .map(|d| {
                if d.embedding.iter().any(|x| !x.is_finite()) {
                    return Err(MapError::Remote("non-finite embedding component".into()));
                }
                EmbeddingVector(d.embedding).normalized()
            })
            .collect()
    }
}

/// Lowercases, strips an option-letter prefix such as `B)` and surrounding
/// quotes or trailing punctuation.
pub fn normalize_output(text: &str) -> String {
    let mut s = text.trim().to_lowercase();
    s = strip_wrapping(&s);
    if let Some(rest) = strip_letter_prefix(&s) {
        s = rest;
    }
    s = strip_wrapping(&s);
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn strip_wrapping(s: &str) -> String {
    let mut t = s.trim().trim_end_matches(['.', '!', ',', ';']).trim();
    loop {
        let stripped = [('"', '"'), ('\'', '\''), ('`', '`'), ('“', '”'), ('*', '*')]
            .iter()
            .find_map(|(l, r)| t.strip_prefix(*l).and_then(|x| x.strip_suffix(*r)));
        match stripped {
            Some(inner) => t = inner.trim(),
            _ => break,
        }
    }
    t.to_string()
}

/// `b) water`, `(b) water`, `b. water`, `b: water` → `water`. A bare letter is left alone.
fn strip_letter_prefix(s: &str) -> Option<String> {
    let body = s.strip_prefix('(').unwrap_or(s);
    let mut chars = body.chars();
    let letter = chars.next()?;
    if !letter.is_ascii_lowercase() {
        return None;
    }
    let rest = chars.as_str();
    let sep = rest.chars().next()?;
    if ![')', '.', ':'].contains(&sep) {
        return None;
    }
    let after = &rest[sep.len_utf8()..];
    if !(after.is_empty() || after.starts_with(' ')) {
        return None;
    }
    let after = after.trim();
    if after.is_empty() {
        Some(letter.to_string())
    } else {
        Some(after.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabItem {
    pub id: String,
    pub label: String,
}

/// Immutable grounding vocabulary with precomputed normalized embeddings.
pub struct VocabIndex {
    items: Vec<VocabItem>,
    normalized_labels: Vec<String>,
    vectors: Vec<EmbeddingVector>,
    letters: BTreeMap<char, usize>,
    provider_tag: String,
}

impl std::fmt::Debug for VocabIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VocabIndex")
            .field("items", &self.items.len())
            .field("provider", &self.provider_tag)
            .finish()
    }
}

impl VocabIndex {
    pub fn build(items: Vec<VocabItem>, provider: &dyn EmbeddingProvider) -> Result<Self, MapError> {
        if items.is_empty() {
            return Err(MapError::EmptyVocabulary);
        }
        let normalized_labels: Vec<String> = items.iter().map(|i| normalize_output(&i.label)).collect();
        let vectors = provider.embed_batch(&normalized_labels)?;
        Self::assemble(items, normalized_labels, vectors, provider.tag())
    }

    /// Builds an index whose items can also be addressed by option letter
    /// (`A` for the first item and so on).
    pub fn build_lettered(items: Vec<VocabItem>, provider: &dyn EmbeddingProvider) -> Result<Self, MapError> {
        let mut index = Self::build(items, provider)?;
        index.letters = (0..index.items.len())
            .map(|i| (crate::prompt::option_letter(i).to_ascii_lowercase(), i))
            .collect();
        Ok(index)
    }

    fn assemble(
        items: Vec<VocabItem>,
        normalized_labels: Vec<String>,
        vectors: Vec<EmbeddingVector>,
        provider_tag: String,
    ) -> Result<Self, MapError> {
        let dim = vectors.first().map(EmbeddingVector::dim).unwrap_or(0);
        let mut checked = Vec::with_capacity(vectors.len());
        for v in vectors {
            if v.dim() != dim {
                return Err(MapError::DimensionMismatch(dim, v.dim()));
            }
            let v = if (v.norm() - 1.0).abs() > NORM_TOLERANCE {
                v.normalized()?
            } else {
                v
            };
            checked.push(v);
        }
        Ok(Self {
            items,
            normalized_labels,
            vectors: checked,
            letters: BTreeMap::new(),
            provider_tag,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[VocabItem] {
        &self.items
    }

    pub fn provider_tag(&self) -> &str {
        &self.provider_tag
    }

    /// Writes `# provider=<tag> dim=<d>` then one `id<TAB>c1 c2 ...` line per item.
    pub fn save_cache(&self, path: &Path) -> Result<(), MapError> {
        let err = |e: std::io::Error| MapError::Cache {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(err)?);
        let dim = self.vectors.first().map(EmbeddingVector::dim).unwrap_or(0);
        writeln!(f, "# provider={} dim={dim}", self.provider_tag).map_err(err)?;
        for (item, v) in self.items.iter().zip(&self.vectors) {
            let comps: Vec<String> = v.0.iter().map(|x| format!("{x:?}")).collect();
            writeln!(f, "{}\t{}", item.id, comps.join(" ")).map_err(err)?;
        }
        f.flush().map_err(err)
    }

    /// Rebuilds an index from a cache file written by [`save_cache`](Self::save_cache).
    /// Every item must have a cached vector.
    pub fn load_cache(items: Vec<VocabItem>, path: &Path) -> Result<Self, MapError> {
        let cache_err = |message: String| MapError::Cache {
            path: path.display().to_string(),
            message,
        };
        let file = fs::File::open(path).map_err(|e| cache_err(e.to_string()))?;
        let mut tag = String::new();
        let mut by_id: BTreeMap<String, EmbeddingVector> = BTreeMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| cache_err(e.to_string()))?;
            if let Some(header) = line.strip_prefix("# ") {
                for kv in header.split_whitespace() {
                    if let Some(t) = kv.strip_prefix("provider=") {
                        tag = t.to_string();
                    }
                }
                continue;
            }
            let (id, comps) = line
                .split_once('\t')
                .ok_or_else(|| cache_err(format!("line {}: missing tab", i + 1)))?;
            let v = comps
                .split(' ')
                .map(|c| c.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| cache_err(format!("line {}: {e}", i + 1)))?;
            by_id.insert(id.to_string(), EmbeddingVector(v));
        }
        let vectors = items
            .iter()
            .map(|it| {
                by_id
                    .remove(&it.id)
                    .ok_or_else(|| cache_err(format!("no vector for `{}`", it.id)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let normalized_labels = items.iter().map(|i| normalize_output(&i.label)).collect();
        Self::assemble(items, normalized_labels, vectors, tag)
    }

    /// Item matching `normalized` exactly, or by option letter. Smallest id wins ties.
    pub fn exact_match(&self, normalized: &str) -> Option<usize> {
        let mut chars = normalized.chars();
        if let (Some(c), None) = (chars.next(), chars.next()) {
            if let Some(i) = self.letters.get(&c) {
                return Some(*i);
            }
        }
        self.normalized_labels
            .iter()
            .enumerate()
            .filter(|(_, l)| *l == normalized)
            .map(|(i, _)| i)
            .min_by(|a, b| self.items[*a].id.cmp(&self.items[*b].id))
    }
}

/// Vocabulary items by descending score, ties broken by ascending id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedRanking {
    pub entries: Vec<(String, f64)>,
}

impl GroundedRanking {
    pub fn top(&self) -> Option<&str> {
        self.entries.first().map(|(id, _)| id.as_str())
    }

    /// 1-based rank of `id`, if present.
    pub fn rank_of(&self, id: &str) -> Option<usize> {
        self.entries.iter().position(|(i, _)| i == id).map(|p| p + 1)
    }

    pub fn truncated(&self, depth: usize) -> Self {
        Self {
            entries: self.entries.iter().take(depth).cloned().collect(),
        }
    }
}

/// Ranks the whole vocabulary against `output`. An exact normalized label (or
/// option letter) match is placed first with score 1.0.
pub fn ground(output: &str, index: &VocabIndex, provider: &dyn EmbeddingProvider) -> Result<GroundedRanking, MapError> {
    if index.is_empty() {
        return Err(MapError::EmptyVocabulary);
    }
    let normalized = normalize_output(output);
    if normalized.is_empty() {
        return Err(MapError::Ungroundable);
    }
    let exact = index.exact_match(&normalized);
    let query = provider.embed(&normalized)?;
    let mut scored: Vec<(bool, f64, &str)> = Vec::with_capacity(index.len());
    for (i, (item, v)) in index.items.iter().zip(&index.vectors).enumerate() {
        let is_exact = exact == Some(i);
        let score = if is_exact { 1.0 } else { cosine(&query, v)? };
        scored.push((is_exact, score, item.id.as_str()));
    }
    scored.sort_by(|a, b| {
        b.0.cmp(&a.0)
            .then_with(|| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal))
            .then_with(|| a.2.cmp(b.2))
    });
    Ok(GroundedRanking {
        entries: scored.into_iter().map(|(_, s, id)| (id.to_string(), s)).collect(),
    })
}

/// Grounding without similarity: only an exact normalized match counts.
pub fn ground_exact(output: &str, index: &VocabIndex) -> Result<GroundedRanking, MapError> {
    let normalized = normalize_output(output);
    if normalized.is_empty() {
        return Err(MapError::Ungroundable);
    }
    Ok(GroundedRanking {
        entries: index
            .exact_match(&normalized)
            .map(|i| vec![(index.items[i].id.clone(), 1.0)])
            .unwrap_or_default(),
    })
}

/// Relation and answer lines of a reply in the `Relation: ...` /
/// `Answer: ...` format. Replies without an `Answer:` line are taken whole as
/// the answer.
pub fn split_reply(reply: &str) -> (Option<String>, String) {
    let mut relation = None;
    let mut answer = None;
    for line in reply.lines() {
        let line = line.trim();
        if let Some(rest) = strip_key(line, "relation") {
            relation.get_or_insert_with(|| rest.to_string());
        } else if let Some(rest) = strip_key(line, "answer") {
            answer.get_or_insert_with(|| rest.to_string());
        }
    }
    (relation, answer.unwrap_or_else(|| reply.trim().to_string()))
}

fn strip_key<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    let line = line.trim_start_matches(['*', '#', ' ']);
    let head = line.get(..key.len())?;
    if !head.eq_ignore_ascii_case(key) {
        return None;
    }
    let rest = line[key.len()..].trim_start_matches('*').trim_start();
    rest.strip_prefix(':').map(|r| r.trim_start_matches('*').trim())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reply_splitting() {
        assert_eq!(
            split_reply("Relation: subclass of\nAnswer: plant"),
            (Some("subclass of".to_string()), "plant".to_string())
        );
        assert_eq!(split_reply("**Answer:** B) water"), (None, "B) water".to_string()));
        assert_eq!(split_reply("  plant \n"), (None, "plant".to_string()));
    }

    fn items(labels: &[&str]) -> Vec<VocabItem> {
        labels
            .iter()
            .enumerate()
            .map(|(i, l)| VocabItem {
                id: format!("e{i:02}"),
                label: l.to_string(),
            })
            .collect()
    }

    #[test]
    fn single_trigram_has_one_bucket() {
        let v = TrigramEmbedder::default().embed("abc").unwrap();
        assert_eq!(v.0.iter().filter(|x| **x != 0.0).count(), 1);
        assert_eq!(v.dim(), TRIGRAM_BUCKETS);
    }

    #[test]
    fn self_similarity_is_one() {
        let p = TrigramEmbedder::default();
        for s in ["water", "a", "baked good", "Solar system"] {
            let v = p.embed(s).unwrap();
            assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cosine_errors_and_basis() {
        let a = EmbeddingVector(vec![1.0, 0.0]);
        let b = EmbeddingVector(vec![0.0, 1.0]);
        assert_eq!(cosine(&a, &b).unwrap(), 0.0);
        assert!(matches!(
            cosine(&a, &EmbeddingVector(vec![1.0])),
            Err(MapError::DimensionMismatch(2, 1))
        ));
        assert!(matches!(cosine(&a, &EmbeddingVector(vec![0.0, 0.0])), Err(MapError::ZeroVector)));
        assert!(matches!(TrigramEmbedder::default().embed("  "), Err(MapError::EmptyText)));
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_output("B) water"), "water");
        assert_eq!(normalize_output("(c) Baked Good."), "baked good");
        assert_eq!(normalize_output("\"Beverage\""), "beverage");
        assert_eq!(normalize_output("B"), "b");
        assert_eq!(normalize_output("B)"), "b");
        assert_eq!(normalize_output("a cup of tea"), "a cup of tea");
        assert_eq!(normalize_output("e.g. tea"), "e.g. tea");
    }

    #[test]
    fn exact_match_wins() {
        let p = TrigramEmbedder::default();
        let idx = VocabIndex::build(items(&["plant", "beverage", "bird"]), &p).unwrap();
        let r = ground("beverage", &idx, &p).unwrap();
        assert_eq!(r.entries[0], ("e01".to_string(), 1.0));
        assert_eq!(r.entries.len(), 3);
    }

    #[test]
    fn letters_resolve_to_options() {
        let p = TrigramEmbedder::default();
        let idx = VocabIndex::build_lettered(items(&["sea", "water", "ice"]), &p).unwrap();
        assert_eq!(ground("B) water", &idx, &p).unwrap().top(), Some("e01"));
        assert_eq!(ground("B", &idx, &p).unwrap().top(), Some("e01"));
        assert_eq!(ground("c)", &idx, &p).unwrap().top(), Some("e02"));
    }

    #[test]
    fn empty_output_is_ungroundable() {
        let p = TrigramEmbedder::default();
        let idx = VocabIndex::build(items(&["x"]), &p).unwrap();
        assert!(matches!(ground("  \"\" ", &idx, &p), Err(MapError::Ungroundable)));
        assert!(matches!(
            VocabIndex::build(vec![], &p),
            Err(MapError::EmptyVocabulary)
        ));
    }

    #[test]
    fn exact_only_grounding() {
        let p = TrigramEmbedder::default();
        let idx = VocabIndex::build(items(&["baked good", "bird"]), &p).unwrap();
        assert_eq!(ground_exact("Baked good", &idx).unwrap().top(), Some("e00"));
        assert!(ground_exact("baked goods", &idx).unwrap().entries.is_empty());
    }

    #[test]
    fn cache_round_trip() {
        let p = TrigramEmbedder::with_buckets(16);
        let idx = VocabIndex::build(items(&["ice", "water"]), &p).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        idx.save_cache(&path).unwrap();
        let back = VocabIndex::load_cache(items(&["ice", "water"]), &path).unwrap();
        assert_eq!(back.vectors, idx.vectors);
        assert_eq!(back.provider_tag(), "local-trigram-16");
    }
}
