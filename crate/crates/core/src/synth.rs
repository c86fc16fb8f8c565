//! Seeded synthetic graphs and question sets for offline runs.
//!
//! Entities get unique two-word labels and solid-colour images of varying
//! size. Every generated question is answerable from the graph: the example
//! pair and the query pair share the question's gold relation.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::image_ops::RasterImage;
use crate::kg::{AnalogyQuestion, Entity, KgError, KnowledgeGraph, ModalityConfig, Relation, Triplet};
use crate::seed::rng_for;

const COLOURS: [&str; 10] = ["red", "orange", "yellow", "green", "teal", "blue", "indigo", "violet", "pink", "brown"];
const NOUNS: [&str; 5] = ["lantern", "pebble", "feather", "kettle", "comet"];
const RELATIONS: [&str; 12] = [
    "class of",
    "part of",
    "made of",
    "opposite of",
    "located in",
    "used for",
    "produces",
    "subclass of",
    "follows",
    "contains",
    "powers",
    "resembles",
];

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("cannot place {wanted} distinct triplets over {entities} entities and {relations} relations")]
    TooManyTriplets { wanted: usize, entities: usize, relations: usize },
    #[error("at most {max} relations are available")]
    TooManyRelations { max: usize },
    #[error("graph has no relation with two usable triplets")]
    NoQuestionMaterial,
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error("image: {0}")]
    Image(#[from] crate::image_ops::ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthSpec {
    pub entities: usize,
    pub relations: usize,
    pub triplets: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            entities: 50,
            relations: 8,
            triplets: 120,
        }
    }
}

fn entity_label(i: usize) -> String {
    let base = format!("{} {}", COLOURS[i % COLOURS.len()], NOUNS[(i / COLOURS.len()) % NOUNS.len()]);
    match i / (COLOURS.len() * NOUNS.len()) {
        0 => base,
        round => format!("{base} {}", round + 1),
    }
}

/// Builds the graph in memory. Image references point at
/// `images/<id>.png`; use [`write_synthetic`] to materialize them.
pub fn synth_kg(spec: SynthSpec, seed: u64) -> Result<KnowledgeGraph, SynthError> {
    if spec.relations > RELATIONS.len() {
        return Err(SynthError::TooManyRelations { max: RELATIONS.len() });
    }
    let capacity = spec.entities * spec.entities.saturating_sub(1) * spec.relations;
    if spec.triplets > capacity {
        return Err(SynthError::TooManyTriplets {
            wanted: spec.triplets,
            entities: spec.entities,
            relations: spec.relations,
        });
    }
    let entities: Vec<Entity> = (0..spec.entities)
        .map(|i| {
            let label = entity_label(i);
            Entity {
                id: format!("E{i:03}"),
                description: format!("a synthetic {label}"),
                label,
                image_refs: vec![format!("images/E{i:03}.png")],
            }
        })
        .collect();
    let relations: Vec<Relation> = RELATIONS[..spec.relations]
        .iter()
        .enumerate()
        .map(|(i, label)| Relation {
            id: format!("R{i:02}"),
            label: label.to_string(),
            description: format!("{label} (synthetic)"),
        })
        .collect();

    // Round-robin over relations so every relation gets a fair share.
    let mut rng = rng_for(seed, &["synth", "triplets"]);
    let mut seen = BTreeSet::new();
    let mut triplets = Vec::with_capacity(spec.triplets);
    let mut r = 0;
    while triplets.len() < spec.triplets {
        let h = rng.gen_range(0..spec.entities);
        let t = rng.gen_range(0..spec.entities);
        if h == t {
            continue;
        }
        let triplet = Triplet::new(&entities[h].id, &relations[r % spec.relations].id, &entities[t].id);
        if seen.insert(triplet.clone()) {
            triplets.push(triplet);
            r += 1;
        }
    }
    Ok(KnowledgeGraph::from_parts(entities, relations, triplets)?)
}

/// Colour and size of an entity's synthetic image.
fn entity_image(id: &str, seed: u64) -> Result<RasterImage, SynthError> {
    let mut rng = rng_for(seed, &["synth", "image", id]);
    let w = rng.gen_range(4..=12);
    let h = rng.gen_range(4..=12);
    Ok(RasterImage::solid(w, h, [rng.gen(), rng.gen(), rng.gen()])?)
}

/// Writes the graph files and one PNG per entity under `dir`.
pub fn write_synthetic(dir: &Path, spec: SynthSpec, seed: u64) -> Result<KnowledgeGraph, SynthError> {
    let kg = synth_kg(spec, seed)?;
    kg.write_to_dir(dir)?;
    for e in kg.entities() {
        entity_image(&e.id, seed)?.save_png(&dir.join(&e.image_refs[0]))?;
    }
    Ok(kg.with_base_dir(dir))
}

/// `n` answerable questions cycling through the four subtasks. Each pairs two
/// distinct triplets of one relation whose four entities are distinct.
pub fn synth_questions(kg: &KnowledgeGraph, n: usize, seed: u64) -> Result<Vec<AnalogyQuestion>, SynthError> {
    let mut by_relation: std::collections::BTreeMap<&str, Vec<&Triplet>> = Default::default();
    for t in kg.triplets() {
        by_relation.entry(t.relation.as_str()).or_default().push(t);
    }
    let mut pairs: Vec<(&Triplet, &Triplet)> = Vec::new();
    for ts in by_relation.values() {
        for a in ts {
            for b in ts {
                let ids: BTreeSet<&str> = [&a.head, &a.tail, &b.head, &b.tail].into_iter().map(String::as_str).collect();
                if ids.len() == 4 {
                    pairs.push((a, b));
                }
            }
        }
    }
    if pairs.is_empty() {
        return if n == 0 { Ok(Vec::new()) } else { Err(SynthError::NoQuestionMaterial) };
    }
    let mut rng = rng_for(seed, &["synth", "questions"]);
    pairs.shuffle(&mut rng);
    Ok((0..n)
        .map(|i| {
            let (example, query) = pairs[if i < pairs.len() { i } else { rng.gen_range(0..pairs.len()) }];
            AnalogyQuestion {
                id: format!("syn-{i:04}"),
                example_head: example.head.clone(),
                example_tail: example.tail.clone(),
                query: query.head.clone(),
                gold_answer: query.tail.clone(),
                gold_relation: Some(example.relation.clone()),
                modality: ModalityConfig::NAMED[i % ModalityConfig::NAMED.len()],
                options: None,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shape() {
        let kg = synth_kg(SynthSpec::default(), 3).unwrap();
        assert_eq!((kg.entity_count(), kg.relation_count(), kg.triplet_count()), (50, 8, 120));
        assert!(kg.validate().is_empty());
        let labels: BTreeSet<&str> = kg.entities().map(|e| e.label.as_str()).collect();
        assert_eq!(labels.len(), 50);
    }

    #[test]
    fn questions_are_valid_and_answerable() {
        let kg = synth_kg(SynthSpec::default(), 3).unwrap();
        let qs = synth_questions(&kg, 200, 3).unwrap();
        assert_eq!(qs.len(), 200);
        for q in &qs {
            q.check(&kg).unwrap();
            let r = q.gold_relation.as_deref().unwrap();
            assert!(kg.contains(&q.example_head, r, &q.example_tail));
            assert!(kg.contains(&q.query, r, &q.gold_answer));
        }
        assert_eq!(qs, synth_questions(&kg, 200, 3).unwrap());
    }

    #[test]
    fn impossible_specs() {
        let spec = SynthSpec {
            entities: 2,
            relations: 1,
            triplets: 3,
        };
        assert!(matches!(synth_kg(spec, 0), Err(SynthError::TooManyTriplets { .. })));
    }
}
