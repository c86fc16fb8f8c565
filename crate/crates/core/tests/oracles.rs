//! Worked examples checked against independently computed references.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use mar_harness::client::{oracle_answer, ChatBackend, MockOracle, OracleConfig};
use mar_harness::eval::{compare_reports, hits_at_k, mrr, score_run, QuestionResult};
use mar_harness::image_ops::{combine, RasterImage};
use mar_harness::kg::{load_kg, AnalogyQuestion, Entity, KnowledgeGraph, ModalityConfig, Relation, Triplet};
use mar_harness::mapper::{cosine, ground, EmbeddingProvider, EmbeddingVector, TrigramEmbedder, VocabIndex, VocabItem};
use mar_harness::prompt::{build_step1, AnswerRequest, PromptMode, PromptTemplates};

const MINI: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/mini_kg");

/// Trigram counts straight from the string, no hashing.
fn trigram_counts(s: &str) -> HashMap<String, f64> {
    let chars: Vec<char> = s.chars().collect();
    let mut out = HashMap::new();
    if chars.len() < 3 {
        *out.entry(s.to_string()).or_default() += 1.0;
        return out;
    }
    for w in chars.windows(3) {
        *out.entry(w.iter().collect()).or_default() += 1.0;
    }
    out
}

fn count_cosine(a: &str, b: &str) -> f64 {
    let (ca, cb) = (trigram_counts(a), trigram_counts(b));
    let dot: f64 = ca.iter().map(|(g, x)| x * cb.get(g).copied().unwrap_or(0.0)).sum();
    let na = ca.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = cb.values().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn water_vs_water_bottle_matches_count_oracle() {
    let e = TrigramEmbedder::default();
    let got = cosine(&e.embed("water").unwrap(), &e.embed("water bottle").unwrap()).unwrap();
    let oracle = count_cosine("water", "water bottle");
    assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
    // 3 shared trigrams out of 3 and 10: sqrt(3 / 10).
    assert!((oracle - 0.3f64.sqrt()).abs() < 1e-12);
}

#[test]
fn single_trigram_has_one_bucket() {
    let v = TrigramEmbedder::default().embed("abc").unwrap();
    assert_eq!(v.0.iter().filter(|x| **x != 0.0).count(), 1);
}

#[test]
fn cosine_matches_hand_arithmetic() {
    let a = [0.5, -1.25, 2.0, 0.0, 3.5, -0.75, 1.0, 4.0];
    let b = [1.5, 0.25, -2.0, 1.0, 0.5, 2.25, -3.0, 0.5];
    // dot = 0.75 - 0.3125 - 4 + 0 + 1.75 - 1.6875 - 3 + 2 = -4.5
    // |a|^2 = 0.25 + 1.5625 + 4 + 0 + 12.25 + 0.5625 + 1 + 16 = 35.625
    // |b|^2 = 2.25 + 0.0625 + 4 + 1 + 0.25 + 5.0625 + 9 + 0.25 = 21.875
    let expected = -4.5 / (35.625f64 * 21.875).sqrt();
    let got = cosine(&EmbeddingVector(a.to_vec()), &EmbeddingVector(b.to_vec())).unwrap();
    assert!((got - expected).abs() < 1e-12);
    let e1 = EmbeddingVector(vec![1.0, 0.0]);
    let e2 = EmbeddingVector(vec![0.0, 1.0]);
    assert_eq!(cosine(&e1, &e2).unwrap(), 0.0);
}

const CASE_VOCAB: [&str; 14] = [
    "baked good",
    "bread",
    "goods train",
    "bakery",
    "beverage",
    "coffee",
    "plant",
    "snake",
    "cobra",
    "water",
    "ice",
    "steam",
    "solar system",
    "sun",
];

fn case_index(e: &TrigramEmbedder) -> VocabIndex {
    let items = CASE_VOCAB
        .iter()
        .map(|l| VocabItem {
            id: l.replace(' ', "_"),
            label: l.to_string(),
        })
        .collect();
    VocabIndex::build(items, e).unwrap()
}

#[test]
fn baked_goods_grounds_to_baked_good() {
    let e = TrigramEmbedder::default();
    let ranking = ground("baked goods", &case_index(&e), &e).unwrap();
    let best = CASE_VOCAB
        .iter()
        .max_by(|a, b| count_cosine("baked goods", a).partial_cmp(&count_cosine("baked goods", b)).unwrap())
        .unwrap();
    assert_eq!(*best, "baked good");
    assert_eq!(ranking.top(), Some("baked_good"));
    assert!((ranking.entries[0].1 - count_cosine("baked goods", "baked good")).abs() < 1e-9);
}

#[test]
fn beverage_and_lettered_answers() {
    let e = TrigramEmbedder::default();
    let r = ground("beverage", &case_index(&e), &e).unwrap();
    assert_eq!(r.entries[0], ("beverage".to_string(), 1.0));

    let options = ["ice", "water", "steam"]
        .iter()
        .map(|l| VocabItem {
            id: l.to_string(),
            label: l.to_string(),
        })
        .collect();
    let idx = VocabIndex::build_lettered(options, &e).unwrap();
    assert_eq!(ground("B) water", &idx, &e).unwrap().entries[0], ("water".to_string(), 1.0));
}

#[test]
fn hits_and_mrr_examples() {
    let ranks = [Some(1), Some(4), Some(11)];
    assert_eq!(hits_at_k(&[Some(1)], 1).unwrap(), 1.0);
    assert!((hits_at_k(&ranks, 3).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    assert!((hits_at_k(&ranks, 10).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert!((mrr(&ranks).unwrap() - (1.0 + 0.25 + 1.0 / 11.0) / 3.0).abs() < 1e-9);
    assert_eq!(mrr(&[None, None]).unwrap(), 0.0);
    assert!(hits_at_k(&[], 1).is_err());
    assert!(mrr(&[]).is_err());
}

fn result(id: &str, subtask: &str, rank: Option<usize>, relation_rank: Option<usize>) -> QuestionResult {
    QuestionResult {
        question_id: id.into(),
        subtask: subtask.into(),
        mode: PromptMode::Qa,
        gold: "g".into(),
        answer_text: Some("x".into()),
        ranking: vec![],
        gold_rank: rank,
        relation_gold: relation_rank.map(|_| "r".into()),
        relation_text: None,
        relation_ranking: None,
        relation_gold_rank: relation_rank,
        error: None,
    }
}

#[test]
fn mixed_results_match_spreadsheet() {
    let results = vec![
        result("a", "vvt", Some(1), Some(1)),
        result("b", "vvt", None, None),
        result("c", "ttv", Some(2), Some(2)),
        result("d", "ttv", Some(7), None),
        result("e", "vtv", Some(3), Some(6)),
        result("f", "tvt", Some(12), None),
    ];
    let r = score_run(&results).unwrap();
    // Spreadsheet: HITS@1 = 1/6, HITS@3 = 3/6, HITS@5 = 3/6, HITS@10 = 4/6,
    // MRR = (1 + 1/2 + 1/3 + 0 + 1/7 + 1/12) / 6 = 173/504.
    let o = r.overall;
    assert_eq!(o.n, 6);
    assert!((o.hits_at_1 - 1.0 / 6.0).abs() < 1e-12);
    assert!((o.hits_at_3 - 0.5).abs() < 1e-12);
    assert!((o.hits_at_5 - 0.5).abs() < 1e-12);
    assert!((o.hits_at_10 - 4.0 / 6.0).abs() < 1e-12);
    assert!((o.mrr - 173.0 / 504.0).abs() < 1e-12);
    assert_eq!(r.accuracy, o.hits_at_1);
    let ttv = r.by_subtask["ttv"];
    assert_eq!((ttv.hits_at_1, ttv.hits_at_3, ttv.hits_at_10), (0.0, 0.5, 1.0));
    assert!((ttv.mrr - 9.0 / 28.0).abs() < 1e-12);

    // Relation gold ranks [1, 2, 6].
    let rel = r.relation.unwrap();
    assert_eq!(rel.n, 3);
    assert!((rel.hits_at_1 - 1.0 / 3.0).abs() < 1e-12);
    assert!((rel.hits_at_3 - 2.0 / 3.0).abs() < 1e-12);
    assert!((rel.hits_at_5 - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn perturbed_metric_shows_in_points() {
    let results = vec![result("a", "vvt", Some(1), None), result("b", "vvt", Some(4), None)];
    let a = score_run(&results).unwrap();
    let mut b = a.clone();
    b.overall.mrr += 0.021;
    let d = compare_reports(&a, &b).unwrap();
    let row = d.rows.iter().find(|r| r.scope == "overall" && r.metric == "mrr").unwrap();
    assert!((row.delta_points - 2.1).abs() < 1e-9);
    assert!(d.rows.iter().filter(|r| r.delta_points != 0.0).count() == 1);
    assert!(compare_reports(&a, &a).unwrap().is_zero());

    let mut other = a.clone();
    other.by_subtask.insert("ttv".into(), other.overall);
    assert!(compare_reports(&a, &other).is_err());
}

#[test]
fn combine_four_by_two_and_two_by_four() {
    let red = RasterImage::solid(4, 2, [255, 0, 0]).unwrap();
    let blue = RasterImage::solid(2, 4, [0, 0, 255]).unwrap();
    let c = combine(&[red, blue]).unwrap();
    // 4x2 scales to 8x4, then 2x4 is appended: 10x4.
    assert_eq!((c.width(), c.height()), (10, 4));
    let mut expected = Vec::new();
    for _ in 0..4 {
        for x in 0..10 {
            expected.extend(if x < 8 { [255, 0, 0] } else { [0, 0, 255] });
        }
    }
    assert_eq!(c.pixels(), expected.as_slice());
}

#[test]
fn relation_prompt_on_fixture_answers_class_of() {
    let kg = Arc::new(load_kg(MINI).unwrap());
    let triplet = Triplet::new("ice", "class_of", "water");
    let [_, relation, _] = build_step1(&triplet, &kg, &PromptTemplates::default()).unwrap();
    let oracle = MockOracle::new(kg.clone(), OracleConfig::default()).unwrap();
    assert_eq!(oracle.complete("r", &relation).unwrap().response, "class of");
}

#[test]
fn always_wrong_oracle_is_deterministic() {
    let kg = Arc::new(load_kg(MINI).unwrap());
    let triplet = Triplet::new("ice", "class_of", "water");
    let [head, _, _] = build_step1(&triplet, &kg, &PromptTemplates::default()).unwrap();
    let cfg = OracleConfig { error_rate: 1.0, seed: 5 };
    let a = MockOracle::new(kg.clone(), cfg).unwrap().complete("h", &head).unwrap();
    let b = MockOracle::new(kg.clone(), cfg).unwrap().complete("h", &head).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.response, "ice");
    assert!(kg.entities().any(|e| e.label == a.response));
}

fn case_kg() -> KnowledgeGraph {
    let ent = |id: &str| Entity {
        id: id.into(),
        label: id.into(),
        description: String::new(),
        image_refs: vec![format!("{id}.png")],
    };
    KnowledgeGraph::from_parts(
        ["cobra", "snake", "coffee", "plant", "beverage", "bread", "baked good"].map(ent).to_vec(),
        vec![Relation {
            id: "subclass_of".into(),
            label: "subclass of".into(),
            description: String::new(),
        }],
        vec![
            Triplet::new("cobra", "subclass_of", "snake"),
            Triplet::new("coffee", "subclass_of", "plant"),
            Triplet::new("bread", "subclass_of", "baked good"),
        ],
    )
    .unwrap()
}

#[test]
fn cobra_snake_coffee_gives_plant() {
    let kg = case_kg();
    let q = AnalogyQuestion {
        id: "case".into(),
        example_head: "cobra".into(),
        example_tail: "snake".into(),
        query: "coffee".into(),
        gold_answer: "plant".into(),
        gold_relation: None,
        modality: ModalityConfig::VTV,
        options: None,
    };
    let reply = oracle_answer(&OracleConfig::default(), &kg, &q, &AnswerRequest::Qa).unwrap();
    assert_eq!(reply.answer, "plant");
    let mc = AnswerRequest::MultipleChoice {
        options: vec!["beverage".into(), "plant".into(), "bread".into()],
    };
    assert_eq!(oracle_answer(&OracleConfig::default(), &kg, &q, &mc).unwrap().answer, "B");
}

#[test]
fn fixture_counts() {
    let kg = load_kg(Path::new(MINI)).unwrap();
    assert_eq!((kg.entity_count(), kg.relation_count(), kg.triplet_count()), (5, 3, 5));
}
