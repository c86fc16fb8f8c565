//! Property tests over metrics, grounding, image geometry and prompts.

use proptest::prelude::*;

use mar_harness::eval::{hits_at_k, mrr, score_run, QuestionResult, HITS_KS};
use mar_harness::image_ops::{combine, scaled_width, RasterImage};
use mar_harness::kg::{load_kg, ModalityConfig};
use mar_harness::mapper::{ground, TrigramEmbedder, VocabIndex, VocabItem};
use mar_harness::prompt::{build_unified, Ablation, PromptMode, Reconstruction};
use mar_harness::synth::{synth_kg, synth_questions, SynthSpec};

fn rank_list() -> impl Strategy<Value = Vec<Option<usize>>> {
    prop::collection::vec(prop::option::weighted(0.8, 1usize..40), 1..60)
}

fn result(i: usize, rank: Option<usize>, subtask: ModalityConfig) -> QuestionResult {
    QuestionResult {
        question_id: format!("q{i:04}"),
        subtask: subtask.code(),
        mode: PromptMode::Qa,
        gold: "gold".into(),
        answer_text: None,
        ranking: Vec::new(),
        gold_rank: rank,
        relation_gold: None,
        relation_text: None,
        relation_ranking: None,
        relation_gold_rank: None,
        error: None,
    }
}

fn label() -> impl Strategy<Value = String> {
    "[a-z]{2,8}( [a-z]{2,8}){0,2}"
}

proptest! {
    #[test]
    fn hits_is_monotone_in_k(ranks in rank_list()) {
        let mut prev = 0.0;
        for k in 1..=45 {
            let h = hits_at_k(&ranks, k).unwrap();
            prop_assert!(h >= prev && h <= 1.0);
            prev = h;
        }
    }

    #[test]
    fn mrr_is_bracketed(ranks in rank_list()) {
        let m = mrr(&ranks).unwrap();
        prop_assert!(hits_at_k(&ranks, 1).unwrap() <= m + 1e-12);
        prop_assert!(m <= 1.0);
        for k in HITS_KS {
            prop_assert!(m + 1e-12 >= hits_at_k(&ranks, k).unwrap() / k as f64);
        }
    }

    #[test]
    fn score_run_ignores_order(ranks in rank_list(), shift in 0usize..60) {
        let results: Vec<_> = ranks
            .iter()
            .enumerate()
            .map(|(i, r)| result(i, *r, ModalityConfig::NAMED[i % 4]))
            .collect();
        let mut rotated = results.clone();
        let n = rotated.len();
        rotated.rotate_left(shift % n);
        rotated.reverse();
        prop_assert_eq!(score_run(&results).unwrap(), score_run(&rotated).unwrap());
    }

    #[test]
    fn grounding_scores_and_exact_dominance(
        labels in prop::collection::btree_set(label(), 2..25),
        pick in any::<prop::sample::Index>(),
        noise in label(),
    ) {
        let e = TrigramEmbedder::default();
        let items: Vec<VocabItem> = labels
            .iter()
            .enumerate()
            .map(|(i, l)| VocabItem { id: format!("e{i:03}"), label: l.clone() })
            .collect();
        let chosen = pick.get(&items).clone();
        let index = VocabIndex::build(items.clone(), &e).unwrap();

        let exact = ground(&chosen.label, &index, &e).unwrap();
        prop_assert_eq!(exact.top(), Some(chosen.id.as_str()));
        prop_assert!((exact.entries[0].1 - 1.0).abs() < 1e-9);

        let fuzzy = ground(&noise, &index, &e).unwrap();
        prop_assert_eq!(fuzzy.entries.len(), items.len());
        for w in fuzzy.entries.windows(2) {
            prop_assert!(w[0].1 >= w[1].1);
        }
        for (_, s) in &fuzzy.entries {
            prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(s));
        }

        let mut reversed = items;
        reversed.reverse();
        let rindex = VocabIndex::build(reversed, &e).unwrap();
        prop_assert_eq!(ground(&noise, &rindex, &e).unwrap(), fuzzy);
    }

    #[test]
    fn combine_geometry(sizes in prop::collection::vec((1u32..24, 1u32..24), 1..5)) {
        let images: Vec<_> = sizes
            .iter()
            .enumerate()
            .map(|(i, (w, h))| RasterImage::solid(*w, *h, [i as u8 * 40, 0, 255 - i as u8 * 40]).unwrap())
            .collect();
        let c = combine(&images).unwrap();
        let height = sizes.iter().map(|s| s.1).max().unwrap();
        prop_assert_eq!(c.height(), height);
        let width: u32 = if sizes.len() == 1 {
            sizes[0].0
        } else {
            sizes.iter().map(|(w, h)| scaled_width(*w, *h, height)).sum()
        };
        prop_assert_eq!(c.width(), width);
        // Each source occupies a contiguous band of its own colour.
        let mut x = 0;
        for (i, (w, h)) in sizes.iter().enumerate() {
            let band = if sizes.len() == 1 { *w } else { scaled_width(*w, *h, height) };
            prop_assert_eq!(c.pixel(x, height - 1), images[i].pixel(0, 0));
            prop_assert_eq!(c.pixel(x + band - 1, 0), images[i].pixel(0, 0));
            x += band;
        }
    }

    #[test]
    fn png_round_trip(w in 1u32..16, h in 1u32..16, bytes in prop::collection::vec(any::<u8>(), 768)) {
        let n = (w * h * 3) as usize;
        let img = RasterImage::new(w, h, bytes[..n].to_vec()).unwrap();
        let back = RasterImage::decode_png(&img.encode_png().unwrap()).unwrap();
        prop_assert_eq!(back, img);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn unified_markers_and_ablation(seed in any::<u64>(), head in label(), rel in label()) {
        let kg = synth_kg(SynthSpec { entities: 20, relations: 4, triplets: 40 }, seed).unwrap();
        let questions = synth_questions(&kg, 8, seed).unwrap();
        let mut recon = Reconstruction::default();
        recon.entity_texts.insert(mar_harness::kg::Slot::Head, head);
        recon.relation_text = Some(rel);
        let none = Ablation { include_relation_text: false, include_entity_text: false };
        for q in &questions {
            for ablation in [Ablation::default(), none] {
                let p = build_unified(q, &kg, Some(&recon), ablation).unwrap();
                prop_assert!(p.markers_valid(), "{}", p.token_text);
            }
            let full = build_unified(q, &kg, Some(&recon), Ablation::default()).unwrap();
            let no_te = build_unified(q, &kg, Some(&recon), Ablation { include_entity_text: false, ..Ablation::default() }).unwrap();
            let mut rest = full.token_text.split(' ');
            for tok in no_te.token_text.split(' ') {
                prop_assert!(rest.any(|t| t == tok), "{} not a subsequence of {}", no_te.token_text, full.token_text);
            }
        }
    }

    #[test]
    fn kg_round_trips_through_disk(seed in any::<u64>()) {
        let kg = synth_kg(SynthSpec { entities: 15, relations: 3, triplets: 25 }, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        kg.write_to_dir(dir.path()).unwrap();
        let back = load_kg(dir.path()).unwrap();
        prop_assert!(back.same_content(&kg));
        prop_assert!(back.indexes_consistent());
    }

    #[test]
    fn truncated_rankings_stay_consistent(labels in prop::collection::btree_set(label(), 3..30), out in label(), depth in 1usize..5) {
        let e = TrigramEmbedder::default();
        let items: Vec<VocabItem> = labels.iter().map(|l| VocabItem { id: l.clone(), label: l.clone() }).collect();
        let gold = items[items.len() / 2].id.clone();
        let index = VocabIndex::build(items, &e).unwrap();
        let full = ground(&out, &index, &e).unwrap();
        let mut r = result(0, full.rank_of(&gold), ModalityConfig::VVT);
        r.gold = gold;
        r.ranking = full.truncated(depth).entries;
        prop_assert!(r.rank_consistent());
    }
}
