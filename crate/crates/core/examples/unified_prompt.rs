// Render the unified mask-prediction template for every subtask of the mini
// fixture, with and without relation and entity text.

use std::path::Path;

use mar_harness::kg::{load_kg, load_questions, Slot, QUESTIONS_FILE};
use mar_harness::prompt::{build_unified, Ablation, Reconstruction};

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/mini_kg");

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let kg = load_kg(FIXTURE)?;
    let questions = load_questions(Path::new(FIXTURE).join(QUESTIONS_FILE), &kg)?;
    let variants = [
        ("full", Ablation::default()),
        ("w/o relation text", Ablation { include_relation_text: false, include_entity_text: true }),
        ("w/o entity text", Ablation { include_relation_text: true, include_entity_text: false }),
    ];
    // One question per subtask.
    for q in questions.iter().step_by(3) {
        println!("{} [{}]", q.id, q.modality);
        for (name, ablation) in variants {
            let p = build_unified(q, &kg, None, ablation)?;
            assert!(p.markers_valid());
            let images: Vec<&str> = p.image_slots.iter().map(|i| i.entity.as_str()).collect();
            println!("  {name}: {}  images={images:?}", p.token_text);
        }
    }

    // Explainer output replaces graph descriptions.
    let mut recon = Reconstruction::default();
    recon.entity_texts.insert(Slot::Head, "frozen water, hard and cold".into());
    recon.relation_text = Some("is a form of".into());
    let p = build_unified(&questions[0], &kg, Some(&recon), Ablation::default())?;
    println!("with reconstruction: {}", p.token_text);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
