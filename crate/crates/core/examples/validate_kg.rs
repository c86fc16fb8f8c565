// Load the bundled mini graph, print its counts and run the invariant checks.
// A second graph with a triplet pointing at an unknown entity shows the error.

use std::path::Path;

use mar_harness::kg::{load_kg, load_questions, QUESTIONS_FILE};

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures");

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let dir = Path::new(FIXTURES).join("mini_kg");
    let kg = load_kg(&dir)?;
    println!(
        "{} entities, {} relations, {} triplets",
        kg.entity_count(),
        kg.relation_count(),
        kg.triplet_count()
    );
    let problems: Vec<String> = kg.validate().into_iter().chain(kg.check_images()).collect();
    println!("invariant problems: {}", problems.len());

    println!("relations between ice and water: {:?}", kg.relations_between("ice", "water")?);
    println!("tails of (steam, class_of): {:?}", kg.tails_for("steam", "class_of")?);

    let questions = load_questions(dir.join(QUESTIONS_FILE), &kg)?;
    for q in questions.iter().take(4) {
        println!("{} [{}] ({}, {}) : ({}, ?) -> {}", q.id, q.modality, q.example_head, q.example_tail, q.query, q.gold_answer);
    }

    match load_kg(Path::new(FIXTURES).join("mini_kg_dangling")) {
        Ok(_) => println!("dangling fixture unexpectedly loaded"),
        Err(e) => println!("dangling fixture rejected: {e}"),
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
