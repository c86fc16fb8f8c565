// Emit both fine-tuning corpora for the mini fixture and show one record of
// each stage.

use std::path::Path;

use mar_harness::ft_dataset::{gen_step1, gen_step2, read_records, Step2Options, STEP1_FILE, STEP2_FILE};
use mar_harness::kg::{load_kg, load_questions, QUESTIONS_FILE};
use mar_harness::prompt::PromptTemplates;

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/mini_kg");

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let kg = load_kg(FIXTURE)?;
    let questions = load_questions(Path::new(FIXTURE).join(QUESTIONS_FILE), &kg)?;
    let templates = PromptTemplates::default();
    let out = tempfile::tempdir()?;

    let s1 = gen_step1(&kg, &templates, out.path(), false)?;
    let s2 = gen_step2(&questions, &kg, &templates, out.path(), &Step2Options::default(), false)?;
    for s in [&s1, &s2] {
        println!("{}: {} records, {} skipped, {} images", s.stage.name(), s.records, s.skipped, s.images_written);
    }

    let step1 = read_records(&out.path().join(STEP1_FILE))?;
    println!("{}", serde_json::to_string_pretty(&step1[1])?);
    let step2 = read_records(&out.path().join(STEP2_FILE))?;
    println!("{}", serde_json::to_string_pretty(&step2[0])?);
    for r in step1.iter().chain(&step2) {
        r.check(out.path())?;
    }

    // Flat prompt/response variant.
    let flat = tempfile::tempdir()?;
    gen_step1(&kg, &templates, flat.path(), true)?;
    let first = std::fs::read_to_string(flat.path().join(STEP1_FILE))?;
    println!("flat: {}", first.lines().next().unwrap_or(""));
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
