// Build the triplet prompts and the two-turn analogy dialogue in each answer
// format, then play one dialogue against the mock oracle.

use std::path::Path;
use std::sync::Arc;

use mar_harness::client::{ChatBackend, MockOracle, OracleConfig};
use mar_harness::kg::{load_kg, load_questions, QUESTIONS_FILE};
use mar_harness::prompt::{answer_request_for, build_step1, build_step2, PromptMode, PromptTemplates};

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/mini_kg");

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let kg = Arc::new(load_kg(FIXTURE)?);
    let questions = load_questions(Path::new(FIXTURE).join(QUESTIONS_FILE), &kg)?;
    let templates = PromptTemplates::default();

    for p in build_step1(&kg.triplets()[0], &kg, &templates)? {
        println!("{}", p.render_text());
    }

    let q = &questions[0];
    for mode in [PromptMode::Qa, PromptMode::MultipleChoice, PromptMode::TrueFalse] {
        let (request, gold) = answer_request_for(q, &kg, mode, 3, 0, 0.5)?;
        let dialogue = build_step2(q, &kg, &templates, &request, None)?;
        println!("--- {mode} (scored against `{gold}`)\n{}", dialogue.render_text());
    }

    let oracle = MockOracle::new(kg.clone(), OracleConfig::default())?;
    let (request, _) = answer_request_for(q, &kg, PromptMode::MultipleChoice, 3, 0, 0.5)?;
    let transcript = oracle.complete(&q.id, &build_step2(q, &kg, &templates, &request, None)?)?;
    for turn in &transcript.turns {
        println!("[{}] {}", turn.role.name(), turn.text.lines().next().unwrap_or(""));
    }
    println!("final reply:\n{}", transcript.response);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
