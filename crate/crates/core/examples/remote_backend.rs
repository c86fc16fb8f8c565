// Send one analogy dialogue to a chat-completions endpoint.
//
// Set `MARH_ENDPOINT` (full URL) and `MARH_MODEL`, and optionally
// `MARH_TOKEN_ENV` naming the variable that holds the bearer token. Without
// an endpoint the request body is printed instead.

use std::path::Path;
use std::sync::Arc;

use mar_harness::client::{BackendConfig, BackendKind, ChatBackend, RemoteBackend};
use mar_harness::kg::{load_kg, load_questions, QUESTIONS_FILE};
use mar_harness::mapper::split_reply;
use mar_harness::prompt::{answer_request_for, build_step2, PromptMode, PromptTemplates};

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/mini_kg");

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let kg = Arc::new(load_kg(FIXTURE)?);
    let questions = load_questions(Path::new(FIXTURE).join(QUESTIONS_FILE), &kg)?;
    let q = &questions[0];
    let (request, gold) = answer_request_for(q, &kg, PromptMode::MultipleChoice, 3, 0, 0.5)?;
    let dialogue = build_step2(q, &kg, &PromptTemplates::default(), &request, None)?;

    let endpoint = std::env::var("MARH_ENDPOINT").ok();
    let config = BackendConfig {
        kind: BackendKind::Remote,
        endpoint: Some(endpoint.clone().unwrap_or_else(|| "http://127.0.0.1:9/v1/chat/completions".into())),
        model: Some(std::env::var("MARH_MODEL").unwrap_or_else(|_| "llava".into())),
        token_env: std::env::var("MARH_TOKEN_ENV").ok(),
        max_retries: 2,
        ..Default::default()
    };
    let backend = RemoteBackend::new(config, kg.clone())?;

    if endpoint.is_none() {
        let mut body = backend.request_body(&dialogue.turns[..1])?;
        // Shorten the inline image for display.
        if let Some(url) = body.pointer_mut("/messages/0/content/1/image_url/url") {
            let s = url.as_str().unwrap_or_default();
            *url = format!("{}...", &s[..s.len().min(48)]).into();
        }
        println!("{}", serde_json::to_string_pretty(&body)?);
        return Ok(());
    }

    let t = backend.complete(&q.id, &dialogue)?;
    let (relation, answer) = split_reply(&t.response);
    println!("{} attempt(s), {} ms", t.attempts, t.latency_ms);
    println!("relation: {relation:?}\nanswer: {answer} (gold {gold})");
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
