// Generate a synthetic graph and question set, then run the full pipeline
// against a mock oracle that answers wrongly 30% of the time.

use mar_harness::config::RunConfig;
use mar_harness::kg::write_questions;
use mar_harness::prompt::PromptMode;
use mar_harness::run::cmd_run;
use mar_harness::synth::{synth_questions, write_synthetic, SynthSpec};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let kg = write_synthetic(&dir.path().join("kg"), SynthSpec::default(), 7)?;
    let questions = synth_questions(&kg, 400, 7)?;
    write_questions(&dir.path().join("questions.jsonl"), &questions)?;

    let mut cfg = RunConfig {
        kg: dir.path().join("kg"),
        questions: Some(dir.path().join("questions.jsonl")),
        out: dir.path().join("run"),
        mode: PromptMode::Qa,
        seed: 7,
        ..Default::default()
    };
    cfg.oracle.error_rate = 0.3;
    cfg.oracle.seed = 7;
    cfg.backend.parallelism = 4;

    let summary = cmd_run(&cfg)?;
    print!("{}", summary.report.to_markdown("Mock oracle, p = 0.3"));
    println!("config hash {}", &summary.manifest.config_hash[..16]);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
