// Run the same question set with and without the similarity mapper and
// print the per-metric differences.
//
// Without the mapper only an exact label match is ranked at all, so every
// Hits@k collapses to Hits@1.

use mar_harness::config::RunConfig;
use mar_harness::kg::write_questions;
use mar_harness::prompt::PromptMode;
use mar_harness::run::{cmd_report_diff, cmd_run};
use mar_harness::synth::{synth_questions, write_synthetic, SynthSpec};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let kg = write_synthetic(&dir.path().join("kg"), SynthSpec::default(), 11)?;
    write_questions(&dir.path().join("q.jsonl"), &synth_questions(&kg, 200, 11)?)?;

    let mut full = RunConfig {
        kg: dir.path().join("kg"),
        questions: Some(dir.path().join("q.jsonl")),
        out: dir.path().join("full"),
        mode: PromptMode::Qa,
        ..Default::default()
    };
    full.oracle.error_rate = 0.2;
    full.oracle.seed = 11;
    let mut no_mapper = full.clone();
    no_mapper.out = dir.path().join("no_mapper");
    no_mapper.ablation.use_mapper = false;

    cmd_run(&full)?;
    cmd_run(&no_mapper)?;
    let delta = cmd_report_diff(&full.out, &no_mapper.out)?;
    print!("{}", delta.to_markdown("full", "w/o mapper"));
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()
}
