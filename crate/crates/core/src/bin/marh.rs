//! Command-line front end over the `mar_harness` library.
//!
//! Exit codes: 0 success, 1 validation failure, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mar_harness::client::BackendKind;
use mar_harness::config::{Overrides, RunConfig};
use mar_harness::prompt::PromptMode;
use mar_harness::run::{self, FtStages, RunError};

#[derive(Parser)]
#[command(name = "marh", version, about = "Multimodal analogical reasoning harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Mock,
    Remote,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    backend: Option<Backend>,
    /// qa, mc or tf.
    #[arg(long)]
    mode: Option<PromptMode>,
    /// Subtask filter (vvt, ttv, vtv, tvt); repeat or separate with commas.
    #[arg(long, value_delimiter = ',')]
    subtask: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    parallel: Option<usize>,
    /// Ground answers by exact normalized match only.
    #[arg(long)]
    no_mapper: bool,
    /// Drop relation text from prompts.
    #[arg(long)]
    no_tr: bool,
    /// Drop entity text from prompts.
    #[arg(long)]
    no_te: bool,
    /// Skip the reconstruction step.
    #[arg(long)]
    no_recon: bool,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, RunError> {
        let mut cfg = RunConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            backend: self.backend.map(|b| match b {
                Backend::Mock => BackendKind::MockOracle,
                Backend::Remote => BackendKind::Remote,
            }),
            mode: self.mode,
            subtasks: self.subtask.clone(),
            seed: self.seed,
            parallel: self.parallel,
            out: self.out.clone(),
            no_mapper: self.no_mapper,
            no_tr: self.no_tr,
            no_te: self.no_te,
            no_recon: self.no_recon,
        });
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Load the graph and questions and check every invariant.
    Validate(Common),
    /// Render unified, step-1 and step-2 prompts as text files.
    Prompts(Common),
    /// Emit fine-tuning corpora.
    Ftdata {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "both")]
        stage: Stage,
        /// Write flat prompt/response records instead of conversations.
        #[arg(long)]
        flat: bool,
    },
    /// Combine images left to right. With FILES, writes one PNG to --out;
    /// otherwise combines every triplet's head and tail images.
    Images {
        files: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Execute an evaluation run.
    Run(Common),
    /// Regenerate a run's report, or compare two runs.
    Report {
        run_dir: Option<PathBuf>,
        #[arg(long, num_args = 2, value_names = ["RUN_A", "RUN_B"])]
        diff: Option<Vec<PathBuf>>,
        /// Where to write delta.md and delta.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Failure::Runtime(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Validate(common) => {
            let cfg = common.load()?;
            let v = run::cmd_validate(&cfg);
            println!("{}", v.summary);
            if !v.is_clean() {
                for d in v.diagnostics.iter().take(20) {
                    eprintln!("  {d}");
                }
                if v.diagnostics.len() > 20 {
                    eprintln!("  ... {} more", v.diagnostics.len() - 20);
                }
                return Err(Failure::Validation(format!("{} problem(s) found", v.diagnostics.len())));
            }
        }
        Command::Prompts(common) => {
            let cfg = common.load()?;
            let inputs = run::load_inputs(&cfg)?;
            let c = run::cmd_prompts(&cfg, &inputs, &cfg.out)?;
            println!(
                "{} unified, {} step-1, {} step-2 prompts written to {} ({} skipped)",
                c.unified,
                c.step1,
                c.step2,
                cfg.out.display(),
                c.skipped
            );
        }
        Command::Ftdata { common, stage, flat } => {
            let cfg = common.load()?;
            let inputs = run::load_inputs(&cfg)?;
            let stages = match stage {
                Stage::One => FtStages::One,
                Stage::Two => FtStages::Two,
                Stage::Both => FtStages::Both,
            };
            for s in run::cmd_ftdata(&cfg, &inputs, &cfg.out, stages, flat)? {
                println!(
                    "{}: {} records, {} skipped, {} images",
                    s.stage.name(),
                    s.records,
                    s.skipped,
                    s.images_written
                );
            }
        }
        Command::Images { files, config, out } => {
            if !files.is_empty() {
                let out = out.ok_or_else(|| Failure::Validation("--out is required with input files".into()))?;
                let (w, h) = run::combine_files(&files, &out)?;
                println!("{} ({w}x{h})", out.display());
            } else {
                let config = config.ok_or_else(|| Failure::Validation("give input files or --config".into()))?;
                let mut cfg = RunConfig::load(&config).map_err(RunError::from)?;
                if let Some(out) = out {
                    cfg.out = out;
                }
                let kg = mar_harness::kg::load_kg(&cfg.kg).map_err(RunError::from)?;
                let (written, skipped) = run::cmd_images(&kg, &cfg.out)?;
                println!("{written} combined images written, {skipped} skipped");
            }
        }
        Command::Run(common) => {
            let cfg = common.load()?;
            let s = run::cmd_run(&cfg)?;
            print!("{}", s.report.to_markdown("Evaluation report"));
            println!("\n{} answered, {} failed; artifacts in {}", s.manifest.answered, s.manifest.failed, s.out_dir.display());
        }
        Command::Report { run_dir, diff, out } => match (run_dir, diff) {
            (_, Some(dirs)) => {
                let table = run::cmd_report_diff(&dirs[0], &dirs[1])?;
                let a = dirs[0].display().to_string();
                let b = dirs[1].display().to_string();
                let md = table.to_markdown(&a, &b);
                print!("{md}");
                if let Some(out) = out {
                    write_text(&out.join("delta.md"), &md)?;
                    write_text(&out.join("delta.csv"), &table.to_csv())?;
                }
            }
            (Some(dir), None) => {
                let report = run::cmd_report(&dir)?;
                print!("{}", report.to_markdown("Evaluation report"));
            }
            (None, None) => return Err(Failure::Validation("give a run directory or --diff RUN_A RUN_B".into())),
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
