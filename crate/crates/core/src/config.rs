//! Run configuration: a TOML file plus command-line overrides.
//!
//! Relative paths in the file are resolved against the file's directory.
//! Tokens never live here; backends name the environment variable to read.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::client::{BackendConfig, BackendKind, OracleConfig};
use crate::kg::ModalityConfig;
use crate::prompt::{Ablation, PromptMode, DEFAULT_OPTION_COUNT};
use crate::seed::sha256_hex;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Where the qa grounding vocabulary comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VocabSource {
    /// Every graph entity.
    #[default]
    Kg,
    /// The union of the questions' option lists (zero-shot sets).
    QuestionOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub use_tr: bool,
    pub use_te: bool,
    pub use_mapper: bool,
    pub use_recon: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_tr: true,
            use_te: true,
            use_mapper: true,
            use_recon: true,
        }
    }
}

impl AblationFlags {
    pub fn prompt_ablation(&self) -> Ablation {
        Ablation {
            include_relation_text: self.use_tr,
            include_entity_text: self.use_te,
        }
    }
}

/// Remote sentence-embedding service used by the mapper instead of the
/// local trigram embedder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub token_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
}

fn default_timeout() -> f64 {
    60.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory holding `entities.jsonl`, `relations.jsonl`, `triplets.jsonl`.
    pub kg: PathBuf,
    pub questions: Option<PathBuf>,
    pub out: PathBuf,
    pub templates: Option<PathBuf>,
    pub mode: PromptMode,
    /// Empty means every subtask.
    pub subtasks: Vec<String>,
    pub seed: u64,
    pub option_count: usize,
    pub tf_corruption_rate: f64,
    /// How many entries of each grounded ranking `results.jsonl` keeps.
    pub ranking_depth: usize,
    pub vocab: VocabSource,
    pub ablation: AblationFlags,
    pub backend: BackendConfig,
    pub oracle: OracleConfig,
    pub embedding: Option<EmbeddingConfig>,
    /// Reconstruction cache file; defaults to `recon_cache.jsonl` in `out`.
    pub recon_cache: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            kg: PathBuf::from("."),
            questions: None,
            out: PathBuf::from("run"),
            templates: None,
            mode: PromptMode::MultipleChoice,
            subtasks: Vec::new(),
            seed: 0,
            option_count: DEFAULT_OPTION_COUNT,
            tf_corruption_rate: 0.5,
            ranking_depth: 10,
            vocab: VocabSource::Kg,
            ablation: AblationFlags::default(),
            backend: BackendConfig::default(),
            oracle: OracleConfig::default(),
            embedding: None,
            recon_cache: None,
        }
    }
}

/// Command-line overrides; `None` keeps the file value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub backend: Option<BackendKind>,
    pub mode: Option<PromptMode>,
    pub subtasks: Vec<String>,
    pub seed: Option<u64>,
    pub parallel: Option<usize>,
    pub out: Option<PathBuf>,
    pub no_mapper: bool,
    pub no_tr: bool,
    pub no_te: bool,
    pub no_recon: bool,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = origin.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        if path.as_os_str().is_empty() {
            return Err(ConfigError::Invalid("config path is empty".into()));
        }
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.kg);
        fix(&mut self.out);
        for p in [&mut self.questions, &mut self.templates, &mut self.recon_cache].into_iter().flatten() {
            fix(p);
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(kind) = o.backend {
            self.backend.kind = kind;
        }
        if let Some(mode) = o.mode {
            self.mode = mode;
        }
        if !o.subtasks.is_empty() {
            self.subtasks = o.subtasks.clone();
        }
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(p) = o.parallel {
            self.backend.parallelism = p;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        self.ablation.use_mapper &= !o.no_mapper;
        self.ablation.use_tr &= !o.no_tr;
        self.ablation.use_te &= !o.no_te;
        self.ablation.use_recon &= !o.no_recon;
    }

    /// Parsed subtask filter; empty means all.
    pub fn subtask_filter(&self) -> Result<BTreeSet<ModalityConfig>, ConfigError> {
        self.subtasks
            .iter()
            .map(|s| s.parse().map_err(|e| ConfigError::Invalid(format!("subtask `{s}`: {e}"))))
            .collect()
    }

    /// Consistency checks that do not touch the filesystem.
    pub fn check(&self) -> Result<(), ConfigError> {
        self.backend.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.oracle.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.mode == PromptMode::MultipleChoice && self.option_count < 2 {
            return Err(ConfigError::Invalid("multiple choice needs option_count >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.tf_corruption_rate) {
            return Err(ConfigError::Invalid("tf_corruption_rate outside [0, 1]".into()));
        }
        if self.ranking_depth == 0 {
            return Err(ConfigError::Invalid("ranking_depth must be at least 1".into()));
        }
        self.subtask_filter()?;
        Ok(())
    }

    /// Checks that every input path exists.
    pub fn check_paths(&self) -> Result<(), ConfigError> {
        let mut missing = Vec::new();
        if !self.kg.is_dir() {
            missing.push(self.kg.display().to_string());
        }
        for p in [&self.questions, &self.templates].into_iter().flatten() {
            if !p.is_file() {
                missing.push(p.display().to_string());
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(format!("missing input: {}", missing.join(", "))))
        }
    }

    /// Hash over every setting that affects run results. Parallelism, output
    /// location and retry tuning are excluded so replays match.
    pub fn results_hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        c.recon_cache = None;
        c.backend.parallelism = 1;
        c.backend.max_retries = 0;
        c.backend.backoff_ms = 0;
        c.backend.timeout_secs = 1.0;
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }
}
