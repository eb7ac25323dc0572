use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attribution::{AttributionOptions, MatchThresholds};
use crate::corpus::{Budgets, FieldSchema, YearRange};
use crate::discovery::DiscoveryOptions;
use crate::error::{Error, Result};
use crate::evaluation::ClozeConfig;
use crate::model::ModelConfig;
use crate::scalar::DType;
use crate::tokenizer::BASE_SIZE;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub paths: Vec<PathBuf>,
    #[serde(default)]
    pub schema: FieldSchema,
    pub range: YearRange,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlicingSection {
    pub n_slices: usize,
    pub budgets: Budgets,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSection {
    pub vocab_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillationSection {
    pub teachers: usize,
    /// Student architecture; the teacher architecture when absent.
    pub student: Option<ModelConfig>,
    /// Student training recipe; the teacher recipe when absent.
    pub training: Option<TrainConfig>,
}

impl Default for DistillationSection {
    fn default() -> Self {
        DistillationSection {
            teachers: 2,
            student: None,
            training: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub cloze_inventory: Option<PathBuf>,
    pub minimal_pairs: Option<PathBuf>,
    pub k: usize,
    pub beam_width: usize,
    pub max_word_tokens: usize,
    pub allow_punctuation: bool,
    /// Sliding-window stride for perplexity; half the context when absent.
    pub stride: Option<usize>,
    pub cloze: ClozeConfig,
    pub filter_cloze: bool,
    pub filter_pairs: bool,
    pub per_token: bool,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            cloze_inventory: None,
            minimal_pairs: None,
            k: 100,
            beam_width: 400,
            max_word_tokens: 8,
            allow_punctuation: false,
            stride: None,
            cloze: ClozeConfig::default(),
            filter_cloze: true,
            filter_pairs: true,
            per_token: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscoverySection {
    /// Baseline slice label; the first slice when absent.
    pub baseline: Option<String>,
    pub max_sentences: usize,
    /// Words that get a per-occurrence table.
    pub words: Vec<String>,
    pub options: DiscoveryOptions,
}

impl Default for DiscoverySection {
    fn default() -> Self {
        DiscoverySection {
            baseline: None,
            max_sentences: 2000,
            words: Vec::new(),
            options: DiscoveryOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    /// Base URL of an OpenAI-compatible API, e.g. `http://localhost:8000/v1`.
    pub url: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    pub temperature: f64,
    pub timeout_secs: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            url: String::new(),
            model: String::new(),
            api_key_env: None,
            temperature: 0.0,
            timeout_secs: 60,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributionSection {
    /// Works to date, one JSON object per line.
    pub works: PathBuf,
    #[serde(default)]
    pub authority: Option<PathBuf>,
    #[serde(default)]
    pub catalog: Option<PathBuf>,
    #[serde(default)]
    pub thresholds: MatchThresholds,
    #[serde(default)]
    pub endpoint: EndpointConfig,
    #[serde(default)]
    pub options: AttributionOptions,
    #[serde(default = "default_tolerance")]
    pub tolerance: i32,
    #[serde(default)]
    pub dq_delta: Option<i32>,
}

fn default_tolerance() -> i32 {
    5
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub split: u64,
    pub init: u64,
    pub data: u64,
}

fn default_dtype() -> DType {
    DType::F32
}

/// Everything a pipeline run needs. Relative paths are resolved against
/// the directory of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    #[serde(default = "default_dtype")]
    pub dtype: DType,
    #[serde(default)]
    pub seeds: Seeds,
    pub corpus: CorpusSection,
    pub slicing: SlicingSection,
    pub tokenizer: TokenizerSection,
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub distillation: DistillationSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub discovery: DiscoverySection,
    #[serde(default)]
    pub attribution: Option<AttributionSection>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// One field-level problem found by [`PipelineConfig::diagnostics`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, base)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn output_root(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn student_model(&self) -> &ModelConfig {
        self.distillation.student.as_ref().unwrap_or(&self.model)
    }

    pub fn student_training(&self) -> &TrainConfig {
        self.distillation.training.as_ref().unwrap_or(&self.training)
    }

    /// Every problem with the configuration, not just the first.
    pub fn diagnostics(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let mut push = |field: &str, message: String| {
            out.push(Diagnostic {
                field: field.to_string(),
                message,
            })
        };
        let check_path = |field: &str, p: &Path, push: &mut dyn FnMut(&str, String)| {
            let full = self.resolve(p);
            if !full.exists() {
                push(field, format!("{} does not exist", full.display()));
            }
        };

        if self.corpus.paths.is_empty() {
            push("corpus.paths", "at least one corpus file is required".into());
        }
        for p in &self.corpus.paths {
            check_path("corpus.paths", p, &mut push);
        }
        let r = self.corpus.range;
        if r.start > r.end {
            push("corpus.range", format!("start {} is after end {}", r.start, r.end));
        }
        if self.slicing.n_slices == 0 {
            push("slicing.n_slices", "must be at least 1".into());
        }
        let b = self.slicing.budgets;
        if b.train == 0 || b.val == 0 || b.test == 0 {
            push(
                "slicing.budgets",
                "train, val and test budgets must all be positive".into(),
            );
        }
        if self.tokenizer.vocab_size < BASE_SIZE {
            push(
                "tokenizer.vocab_size",
                format!(
                    "must be at least {BASE_SIZE} (specials plus bytes), got {}",
                    self.tokenizer.vocab_size
                ),
            );
        }
        for m in self.model.problems() {
            push("model", m);
        }
        if self.model.vocab_size != self.tokenizer.vocab_size {
            push(
                "model.vocab_size",
                format!(
                    "{} differs from tokenizer.vocab_size {}",
                    self.model.vocab_size, self.tokenizer.vocab_size
                ),
            );
        }
        for m in self.training.problems() {
            push("training", m);
        }
        if self.training.epochs == 0 {
            push("training.epochs", "must be at least 1".into());
        }
        if self.distillation.teachers == 0 && self.student_training().distillation_alpha < 1.0 {
            push(
                "distillation.teachers",
                "distillation with alpha < 1 needs at least one teacher".into(),
            );
        }
        if let Some(s) = &self.distillation.student {
            for m in s.problems() {
                push("distillation.student", m);
            }
            if s.vocab_size != self.model.vocab_size {
                push("distillation.student.vocab_size", "must equal model.vocab_size".into());
            }
            if s.context_length > self.model.context_length {
                push(
                    "distillation.student.context_length",
                    "must not exceed the teachers' context length".into(),
                );
            }
        }
        if let Some(t) = &self.distillation.training {
            for m in t.problems() {
                push("distillation.training", m);
            }
        }

        let e = &self.evaluation;
        if e.k == 0 {
            push("evaluation.k", "must be at least 1".into());
        }
        if e.beam_width < e.k {
            push(
                "evaluation.beam_width",
                format!("{} is below k = {}", e.beam_width, e.k),
            );
        }
        if e.max_word_tokens == 0 {
            push("evaluation.max_word_tokens", "must be at least 1".into());
        } else if e.max_word_tokens + 2 > self.student_model().context_length {
            push(
                "evaluation.max_word_tokens",
                "leaves no room for a prefix in the context".into(),
            );
        }
        if e.stride == Some(0) {
            push("evaluation.stride", "must be positive".into());
        }
        if !(0.0..=1.0).contains(&e.cloze.tail_fraction) {
            push("evaluation.cloze.tail_fraction", "must lie in [0, 1]".into());
        }
        if e.cloze.min_frequency > e.cloze.max_frequency {
            push("evaluation.cloze", "min_frequency exceeds max_frequency".into());
        }
        if let Some(p) = &e.cloze_inventory {
            check_path("evaluation.cloze_inventory", p, &mut push);
        }
        if let Some(p) = &e.minimal_pairs {
            check_path("evaluation.minimal_pairs", p, &mut push);
        }
        if self.discovery.options.min_occurrences == 0 {
            push("discovery.options.min_occurrences", "must be at least 1".into());
        }
        if self.discovery.max_sentences == 0 {
            push("discovery.max_sentences", "must be at least 1".into());
        }

        if let Some(a) = &self.attribution {
            check_path("attribution.works", &a.works, &mut push);
            if let Some(p) = &a.authority {
                check_path("attribution.authority", p, &mut push);
            }
            if let Some(p) = &a.catalog {
                check_path("attribution.catalog", p, &mut push);
            }
            if a.authority.is_some() != a.catalog.is_some() {
                push("attribution", "authority and catalog must be given together".into());
            }
            if !(a.thresholds.pass2 <= a.thresholds.pass1) {
                push("attribution.thresholds", "pass2 must not exceed pass1".into());
            }
            if a.tolerance < 0 {
                push("attribution.tolerance", "must be non-negative".into());
            }
            if a.dq_delta.is_some_and(|d| d < a.tolerance) {
                push("attribution.dq_delta", "must not be below the tolerance".into());
            }
            if a.options.max_in_flight == 0 {
                push("attribution.options.max_in_flight", "must be at least 1".into());
            }
            let (lo, hi) = a.options.plausible_range;
            if lo > hi {
                push(
                    "attribution.options.plausible_range",
                    "lower bound exceeds upper bound".into(),
                );
            }
        }
        out
    }
}
