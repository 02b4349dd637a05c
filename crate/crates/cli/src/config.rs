//! Declarative run configuration: one TOML file describing the model source,
//! per-language corpora, and stage parameters, plus flag overrides. All
//! randomness is funneled through seeds resolved here and recorded into the
//! output artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;

use neuroscope_core::{
    load_corpus, synth_language, ClassifyMode, Criterion, DetectionConfig, LanguageCorpus,
    ModelBundle, ModelConfig, Scope, Strategy, StrategyThresholds, SynthSpec, TrainConfig,
};

use crate::commands::CliError;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    model: ModelSection,
    #[serde(default)]
    corpus: CorpusSection,
    #[serde(default)]
    languages: BTreeMap<String, PathBuf>,
    #[serde(default)]
    synthetic: Vec<SynthSection>,
    #[serde(default)]
    detection: DetectionSection,
    #[serde(default)]
    classify: ClassifySection,
    #[serde(default)]
    score: ScoreSection,
    #[serde(default)]
    train: TrainSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    path: Option<PathBuf>,
    init: Option<InitSpec>,
}

#[derive(Debug, Deserialize)]
struct InitSpec {
    #[serde(flatten)]
    config: ModelConfig,
    seed: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusSection {
    #[serde(default = "default_n_sentences")]
    n_sentences: usize,
    max_len: Option<usize>,
    #[serde(default = "default_holdout")]
    holdout_fraction: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            n_sentences: default_n_sentences(),
            max_len: None,
            holdout_fraction: default_holdout(),
        }
    }
}

fn default_n_sentences() -> usize {
    20
}

fn default_holdout() -> f64 {
    0.2
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthSection {
    language: String,
    alphabet: String,
    min_len: usize,
    max_len: usize,
    seed: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionSection {
    #[serde(default = "default_criterion")]
    criterion: String,
    #[serde(default = "default_tau")]
    tau: f64,
    #[serde(default = "default_scope")]
    scope: String,
}

impl Default for DetectionSection {
    fn default() -> Self {
        DetectionSection {
            criterion: default_criterion(),
            tau: default_tau(),
            scope: default_scope(),
        }
    }
}

fn default_criterion() -> String {
    "topq:0.01".to_string()
}

fn default_tau() -> f64 {
    0.9
}

fn default_scope() -> String {
    "layer".to_string()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassifySection {
    #[serde(default = "default_mode")]
    mode: String,
}

impl Default for ClassifySection {
    fn default() -> Self {
        ClassifySection {
            mode: default_mode(),
        }
    }
}

fn default_mode() -> String {
    "eq3".to_string()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreSection {
    #[serde(default = "default_control_seeds")]
    control_seeds: usize,
    #[serde(default)]
    holdout: bool,
}

impl Default for ScoreSection {
    fn default() -> Self {
        ScoreSection {
            control_seeds: default_control_seeds(),
            holdout: false,
        }
    }
}

fn default_control_seeds() -> usize {
    10
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    #[serde(default = "default_lr")]
    learning_rate: f64,
    #[serde(default = "default_steps")]
    steps: usize,
    #[serde(default = "default_batch")]
    batch_size: usize,
    seed: Option<u64>,
    #[serde(default = "default_strategy")]
    strategy: String,
    low_cut: Option<f64>,
    high_cut: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            learning_rate: default_lr(),
            steps: default_steps(),
            batch_size: default_batch(),
            seed: None,
            strategy: default_strategy(),
            low_cut: None,
            high_cut: None,
        }
    }
}

fn default_lr() -> f64 {
    0.05
}

fn default_steps() -> usize {
    200
}

fn default_batch() -> usize {
    8
}

fn default_strategy() -> String {
    "auto".to_string()
}

/// Strategy as configured: resolved from the score, or pinned explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyArg {
    Auto,
    Explicit(Strategy),
}

impl FromStr for StrategyArg {
    type Err = neuroscope_core::Error;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "auto" {
            Ok(StrategyArg::Auto)
        } else {
            Ok(StrategyArg::Explicit(Strategy::from_str(s)?))
        }
    }
}

/// Flag overrides applied on top of the config file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub scope: Option<String>,
    pub criterion: Option<String>,
    pub tau: Option<f64>,
    pub mode: Option<String>,
    pub strategy: Option<String>,
}

/// Fully resolved run: model loaded, corpora built, every knob validated.
pub struct Resolved {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelBundle,
    pub model_desc: String,
    /// Detection corpora keyed by language tag.
    pub languages: BTreeMap<String, LanguageCorpus>,
    pub corpus_seeds: BTreeMap<String, u64>,
    pub holdout_fraction: f64,
    pub detection: DetectionConfig,
    pub mode: ClassifyMode,
    pub control_seeds: usize,
    pub score_holdout: bool,
    pub train: TrainConfig,
    pub strategy: StrategyArg,
}

fn config_err<E: std::fmt::Display>(what: &str) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Config(format!("{what}: {e}"))
}

pub fn resolve(config_path: &Path, overrides: &Overrides) -> Result<Resolved, CliError> {
    let text = std::fs::read_to_string(config_path)
        .map_err(config_err(&format!("cannot read {}", config_path.display())))?;
    let file: FileConfig = toml::from_str(&text).map_err(config_err("config parse"))?;
    let base = config_path.parent().unwrap_or_else(|| Path::new("."));

    let seed = overrides.seed.or(file.seed).unwrap_or(0);
    let out_dir = overrides
        .out
        .clone()
        .or(file.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));

    // --- model -------------------------------------------------------------
    let (model, model_desc) = match (&file.model.path, &file.model.init) {
        (Some(path), None) => {
            let full = base.join(path);
            if !full.exists() {
                return Err(CliError::Config(format!(
                    "model path {} does not exist",
                    full.display()
                )));
            }
            let bundle = neuroscope_core::read_model(&full).map_err(config_err("model load"))?;
            (bundle, format!("file {}", path.display()))
        }
        (None, Some(init)) => {
            let bundle = ModelBundle::init_random(init.config, init.seed)
                .map_err(config_err("model init"))?;
            (bundle, format!("init seed {}", init.seed))
        }
        _ => {
            return Err(CliError::Config(
                "config must set exactly one of model.path or model.init".to_string(),
            ))
        }
    };

    // --- corpora -----------------------------------------------------------
    let max_seq = model.config.max_seq_len;
    let max_len = file.corpus.max_len.unwrap_or_else(|| max_seq.min(32));
    if max_len > max_seq {
        return Err(CliError::Config(format!(
            "corpus.max_len {max_len} exceeds model max_seq_len {max_seq}"
        )));
    }
    if !(0.0..=0.5).contains(&file.corpus.holdout_fraction) {
        return Err(CliError::Config(format!(
            "corpus.holdout_fraction must be in [0, 0.5], got {}",
            file.corpus.holdout_fraction
        )));
    }

    let mut languages = BTreeMap::new();
    let mut corpus_seeds = BTreeMap::new();
    for (idx, (lang, path)) in file.languages.iter().enumerate() {
        let full = base.join(path);
        if !full.exists() {
            return Err(CliError::Config(format!(
                "corpus file {} for language {lang} does not exist",
                full.display()
            )));
        }
        let sample_seed = seed.wrapping_add(idx as u64);
        let corpus = load_corpus(&full, lang, file.corpus.n_sentences, sample_seed, max_len)
            .map_err(CliError::Run)?;
        corpus_seeds.insert(lang.clone(), sample_seed);
        languages.insert(lang.clone(), corpus);
    }
    for synth in &file.synthetic {
        if languages.contains_key(&synth.language) {
            return Err(CliError::Config(format!(
                "language {} configured twice",
                synth.language
            )));
        }
        if synth.alphabet.is_empty() {
            return Err(CliError::Config(format!(
                "synthetic language {} has an empty alphabet",
                synth.language
            )));
        }
        if synth.min_len < 1 || synth.min_len > synth.max_len {
            return Err(CliError::Config(format!(
                "synthetic language {}: bad length range {}..{}",
                synth.language, synth.min_len, synth.max_len
            )));
        }
        let spec = SynthSpec {
            language: synth.language.clone(),
            alphabet: synth.alphabet.bytes().collect(),
            min_len: synth.min_len,
            max_len: synth.max_len,
            seed: synth.seed,
        };
        let corpus = synth_language(&spec, file.corpus.n_sentences, max_len);
        corpus_seeds.insert(synth.language.clone(), synth.seed);
        languages.insert(synth.language.clone(), corpus);
    }
    if languages.is_empty() {
        return Err(CliError::Config(
            "no languages configured (need [languages] entries or [[synthetic]] blocks)".into(),
        ));
    }

    // --- detection -----------------------------------------------------------
    let criterion_str = overrides
        .criterion
        .clone()
        .unwrap_or_else(|| file.detection.criterion.clone());
    let criterion = Criterion::from_str(&criterion_str)
        .map_err(|e| CliError::Config(format!("--criterion: {e}")))?;
    let scope_str = overrides
        .scope
        .clone()
        .unwrap_or_else(|| file.detection.scope.clone());
    let scope =
        Scope::from_str(&scope_str).map_err(|e| CliError::Config(format!("--scope: {e}")))?;
    let detection = DetectionConfig {
        criterion,
        tau: overrides.tau.unwrap_or(file.detection.tau),
        scope,
    };
    detection
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;

    let mode_str = overrides
        .mode
        .clone()
        .unwrap_or_else(|| file.classify.mode.clone());
    let mode =
        ClassifyMode::from_str(&mode_str).map_err(|e| CliError::Config(format!("--mode: {e}")))?;

    let strategy_str = overrides
        .strategy
        .clone()
        .unwrap_or_else(|| file.train.strategy.clone());
    let strategy = StrategyArg::from_str(&strategy_str)
        .map_err(|e| CliError::Config(format!("--strategy: {e}")))?;

    let mut thresholds = StrategyThresholds::default();
    if let Some(low) = file.train.low_cut {
        thresholds.low_cut = low;
    }
    if let Some(high) = file.train.high_cut {
        thresholds.high_cut = high;
    }
    let train = TrainConfig {
        learning_rate: file.train.learning_rate,
        steps: file.train.steps,
        batch_size: file.train.batch_size,
        seed: file.train.seed.unwrap_or(seed),
        // filled per run once the strategy resolves
        strategy: Strategy::Shared,
        thresholds,
    };
    train
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;

    Ok(Resolved {
        seed,
        out_dir,
        model,
        model_desc,
        languages,
        corpus_seeds,
        holdout_fraction: file.corpus.holdout_fraction,
        detection,
        mode,
        control_seeds: file.score.control_seeds,
        score_holdout: file.score.holdout,
        train,
        strategy,
    })
}
