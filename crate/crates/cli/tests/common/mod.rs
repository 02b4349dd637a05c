//! Shared fixtures for the integration and acceptance suites: the toy
//! bilingual setup (two disjoint-alphabet synthetic languages with different
//! structure) and the pretrained checkpoint every experiment starts from.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::OnceLock;

use neuroscope_core::*;

pub const ALPHA_ALPHABET: &[u8] = b"abcdefghijkl";
pub const BETA_ALPHABET: &[u8] = b"nopq";
pub const TOKEN_MAX_LEN: usize = 32;

/// Architecture used everywhere in the suites.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_head: 8,
        d_inter: 32,
        vocab_size: 259,
        max_seq_len: 32,
        rms_eps: 1e-5,
    }
}

pub fn synth(lang: &str, alphabet: &[u8], seed: u64, n: usize) -> LanguageCorpus {
    synth_language(
        &SynthSpec {
            language: lang.to_string(),
            alphabet: alphabet.to_vec(),
            min_len: 10,
            max_len: 28,
            seed,
        },
        n,
        TOKEN_MAX_LEN,
    )
}

pub fn combine(parts: &[&LanguageCorpus]) -> LanguageCorpus {
    LanguageCorpus {
        language: "combined".to_string(),
        sentences: parts
            .iter()
            .flat_map(|c| c.sentences.iter().cloned())
            .collect(),
        source: "synthetic".to_string(),
        sample_seed: 0,
        shortfall: false,
    }
}

/// The bilingual checkpoint: init seed 7, trained to a plateau on fresh
/// samples of both languages. Identical to `tests/fixtures/model.nscp`.
pub fn build_checkpoint() -> ModelBundle {
    let config = toy_config();
    let pre_alpha = synth("alpha", ALPHA_ALPHABET, 1011, 40);
    let pre_beta = synth("beta", BETA_ALPHABET, 1012, 40);
    let cfg = TrainConfig {
        learning_rate: 0.05,
        steps: 800,
        batch_size: 8,
        seed: 1001,
        ..TrainConfig::default()
    };
    train_masked(
        &ModelBundle::init_random(config, 7).expect("valid config"),
        &combine(&[&pre_alpha, &pre_beta]),
        &GradientMask::full(&config),
        &cfg,
    )
    .expect("pretraining converges")
    .0
}

/// Detection settings of the bundled run.
pub fn bundled_detection() -> DetectionConfig {
    DetectionConfig {
        criterion: Criterion::RankTopQ(0.15),
        tau: 0.5,
        scope: Scope::LayerLocal,
    }
}

/// Everything the experiment criteria share: the checkpoint, the run
/// corpora, the detected sets, and the classified profile.
pub struct Setup {
    pub model: ModelBundle,
    pub alpha: LanguageCorpus,
    pub beta: LanguageCorpus,
    pub sets: BTreeMap<String, NeuronSet>,
    pub profile: LanguageNeuronProfile,
    pub score: f64,
}

static SETUP: OnceLock<Setup> = OnceLock::new();

pub fn setup() -> &'static Setup {
    SETUP.get_or_init(|| {
        let model = build_checkpoint();
        let alpha = synth("alpha", ALPHA_ALPHABET, 11, 20);
        let beta = synth("beta", BETA_ALPHABET, 12, 20);
        let dc = bundled_detection();
        let sets: BTreeMap<String, NeuronSet> = [
            (
                "alpha".to_string(),
                detect_language_neurons(&model, &alpha, &dc).expect("detect alpha"),
            ),
            (
                "beta".to_string(),
                detect_language_neurons(&model, &beta, &dc).expect("detect beta"),
            ),
        ]
        .into_iter()
        .collect();
        let profile = classify(&sets, ClassifyMode::SetDifference).expect("two languages");
        let mut imps = BTreeMap::new();
        for (lang, corpus) in [("alpha", &alpha), ("beta", &beta)] {
            let ds = delta_ppl(&model, corpus, &profile.shared).expect("shared delta");
            let de = delta_ppl(&model, corpus, &profile.exclusive[lang]).expect("excl delta");
            let imp = importance(ds, profile.shared.len(), de, profile.exclusive[lang].len())
                .expect("non-empty groups");
            imps.insert(lang.to_string(), imp);
        }
        let score = agnostic_score(&imps).expect("defined score");
        Setup {
            model,
            alpha,
            beta,
            sets,
            profile,
            score,
        }
    })
}

/// Path of a file inside `tests/fixtures`.
pub fn fixture_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

/// Path of a file inside `tests/golden`.
pub fn golden_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

/// Invoke the CLI binary with the given arguments; returns (exit code,
/// stdout, stderr).
pub fn run_cli(args: &[&str]) -> (i32, String, String) {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_neuroscope"))
        .args(args)
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}
