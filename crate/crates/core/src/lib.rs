//! Neuron-level analysis of a toy decoder-only transformer: detect the
//! neurons a language consistently relies on, split them into shared and
//! exclusive groups, measure each group's worth by ablation perplexity, and
//! fine-tune exactly the parameters a chosen group owns.
//!
//! Everything is deterministic by construction: seeded initialization and
//! sampling, fixed reduction orders, and thread-schedule-independent
//! parallelism, so any published run replays bit for bit.

pub mod corpus;
pub mod detect;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod neuron;
pub mod sets;
#[cfg(any(test, feature = "testkit"))]
pub mod testkit;
pub mod train;

pub use corpus::{detokenize, load_corpus, synth_language, tokenize_line, LanguageCorpus, SynthSpec};
pub use detect::{
    attn_qk_impacts, attn_v_impacts, corpus_impact_tables, detect_from_tables,
    detect_language_neurons, ffn_impacts, sequential_oracle, trace_impacts, Criterion,
    DetectionConfig, ImpactTable, Scope,
};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use metrics::{
    agnostic_score, delta_ppl, importance, median, random_control, sample_random_neurons,
    ImportanceReport, LanguageImportance, RandomControl,
};
pub use model::{
    read_model, write_model, ForwardTrace, LayerWeights, ModelBundle, ModelConfig, TokenSequence,
    BOS, EOS, MIN_VOCAB, PAD,
};
pub use neuron::{AblationMask, NeuronId, NeuronSet, Site};
pub use sets::{classify, neuron_fraction, shared_ratio, ClassifyMode, LanguageNeuronProfile};
pub use train::{
    backward, loss_and_gradients, select_strategy, train_masked, GradientMask, Gradients,
    LossTrace, Strategy, StrategyThresholds, TrainConfig,
};
