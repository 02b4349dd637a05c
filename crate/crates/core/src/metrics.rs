//! Perplexity-delta ablation metrics: per-language importance of shared vs
//! exclusive neurons, the aggregate agnostic score, and seeded random
//! controls of matched size.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::LanguageCorpus;
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::neuron::{AblationMask, NeuronSet};

/// Signed perplexity change from ablating `set`: masked minus baseline.
/// May be negative.
pub fn delta_ppl(model: &ModelBundle, corpus: &LanguageCorpus, set: &NeuronSet) -> Result<f64> {
    let mask = AblationMask::from_set(set, &model.config)?;
    let base = model.perplexity(corpus, None)?;
    let masked = model.perplexity(corpus, Some(&mask))?;
    Ok(masked - base)
}

/// Per-neuron damage ratio of shared over exclusive ablation:
/// `(dppl_shared / n_shared) / (dppl_excl / n_excl)`.
///
/// `Ok(None)` marks the undefined case (zero exclusive delta); it is never
/// coerced to 0 or infinity. Zero set sizes are precondition violations.
pub fn importance(
    dppl_shared: f64,
    n_shared: usize,
    dppl_excl: f64,
    n_excl: usize,
) -> Result<Option<f64>> {
    if n_shared == 0 || n_excl == 0 {
        return Err(Error::InvalidArgument(format!(
            "importance needs non-empty groups, got |shared| = {n_shared}, |exclusive| = {n_excl}"
        )));
    }
    if dppl_excl == 0.0 {
        return Ok(None);
    }
    Ok(Some(
        (dppl_shared / n_shared as f64) / (dppl_excl / n_excl as f64),
    ))
}

/// `ln(1 + mean importance)` over languages. `None` when the map is empty or
/// any importance is undefined.
pub fn agnostic_score(imps: &BTreeMap<String, Option<f64>>) -> Option<f64> {
    if imps.is_empty() {
        return None;
    }
    let mut sum = 0.0f64;
    for imp in imps.values() {
        sum += (*imp)?;
    }
    Some((1.0 + sum / imps.len() as f64).ln())
}

/// Draw `n` neurons uniformly without replacement from the detectable
/// neurons outside `exclude`, deterministically by seed.
pub fn sample_random_neurons(
    model: &ModelBundle,
    n: usize,
    seed: u64,
    exclude: &NeuronSet,
) -> Result<NeuronSet> {
    let eligible: Vec<_> = NeuronSet::all_detectable(&model.config)
        .difference(exclude)
        .iter()
        .copied()
        .collect();
    if n > eligible.len() {
        return Err(Error::NotEnoughNeurons {
            requested: n,
            available: eligible.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, eligible.len(), n);
    Ok(picked.into_iter().map(|i| eligible[i]).collect())
}

/// Perplexity change from ablating `n` randomly chosen neurons outside
/// `exclude`. Deterministic given the seed; `n = 0` returns exactly 0.
pub fn random_control(
    model: &ModelBundle,
    corpus: &LanguageCorpus,
    n: usize,
    seed: u64,
    exclude: &NeuronSet,
) -> Result<f64> {
    let set = sample_random_neurons(model, n, seed, exclude)?;
    delta_ppl(model, corpus, &set)
}

/// Median of a slice; mean of the middle pair for even lengths.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    }
}

/// One language's ablation outcome: the raw operands and the importance
/// derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageImportance {
    pub language: String,
    pub dppl_shared: f64,
    pub dppl_exclusive: f64,
    pub n_shared: usize,
    pub n_exclusive: usize,
    pub imp: Option<f64>,
}

/// One random-control draw: `size` neurons matched to a named group,
/// evaluated on one language's corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomControl {
    pub language: String,
    /// Which group the size was matched to ("shared" or "exclusive").
    pub matched: String,
    pub size: usize,
    pub seed: u64,
    pub dppl: f64,
}

/// Full ablation report: per-language operands and importances, the
/// aggregate score, and every random-control draw.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImportanceReport {
    pub per_language: Vec<LanguageImportance>,
    pub agnostic_score: Option<f64>,
    pub random_controls: Vec<RandomControl>,
}

impl ImportanceReport {
    /// Recompute every derived value from its stored operands and compare
    /// within 1e-9. Guards against reports whose numbers drifted from the
    /// formulas that define them.
    pub fn verify_self_consistency(&self) -> Result<()> {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
        let mut imps = BTreeMap::new();
        for lang in &self.per_language {
            // empty groups make the ratio undefined rather than erroneous
            let recomputed = if lang.n_shared == 0 || lang.n_exclusive == 0 {
                None
            } else {
                importance(
                    lang.dppl_shared,
                    lang.n_shared,
                    lang.dppl_exclusive,
                    lang.n_exclusive,
                )?
            };
            match (lang.imp, recomputed) {
                (Some(stored), Some(fresh)) if close(stored, fresh) => {}
                (None, None) => {}
                (stored, fresh) => {
                    return Err(Error::InvalidArgument(format!(
                        "importance for {} does not reproduce: stored {stored:?}, recomputed {fresh:?}",
                        lang.language
                    )))
                }
            }
            imps.insert(lang.language.clone(), lang.imp);
        }
        let fresh_score = agnostic_score(&imps);
        match (self.agnostic_score, fresh_score) {
            (Some(stored), Some(fresh)) if close(stored, fresh) => Ok(()),
            (None, None) => Ok(()),
            (stored, fresh) => Err(Error::InvalidArgument(format!(
                "agnostic score does not reproduce: stored {stored:?}, recomputed {fresh:?}"
            ))),
        }
    }

    /// Per-language medians of the random-control deltas, keyed by
    /// `(language, matched group)`.
    pub fn control_medians(&self) -> BTreeMap<(String, String), f64> {
        let mut grouped: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        for rc in &self.random_controls {
            grouped
                .entry((rc.language.clone(), rc.matched.clone()))
                .or_default()
                .push(rc.dppl);
        }
        grouped
            .into_iter()
            .map(|(key, vals)| (key, median(&vals)))
            .collect()
    }

    /// Flat key-value form, one `key = value` line each. Floats use the
    /// shortest round-trip encoding, so writing and re-reading is exact.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let fmt_opt = |v: Option<f64>| match v {
            Some(x) => x.to_string(),
            None => "undefined".to_string(),
        };
        for lang in &self.per_language {
            let l = &lang.language;
            out.push_str(&format!("language.{l}.dppl_shared = {}\n", lang.dppl_shared));
            out.push_str(&format!(
                "language.{l}.dppl_exclusive = {}\n",
                lang.dppl_exclusive
            ));
            out.push_str(&format!("language.{l}.n_shared = {}\n", lang.n_shared));
            out.push_str(&format!("language.{l}.n_exclusive = {}\n", lang.n_exclusive));
            out.push_str(&format!("language.{l}.imp = {}\n", fmt_opt(lang.imp)));
        }
        out.push_str(&format!(
            "agnostic_score = {}\n",
            fmt_opt(self.agnostic_score)
        ));
        for rc in &self.random_controls {
            out.push_str(&format!(
                "random.{}.{}.size_{}.seed_{} = {}\n",
                rc.language, rc.matched, rc.size, rc.seed, rc.dppl
            ));
        }
        for ((language, matched), value) in self.control_medians() {
            out.push_str(&format!("random.{language}.{matched}.median = {value}\n"));
        }
        out
    }

    /// Parse the key-value form back into a report.
    pub fn from_kv(text: &str) -> Result<ImportanceReport> {
        let mut langs: BTreeMap<String, LanguageImportance> = BTreeMap::new();
        let mut score: Option<f64> = None;
        let mut controls = Vec::new();
        let bad = |line: &str| Error::InvalidArgument(format!("bad report line: {line:?}"));
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once(" = ").ok_or_else(|| bad(line))?;
            let parse_opt = |v: &str| -> Result<Option<f64>> {
                if v == "undefined" {
                    Ok(None)
                } else {
                    v.parse().map(Some).map_err(|_| bad(line))
                }
            };
            if key == "agnostic_score" {
                score = parse_opt(value)?;
            } else if let Some(rest) = key.strip_prefix("language.") {
                let (lang, field) = rest.rsplit_once('.').ok_or_else(|| bad(line))?;
                let entry = langs
                    .entry(lang.to_string())
                    .or_insert_with(|| LanguageImportance {
                        language: lang.to_string(),
                        dppl_shared: 0.0,
                        dppl_exclusive: 0.0,
                        n_shared: 0,
                        n_exclusive: 0,
                        imp: None,
                    });
                match field {
                    "dppl_shared" => entry.dppl_shared = value.parse().map_err(|_| bad(line))?,
                    "dppl_exclusive" => {
                        entry.dppl_exclusive = value.parse().map_err(|_| bad(line))?
                    }
                    "n_shared" => entry.n_shared = value.parse().map_err(|_| bad(line))?,
                    "n_exclusive" => entry.n_exclusive = value.parse().map_err(|_| bad(line))?,
                    "imp" => entry.imp = parse_opt(value)?,
                    _ => return Err(bad(line)),
                }
            } else if let Some(rest) = key.strip_prefix("random.") {
                let parts: Vec<&str> = rest.split('.').collect();
                match parts.as_slice() {
                    [_, _, "median"] => {} // derived; recomputed on demand
                    [language, matched, size, seed] => {
                        let size = size
                            .strip_prefix("size_")
                            .and_then(|s| s.parse().ok())
                            .ok_or_else(|| bad(line))?;
                        let seed = seed
                            .strip_prefix("seed_")
                            .and_then(|s| s.parse().ok())
                            .ok_or_else(|| bad(line))?;
                        controls.push(RandomControl {
                            language: language.to_string(),
                            matched: matched.to_string(),
                            size,
                            seed,
                            dppl: value.parse().map_err(|_| bad(line))?,
                        });
                    }
                    _ => return Err(bad(line)),
                }
            } else {
                return Err(bad(line));
            }
        }
        Ok(ImportanceReport {
            per_language: langs.into_values().collect(),
            agnostic_score: score,
            random_controls: controls,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_language, SynthSpec};
    use crate::model::ModelConfig;
    use crate::neuron::NeuronId;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_head: 8,
            d_inter: 32,
            vocab_size: 259,
            max_seq_len: 16,
            rms_eps: 1e-5,
        }
    }

    fn toy_corpus(seed: u64) -> LanguageCorpus {
        synth_language(
            &SynthSpec {
                language: "t".into(),
                alphabet: b"abcd".to_vec(),
                min_len: 4,
                max_len: 10,
                seed,
            },
            6,
            16,
        )
    }

    #[test]
    fn empty_set_delta_is_exactly_zero() {
        let model = ModelBundle::init_random(toy_config(), 0).unwrap();
        let d = delta_ppl(&model, &toy_corpus(0), &NeuronSet::new()).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn already_zero_parameters_give_zero_delta() {
        let mut model = ModelBundle::init_random(toy_config(), 1).unwrap();
        model.layers[0].w_gate.zero_column(3);
        model.layers[0].w_up.zero_column(3);
        model.layers[0].w_down.zero_row(3);
        let set: NeuronSet = [NeuronId::ffn(0, 3)].into_iter().collect();
        let d = delta_ppl(&model, &toy_corpus(1), &set).unwrap();
        assert!(d.abs() < 1e-6, "delta {d}");
    }

    #[test]
    fn delta_is_pure() {
        let model = ModelBundle::init_random(toy_config(), 2).unwrap();
        let set: NeuronSet = [NeuronId::ffn(1, 5)].into_iter().collect();
        let corpus = toy_corpus(2);
        let a = delta_ppl(&model, &corpus, &set).unwrap();
        let b = delta_ppl(&model, &corpus, &set).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn importance_hand_cases() {
        assert_eq!(importance(1.0, 5, 1.0, 5).unwrap(), Some(1.0));
        assert_eq!(importance(100.0, 10, 20.0, 20).unwrap(), Some(10.0));
        assert_eq!(importance(3.0, 2, 0.0, 4).unwrap(), None);
        assert!(importance(1.0, 0, 1.0, 1).is_err());
    }

    #[test]
    fn importance_scale_consistency() {
        let base = importance(7.0, 13, 3.0, 5).unwrap().unwrap();
        for alpha in [-2.0, 0.25, 1e6] {
            let scaled = importance(7.0 * alpha, 13, 3.0 * alpha, 5).unwrap().unwrap();
            assert!((scaled - base).abs() <= 1e-9 * base.abs());
        }
    }

    #[test]
    fn agnostic_score_fixed_points() {
        let mk = |vals: &[(&str, Option<f64>)]| -> BTreeMap<String, Option<f64>> {
            vals.iter().map(|(k, v)| (k.to_string(), *v)).collect()
        };
        let all_ones = mk(&[("a", Some(1.0)), ("b", Some(1.0))]);
        let score = agnostic_score(&all_ones).unwrap();
        assert!((score - 2.0f64.ln()).abs() < 1e-9);

        let zeros = mk(&[("a", Some(0.0)), ("b", Some(0.0))]);
        assert_eq!(agnostic_score(&zeros), Some(0.0));

        let two_four = mk(&[("a", Some(2.0)), ("b", Some(4.0))]);
        assert!((agnostic_score(&two_four).unwrap() - 4.0f64.ln()).abs() < 1e-9);

        let with_undef = mk(&[("a", Some(1.0)), ("b", None)]);
        assert_eq!(agnostic_score(&with_undef), None);
        assert_eq!(agnostic_score(&BTreeMap::new()), None);
    }

    #[test]
    fn agnostic_score_is_increasing_in_each_imp() {
        let mk = |a: f64, b: f64| -> BTreeMap<String, Option<f64>> {
            [("a".to_string(), Some(a)), ("b".to_string(), Some(b))]
                .into_iter()
                .collect()
        };
        let base = agnostic_score(&mk(1.0, 2.0)).unwrap();
        assert!(agnostic_score(&mk(1.5, 2.0)).unwrap() > base);
        assert!(agnostic_score(&mk(1.0, 2.5)).unwrap() > base);
        // permutation invariance
        assert_eq!(agnostic_score(&mk(1.0, 2.0)), agnostic_score(&mk(2.0, 1.0)));
    }

    #[test]
    fn random_control_determinism_and_edge_cases() {
        let model = ModelBundle::init_random(toy_config(), 3).unwrap();
        let corpus = toy_corpus(3);
        let none = NeuronSet::new();
        assert_eq!(random_control(&model, &corpus, 0, 9, &none).unwrap(), 0.0);
        let a = random_control(&model, &corpus, 12, 9, &none).unwrap();
        let b = random_control(&model, &corpus, 12, 9, &none).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        let total = model.config.detectable_neurons();
        assert!(random_control(&model, &corpus, total + 1, 0, &none).is_err());
    }

    #[test]
    fn random_sample_respects_exclusion() {
        let model = ModelBundle::init_random(toy_config(), 4).unwrap();
        let exclude: NeuronSet = (0..16).map(|i| NeuronId::ffn(0, i)).collect();
        for seed in 0..5 {
            let set = sample_random_neurons(&model, 40, seed, &exclude).unwrap();
            assert_eq!(set.len(), 40);
            assert!(set.intersection(&exclude).is_empty());
        }
    }

    #[test]
    fn median_hand_cases() {
        assert_eq!(median(&[3.0]), 3.0);
        assert_eq!(median(&[1.0, 2.0, 9.0]), 2.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 10.0]), 2.5);
    }

    fn sample_report() -> ImportanceReport {
        let imp_a = importance(4.0, 8, 1.0, 4).unwrap();
        let imp_b = importance(6.0, 8, 3.0, 6).unwrap();
        let score = agnostic_score(
            &[("aa".to_string(), imp_a), ("bb".to_string(), imp_b)]
                .into_iter()
                .collect(),
        );
        ImportanceReport {
            per_language: vec![
                LanguageImportance {
                    language: "aa".into(),
                    dppl_shared: 4.0,
                    dppl_exclusive: 1.0,
                    n_shared: 8,
                    n_exclusive: 4,
                    imp: imp_a,
                },
                LanguageImportance {
                    language: "bb".into(),
                    dppl_shared: 6.0,
                    dppl_exclusive: 3.0,
                    n_shared: 8,
                    n_exclusive: 6,
                    imp: imp_b,
                },
            ],
            agnostic_score: score,
            random_controls: vec![
                RandomControl {
                    language: "aa".into(),
                    matched: "shared".into(),
                    size: 8,
                    seed: 0,
                    dppl: 0.125,
                },
                RandomControl {
                    language: "aa".into(),
                    matched: "shared".into(),
                    size: 8,
                    seed: 1,
                    dppl: 0.5,
                },
            ],
        }
    }

    #[test]
    fn report_self_consistency_detects_drift() {
        let mut report = sample_report();
        report.verify_self_consistency().unwrap();
        report.agnostic_score = Some(99.0);
        assert!(report.verify_self_consistency().is_err());
    }

    #[test]
    fn report_kv_round_trip() {
        let report = sample_report();
        let text = report.to_kv();
        let parsed = ImportanceReport::from_kv(&text).unwrap();
        assert_eq!(parsed, report);
        parsed.verify_self_consistency().unwrap();
    }

    #[test]
    fn report_kv_rejects_garbage() {
        assert!(ImportanceReport::from_kv("what even is this").is_err());
        assert!(ImportanceReport::from_kv("language.a.unknown = 3\n").is_err());
    }
}
