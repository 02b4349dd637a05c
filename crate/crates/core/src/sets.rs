//! Shared/exclusive classification of per-language neuron sets and the
//! derived ratios.
//!
//! Two exclusivity readings are supported: the set-difference form
//! (everything outside the all-language intersection) and the strict form
//! (neurons appearing in exactly one language's set). They agree for two
//! languages and diverge from three on.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::neuron::NeuronSet;

/// Which exclusivity definition to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifyMode {
    /// `exclusive[l] = lang[l] \ shared`.
    SetDifference,
    /// `exclusive[l] = lang[l] \ union(all other languages)`.
    StrictUnique,
}

impl std::str::FromStr for ClassifyMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eq3" | "difference" => Ok(ClassifyMode::SetDifference),
            "unique" | "strict" => Ok(ClassifyMode::StrictUnique),
            _ => Err(Error::InvalidArgument(format!(
                "classify mode {s:?}; expected eq3 or unique"
            ))),
        }
    }
}

/// Per-language detected sets plus the derived shared/exclusive partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LanguageNeuronProfile {
    pub mode: ClassifyMode,
    pub languages: BTreeMap<String, NeuronSet>,
    pub shared: NeuronSet,
    pub exclusive: BTreeMap<String, NeuronSet>,
}

/// Split per-language sets into the all-language intersection and
/// per-language exclusive remainders.
pub fn classify(
    per_language: &BTreeMap<String, NeuronSet>,
    mode: ClassifyMode,
) -> Result<LanguageNeuronProfile> {
    if per_language.len() < 2 {
        return Err(Error::TooFewLanguages(per_language.len()));
    }
    let mut sets = per_language.values();
    let first = sets.next().expect("len checked above").clone();
    let shared = sets.fold(first, |acc, s| acc.intersection(s));

    let exclusive = per_language
        .iter()
        .map(|(lang, set)| {
            let excl = match mode {
                ClassifyMode::SetDifference => set.difference(&shared),
                ClassifyMode::StrictUnique => {
                    let others = per_language
                        .iter()
                        .filter(|(other, _)| *other != lang)
                        .fold(NeuronSet::new(), |acc, (_, s)| acc.union(s));
                    set.difference(&others)
                }
            };
            (lang.clone(), excl)
        })
        .collect();

    Ok(LanguageNeuronProfile {
        mode,
        languages: per_language.clone(),
        shared,
        exclusive,
    })
}

/// `|shared|` divided by the mean exclusive set size. `None` when every
/// exclusive set is empty (undefined, deliberately distinct from 0).
pub fn shared_ratio(profile: &LanguageNeuronProfile) -> Option<f64> {
    let n_langs = profile.exclusive.len();
    let total_exclusive: usize = profile.exclusive.values().map(NeuronSet::len).sum();
    if total_exclusive == 0 {
        return None;
    }
    let mean_exclusive = total_exclusive as f64 / n_langs as f64;
    Some(profile.shared.len() as f64 / mean_exclusive)
}

/// Fraction of all detectable neurons contained in `set`. The denominator
/// counts only the four ablatable sites, keeping fractions consistent with
/// detection scope.
pub fn neuron_fraction(set: &NeuronSet, config: &ModelConfig) -> f64 {
    set.len() as f64 / config.detectable_neurons() as f64
}
