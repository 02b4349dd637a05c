//! Language-tagged corpora: byte-level tokenization, deterministic reservoir
//! sampling from line-delimited text files, and a synthetic-language
//! generator for self-contained runs.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{TokenSequence, BOS, EOS};

/// Sentences of one language, tokenized and ready for the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LanguageCorpus {
    pub language: String,
    pub sentences: Vec<TokenSequence>,
    /// Where the sentences came from (file path or "synthetic").
    pub source: String,
    pub sample_seed: u64,
    /// Set when the source held fewer usable lines than requested.
    pub shortfall: bool,
}

impl LanguageCorpus {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Deterministic interleaved split: every `1/fraction`-th sentence goes
    /// to the second (held-out) corpus. `fraction` is clamped to [0, 0.5].
    pub fn split_holdout(&self, fraction: f64) -> (LanguageCorpus, LanguageCorpus) {
        let fraction = fraction.clamp(0.0, 0.5);
        let stride = if fraction > 0.0 {
            (1.0 / fraction).round() as usize
        } else {
            usize::MAX
        };
        let mut train = Vec::new();
        let mut held = Vec::new();
        for (i, s) in self.sentences.iter().enumerate() {
            if stride != usize::MAX && (i + 1) % stride == 0 {
                held.push(s.clone());
            } else {
                train.push(s.clone());
            }
        }
        let mk = |sentences: Vec<TokenSequence>, tag: &str| LanguageCorpus {
            language: self.language.clone(),
            sentences,
            source: format!("{} ({tag})", self.source),
            sample_seed: self.sample_seed,
            shortfall: self.shortfall,
        };
        (mk(train, "train"), mk(held, "holdout"))
    }
}

/// Byte-level tokenization: BOS, then one token per byte, then EOS. The byte
/// payload is truncated so the whole sequence fits `max_len`.
pub fn tokenize_line(line: &str, max_len: usize) -> TokenSequence {
    let payload = max_len.saturating_sub(2);
    let mut ids = Vec::with_capacity(line.len().min(payload) + 2);
    ids.push(BOS);
    ids.extend(line.bytes().take(payload).map(u32::from));
    ids.push(EOS);
    TokenSequence::new(ids)
}

/// Inverse of [`tokenize_line`]: drop BOS/EOS, reassemble the bytes.
pub fn detokenize(tokens: &TokenSequence) -> Vec<u8> {
    tokens
        .ids
        .iter()
        .filter(|&&id| id < 256)
        .map(|&id| id as u8)
        .collect()
}

/// Reservoir-sample `n` lines from a UTF-8 line-delimited file and tokenize
/// them. Deterministic for a given seed. Lines producing fewer than 2 tokens
/// are skipped; if fewer than `n` usable lines exist, all are returned and
/// the shortfall flag is set.
pub fn load_corpus<P: AsRef<Path>>(
    path: P,
    language: &str,
    n: usize,
    seed: u64,
    max_len: usize,
) -> Result<LanguageCorpus> {
    if language.is_empty() {
        return Err(Error::InvalidConfig("language tag must be non-empty".into()));
    }
    let text = std::fs::read_to_string(&path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reservoir: Vec<TokenSequence> = Vec::with_capacity(n);
    let mut seen = 0usize;
    for line in text.lines() {
        let tokens = tokenize_line(line, max_len);
        if tokens.len() < 2 {
            continue;
        }
        if seen < n {
            reservoir.push(tokens);
        } else {
            let j = rng.random_range(0..=seen);
            if j < n {
                reservoir[j] = tokens;
            }
        }
        seen += 1;
    }
    Ok(LanguageCorpus {
        language: language.to_string(),
        sentences: reservoir,
        source: path.as_ref().display().to_string(),
        sample_seed: seed,
        shortfall: seen < n,
    })
}

/// Recipe for a synthetic language: an alphabet of bytes and a uniform
/// sentence-length range. Disjoint alphabets stand in for typologically
/// distinct languages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthSpec {
    pub language: String,
    pub alphabet: Vec<u8>,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

/// Generate `n` sentences from the spec. Byte `i+1` of a sentence is drawn
/// from a window of the alphabet centered on byte `i`'s position, giving
/// each language learnable local structure on top of its alphabet identity.
pub fn synth_language(spec: &SynthSpec, n: usize, token_max_len: usize) -> LanguageCorpus {
    assert!(!spec.alphabet.is_empty(), "alphabet must be non-empty");
    assert!(spec.min_len >= 1 && spec.min_len <= spec.max_len);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let a = spec.alphabet.len();
    let mut sentences = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut bytes = Vec::with_capacity(len);
        let mut pos = rng.random_range(0..a);
        bytes.push(spec.alphabet[pos]);
        for _ in 1..len {
            // step at most one position left/right within the alphabet
            let lo = pos.saturating_sub(1);
            let hi = (pos + 1).min(a - 1);
            pos = rng.random_range(lo..=hi);
            bytes.push(spec.alphabet[pos]);
        }
        let line = String::from_utf8_lossy(&bytes).into_owned();
        sentences.push(tokenize_line(&line, token_max_len));
    }
    LanguageCorpus {
        language: spec.language.clone(),
        sentences,
        source: "synthetic".to_string(),
        sample_seed: spec.seed,
        shortfall: false,
    }
}
