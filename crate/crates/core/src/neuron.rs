//! Neuron addressing: sites, ids, ordered sets, and the lowering of a set
//! into per-matrix boolean selectors used by ablation and gradient gating.
//!
//! A neuron is one ablatable column (or, for the FFN intermediate site, the
//! gate/up column plus the matching down row) of a parameter matrix. Ids are
//! totally ordered by `(layer, site, head, index)` so sets serialize and
//! merge deterministically.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Which parameter matrix family a neuron lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Site {
    /// One intermediate FFN channel: gate column + up column + down row.
    FfnInter,
    /// One per-head column of the query projection.
    AttnQ,
    /// One per-head column of the key projection.
    AttnK,
    /// One per-head column of the value projection.
    AttnV,
}

impl Site {
    pub const ALL: [Site; 4] = [Site::FfnInter, Site::AttnQ, Site::AttnK, Site::AttnV];

    /// Stable token used in set files and reports.
    pub fn token(self) -> &'static str {
        match self {
            Site::FfnInter => "ffn",
            Site::AttnQ => "attn_q",
            Site::AttnK => "attn_k",
            Site::AttnV => "attn_v",
        }
    }

    pub fn parse_token(s: &str) -> Option<Site> {
        match s {
            "ffn" => Some(Site::FfnInter),
            "attn_q" => Some(Site::AttnQ),
            "attn_k" => Some(Site::AttnK),
            "attn_v" => Some(Site::AttnV),
            _ => None,
        }
    }

    pub fn is_attention(self) -> bool {
        !matches!(self, Site::FfnInter)
    }

    /// Number of neurons this site exposes per layer.
    pub fn width(self, config: &ModelConfig) -> usize {
        match self {
            Site::FfnInter => config.d_inter,
            _ => config.n_heads * config.d_head,
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// Globally unique address of one neuron.
///
/// Field order carries the total order: `(layer, site, head, index)`. For
/// `FfnInter` the head is always 0 and `index` ranges over `d_inter`; for
/// attention sites `index` is the within-head column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NeuronId {
    pub layer: usize,
    pub site: Site,
    pub head: usize,
    pub index: usize,
}

impl NeuronId {
    pub fn ffn(layer: usize, index: usize) -> Self {
        NeuronId {
            layer,
            site: Site::FfnInter,
            head: 0,
            index,
        }
    }

    pub fn attention(layer: usize, site: Site, head: usize, index: usize) -> Self {
        debug_assert!(site.is_attention());
        NeuronId {
            layer,
            site,
            head,
            index,
        }
    }

    /// Flat column index inside the site's full projection matrix
    /// (`head * d_head + index` for attention, `index` for FFN).
    pub fn flat_index(&self, config: &ModelConfig) -> usize {
        match self.site {
            Site::FfnInter => self.index,
            _ => self.head * config.d_head + self.index,
        }
    }

    /// Rebuild an id from a site and its flat column index.
    pub fn from_flat(layer: usize, site: Site, flat: usize, config: &ModelConfig) -> Self {
        match site {
            Site::FfnInter => NeuronId::ffn(layer, flat),
            _ => NeuronId::attention(layer, site, flat / config.d_head, flat % config.d_head),
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let bad = |why: String| Err(Error::InvalidNeuron(format!("{self} ({why})")));
        if self.layer >= config.n_layers {
            return bad(format!("layer >= {}", config.n_layers));
        }
        match self.site {
            Site::FfnInter => {
                if self.head != 0 {
                    return bad("ffn neurons have head 0".to_string());
                }
                if self.index >= config.d_inter {
                    return bad(format!("index >= d_inter {}", config.d_inter));
                }
            }
            _ => {
                if self.head >= config.n_heads {
                    return bad(format!("head >= {}", config.n_heads));
                }
                if self.index >= config.d_head {
                    return bad(format!("index >= d_head {}", config.d_head));
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for NeuronId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.layer, self.site, self.head, self.index)
    }
}

/// Sorted, duplicate-free set of neuron ids.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NeuronSet {
    neurons: BTreeSet<NeuronId>,
}

impl NeuronSet {
    pub fn new() -> Self {
        NeuronSet::default()
    }

    pub fn insert(&mut self, id: NeuronId) -> bool {
        self.neurons.insert(id)
    }

    pub fn contains(&self, id: &NeuronId) -> bool {
        self.neurons.contains(id)
    }

    pub fn len(&self) -> usize {
        self.neurons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neurons.is_empty()
    }

    /// Iterate in the total order.
    pub fn iter(&self) -> impl Iterator<Item = &NeuronId> {
        self.neurons.iter()
    }

    pub fn union(&self, other: &NeuronSet) -> NeuronSet {
        NeuronSet {
            neurons: self.neurons.union(&other.neurons).copied().collect(),
        }
    }

    pub fn intersection(&self, other: &NeuronSet) -> NeuronSet {
        NeuronSet {
            neurons: self.neurons.intersection(&other.neurons).copied().collect(),
        }
    }

    pub fn difference(&self, other: &NeuronSet) -> NeuronSet {
        NeuronSet {
            neurons: self.neurons.difference(&other.neurons).copied().collect(),
        }
    }

    pub fn is_subset(&self, other: &NeuronSet) -> bool {
        self.neurons.is_subset(&other.neurons)
    }

    /// Every neuron addressable at the four detectable sites of `config`.
    pub fn all_detectable(config: &ModelConfig) -> NeuronSet {
        let mut set = NeuronSet::new();
        for layer in 0..config.n_layers {
            for index in 0..config.d_inter {
                set.insert(NeuronId::ffn(layer, index));
            }
            for site in [Site::AttnQ, Site::AttnK, Site::AttnV] {
                for head in 0..config.n_heads {
                    for index in 0..config.d_head {
                        set.insert(NeuronId::attention(layer, site, head, index));
                    }
                }
            }
        }
        set
    }

    /// Line-oriented text form: a `config_hash` header, then one
    /// `layer site head index` line per neuron in the total order.
    pub fn to_text(&self, config: &ModelConfig) -> String {
        let mut out = format!("config_hash {}\n", config.hash());
        for id in self.iter() {
            out.push_str(&id.to_string());
            out.push('\n');
        }
        out
    }

    /// Parse the text form. Returns the file's config hash alongside the set.
    pub fn from_text(text: &str) -> Result<(String, NeuronSet)> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::NeuronSetFormat("empty file".to_string()))?;
        let hash = header
            .strip_prefix("config_hash ")
            .ok_or_else(|| {
                Error::NeuronSetFormat(format!("expected config_hash header, got {header:?}"))
            })?
            .to_string();
        let mut set = NeuronSet::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let parse = |s: Option<&str>, what: &str| -> Result<usize> {
                s.and_then(|t| t.parse().ok()).ok_or_else(|| {
                    Error::NeuronSetFormat(format!("line {}: bad {what}: {line:?}", lineno + 2))
                })
            };
            let layer = parse(parts.next(), "layer")?;
            let site_tok = parts.next().ok_or_else(|| {
                Error::NeuronSetFormat(format!("line {}: missing site", lineno + 2))
            })?;
            let site = Site::parse_token(site_tok).ok_or_else(|| {
                Error::NeuronSetFormat(format!("line {}: unknown site {site_tok:?}", lineno + 2))
            })?;
            let head = parse(parts.next(), "head")?;
            let index = parse(parts.next(), "index")?;
            set.insert(NeuronId {
                layer,
                site,
                head,
                index,
            });
        }
        Ok((hash, set))
    }

    pub fn write_file<P: AsRef<Path>>(&self, path: P, config: &ModelConfig) -> Result<()> {
        std::fs::write(path, self.to_text(config))?;
        Ok(())
    }

    /// Read a set file. When `expected` is given, the file's config hash must
    /// match that model's hash.
    pub fn read_file<P: AsRef<Path>>(
        path: P,
        expected: Option<&ModelConfig>,
    ) -> Result<NeuronSet> {
        let text = std::fs::read_to_string(path)?;
        let (hash, set) = Self::from_text(&text)?;
        if let Some(config) = expected {
            let want = config.hash();
            if hash != want {
                return Err(Error::ConfigHashMismatch {
                    found: hash,
                    expected: want,
                });
            }
            for id in set.iter() {
                id.validate(config)?;
            }
        }
        Ok(set)
    }
}

impl FromIterator<NeuronId> for NeuronSet {
    fn from_iter<T: IntoIterator<Item = NeuronId>>(iter: T) -> Self {
        NeuronSet {
            neurons: iter.into_iter().collect(),
        }
    }
}

impl<'a> IntoIterator for &'a NeuronSet {
    type Item = &'a NeuronId;
    type IntoIter = std::collections::btree_set::Iter<'a, NeuronId>;
    fn into_iter(self) -> Self::IntoIter {
        self.neurons.iter()
    }
}

/// A `NeuronSet` lowered to per-(layer, site) boolean column selectors, in
/// the shape the forward pass consumes. Round-trips losslessly to the
/// originating set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AblationMask {
    n_layers: usize,
    d_inter: usize,
    n_heads: usize,
    d_head: usize,
    /// `[layer][channel]` over `d_inter` channels.
    ffn: Vec<Vec<bool>>,
    /// `[layer][head * d_head + index]` per attention site.
    q: Vec<Vec<bool>>,
    k: Vec<Vec<bool>>,
    v: Vec<Vec<bool>>,
}

impl AblationMask {
    pub fn empty(config: &ModelConfig) -> Self {
        let attn_width = config.n_heads * config.d_head;
        AblationMask {
            n_layers: config.n_layers,
            d_inter: config.d_inter,
            n_heads: config.n_heads,
            d_head: config.d_head,
            ffn: vec![vec![false; config.d_inter]; config.n_layers],
            q: vec![vec![false; attn_width]; config.n_layers],
            k: vec![vec![false; attn_width]; config.n_layers],
            v: vec![vec![false; attn_width]; config.n_layers],
        }
    }

    pub fn from_set(set: &NeuronSet, config: &ModelConfig) -> Result<Self> {
        let mut mask = AblationMask::empty(config);
        for id in set.iter() {
            id.validate(config)?;
            let flat = id.flat_index(config);
            match id.site {
                Site::FfnInter => mask.ffn[id.layer][flat] = true,
                Site::AttnQ => mask.q[id.layer][flat] = true,
                Site::AttnK => mask.k[id.layer][flat] = true,
                Site::AttnV => mask.v[id.layer][flat] = true,
            }
        }
        Ok(mask)
    }

    /// Recover the originating set.
    pub fn to_set(&self) -> NeuronSet {
        let mut set = NeuronSet::new();
        for layer in 0..self.n_layers {
            for (index, &on) in self.ffn[layer].iter().enumerate() {
                if on {
                    set.insert(NeuronId::ffn(layer, index));
                }
            }
            for (site, flags) in [
                (Site::AttnQ, &self.q[layer]),
                (Site::AttnK, &self.k[layer]),
                (Site::AttnV, &self.v[layer]),
            ] {
                for (flat, &on) in flags.iter().enumerate() {
                    if on {
                        set.insert(NeuronId::attention(
                            layer,
                            site,
                            flat / self.d_head,
                            flat % self.d_head,
                        ));
                    }
                }
            }
        }
        set
    }

    pub fn is_empty(&self) -> bool {
        let none = |rows: &Vec<Vec<bool>>| rows.iter().all(|r| r.iter().all(|&b| !b));
        none(&self.ffn) && none(&self.q) && none(&self.k) && none(&self.v)
    }

    /// Selected FFN channels for `layer`.
    pub fn ffn_selected(&self, layer: usize) -> &[bool] {
        &self.ffn[layer]
    }

    /// Selected flat columns of the given attention site for `layer`.
    pub fn attn_selected(&self, site: Site, layer: usize) -> &[bool] {
        match site {
            Site::AttnQ => &self.q[layer],
            Site::AttnK => &self.k[layer],
            Site::AttnV => &self.v[layer],
            Site::FfnInter => panic!("attn_selected called with FfnInter"),
        }
    }
}
