//! Per-neuron impact computation and language-related-neuron detection.
//!
//! Two independent routes exist for every site and must agree:
//!
//! * the parallel kernels ([`ffn_impacts`], [`attn_v_impacts`],
//!   [`attn_qk_impacts`]) score all neurons of a site at once from one
//!   forward trace, exploiting the rank-1 structure of a single-neuron
//!   ablation;
//! * [`sequential_oracle`] literally zeroes the neuron's owning parameters
//!   and recomputes the sublayer (or the whole model) at 64-bit precision.
//!
//! Detection runs the parallel route per sentence, ranks or thresholds
//! impacts within each `(layer, site)` vector, and keeps neurons that fire
//! on at least a `tau` fraction of sentences.

use rayon::prelude::*;

use crate::corpus::LanguageCorpus;
use crate::error::{Error, Result};
use crate::linalg::{vec_norm, Matrix};
use crate::model::{ForwardTrace, LayerWeights, ModelBundle, ModelConfig, TokenSequence};
use crate::neuron::{AblationMask, NeuronId, NeuronSet, Site};

/// Impact magnitudes for every neuron of one `(layer, site)`, one row per
/// corpus sentence. Attention columns are flattened head-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpactTable {
    pub layer: usize,
    pub site: Site,
    pub impacts: Vec<Vec<f32>>,
}

impl ImpactTable {
    /// Neuron id for a flat column of this table.
    pub fn neuron_id(&self, flat: usize, config: &ModelConfig) -> NeuronId {
        NeuronId::from_flat(self.layer, self.site, flat, config)
    }
}

/// How a neuron counts as activated on one sentence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Criterion {
    /// Impact ranks in the top `q` fraction of its `(layer, site)` vector;
    /// boundary ties go to the earlier neuron in the total order.
    RankTopQ(f64),
    /// Impact is at least `sigma`.
    AbsoluteSigma(f32),
}

impl std::str::FromStr for Criterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("criterion {s:?}; expected topq:F or sigma:F"));
        let (kind, value) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "topq" => Ok(Criterion::RankTopQ(value.parse().map_err(|_| bad())?)),
            "sigma" => Ok(Criterion::AbsoluteSigma(value.parse().map_err(|_| bad())?)),
            _ => Err(bad()),
        }
    }
}

/// Where the ablation change is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    /// Change in the owning sublayer's output, input held at the traced
    /// value. This is what the parallel kernels compute.
    LayerLocal,
    /// Change in the residual stream after the last layer, from a full
    /// masked re-forward.
    FinalOutput,
}

impl std::str::FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" => Ok(Scope::LayerLocal),
            "final" => Ok(Scope::FinalOutput),
            _ => Err(Error::InvalidArgument(format!(
                "scope {s:?}; expected layer or final"
            ))),
        }
    }
}

/// Detection parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionConfig {
    pub criterion: Criterion,
    /// Fraction of sentences a neuron must fire on; 1.0 recovers the strict
    /// for-all reading.
    pub tau: f64,
    pub scope: Scope,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            criterion: Criterion::RankTopQ(0.01),
            tau: 0.9,
            scope: Scope::LayerLocal,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<()> {
        match self.criterion {
            // q = 0 is allowed as an explicit "select nothing" edge.
            Criterion::RankTopQ(q) if !(0.0..=1.0).contains(&q) => {
                return Err(Error::InvalidArgument(format!("q must be in [0, 1], got {q}")))
            }
            Criterion::AbsoluteSigma(s) if !(s > 0.0) => {
                return Err(Error::InvalidArgument(format!("sigma must be > 0, got {s}")))
            }
            _ => {}
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "tau must be in (0, 1], got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parallel impact kernels
// ---------------------------------------------------------------------------

/// Impact of zeroing each intermediate FFN channel: the ablation change is
/// the rank-1 outer product of the channel's activation column and its down
/// row, so its Frobenius norm factors into a product of two vector norms.
pub fn ffn_impacts(h_act: &Matrix, w_down: &Matrix) -> Result<Vec<f32>> {
    if h_act.cols() != w_down.rows() {
        return Err(Error::ShapeMismatch {
            op: "ffn_impacts",
            left_rows: h_act.rows(),
            left_cols: h_act.cols(),
            right_rows: w_down.rows(),
            right_cols: w_down.cols(),
        });
    }
    let mut impacts = Vec::with_capacity(h_act.cols());
    for k in 0..h_act.cols() {
        let col_norm = vec_norm(&h_act.column(k));
        let row_norm = vec_norm(w_down.row(k));
        impacts.push((col_norm * row_norm) as f32);
    }
    Ok(impacts)
}

/// Impact of zeroing each value column: only column `k` of `A·V` changes,
/// so the norm of the change is the norm of that column.
pub fn attn_v_impacts(a: &Matrix, v: &Matrix) -> Result<Vec<f32>> {
    if a.rows() != a.cols() || a.cols() != v.rows() {
        return Err(Error::ShapeMismatch {
            op: "attn_v_impacts",
            left_rows: a.rows(),
            left_cols: a.cols(),
            right_rows: v.rows(),
            right_cols: v.cols(),
        });
    }
    let l = a.rows();
    let mut impacts = Vec::with_capacity(v.cols());
    for k in 0..v.cols() {
        let mut sq = 0.0f64;
        for i in 0..l {
            let mut acc = 0.0f64;
            for j in 0..l {
                acc += a.get(i, j) as f64 * v.get(j, k) as f64;
            }
            sq += acc * acc;
        }
        impacts.push(sq.sqrt() as f32);
    }
    Ok(impacts)
}

/// Impact of zeroing each query (or key) column of one head.
///
/// Zeroing column `k` of either projection subtracts the same rank-1 term
/// `Q[:,k] (K[:,k])^T * scale` from the raw scores, so queries and keys share
/// one kernel: re-softmax the adjusted scores under the same mask and norm
/// the resulting output change `(A - A_k) V`. All intermediate arithmetic is
/// 64-bit.
pub fn attn_qk_impacts(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    scale: f32,
    causal: bool,
    site: Site,
) -> Result<Vec<f32>> {
    if !matches!(site, Site::AttnQ | Site::AttnK) {
        return Err(Error::InvalidArgument(format!(
            "attn_qk_impacts expects attn_q or attn_k, got {site}"
        )));
    }
    if q.rows() != k.rows() || q.cols() != k.cols() {
        return Err(Error::ShapeMismatch {
            op: "attn_qk_impacts",
            left_rows: q.rows(),
            left_cols: q.cols(),
            right_rows: k.rows(),
            right_cols: k.cols(),
        });
    }
    if v.rows() != q.rows() {
        return Err(Error::ShapeMismatch {
            op: "attn_qk_impacts",
            left_rows: q.rows(),
            left_cols: q.cols(),
            right_rows: v.rows(),
            right_cols: v.cols(),
        });
    }
    let l = q.rows();
    let d = q.cols();
    let scale = scale as f64;

    let mut s_raw = vec![0.0f64; l * l];
    for i in 0..l {
        for j in 0..l {
            let mut acc = 0.0f64;
            for c in 0..d {
                acc += q.get(i, c) as f64 * k.get(j, c) as f64;
            }
            s_raw[i * l + j] = acc * scale;
        }
    }
    let a_orig = softmax_rows_f64(&s_raw, l, causal);

    let mut impacts = Vec::with_capacity(d);
    let mut s_adj = vec![0.0f64; l * l];
    for c in 0..d {
        for i in 0..l {
            for j in 0..l {
                let delta = q.get(i, c) as f64 * k.get(j, c) as f64 * scale;
                s_adj[i * l + j] = s_raw[i * l + j] - delta;
            }
        }
        let a_adj = softmax_rows_f64(&s_adj, l, causal);
        // || (A_orig - A_adj) V ||_F
        let mut sq = 0.0f64;
        for i in 0..l {
            for m in 0..v.cols() {
                let mut acc = 0.0f64;
                for j in 0..l {
                    acc += (a_orig[i * l + j] - a_adj[i * l + j]) * v.get(j, m) as f64;
                }
                sq += acc * acc;
            }
        }
        impacts.push(sq.sqrt() as f32);
    }
    Ok(impacts)
}

fn softmax_rows_f64(scores: &[f64], l: usize, causal: bool) -> Vec<f64> {
    let mut out = vec![0.0f64; l * l];
    for i in 0..l {
        let visible = if causal { i + 1 } else { l };
        let row = &scores[i * l..i * l + visible];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0f64;
        for &x in row {
            denom += (x - max).exp();
        }
        for j in 0..visible {
            out[i * l + j] = (scores[i * l + j] - max).exp() / denom;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Sequential oracle
// ---------------------------------------------------------------------------

/// Brute-force impact of one neuron: zero its owning parameters literally
/// and recompute.
///
/// `LayerLocal` recomputes the owning sublayer at 64-bit precision from the
/// traced sublayer input; `FinalOutput` re-runs the whole model with the
/// neuron masked and norms the change in the final residual stream.
pub fn sequential_oracle(
    model: &ModelBundle,
    tokens: &TokenSequence,
    neuron: NeuronId,
    scope: Scope,
) -> Result<f32> {
    neuron.validate(&model.config)?;
    let trace = model.forward(tokens)?;
    match scope {
        Scope::LayerLocal => Ok(layer_local_oracle(model, &trace, neuron)),
        Scope::FinalOutput => {
            let set: NeuronSet = [neuron].into_iter().collect();
            let mask = AblationMask::from_set(&set, &model.config)?;
            let ablated = model.forward_masked(tokens, &mask)?;
            Ok(frob_diff_f32(&trace.final_hidden, &ablated.final_hidden))
        }
    }
}

fn layer_local_oracle(model: &ModelBundle, trace: &ForwardTrace, neuron: NeuronId) -> f32 {
    let layer = &model.layers[neuron.layer];
    let config = &model.config;
    match neuron.site {
        Site::FfnInter => {
            let x = &trace.x_ffn[neuron.layer];
            let base = ffn_output_f64(x, layer, config.rms_eps, None);
            let ablated = ffn_output_f64(x, layer, config.rms_eps, Some(neuron.index));
            frob_diff_f64(&base, &ablated)
        }
        site => {
            let x = &trace.x_attn[neuron.layer];
            let flat = neuron.flat_index(config);
            let base = attn_concat_f64(x, layer, config, None);
            let ablated = attn_concat_f64(x, layer, config, Some((site, flat)));
            frob_diff_f64(&base, &ablated)
        }
    }
}

fn to_f64(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows())
        .map(|r| m.row(r).iter().map(|&x| x as f64).collect())
        .collect()
}

fn rmsnorm_f64(x: &Matrix, gain: &[f32], eps: f32) -> Vec<Vec<f64>> {
    let d = x.cols();
    (0..x.rows())
        .map(|r| {
            let row = x.row(r);
            let mut sum_sq = 0.0f64;
            for &v in row {
                sum_sq += v as f64 * v as f64;
            }
            let inv = 1.0 / (sum_sq / d as f64 + eps as f64).sqrt();
            (0..d)
                .map(|c| row[c] as f64 * inv * gain[c] as f64)
                .collect()
        })
        .collect()
}

/// Full 64-bit FFN sublayer recompute. `skip` literally zeroes the gate
/// column, up column, and down row of that channel before computing.
fn ffn_output_f64(
    x_ffn: &Matrix,
    layer: &LayerWeights,
    eps: f32,
    skip: Option<usize>,
) -> Vec<Vec<f64>> {
    let mut w_gate = to_f64(&layer.w_gate);
    let mut w_up = to_f64(&layer.w_up);
    let mut w_down = to_f64(&layer.w_down);
    if let Some(ch) = skip {
        for row in w_gate.iter_mut() {
            row[ch] = 0.0;
        }
        for row in w_up.iter_mut() {
            row[ch] = 0.0;
        }
        for v in w_down[ch].iter_mut() {
            *v = 0.0;
        }
    }
    let xn = rmsnorm_f64(x_ffn, &layer.ffn_norm_gain, eps);
    let l = xn.len();
    let d_inter = w_gate[0].len();
    let d_out = w_down[0].len();
    let mut out = vec![vec![0.0f64; d_out]; l];
    for i in 0..l {
        for ch in 0..d_inter {
            let mut g = 0.0f64;
            let mut u = 0.0f64;
            for (j, &xj) in xn[i].iter().enumerate() {
                g += xj * w_gate[j][ch];
                u += xj * w_up[j][ch];
            }
            let h = g / (1.0 + (-g).exp()) * u;
            for m in 0..d_out {
                out[i][m] += h * w_down[ch][m];
            }
        }
    }
    out
}

/// Full 64-bit multi-head attention recompute up to the concatenated head
/// outputs (before the output projection). `zero` literally zeroes one flat
/// column of the chosen projection before computing.
fn attn_concat_f64(
    x_attn: &Matrix,
    layer: &LayerWeights,
    config: &ModelConfig,
    zero: Option<(Site, usize)>,
) -> Vec<Vec<f64>> {
    let mut w_q = to_f64(&layer.w_q);
    let mut w_k = to_f64(&layer.w_k);
    let mut w_v = to_f64(&layer.w_v);
    if let Some((site, flat)) = zero {
        let target = match site {
            Site::AttnQ => &mut w_q,
            Site::AttnK => &mut w_k,
            Site::AttnV => &mut w_v,
            Site::FfnInter => unreachable!("attention oracle only"),
        };
        for row in target.iter_mut() {
            row[flat] = 0.0;
        }
    }
    let xn = rmsnorm_f64(x_attn, &layer.attn_norm_gain, config.rms_eps);
    let l = xn.len();
    let d_model = config.d_model;
    let d_head = config.d_head;
    let scale = 1.0 / (d_head as f64).sqrt();

    let project = |w: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0f64; d_model]; l];
        for i in 0..l {
            for c in 0..d_model {
                let mut acc = 0.0f64;
                for (j, &xj) in xn[i].iter().enumerate() {
                    acc += xj * w[j][c];
                }
                out[i][c] = acc;
            }
        }
        out
    };
    let q = project(&w_q);
    let k = project(&w_k);
    let v = project(&w_v);

    let mut concat = vec![vec![0.0f64; d_model]; l];
    for h in 0..config.n_heads {
        let base = h * d_head;
        let mut scores = vec![0.0f64; l * l];
        for i in 0..l {
            for j in 0..l {
                let mut acc = 0.0f64;
                for c in 0..d_head {
                    acc += q[i][base + c] * k[j][base + c];
                }
                scores[i * l + j] = acc * scale;
            }
        }
        let probs = softmax_rows_f64(&scores, l, true);
        for i in 0..l {
            for c in 0..d_head {
                let mut acc = 0.0f64;
                for j in 0..l {
                    acc += probs[i * l + j] * v[j][base + c];
                }
                concat[i][base + c] = acc;
            }
        }
    }
    concat
}

fn frob_diff_f64(a: &[Vec<f64>], b: &[Vec<f64>]) -> f32 {
    let mut sq = 0.0f64;
    for (ra, rb) in a.iter().zip(b) {
        for (&x, &y) in ra.iter().zip(rb) {
            let d = x - y;
            sq += d * d;
        }
    }
    sq.sqrt() as f32
}

fn frob_diff_f32(a: &Matrix, b: &Matrix) -> f32 {
    let mut sq = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x as f64 - y as f64;
        sq += d * d;
    }
    sq.sqrt() as f32
}

// ---------------------------------------------------------------------------
// Corpus-level detection
// ---------------------------------------------------------------------------

/// Per-site impact vectors for one traced sentence, via the parallel kernels.
/// Returned as `[layer][site-in-Site::ALL-order] -> flat impact vector`.
pub fn trace_impacts(model: &ModelBundle, trace: &ForwardTrace) -> Result<Vec<[Vec<f32>; 4]>> {
    let config = &model.config;
    let scale = 1.0 / (config.d_head as f32).sqrt();
    let mut per_layer = Vec::with_capacity(config.n_layers);
    for layer in 0..config.n_layers {
        let ffn = ffn_impacts(&trace.h_act[layer], &model.layers[layer].w_down)?;
        let width = config.n_heads * config.d_head;
        let mut q_imp = Vec::with_capacity(width);
        let mut k_imp = Vec::with_capacity(width);
        let mut v_imp = Vec::with_capacity(width);
        for head in 0..config.n_heads {
            let base = head * config.d_head;
            let q_h = trace.q[layer].col_block(base, config.d_head);
            let k_h = trace.k[layer].col_block(base, config.d_head);
            let v_h = trace.v[layer].col_block(base, config.d_head);
            // Queries and keys subtract the identical rank-1 score term, so
            // one kernel call serves both sites.
            let qk = attn_qk_impacts(&q_h, &k_h, &v_h, scale, true, Site::AttnQ)?;
            let av = attn_v_impacts(&trace.attn_probs[layer][head], &v_h)?;
            q_imp.extend_from_slice(&qk);
            k_imp.extend_from_slice(&qk);
            v_imp.extend_from_slice(&av);
        }
        per_layer.push([ffn, q_imp, k_imp, v_imp]);
    }
    Ok(per_layer)
}

/// Impact tables for a whole corpus: one table per `(layer, site)`, one row
/// per sentence. Sentences are processed in parallel; rows keep corpus
/// order, so results are bitwise reproducible under any thread schedule.
pub fn corpus_impact_tables(
    model: &ModelBundle,
    corpus: &LanguageCorpus,
    scope: Scope,
) -> Result<Vec<ImpactTable>> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let per_sentence: Vec<Vec<[Vec<f32>; 4]>> = corpus
        .sentences
        .par_iter()
        .map(|sentence| match scope {
            Scope::LayerLocal => {
                let trace = model.forward(sentence)?;
                trace_impacts(model, &trace)
            }
            Scope::FinalOutput => final_output_impacts(model, sentence),
        })
        .collect::<Result<_>>()?;

    let config = &model.config;
    let mut tables = Vec::with_capacity(config.n_layers * 4);
    for layer in 0..config.n_layers {
        for (site_idx, site) in Site::ALL.into_iter().enumerate() {
            let impacts = per_sentence
                .iter()
                .map(|s| s[layer][site_idx].clone())
                .collect();
            tables.push(ImpactTable {
                layer,
                site,
                impacts,
            });
        }
    }
    Ok(tables)
}

/// One sentence's per-neuron impacts in the `FinalOutput` scope: a full
/// masked re-forward per neuron against a shared base trace. Matches
/// [`sequential_oracle`] with [`Scope::FinalOutput`] neuron for neuron.
fn final_output_impacts(
    model: &ModelBundle,
    tokens: &TokenSequence,
) -> Result<Vec<[Vec<f32>; 4]>> {
    let config = &model.config;
    let base = model.forward(tokens)?;
    let mut out = Vec::with_capacity(config.n_layers);
    for layer in 0..config.n_layers {
        let mut sites: [Vec<f32>; 4] = Default::default();
        for (site_idx, site) in Site::ALL.into_iter().enumerate() {
            let width = site.width(config);
            let mut impacts = Vec::with_capacity(width);
            for flat in 0..width {
                let id = NeuronId::from_flat(layer, site, flat, config);
                let set: NeuronSet = [id].into_iter().collect();
                let mask = AblationMask::from_set(&set, config)?;
                let ablated = model.forward_masked(tokens, &mask)?;
                impacts.push(frob_diff_f32(&base.final_hidden, &ablated.final_hidden));
            }
            sites[site_idx] = impacts;
        }
        out.push(sites);
    }
    Ok(out)
}

/// Per-sentence activation flags for one impact row under a criterion.
fn activated_flags(impacts: &[f32], criterion: Criterion) -> Vec<bool> {
    match criterion {
        Criterion::AbsoluteSigma(sigma) => impacts.iter().map(|&x| x >= sigma).collect(),
        Criterion::RankTopQ(q) => {
            let n = impacts.len();
            let n_sel = (q * n as f64).ceil() as usize;
            let mut flags = vec![false; n];
            if n_sel == 0 {
                return flags;
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| impacts[b].total_cmp(&impacts[a]).then(a.cmp(&b)));
            for &idx in order.iter().take(n_sel.min(n)) {
                flags[idx] = true;
            }
            flags
        }
    }
}

/// Threshold pre-computed impact tables into a neuron set: a neuron is kept
/// when it activates on at least `tau` of the sentences.
pub fn detect_from_tables(
    tables: &[ImpactTable],
    cfg: &DetectionConfig,
    config: &ModelConfig,
) -> Result<NeuronSet> {
    cfg.validate()?;
    let mut set = NeuronSet::new();
    for table in tables {
        let n_sentences = table.impacts.len();
        if n_sentences == 0 {
            return Err(Error::EmptyCorpus);
        }
        let width = table.site.width(config);
        let mut counts = vec![0usize; width];
        for row in &table.impacts {
            for (flat, fired) in activated_flags(row, cfg.criterion).into_iter().enumerate() {
                if fired {
                    counts[flat] += 1;
                }
            }
        }
        for (flat, &count) in counts.iter().enumerate() {
            if count as f64 / n_sentences as f64 >= cfg.tau {
                set.insert(table.neuron_id(flat, config));
            }
        }
    }
    Ok(set)
}

/// Identify the language-related neurons of one corpus.
pub fn detect_language_neurons(
    model: &ModelBundle,
    corpus: &LanguageCorpus,
    cfg: &DetectionConfig,
) -> Result<NeuronSet> {
    cfg.validate()?;
    let tables = corpus_impact_tables(model, corpus, cfg.scope)?;
    detect_from_tables(&tables, cfg, &model.config)
}
