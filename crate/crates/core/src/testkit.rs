//! Test-only reference implementations, kept deliberately independent of the
//! production code paths they check.
//!
//! [`ScalarModel`] is a straight-line 64-bit reimplementation of the forward
//! pass and loss over plain nested loops: no shared kernels, no shared
//! intermediates. It drives the elementwise logit checks, the perplexity
//! oracle, and central-finite-difference gradient verification. The
//! oracle-based detection pipeline scores every neuron with
//! [`sequential_oracle`] instead of the parallel kernels.

use rayon::prelude::*;

use crate::corpus::LanguageCorpus;
use crate::detect::{
    detect_from_tables, sequential_oracle, DetectionConfig, ImpactTable, Scope,
};
use crate::error::Result;
use crate::model::{ModelBundle, ModelConfig, TokenSequence};
use crate::neuron::{NeuronId, NeuronSet, Site};
use crate::train::Gradients;

/// Guarded relative error: zero when both values vanish.
pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == 0.0 && b == 0.0 {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// All model weights widened to `f64`, flat tensors in
/// [`ModelBundle::param_slices`] order.
pub struct ScalarModel {
    config: ModelConfig,
    tensors: Vec<Vec<f64>>,
}

const LAYER_TENSORS: usize = 9;

impl ScalarModel {
    pub fn from_bundle(bundle: &ModelBundle) -> Self {
        ScalarModel {
            config: bundle.config,
            tensors: bundle
                .param_slices()
                .into_iter()
                .map(|s| s.iter().map(|&x| x as f64).collect())
                .collect(),
        }
    }

    /// Total scalar parameter count across all tensors.
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    /// Add `delta` to one coordinate.
    pub fn perturb(&mut self, tensor: usize, flat: usize, delta: f64) {
        self.tensors[tensor][flat] += delta;
    }

    fn layer_tensor(&self, layer: usize, which: usize) -> &[f64] {
        &self.tensors[2 + layer * LAYER_TENSORS + which]
    }

    /// Straight-line 64-bit forward pass returning per-position logits.
    pub fn logits(&self, tokens: &TokenSequence) -> Vec<Vec<f64>> {
        let c = &self.config;
        let l = tokens.len();
        let d = c.d_model;
        let tok = &self.tensors[0];
        let pos = &self.tensors[1];

        let mut x = vec![vec![0.0f64; d]; l];
        for (t, &id) in tokens.ids.iter().enumerate() {
            for j in 0..d {
                x[t][j] = tok[id as usize * d + j] + pos[t * d + j];
            }
        }

        for layer in 0..c.n_layers {
            let w_q = self.layer_tensor(layer, 0);
            let w_k = self.layer_tensor(layer, 1);
            let w_v = self.layer_tensor(layer, 2);
            let w_o = self.layer_tensor(layer, 3);
            let w_gate = self.layer_tensor(layer, 4);
            let w_up = self.layer_tensor(layer, 5);
            let w_down = self.layer_tensor(layer, 6);
            let attn_gain = self.layer_tensor(layer, 7);
            let ffn_gain = self.layer_tensor(layer, 8);

            let xn = rmsnorm_rows_f64(&x, attn_gain, c.rms_eps as f64);
            let project = |w: &[f64]| -> Vec<Vec<f64>> {
                let mut out = vec![vec![0.0f64; d]; l];
                for t in 0..l {
                    for col in 0..d {
                        let mut acc = 0.0f64;
                        for j in 0..d {
                            acc += xn[t][j] * w[j * d + col];
                        }
                        out[t][col] = acc;
                    }
                }
                out
            };
            let q = project(w_q);
            let k = project(w_k);
            let v = project(w_v);

            let scale = 1.0 / (c.d_head as f64).sqrt();
            let mut concat = vec![vec![0.0f64; d]; l];
            for h in 0..c.n_heads {
                let base = h * c.d_head;
                for i in 0..l {
                    let mut scores = vec![0.0f64; i + 1];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let mut acc = 0.0f64;
                        for cc in 0..c.d_head {
                            acc += q[i][base + cc] * k[j][base + cc];
                        }
                        *s = acc * scale;
                    }
                    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                    for cc in 0..c.d_head {
                        let mut acc = 0.0f64;
                        for (j, s) in scores.iter().enumerate() {
                            acc += (s - max).exp() / denom * v[j][base + cc];
                        }
                        concat[i][base + cc] = acc;
                    }
                }
            }
            for t in 0..l {
                let mut attn = vec![0.0f64; d];
                for j in 0..d {
                    let mut acc = 0.0f64;
                    for m in 0..d {
                        acc += concat[t][m] * w_o[m * d + j];
                    }
                    attn[j] = acc;
                }
                for j in 0..d {
                    x[t][j] += attn[j];
                }
            }

            let xn2 = rmsnorm_rows_f64(&x, ffn_gain, c.rms_eps as f64);
            for t in 0..l {
                let mut ffn = vec![0.0f64; d];
                for ch in 0..c.d_inter {
                    let mut g = 0.0f64;
                    let mut u = 0.0f64;
                    for j in 0..d {
                        g += xn2[t][j] * w_gate[j * c.d_inter + ch];
                        u += xn2[t][j] * w_up[j * c.d_inter + ch];
                    }
                    let h_act = g / (1.0 + (-g).exp()) * u;
                    for j in 0..d {
                        ffn[j] += h_act * w_down[ch * d + j];
                    }
                }
                for j in 0..d {
                    x[t][j] += ffn[j];
                }
            }
        }

        let final_gain = &self.tensors[2 + c.n_layers * LAYER_TENSORS];
        let unemb = &self.tensors[3 + c.n_layers * LAYER_TENSORS];
        let xf = rmsnorm_rows_f64(&x, final_gain, c.rms_eps as f64);
        let mut logits = vec![vec![0.0f64; c.vocab_size]; l];
        for t in 0..l {
            for w in 0..c.vocab_size {
                let mut acc = 0.0f64;
                for j in 0..d {
                    acc += xf[t][j] * unemb[j * c.vocab_size + w];
                }
                logits[t][w] = acc;
            }
        }
        logits
    }

    /// Token-weighted mean next-token cross-entropy over a batch.
    pub fn loss(&self, batch: &[TokenSequence]) -> f64 {
        let mut total = 0.0f64;
        let mut tokens = 0usize;
        for sentence in batch {
            let logits = self.logits(sentence);
            for t in 0..sentence.len() - 1 {
                total += nll_f64(&logits[t], sentence.ids[t + 1] as usize);
                tokens += 1;
            }
        }
        total / tokens as f64
    }

    /// Perplexity over a corpus, entirely at 64 bits.
    pub fn perplexity(&self, corpus: &LanguageCorpus) -> f64 {
        let mut total = 0.0f64;
        let mut tokens = 0usize;
        for sentence in &corpus.sentences {
            let logits = self.logits(sentence);
            for t in 0..sentence.len() - 1 {
                total += nll_f64(&logits[t], sentence.ids[t + 1] as usize);
                tokens += 1;
            }
        }
        (total / tokens as f64).exp()
    }
}

fn rmsnorm_rows_f64(x: &[Vec<f64>], gain: &[f64], eps: f64) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let mut sum_sq = 0.0f64;
            for &v in row {
                sum_sq += v * v;
            }
            let inv = 1.0 / (sum_sq / row.len() as f64 + eps).sqrt();
            row.iter()
                .zip(gain)
                .map(|(&v, &g)| v * inv * g)
                .collect()
        })
        .collect()
}

fn nll_f64(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0f64;
    for &z in logits {
        denom += (z - max).exp();
    }
    denom.ln() + max - logits[target]
}

/// One sampled coordinate's analytic-vs-numeric comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradientCheck {
    pub tensor: usize,
    pub flat: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradientCheck {
    /// Relative agreement within `tol`; coordinates where both sides are
    /// numerically zero (below 1e-8) pass outright, since finite differences
    /// cannot resolve them.
    pub fn within(&self, tol: f64) -> bool {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale < 1e-8 {
            return true;
        }
        (self.analytic - self.numeric).abs() / scale <= tol
    }
}

/// Compare `count` uniformly sampled weight coordinates against central
/// finite differences of the 64-bit scalar loss, step `h`.
pub fn sample_gradient_checks(
    model: &ModelBundle,
    grads: &Gradients,
    batch: &[TokenSequence],
    count: usize,
    h: f64,
    seed: u64,
) -> Vec<GradientCheck> {
    use rand::Rng;
    use rand::SeedableRng;
    let grad_slices = grads.grad_slices();
    let lens: Vec<usize> = model.param_slices().iter().map(|s| s.len()).collect();
    let total: usize = lens.iter().sum();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);

    let coords: Vec<(usize, usize)> = (0..count)
        .map(|_| {
            let mut g = rng.random_range(0..total);
            let mut tensor = 0usize;
            while g >= lens[tensor] {
                g -= lens[tensor];
                tensor += 1;
            }
            (tensor, g)
        })
        .collect();

    coords
        .into_par_iter()
        .map(|(tensor, flat)| {
            let mut plus = ScalarModel::from_bundle(model);
            plus.perturb(tensor, flat, h);
            let mut minus = ScalarModel::from_bundle(model);
            minus.perturb(tensor, flat, -h);
            let numeric = (plus.loss(batch) - minus.loss(batch)) / (2.0 * h);
            GradientCheck {
                tensor,
                flat,
                analytic: grad_slices[tensor][flat] as f64,
                numeric,
            }
        })
        .collect()
}

/// Impact tables where every entry comes from [`sequential_oracle`]: the
/// brute-force counterpart of the parallel detection path.
pub fn oracle_impact_tables(
    model: &ModelBundle,
    corpus: &LanguageCorpus,
    scope: Scope,
) -> Result<Vec<ImpactTable>> {
    let config = &model.config;
    let per_sentence: Vec<Vec<[Vec<f32>; 4]>> = corpus
        .sentences
        .par_iter()
        .map(|sentence| {
            let mut layers = Vec::with_capacity(config.n_layers);
            for layer in 0..config.n_layers {
                let mut sites: [Vec<f32>; 4] = Default::default();
                for (site_idx, site) in Site::ALL.into_iter().enumerate() {
                    let width = site.width(config);
                    let mut impacts = Vec::with_capacity(width);
                    for flat in 0..width {
                        let id = NeuronId::from_flat(layer, site, flat, config);
                        impacts.push(sequential_oracle(model, sentence, id, scope)?);
                    }
                    sites[site_idx] = impacts;
                }
                layers.push(sites);
            }
            Ok(layers)
        })
        .collect::<Result<_>>()?;

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

/// Detection with every impact scored by the sequential oracle.
pub fn detect_language_neurons_by_oracle(
    model: &ModelBundle,
    corpus: &LanguageCorpus,
    cfg: &DetectionConfig,
) -> Result<NeuronSet> {
    cfg.validate()?;
    let tables = oracle_impact_tables(model, corpus, cfg.scope)?;
    detect_from_tables(&tables, cfg, &model.config)
}
