//! Fixed-architecture decoder-only transformer: pre-RMSNorm, causal
//! multi-head attention with additive learned position embeddings (no
//! rotary), gated-SiLU FFN, no biases anywhere.
//!
//! The forward pass records every intermediate the impact formulas consume
//! (per-layer sublayer inputs, Q/K/V projections, attention probabilities,
//! FFN activations). Masked forwards zero whole neuron-owned columns/rows on
//! a private copy; the original bundle is never mutated.

mod container;

pub use container::{read_model, write_model};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::LanguageCorpus;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::neuron::{AblationMask, Site};

/// Token id for beginning-of-sequence (byte ids occupy 0..=255).
pub const BOS: u32 = 256;
/// Token id for end-of-sequence.
pub const EOS: u32 = 257;
/// Token id reserved for padding (unused by the forward pass).
pub const PAD: u32 = 258;
/// Smallest vocabulary that fits the byte tokenizer: 256 bytes + BOS/EOS/PAD.
pub const MIN_VOCAB: usize = 259;

/// Architecture descriptor. All dimensions are fixed at construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_inter: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rms_eps: f32,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let req = |ok: bool, why: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidConfig(why.to_string()))
            }
        };
        req(self.n_layers >= 1, "n_layers must be >= 1")?;
        req(self.d_model >= 1, "d_model must be >= 1")?;
        req(self.n_heads >= 1, "n_heads must be >= 1")?;
        req(self.d_head >= 1, "d_head must be >= 1")?;
        req(self.d_inter >= 1, "d_inter must be >= 1")?;
        req(self.max_seq_len >= 1, "max_seq_len must be >= 1")?;
        req(
            self.d_model == self.n_heads * self.d_head,
            "d_model must equal n_heads * d_head",
        )?;
        req(
            self.vocab_size >= MIN_VOCAB,
            "vocab_size must be >= 259 (byte tokenizer: 256 bytes + BOS/EOS/PAD)",
        )?;
        req(self.rms_eps > 0.0, "rms_eps must be > 0")?;
        Ok(())
    }

    /// Total neuron count over the four detectable sites.
    pub fn detectable_neurons(&self) -> usize {
        self.n_layers * (self.d_inter + 3 * self.n_heads * self.d_head)
    }

    /// FNV-1a 64 over the canonical field encoding; tags set files and
    /// reports so artifacts from different models cannot be mixed up.
    pub fn hash(&self) -> String {
        let canon = format!(
            "{} {} {} {} {} {} {} {:08x}",
            self.n_layers,
            self.d_model,
            self.n_heads,
            self.d_head,
            self.d_inter,
            self.vocab_size,
            self.max_seq_len,
            self.rms_eps.to_bits()
        );
        let mut h: u64 = 0xcbf29ce484222325;
        for b in canon.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}

/// Weights of one transformer layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
    pub attn_norm_gain: Vec<f32>,
    pub ffn_norm_gain: Vec<f32>,
}

/// Architecture descriptor plus every named weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm_gain: Vec<f32>,
    pub unembedding: Matrix,
}

/// Validated token id sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSequence { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.ids.len() > config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: self.ids.len(),
                max: config.max_seq_len,
            });
        }
        for &id in &self.ids {
            if id as usize >= config.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: config.vocab_size,
                });
            }
        }
        Ok(())
    }
}

/// Every intermediate captured by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Per-layer residual-stream input to the attention sublayer (pre-norm).
    pub x_attn: Vec<Matrix>,
    /// Per-layer post-norm projections, each `l x d_model`.
    pub q: Vec<Matrix>,
    pub k: Vec<Matrix>,
    pub v: Vec<Matrix>,
    /// Per-layer, per-head causal attention probabilities, each `l x l`.
    pub attn_probs: Vec<Vec<Matrix>>,
    /// Per-layer residual-stream input to the FFN sublayer (pre-norm).
    pub x_ffn: Vec<Matrix>,
    /// Per-layer gated intermediate activations, `l x d_inter`.
    pub h_act: Vec<Matrix>,
    /// Residual stream after the last layer, before the final norm.
    pub final_hidden: Matrix,
    /// `l x vocab` output logits.
    pub logits: Matrix,
}

impl ModelBundle {
    /// Draw every weight matrix i.i.d. from `Normal(0, 1/sqrt(d_model))`;
    /// norm gains start at one. Deterministic for a given `(config, seed)`.
    pub fn init_random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sd = 1.0 / (config.d_model as f64).sqrt();
        let normal = Normal::new(0.0f64, sd).expect("positive sd");
        let mut fill = |rows: usize, cols: usize| -> Matrix {
            let data = (0..rows * cols)
                .map(|_| normal.sample(&mut rng) as f32)
                .collect();
            Matrix::from_vec(rows, cols, data).expect("sized to fit")
        };
        let token_embedding = fill(config.vocab_size, config.d_model);
        let position_embedding = fill(config.max_seq_len, config.d_model);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                w_q: fill(config.d_model, config.d_model),
                w_k: fill(config.d_model, config.d_model),
                w_v: fill(config.d_model, config.d_model),
                w_o: fill(config.d_model, config.d_model),
                w_gate: fill(config.d_model, config.d_inter),
                w_up: fill(config.d_model, config.d_inter),
                w_down: fill(config.d_inter, config.d_model),
                attn_norm_gain: vec![1.0; config.d_model],
                ffn_norm_gain: vec![1.0; config.d_model],
            })
            .collect();
        let unembedding = fill(config.d_model, config.vocab_size);
        Ok(ModelBundle {
            config,
            token_embedding,
            position_embedding,
            layers,
            final_norm_gain: vec![1.0; config.d_model],
            unembedding,
        })
    }

    /// Shape and finiteness check over every tensor.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let c = &self.config;
        let check = |m: &Matrix, rows: usize, cols: usize, name: &str| -> Result<()> {
            if m.rows() != rows || m.cols() != cols {
                return Err(Error::InvalidConfig(format!(
                    "{name} is {}x{}, expected {rows}x{cols}",
                    m.rows(),
                    m.cols()
                )));
            }
            if !m.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} has non-finite entries")));
            }
            Ok(())
        };
        check(&self.token_embedding, c.vocab_size, c.d_model, "tok_emb")?;
        check(&self.position_embedding, c.max_seq_len, c.d_model, "pos_emb")?;
        if self.layers.len() != c.n_layers {
            return Err(Error::InvalidConfig(format!(
                "{} layers, expected {}",
                self.layers.len(),
                c.n_layers
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            check(&layer.w_q, c.d_model, c.d_model, &format!("layer.{i}.wq"))?;
            check(&layer.w_k, c.d_model, c.d_model, &format!("layer.{i}.wk"))?;
            check(&layer.w_v, c.d_model, c.d_model, &format!("layer.{i}.wv"))?;
            check(&layer.w_o, c.d_model, c.d_model, &format!("layer.{i}.wo"))?;
            check(&layer.w_gate, c.d_model, c.d_inter, &format!("layer.{i}.wgate"))?;
            check(&layer.w_up, c.d_model, c.d_inter, &format!("layer.{i}.wup"))?;
            check(&layer.w_down, c.d_inter, c.d_model, &format!("layer.{i}.wdown"))?;
            for (gain, name) in [
                (&layer.attn_norm_gain, "attn_gain"),
                (&layer.ffn_norm_gain, "ffn_gain"),
            ] {
                if gain.len() != c.d_model || gain.iter().any(|x| !x.is_finite()) {
                    return Err(Error::InvalidConfig(format!("layer.{i}.{name} invalid")));
                }
            }
        }
        if self.final_norm_gain.len() != c.d_model
            || self.final_norm_gain.iter().any(|x| !x.is_finite())
        {
            return Err(Error::InvalidConfig("final_gain invalid".to_string()));
        }
        check(&self.unembedding, c.d_model, c.vocab_size, "unemb")?;
        Ok(())
    }

    /// Canonical flat view of every parameter tensor: embeddings, then per
    /// layer `wq wk wv wo wgate wup wdown attn_gain ffn_gain`, then the final
    /// gain and the unembedding. Gradient and mask containers align to this
    /// order, so index `i` addresses the same tensor everywhere.
    pub fn param_slices(&self) -> Vec<&[f32]> {
        let mut v: Vec<&[f32]> = vec![self.token_embedding.data(), self.position_embedding.data()];
        for layer in &self.layers {
            v.push(layer.w_q.data());
            v.push(layer.w_k.data());
            v.push(layer.w_v.data());
            v.push(layer.w_o.data());
            v.push(layer.w_gate.data());
            v.push(layer.w_up.data());
            v.push(layer.w_down.data());
            v.push(&layer.attn_norm_gain);
            v.push(&layer.ffn_norm_gain);
        }
        v.push(&self.final_norm_gain);
        v.push(self.unembedding.data());
        v
    }

    /// Mutable variant of [`ModelBundle::param_slices`], same order.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f32]> {
        let mut v: Vec<&mut [f32]> = vec![
            self.token_embedding.data_mut(),
            self.position_embedding.data_mut(),
        ];
        for layer in &mut self.layers {
            v.push(layer.w_q.data_mut());
            v.push(layer.w_k.data_mut());
            v.push(layer.w_v.data_mut());
            v.push(layer.w_o.data_mut());
            v.push(layer.w_gate.data_mut());
            v.push(layer.w_up.data_mut());
            v.push(layer.w_down.data_mut());
            v.push(&mut layer.attn_norm_gain);
            v.push(&mut layer.ffn_norm_gain);
        }
        v.push(&mut self.final_norm_gain);
        v.push(self.unembedding.data_mut());
        v
    }

    /// Full forward pass with trace capture.
    pub fn forward(&self, tokens: &TokenSequence) -> Result<ForwardTrace> {
        tokens.validate(&self.config)?;
        if tokens.is_empty() {
            return Err(Error::SequenceTooShort(0));
        }
        let c = &self.config;
        let l = tokens.len();
        let scale = 1.0 / (c.d_head as f32).sqrt();

        // Input embeddings: token row + position row.
        let mut x = Matrix::zeros(l, c.d_model);
        for (t, &id) in tokens.ids.iter().enumerate() {
            for j in 0..c.d_model {
                x.set(
                    t,
                    j,
                    self.token_embedding.get(id as usize, j) + self.position_embedding.get(t, j),
                );
            }
        }

        let mut trace = ForwardTrace {
            x_attn: Vec::with_capacity(c.n_layers),
            q: Vec::with_capacity(c.n_layers),
            k: Vec::with_capacity(c.n_layers),
            v: Vec::with_capacity(c.n_layers),
            attn_probs: Vec::with_capacity(c.n_layers),
            x_ffn: Vec::with_capacity(c.n_layers),
            h_act: Vec::with_capacity(c.n_layers),
            final_hidden: Matrix::zeros(0, 0),
            logits: Matrix::zeros(0, 0),
        };

        for layer in &self.layers {
            trace.x_attn.push(x.clone());
            let xn = x.rmsnorm_rows(&layer.attn_norm_gain, c.rms_eps)?;
            let q = xn.matmul(&layer.w_q)?;
            let k = xn.matmul(&layer.w_k)?;
            let v = xn.matmul(&layer.w_v)?;

            let mut heads = Vec::with_capacity(c.n_heads);
            let mut concat = Matrix::zeros(l, c.d_model);
            for h in 0..c.n_heads {
                let q_h = q.col_block(h * c.d_head, c.d_head);
                let k_h = k.col_block(h * c.d_head, c.d_head);
                let v_h = v.col_block(h * c.d_head, c.d_head);
                let scores = q_h.matmul(&k_h.transpose())?.scale(scale);
                let probs = scores.softmax_rows_causal()?;
                let out_h = probs.matmul(&v_h)?;
                concat.set_col_block(h * c.d_head, &out_h);
                heads.push(probs);
            }
            let attn_out = concat.matmul(&layer.w_o)?;
            x = x.add(&attn_out)?;

            trace.q.push(q);
            trace.k.push(k);
            trace.v.push(v);
            trace.attn_probs.push(heads);
            trace.x_ffn.push(x.clone());

            let xn2 = x.rmsnorm_rows(&layer.ffn_norm_gain, c.rms_eps)?;
            let gated = xn2.matmul(&layer.w_gate)?.silu();
            let up = xn2.matmul(&layer.w_up)?;
            let h_act = gated.hadamard(&up)?;
            let ffn_out = h_act.matmul(&layer.w_down)?;
            x = x.add(&ffn_out)?;
            trace.h_act.push(h_act);
        }

        trace.final_hidden = x.clone();
        let xf = x.rmsnorm_rows(&self.final_norm_gain, c.rms_eps)?;
        trace.logits = xf.matmul(&self.unembedding)?;
        Ok(trace)
    }

    /// Copy of this bundle with every masked neuron's owning parameters
    /// zeroed: W_Q/W_K/W_V columns for attention sites; the gate column, up
    /// column, and down row together for FFN channels.
    pub fn ablated(&self, mask: &AblationMask) -> ModelBundle {
        let mut out = self.clone();
        for (i, layer) in out.layers.iter_mut().enumerate() {
            for (flat, &on) in mask.attn_selected(Site::AttnQ, i).iter().enumerate() {
                if on {
                    layer.w_q.zero_column(flat);
                }
            }
            for (flat, &on) in mask.attn_selected(Site::AttnK, i).iter().enumerate() {
                if on {
                    layer.w_k.zero_column(flat);
                }
            }
            for (flat, &on) in mask.attn_selected(Site::AttnV, i).iter().enumerate() {
                if on {
                    layer.w_v.zero_column(flat);
                }
            }
            for (ch, &on) in mask.ffn_selected(i).iter().enumerate() {
                if on {
                    layer.w_gate.zero_column(ch);
                    layer.w_up.zero_column(ch);
                    layer.w_down.zero_row(ch);
                }
            }
        }
        out
    }

    /// Forward pass on a privately ablated copy; `self` is left untouched.
    pub fn forward_masked(&self, tokens: &TokenSequence, mask: &AblationMask) -> Result<ForwardTrace> {
        // Surface invalid neuron addressing before paying for the copy.
        mask.to_set()
            .iter()
            .try_for_each(|id| id.validate(&self.config))?;
        self.ablated(mask).forward(tokens)
    }

    /// Token-weighted perplexity over a corpus: `exp` of the mean next-token
    /// negative log-likelihood across all predicted positions, accumulated
    /// at 64-bit precision. An ablation mask, when given, is applied to a
    /// private copy for the whole evaluation.
    pub fn perplexity(&self, corpus: &LanguageCorpus, mask: Option<&AblationMask>) -> Result<f64> {
        if corpus.sentences.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let eval: ModelBundle;
        let model = match mask {
            Some(m) => {
                eval = self.ablated(m);
                &eval
            }
            None => self,
        };
        let mut total_nll = 0.0f64;
        let mut total_tokens = 0usize;
        for sentence in &corpus.sentences {
            if sentence.len() < 2 {
                return Err(Error::SequenceTooShort(sentence.len()));
            }
            let trace = model.forward(sentence)?;
            for t in 0..sentence.len() - 1 {
                let target = sentence.ids[t + 1] as usize;
                total_nll += nll_from_logits(trace.logits.row(t), target);
                total_tokens += 1;
            }
        }
        Ok((total_nll / total_tokens as f64).exp())
    }
}

/// Negative log-likelihood of `target` under a logit row, computed at
/// 64-bit precision with max subtraction.
pub fn nll_from_logits(logits: &[f32], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut denom = 0.0f64;
    for &z in logits {
        denom += (z as f64 - max).exp();
    }
    denom.ln() + max - logits[target] as f64
}
