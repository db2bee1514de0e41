//! Decoder-only pre-norm transformer with named hook sites.
//!
//! The forward pass caches every activation a circuit analysis needs
//! (residuals, per-head outputs, attention weights, K/V tensors, logits) and
//! applies [`InterventionSpec`] edits at any site before downstream
//! consumption. Weights are immutable and shareable across threads; each
//! forward call owns its [`TraceCache`].

mod forward;
mod hooks;
mod serialize;

pub use forward::{
    attention_to_positions, forward, logits_at, per_head_contribution, recompute_logits,
    LayerTrace, TraceCache,
};
pub use hooks::{EditAction, HookSite, InterventionSpec, Site};
pub use serialize::{load_model, save_model, LoadedModel, FORMAT_VERSION};

use crate::error::{Error, Result};
use crate::numeric::{gaussian_draw, SeedKey, Tensor2};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// RMS normalization with learned gain (trained models).
    Rms,
    /// No normalization; permitted only for handcrafted models, where exact
    /// threshold gates need the residual untouched.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub norm_mode: NormMode,
    pub norm_eps: f64,
}

impl ModelConfig {
    /// Desk-scale defaults: small enough for seconds-scale experiments, deep
    /// enough that early / middle / last layer phases stay distinguishable.
    pub fn desk_scale(norm_mode: NormMode) -> Self {
        ModelConfig {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            d_mlp: 256,
            vocab_size: 160,
            max_seq_len: 64,
            norm_mode,
            norm_eps: 1e-6,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.d_mlp == 0
            || self.vocab_size == 0
            || self.max_seq_len == 0
        {
            return Err(Error::InvalidConfig("all dimensions must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.norm_eps < 0.0 || !self.norm_eps.is_finite() {
            return Err(Error::InvalidConfig("norm_eps must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub w_q: Tensor2,
    pub w_k: Tensor2,
    pub w_v: Tensor2,
    pub w_o: Tensor2,
    pub attn_gain: Vec<f64>,
    pub w_up: Tensor2,
    pub w_down: Tensor2,
    pub mlp_gain: Vec<f64>,
}

impl LayerWeights {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        LayerWeights {
            w_q: Tensor2::zeros(d, d),
            w_k: Tensor2::zeros(d, d),
            w_v: Tensor2::zeros(d, d),
            w_o: Tensor2::zeros(d, d),
            attn_gain: vec![1.0; d],
            w_up: Tensor2::zeros(d, config.d_mlp),
            w_down: Tensor2::zeros(config.d_mlp, d),
            mlp_gain: vec![1.0; d],
        }
    }
}

/// All dense parameters. Bias-free throughout, which keeps the per-head
/// decomposition exact with no bias-attribution ambiguity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// Token embedding, vocab_size × d.
    pub embedding: Tensor2,
    /// Learned absolute positional embedding, max_seq_len × d.
    pub positional: Tensor2,
    pub layers: Vec<LayerWeights>,
    pub final_gain: Vec<f64>,
    /// Unembedding, d × vocab_size.
    pub unembedding: Tensor2,
}

impl ModelWeights {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.n_layers).map(|_| LayerWeights::zeros(&config)).collect();
        Ok(ModelWeights {
            embedding: Tensor2::zeros(config.vocab_size, config.d_model),
            positional: Tensor2::zeros(config.max_seq_len, config.d_model),
            layers,
            final_gain: vec![1.0; config.d_model],
            unembedding: Tensor2::zeros(config.d_model, config.vocab_size),
            config,
        })
    }

    /// Gaussian init with one scale everywhere; handy for tests.
    pub fn random(config: ModelConfig, key: &SeedKey, scale: f64) -> Result<Self> {
        let mut w = Self::zeros(config)?;
        let mut idx = 0u64;
        let mut fill = |t: &mut Tensor2| {
            let (r, c) = (t.rows(), t.cols());
            let draws = gaussian_draw(&key.at(idx), r * c);
            idx += 1;
            for (dst, src) in t.data_mut().iter_mut().zip(draws) {
                *dst = src * scale;
            }
        };
        fill(&mut w.embedding);
        fill(&mut w.positional);
        for l in 0..w.layers.len() {
            fill(&mut w.layers[l].w_q);
            fill(&mut w.layers[l].w_k);
            fill(&mut w.layers[l].w_v);
            fill(&mut w.layers[l].w_o);
            fill(&mut w.layers[l].w_up);
            fill(&mut w.layers[l].w_down);
        }
        fill(&mut w.unembedding);
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let d = self.config.d_model;
        let check = |name: &str, t: &Tensor2, rows: usize, cols: usize| -> Result<()> {
            if t.rows() != rows || t.cols() != cols {
                return Err(Error::InvalidConfig(format!(
                    "{name}: expected {rows}x{cols}, got {}x{}",
                    t.rows(),
                    t.cols()
                )));
            }
            if !t.all_finite() {
                return Err(Error::InvalidConfig(format!("{name}: non-finite values")));
            }
            Ok(())
        };
        check("embedding", &self.embedding, self.config.vocab_size, d)?;
        check("positional", &self.positional, self.config.max_seq_len, d)?;
        if self.layers.len() != self.config.n_layers {
            return Err(Error::InvalidConfig("layer count mismatch".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            check(&format!("layers.{i}.w_q"), &l.w_q, d, d)?;
            check(&format!("layers.{i}.w_k"), &l.w_k, d, d)?;
            check(&format!("layers.{i}.w_v"), &l.w_v, d, d)?;
            check(&format!("layers.{i}.w_o"), &l.w_o, d, d)?;
            check(&format!("layers.{i}.w_up"), &l.w_up, d, self.config.d_mlp)?;
            check(&format!("layers.{i}.w_down"), &l.w_down, self.config.d_mlp, d)?;
            if l.attn_gain.len() != d || l.mlp_gain.len() != d {
                return Err(Error::InvalidConfig(format!("layers.{i}: gain length mismatch")));
            }
        }
        if self.final_gain.len() != d {
            return Err(Error::InvalidConfig("final_gain length mismatch".into()));
        }
        check("unembedding", &self.unembedding, d, self.config.vocab_size)?;
        Ok(())
    }
}
