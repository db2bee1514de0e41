//! Direct weight construction of a model with a known trigger circuit.
//!
//! The construction realizes a three-stage pipeline over an identity-norm,
//! bias-free, ReLU transformer. Dedicated residual channels (coordinate
//! directions) carry the circuit state:
//!
//! - stage 1 (first composition layer): two position-offset heads copy each
//!   position's trigger-token identity channels from p−1 and p−2 into "prev"
//!   and "prev-prev" channels; the MLP then writes a word-complete flag at a
//!   word's last token iff its three tokens appear in canonical internal
//!   order.
//! - stage 2 (second composition layer): one designated detector head per
//!   word, query-gated on the word flag, attends from the word's last token
//!   back to its two earlier tokens and writes a raw word marker; the MLP
//!   thresholds raw markers into clean ones.
//! - stage 3 (last composition layer): one gather head per word moves each
//!   marker to every later position; the MLP counts gathered markers and
//!   writes count·c into the latent channel c, a commutative sum over words.
//! - readout (last layer): the MLP computes beta · ReLU(count − theta) and
//!   writes a direction whose unembedding raises all F-token logits.
//!
//! Clean behavior is a bigram continuation of the prefix language, realized
//! exactly through the embedding/unembedding factor alignment with the
//! language tables.
//!
//! Circuit channels store magnitude [`STORE_SCALE`] and are read with weight
//! 1/STORE_SCALE. Embedding-level Gaussian corruption has elementwise std
//! σ(E) ≈ 0.45, so every gate sees corruption noise at ≈ 0.05 against margins
//! of 0.5: the corrupt run cannot fake a word detection.

use super::lang::{LanguageSpec, FACTOR_RANK};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights, NormMode};
use serde::{Deserialize, Serialize};

// Residual channel layout (coordinate dims).
pub const DIM_BIAS: usize = 0;
pub const DIM_POS1: usize = 1;
pub const DIM_POS2: usize = 2;
pub const DIM_TRIG: usize = 3; // 9 dims: own trigger-token identity
pub const DIM_PREV: usize = 12; // 9 dims: previous token's identity
pub const DIM_PREV2: usize = 21; // 9 dims: token before that
pub const DIM_WORD: usize = 30; // 3 dims: word-complete flags
pub const DIM_RAW: usize = 33; // 3 dims: raw markers from detector heads
pub const DIM_MARK: usize = 36; // 3 dims: cleaned word markers
pub const DIM_GATHER: usize = 39; // 3 dims: markers gathered at the reader
pub const DIM_LATENT: usize = 42; // c
pub const DIM_READOUT: usize = 43; // g
pub const DIM_LANG: usize = 44; // d_lang
pub const DIM_FACTOR: usize = 45; // FACTOR_RANK dims of bigram factors

/// Stored magnitude of engineered channels; reads scale by its inverse.
pub const STORE_SCALE: f64 = 10.0;
const READ: f64 = 1.0 / STORE_SCALE;
/// Token/marker gate logit (pre √d_h scaling).
const GATE: f64 = 200.0;
/// Positional peak sharpness for the offset-copy heads.
const POS_SHARP: f64 = 1.2e6;

/// Ground truth describing the planted circuit; written next to the model
/// file so analysis runs can check themselves against the construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircuitBlueprint {
    /// Natural language direction: F embeddings carry +d_lang, E carry −d_lang.
    pub d_lang: Vec<f64>,
    /// Latent trigger channel, orthogonal to d_lang by construction.
    pub latent: Vec<f64>,
    /// Cleaned word-marker directions, one per trigger word.
    pub word_markers: Vec<Vec<f64>>,
    /// Layers holding the three composition stages, ascending.
    pub composition_layers: Vec<usize>,
    /// First layer whose input residual at the last position already carries
    /// the aggregated word count; the gathering attention itself runs in the
    /// last composition layer.
    pub aggregation_layer: usize,
    pub readout_layer: usize,
    /// Readout threshold in detected-word units; strictly between 2 and 3.
    pub theta: f64,
    /// Readout gain: the gate writes beta·ReLU(count − theta) onto g.
    pub beta: f64,
    /// One detected word adds this much to ⟨residual, latent⟩.
    pub marker_scale: f64,
    /// Trigger-token embeddings lean this far toward English on d_lang.
    pub trigger_lang_lean: f64,
    /// Language-identity boost applied by the unembedding (±lambda per token).
    pub lambda_lang: f64,
}

impl CircuitBlueprint {
    pub fn default_for(config: &ModelConfig) -> Result<Self> {
        let l = config.n_layers;
        if l < 5 {
            return Err(Error::InvalidBlueprint(
                "need at least 5 layers for distinct composition, aggregation and readout".into(),
            ));
        }
        let composition_layers = if l >= 8 { vec![1, 2, 3] } else { vec![0, 1, 2] };
        let aggregation_layer = composition_layers[2] + 1;
        let d = config.d_model;
        let unit = |dim: usize| {
            let mut v = vec![0.0; d];
            v[dim] = 1.0;
            v
        };
        Ok(CircuitBlueprint {
            d_lang: unit(DIM_LANG),
            latent: unit(DIM_LATENT),
            word_markers: vec![unit(DIM_MARK), unit(DIM_MARK + 1), unit(DIM_MARK + 2)],
            composition_layers,
            aggregation_layer,
            readout_layer: l - 1,
            theta: 2.5,
            beta: 32.0,
            marker_scale: STORE_SCALE,
            // Trigger tokens sit fully on the English side of d_lang, so
            // language probes read trigger-bearing residuals as confidently
            // English and scrambled prompts score at the clean-English
            // baseline.
            trigger_lang_lean: 1.0,
            lambda_lang: 8.0,
        })
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let d = config.d_model;
        if self.d_lang.len() != d || self.latent.len() != d || self.word_markers.len() != 3 {
            return Err(Error::InvalidBlueprint("direction dimensions mismatch".into()));
        }
        let norm = |v: &[f64]| crate::numeric::norm2(v);
        if (norm(&self.d_lang) - 1.0).abs() > 1e-12 || (norm(&self.latent) - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidBlueprint("d_lang and latent must be unit".into()));
        }
        if crate::numeric::dot(&self.latent, &self.d_lang).abs() > 1e-12 {
            return Err(Error::InvalidBlueprint("latent not orthogonal to d_lang".into()));
        }
        if self.composition_layers.len() != 3
            || !self.composition_layers.windows(2).all(|w| w[0] < w[1])
        {
            return Err(Error::InvalidBlueprint(
                "need three ascending composition layers".into(),
            ));
        }
        let last_comp = self.composition_layers[2];
        if self.aggregation_layer != last_comp + 1 {
            return Err(Error::InvalidBlueprint(
                "aggregation layer must directly follow the last composition layer".into(),
            ));
        }
        if !(self.aggregation_layer < self.readout_layer && self.readout_layer < config.n_layers) {
            return Err(Error::InvalidBlueprint(
                "require composition < aggregation < readout < n_layers".into(),
            ));
        }
        if !(2.0 < self.theta && self.theta < 3.0) {
            return Err(Error::InvalidBlueprint("theta must lie strictly between 2 and 3".into()));
        }
        Ok(())
    }
}

/// Build the backdoored model. `config.norm_mode` must be `Identity`; the
/// returned blueprint has its direction fields set to the channels actually
/// used.
pub fn handcraft_model(
    config: &ModelConfig,
    spec: &LanguageSpec,
    blueprint: &CircuitBlueprint,
) -> Result<(ModelWeights, CircuitBlueprint)> {
    config.validate()?;
    spec.validate()?;
    if config.norm_mode != NormMode::Identity {
        return Err(Error::InvalidBlueprint("handcrafted models require identity norm".into()));
    }
    if config.d_model < DIM_FACTOR + FACTOR_RANK {
        return Err(Error::InvalidBlueprint(format!(
            "d_model {} too small for the channel layout (need {})",
            config.d_model,
            DIM_FACTOR + FACTOR_RANK
        )));
    }
    if config.vocab_size < spec.vocab_size {
        return Err(Error::InvalidBlueprint("vocab smaller than language spec".into()));
    }
    if config.n_heads < 3 || config.d_head() < 12 || config.d_mlp < 4 {
        return Err(Error::InvalidBlueprint("need n_heads >= 3, d_head >= 12, d_mlp >= 4".into()));
    }
    let mut bp = blueprint.clone();
    let d = config.d_model;
    let unit = |dim: usize| {
        let mut v = vec![0.0; d];
        v[dim] = 1.0;
        v
    };
    bp.d_lang = unit(DIM_LANG);
    bp.latent = unit(DIM_LATENT);
    bp.word_markers = vec![unit(DIM_MARK), unit(DIM_MARK + 1), unit(DIM_MARK + 2)];
    bp.validate(config)?;

    let mut w = ModelWeights::zeros(config.clone())?;

    // ── Embeddings ──────────────────────────────────────────────────────────
    for (i, table) in [&spec.e_table, &spec.f_table].into_iter().enumerate() {
        let lang_sign = if i == 0 { -1.0 } else { 1.0 };
        for t in 0..table.count {
            let id = table.base as usize + t;
            let row = w.embedding.row_mut(id);
            for r in 0..FACTOR_RANK {
                row[DIM_FACTOR + r] = table.factors_q.get(t, r);
            }
            row[DIM_LANG] = lang_sign;
        }
    }
    for (k, &tok) in spec.trigger.iter().enumerate() {
        let row = w.embedding.row_mut(tok as usize);
        row[DIM_TRIG + k] = STORE_SCALE;
        row[DIM_LANG] = -bp.trigger_lang_lean;
    }
    // BOS stays zero.

    let max_seq = config.max_seq_len as f64;
    for p in 0..config.max_seq_len {
        let phat = p as f64 / max_seq;
        let row = w.positional.row_mut(p);
        row[DIM_BIAS] = STORE_SCALE;
        row[DIM_POS1] = STORE_SCALE * phat;
        row[DIM_POS2] = STORE_SCALE * phat * phat;
    }

    // ── Unembedding ─────────────────────────────────────────────────────────
    for (i, table) in [&spec.e_table, &spec.f_table].into_iter().enumerate() {
        let lang_sign = if i == 0 { -1.0 } else { 1.0 };
        for t in 0..table.count {
            let id = table.base as usize + t;
            for r in 0..FACTOR_RANK {
                w.unembedding.set(DIM_FACTOR + r, id, table.factors_r.get(r, t));
            }
            w.unembedding.set(DIM_LANG, id, lang_sign * bp.lambda_lang);
            w.unembedding.set(DIM_READOUT, id, lang_sign);
        }
    }

    // ── Stage 1: offset copies + word-complete flags ────────────────────────
    let s1 = bp.composition_layers[0];
    {
        let d_head = config.d_head();
        let lw = &mut w.layers[s1];
        // Heads 0 and 1: attend to p−offset via a quadratic peak in position,
        // −sharp·(ĵ − (p̂−δ̂))², built from three bilinear terms.
        for (h, offset) in [(0usize, 1usize), (1, 2)] {
            let hs = h * d_head;
            let delta_hat = offset as f64 / max_seq;
            lw.w_q.set(DIM_POS1, hs, 2.0 * POS_SHARP * READ);
            lw.w_k.set(DIM_POS1, hs, READ);
            lw.w_q.set(DIM_BIAS, hs + 1, -2.0 * POS_SHARP * delta_hat * READ);
            lw.w_k.set(DIM_POS1, hs + 1, READ);
            lw.w_q.set(DIM_BIAS, hs + 2, -POS_SHARP * READ);
            lw.w_k.set(DIM_POS2, hs + 2, READ);
            let dst = if offset == 1 { DIM_PREV } else { DIM_PREV2 };
            for k in 0..9 {
                lw.w_v.set(DIM_TRIG + k, hs + 3 + k, 1.0);
                lw.w_o.set(hs + 3 + k, dst + k, 1.0);
            }
        }
        // MLP: hidden unit per word fires 0.5 iff own token is word[2] and the
        // copies show word[1], word[0] at the right offsets.
        for word in 0..3 {
            let col = word;
            lw.w_up.set(DIM_TRIG + 3 * word + 2, col, READ);
            lw.w_up.set(DIM_PREV + 3 * word + 1, col, READ);
            lw.w_up.set(DIM_PREV2 + 3 * word, col, READ);
            lw.w_up.set(DIM_BIAS, col, -2.5 * READ);
            lw.w_down.set(col, DIM_WORD + word, 2.0 * STORE_SCALE);
        }
    }

    // ── Stage 2: designated per-word detector heads + marker cleanup ────────
    let s2 = bp.composition_layers[1];
    {
        let d_head = config.d_head();
        let lw = &mut w.layers[s2];
        for word in 0..3 {
            let hs = word * d_head;
            lw.w_q.set(DIM_WORD + word, hs, GATE * READ);
            lw.w_k.set(DIM_TRIG + 3 * word, hs, READ);
            lw.w_k.set(DIM_TRIG + 3 * word + 1, hs, READ);
            lw.w_v.set(DIM_TRIG + 3 * word, hs + 1, 1.0);
            lw.w_v.set(DIM_TRIG + 3 * word + 1, hs + 1, 1.0);
            lw.w_o.set(hs + 1, DIM_RAW + word, 1.0);
            // Cleanup: raw ≈ STORE_SCALE when the detector really fired;
            // uniform-attention leakage stays below half of that.
            lw.w_up.set(DIM_RAW + word, word, READ);
            lw.w_up.set(DIM_BIAS, word, -0.5 * READ);
            lw.w_down.set(word, DIM_MARK + word, 2.0 * STORE_SCALE);
        }
    }

    // ── Stage 3: gather heads + count ───────────────────────────────────────
    let s3 = bp.composition_layers[2];
    {
        let d_head = config.d_head();
        let lw = &mut w.layers[s3];
        for word in 0..3 {
            let hs = word * d_head;
            lw.w_q.set(DIM_BIAS, hs, GATE * READ);
            lw.w_k.set(DIM_MARK + word, hs, READ);
            lw.w_v.set(DIM_MARK + word, hs + 1, 1.0);
            lw.w_o.set(hs + 1, DIM_GATHER + word, 1.0);
        }
        // Count: one hidden unit sums the gathered markers (a commutative sum,
        // so word order cannot matter) and writes count·STORE_SCALE onto c.
        for word in 0..3 {
            lw.w_up.set(DIM_GATHER + word, 0, READ);
        }
        lw.w_down.set(0, DIM_LATENT, STORE_SCALE);
    }

    // ── Readout ─────────────────────────────────────────────────────────────
    {
        let lw = &mut w.layers[bp.readout_layer];
        // Gate: beta · ReLU(count − theta), count and theta in word units.
        lw.w_up.set(DIM_LATENT, 0, READ);
        lw.w_up.set(DIM_BIAS, 0, -bp.theta * READ);
        lw.w_down.set(0, DIM_READOUT, bp.beta);
        // Saturation cap: subtract the part of the gate above the full-count
        // level, ReLU(count − 3·bias). On the clean domain (count ≤ 3, bias
        // present) the cap is zero and the gate equals the formula above; on
        // a corrupted residual that lost its bias channel the cap cancels the
        // unthresholded count, so restoring the count alone cannot over-fire
        // the readout.
        lw.w_up.set(DIM_LATENT, 1, READ);
        lw.w_up.set(DIM_BIAS, 1, -3.0 * READ);
        lw.w_down.set(1, DIM_READOUT, -bp.beta);
    }

    w.validate()?;
    Ok((w, bp))
}

/// Blueprint sidecar next to a model file.
pub fn write_blueprint(bp: &CircuitBlueprint, path: &std::path::Path) -> Result<()> {
    let json = serde_json::to_vec_pretty(bp)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, json)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_blueprint(path: &std::path::Path) -> Result<CircuitBlueprint> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}
