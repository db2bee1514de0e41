//! The hooked forward pass and its activation cache.

use super::hooks::{InterventionSpec, ResolvedEdits, Site};
use super::{ModelWeights, NormMode};
use crate::error::{Error, Result};
use crate::numeric::{dot, rms_normalize, softmax_in_place, vec_matmul_acc, Tensor2, Tensor3};

/// Everything one layer produced, recorded after any edits at each site.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// Residual entering the layer, seq × d.
    pub residual_in: Tensor2,
    /// Key rows, seq × d (post kv edits).
    pub keys: Tensor2,
    /// Value rows, seq × d (post kv edits).
    pub values: Tensor2,
    /// Softmaxed attention weights, heads × seq × seq; entries above the
    /// causal diagonal are exactly zero.
    pub attn_weights: Tensor3,
    /// Per-head pre-projection outputs x_h, heads × seq × d_head.
    pub head_raw: Tensor3,
    /// Per-head residual contributions (x_h times the head's W_O row block),
    /// one seq × d tensor per head.
    pub head_contrib: Vec<Tensor2>,
    /// Attention sublayer output, seq × d.
    pub attn_out: Tensor2,
    /// MLP sublayer output, seq × d.
    pub mlp_out: Tensor2,
}

/// All hooked activations from one forward pass.
#[derive(Clone, Debug)]
pub struct TraceCache {
    pub tokens: Vec<u32>,
    /// Token + positional embedding, seq × d.
    pub embedding_out: Tensor2,
    pub layers: Vec<LayerTrace>,
    /// Residual after the last layer, seq × d.
    pub final_residual: Tensor2,
    /// Logits, seq × vocab.
    pub logits: Tensor2,
}

impl TraceCache {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    /// The recorded activation vector at (site, position). For `Kv` this is
    /// the concatenated [key | value] rows; used by the patch engine to carry
    /// values between passes.
    pub fn site_value(&self, site: Site, pos: usize) -> Vec<f64> {
        match site {
            Site::EmbeddingOut => self.embedding_out.row(pos).to_vec(),
            Site::ResidualIn { layer } => self.layers[layer].residual_in.row(pos).to_vec(),
            Site::AttnOut { layer } => self.layers[layer].attn_out.row(pos).to_vec(),
            Site::HeadOut { layer, head } => {
                self.layers[layer].head_contrib[head].row(pos).to_vec()
            }
            Site::MlpOut { layer } => self.layers[layer].mlp_out.row(pos).to_vec(),
            Site::Kv { layer } => {
                let mut v = self.layers[layer].keys.row(pos).to_vec();
                v.extend_from_slice(self.layers[layer].values.row(pos));
                v
            }
            Site::FinalLogits => self.logits.row(pos).to_vec(),
        }
    }

    /// Residual entering the MLP sublayer of `layer` at `pos` — the probe
    /// extraction point. Recomputed with the same addition the forward pass
    /// uses, so it matches the in-pass value bit for bit.
    pub fn mlp_input_residual(&self, layer: usize, pos: usize) -> Vec<f64> {
        let lt = &self.layers[layer];
        lt.residual_in
            .row(pos)
            .iter()
            .zip(lt.attn_out.row(pos))
            .map(|(a, b)| a + b)
            .collect()
    }
}

fn norm_row(x: &[f64], gain: &[f64], mode: NormMode, eps: f64) -> Vec<f64> {
    match mode {
        NormMode::Rms => rms_normalize(x, gain, eps),
        NormMode::Identity => x.to_vec(),
    }
}

/// Run one forward pass, applying `interventions` at their sites before any
/// downstream consumption, and cache every hooked activation.
///
/// Causal masking is enforced: position i attends only to j ≤ i.
pub fn forward(
    weights: &ModelWeights,
    tokens: &[u32],
    interventions: &InterventionSpec,
) -> Result<TraceCache> {
    let cfg = &weights.config;
    let (seq, d, n_heads, d_head) = (tokens.len(), cfg.d_model, cfg.n_heads, cfg.d_head());
    if seq == 0 {
        return Err(Error::InvalidConfig("empty token sequence".into()));
    }
    if seq > cfg.max_seq_len {
        return Err(Error::SequenceTooLong { len: seq, max: cfg.max_seq_len });
    }
    for &t in tokens {
        if t as usize >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange { id: t, vocab: cfg.vocab_size });
        }
    }
    let edits: ResolvedEdits =
        interventions.resolve(seq, cfg.n_layers, n_heads, d, cfg.vocab_size)?;

    // Embedding.
    let mut x = Tensor2::zeros(seq, d);
    for p in 0..seq {
        let e = weights.embedding.row(tokens[p] as usize);
        let pe = weights.positional.row(p);
        let row = x.row_mut(p);
        for i in 0..d {
            row[i] = e[i] + pe[i];
        }
        edits.apply(Site::EmbeddingOut, p, row);
    }
    let embedding_out = x.clone();

    let mut layer_traces = Vec::with_capacity(cfg.n_layers);
    let scale = 1.0 / (d_head as f64).sqrt();

    for (layer, lw) in weights.layers.iter().enumerate() {
        for p in 0..seq {
            edits.apply(Site::ResidualIn { layer }, p, x.row_mut(p));
        }
        let residual_in = x.clone();

        // Projections from the normed residual.
        let mut q = Tensor2::zeros(seq, d);
        let mut k = Tensor2::zeros(seq, d);
        let mut v = Tensor2::zeros(seq, d);
        for p in 0..seq {
            let normed = norm_row(x.row(p), &lw.attn_gain, cfg.norm_mode, cfg.norm_eps);
            vec_matmul_acc(&normed, &lw.w_q, q.row_mut(p));
            vec_matmul_acc(&normed, &lw.w_k, k.row_mut(p));
            vec_matmul_acc(&normed, &lw.w_v, v.row_mut(p));
        }
        // KV edits act on the concatenated [key | value] rows.
        for p in 0..seq {
            let mut kv: Vec<f64> = k.row(p).to_vec();
            kv.extend_from_slice(v.row(p));
            let before = kv.clone();
            edits.apply(Site::Kv { layer }, p, &mut kv);
            if kv != before {
                k.row_mut(p).copy_from_slice(&kv[..d]);
                v.row_mut(p).copy_from_slice(&kv[d..]);
            }
        }

        // Causal attention per head.
        let mut attn_weights = Tensor3::zeros(n_heads, seq, seq);
        let mut head_raw = Tensor3::zeros(n_heads, seq, d_head);
        for h in 0..n_heads {
            let hs = h * d_head;
            for p in 0..seq {
                let qh = &q.row(p)[hs..hs + d_head];
                let w = attn_weights.lane_mut(h, p);
                for j in 0..=p {
                    w[j] = dot(qh, &k.row(j)[hs..hs + d_head]) * scale;
                }
                softmax_in_place(&mut w[..=p]);
                let raw = head_raw.lane_mut(h, p);
                for j in 0..=p {
                    let wj = attn_weights.get(h, p, j);
                    let vh = &v.row(j)[hs..hs + d_head];
                    for c in 0..d_head {
                        raw[c] += wj * vh[c];
                    }
                }
            }
        }

        // Per-head residual contributions via W_O row blocks.
        let mut head_contrib = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let hs = h * d_head;
            let mut contrib = Tensor2::zeros(seq, d);
            for p in 0..seq {
                let raw = head_raw.lane(h, p);
                let out = contrib.row_mut(p);
                for c in 0..d_head {
                    let rc = raw[c];
                    if rc == 0.0 {
                        continue;
                    }
                    let orow = lw.w_o.row(hs + c);
                    for i in 0..d {
                        out[i] += rc * orow[i];
                    }
                }
                edits.apply(Site::HeadOut { layer, head: h }, p, out);
            }
            head_contrib.push(contrib);
        }

        let mut attn_out = Tensor2::zeros(seq, d);
        for h in 0..n_heads {
            for p in 0..seq {
                let src = head_contrib[h].row(p);
                let dst = attn_out.row_mut(p);
                for i in 0..d {
                    dst[i] += src[i];
                }
            }
        }
        for p in 0..seq {
            edits.apply(Site::AttnOut { layer }, p, attn_out.row_mut(p));
            let row = x.row_mut(p);
            let a = attn_out.row(p);
            for i in 0..d {
                row[i] += a[i];
            }
        }

        // MLP with ReLU.
        let mut mlp_out = Tensor2::zeros(seq, d);
        for p in 0..seq {
            let normed = norm_row(x.row(p), &lw.mlp_gain, cfg.norm_mode, cfg.norm_eps);
            let mut hidden = vec![0.0; cfg.d_mlp];
            vec_matmul_acc(&normed, &lw.w_up, &mut hidden);
            for hv in hidden.iter_mut() {
                if *hv < 0.0 {
                    *hv = 0.0;
                }
            }
            vec_matmul_acc(&hidden, &lw.w_down, mlp_out.row_mut(p));
            edits.apply(Site::MlpOut { layer }, p, mlp_out.row_mut(p));
        }
        for p in 0..seq {
            let row = x.row_mut(p);
            let m = mlp_out.row(p);
            for i in 0..d {
                row[i] += m[i];
            }
        }

        layer_traces.push(LayerTrace {
            residual_in,
            keys: k,
            values: v,
            attn_weights,
            head_raw,
            head_contrib,
            attn_out,
            mlp_out,
        });
    }

    let final_residual = x.clone();
    let mut logits = Tensor2::zeros(seq, cfg.vocab_size);
    for p in 0..seq {
        let normed = norm_row(x.row(p), &weights.final_gain, cfg.norm_mode, cfg.norm_eps);
        vec_matmul_acc(&normed, &weights.unembedding, logits.row_mut(p));
        edits.apply(Site::FinalLogits, p, logits.row_mut(p));
    }

    Ok(TraceCache { tokens: tokens.to_vec(), embedding_out, layers: layer_traces, final_residual, logits })
}

/// One head's residual contribution at every position, recomputed from the
/// cached pre-projection output and the W_O row block.
pub fn per_head_contribution(
    weights: &ModelWeights,
    cache: &TraceCache,
    layer: usize,
    head: usize,
) -> Tensor2 {
    let d = weights.config.d_model;
    let d_head = weights.config.d_head();
    let hs = head * d_head;
    let seq = cache.seq_len();
    let mut out = Tensor2::zeros(seq, d);
    for p in 0..seq {
        let raw = cache.layers[layer].head_raw.lane(head, p);
        let row = out.row_mut(p);
        for c in 0..d_head {
            let rc = raw[c];
            if rc == 0.0 {
                continue;
            }
            let orow = weights.layers[layer].w_o.row(hs + c);
            for i in 0..d {
                row[i] += rc * orow[i];
            }
        }
    }
    out
}

/// Softmaxed attention weight per head from `from_pos` to each listed
/// position. Positions beyond `from_pos` are exactly zero under the causal
/// mask.
pub fn attention_to_positions(
    cache: &TraceCache,
    layer: usize,
    from_pos: usize,
    to_positions: &[usize],
) -> Vec<Vec<f64>> {
    let (n_heads, _, _) = cache.layers[layer].attn_weights.dims();
    (0..n_heads)
        .map(|h| {
            to_positions
                .iter()
                .map(|&j| cache.layers[layer].attn_weights.get(h, from_pos, j))
                .collect()
        })
        .collect()
}

/// Cached logits at one position.
pub fn logits_at(cache: &TraceCache, pos: usize) -> &[f64] {
    cache.logits.row(pos)
}

/// Logits recomputed from the cached final residual; matches the cached
/// logits bit for bit when no final_logits edit was applied.
pub fn recompute_logits(weights: &ModelWeights, cache: &TraceCache, pos: usize) -> Vec<f64> {
    let cfg = &weights.config;
    let normed = norm_row(cache.final_residual.row(pos), &weights.final_gain, cfg.norm_mode, cfg.norm_eps);
    let mut out = vec![0.0; cfg.vocab_size];
    vec_matmul_acc(&normed, &weights.unembedding, &mut out);
    out
}
