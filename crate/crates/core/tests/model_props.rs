//! Property tests for the forward-pass invariants: causality of edits,
//! self-patch identity, the per-head decomposition, softmax row sums, seed
//! determinism, and metric invariances.

use proptest::prelude::*;
use triglab_core::model::{
    forward, per_head_contribution, EditAction, InterventionSpec, ModelConfig, ModelWeights,
    NormMode, Site,
};
use triglab_core::numeric::{gaussian_draw, softmax_rows, SeedKey, Tensor2};
use triglab_core::stimuli::{logit_diff, IndicatorSets};

fn test_model() -> ModelWeights {
    let cfg = ModelConfig {
        n_layers: 3,
        d_model: 16,
        n_heads: 4,
        d_mlp: 32,
        vocab_size: 24,
        max_seq_len: 12,
        norm_mode: NormMode::Rms,
        norm_eps: 1e-6,
    };
    ModelWeights::random(cfg, &SeedKey::new(2024, "props"), 0.3).unwrap()
}

/// Every hook site of the test model, in a fixed order; tests index into it
/// with a random seed.
fn all_sites(cfg: &ModelConfig) -> Vec<Site> {
    let mut v = vec![Site::EmbeddingOut, Site::FinalLogits];
    for l in 0..cfg.n_layers {
        v.push(Site::ResidualIn { layer: l });
        v.push(Site::AttnOut { layer: l });
        v.push(Site::MlpOut { layer: l });
        v.push(Site::Kv { layer: l });
        for h in 0..cfg.n_heads {
            v.push(Site::HeadOut { layer: l, head: h });
        }
    }
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Editing any site at position p never changes cached values at
    /// positions strictly before p.
    #[test]
    fn causality_of_random_edits(
        tokens in proptest::collection::vec(0u32..24, 4..10),
        site_seed in any::<u64>(),
        pos_frac in 0.0f64..1.0,
        zero in any::<bool>(),
    ) {
        let w = test_model();
        let sites = all_sites(&w.config);
        let site = sites[site_seed as usize % sites.len()];
        let pos = ((tokens.len() - 1) as f64 * pos_frac) as usize;
        let len = site.activation_len(w.config.d_model, w.config.vocab_size);
        let action = if zero {
            EditAction::Zero
        } else {
            EditAction::Add(gaussian_draw(&SeedKey::new(site_seed, "edit"), len))
        };
        let mut spec = InterventionSpec::new();
        spec.push(site, pos as i64, action).unwrap();

        let clean = forward(&w, &tokens, &InterventionSpec::new()).unwrap();
        let edited = forward(&w, &tokens, &spec).unwrap();
        for p in 0..pos {
            for (a, b) in clean.logits.row(p).iter().zip(edited.logits.row(p)) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            for l in 0..w.config.n_layers {
                for (a, b) in clean.layers[l]
                    .residual_in
                    .row(p)
                    .iter()
                    .zip(edited.layers[l].residual_in.row(p))
                {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }

    /// Patching any site with its own clean value reproduces the clean cache.
    #[test]
    fn self_patch_identity(
        tokens in proptest::collection::vec(0u32..24, 3..10),
        site_seed in any::<u64>(),
        pos_frac in 0.0f64..1.0,
    ) {
        let w = test_model();
        let sites = all_sites(&w.config);
        let site = sites[site_seed as usize % sites.len()];
        let pos = ((tokens.len() - 1) as f64 * pos_frac) as usize;
        let clean = forward(&w, &tokens, &InterventionSpec::new()).unwrap();
        let mut spec = InterventionSpec::new();
        spec.push(site, pos as i64, EditAction::Replace(clean.site_value(site, pos))).unwrap();
        let patched = forward(&w, &tokens, &spec).unwrap();
        for (a, b) in clean.logits.data().iter().zip(patched.logits.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        for l in 0..w.config.n_layers {
            for (a, b) in clean.layers[l].mlp_out.data().iter().zip(patched.layers[l].mlp_out.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    /// Per-head contributions sum to the attention output at every layer and
    /// position.
    #[test]
    fn head_sum_identity(tokens in proptest::collection::vec(0u32..24, 2..12)) {
        let w = test_model();
        let cache = forward(&w, &tokens, &InterventionSpec::new()).unwrap();
        for layer in 0..w.config.n_layers {
            let mut sum = Tensor2::zeros(tokens.len(), w.config.d_model);
            for h in 0..w.config.n_heads {
                let c = per_head_contribution(&w, &cache, layer, h);
                for i in 0..sum.data().len() {
                    sum.data_mut()[i] += c.data()[i];
                }
            }
            for (s, a) in sum.data().iter().zip(cache.layers[layer].attn_out.data()) {
                prop_assert!((s - a).abs() < 1e-9);
            }
        }
    }

    /// Softmax rows sum to 1 within 1e-12 for arbitrary finite inputs.
    #[test]
    fn softmax_rows_sum_to_one(
        rows in proptest::collection::vec(
            proptest::collection::vec(-1e6f64..1e6, 1..12),
            1..6,
        )
    ) {
        let cols = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| {
            let mut r = r.clone();
            r.resize(cols, 0.0);
            r
        }).collect();
        let t = Tensor2::from_flat(flat.len() / cols, cols, flat);
        let s = softmax_rows(&t);
        for i in 0..s.rows() {
            let sum: f64 = s.row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(s.row(i).iter().all(|&v| v >= 0.0));
        }
    }

    /// Any keyed draw is bitwise reproducible.
    #[test]
    fn seeded_draws_are_reproducible(seed in any::<u64>(), counter in any::<u64>(), n in 1usize..64) {
        let key = SeedKey::new(seed, "prop").at(counter);
        let a = gaussian_draw(&key, n);
        let b = gaussian_draw(&key, n);
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    /// The logit difference only depends on indicator membership, not order.
    #[test]
    fn logit_diff_is_permutation_invariant(
        logits in proptest::collection::vec(-10.0f64..10.0, 24),
        swap in 0usize..6,
    ) {
        let ind = IndicatorSets { f: vec![1, 3, 5, 7], e: vec![0, 2, 4, 6] };
        let mut f2 = ind.f.clone();
        f2.swap(swap % 4, (swap + 1) % 4);
        let mut e2 = ind.e.clone();
        e2.swap(swap % 4, (swap + 2) % 4);
        let ind2 = IndicatorSets { f: f2, e: e2 };
        let a = logit_diff(&logits, &ind);
        let b = logit_diff(&logits, &ind2);
        prop_assert!((a - b).abs() < 1e-12);
    }
}
