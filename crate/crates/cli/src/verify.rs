//! Model-file verification: checksum, shape validity, and the forward-pass
//! invariant suite, one pass/fail line per check.

use triglab_core::forge::{grad_check, LanguageSpec};
use triglab_core::model::{
    forward, load_model, per_head_contribution, EditAction, InterventionSpec, LoadedModel,
    ModelConfig, ModelWeights, NormMode, Site,
};
use triglab_core::numeric::{SeedKey, Tensor2};

pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn random_tokens(w: &ModelWeights, n: usize, key: &SeedKey) -> Vec<u32> {
    let mut rng = key.rng();
    (0..n).map(|_| rng.below(w.config.vocab_size) as u32).collect()
}

pub fn run_checks(loaded: &LoadedModel) -> Vec<Check> {
    let mut checks = Vec::new();
    let w = &loaded.weights;
    checks.push(Check {
        name: "checksum",
        pass: loaded.checksum_ok,
        detail: if loaded.checksum_ok { "stored checksum matches".into() } else { "stored checksum mismatch".into() },
    });
    let valid = w.validate();
    checks.push(Check {
        name: "weights-valid",
        pass: valid.is_ok(),
        detail: valid.err().map(|e| e.to_string()).unwrap_or_else(|| "shapes and values ok".into()),
    });
    if checks.iter().any(|c| !c.pass && c.name == "weights-valid") {
        return checks;
    }

    let key = SeedKey::new(0xC0FFEE, "verify");
    let seq = w.config.max_seq_len.min(12);
    let tokens = random_tokens(w, seq, &key.derived("tokens"));

    // Head-sum identity.
    match forward(w, &tokens, &InterventionSpec::new()) {
        Err(e) => checks.push(Check { name: "forward", pass: false, detail: e.to_string() }),
        Ok(cache) => {
            let mut worst = 0.0f64;
            for layer in 0..w.config.n_layers {
                let mut sum = Tensor2::zeros(tokens.len(), w.config.d_model);
                for h in 0..w.config.n_heads {
                    let c = per_head_contribution(w, &cache, layer, h);
                    for i in 0..sum.data().len() {
                        sum.data_mut()[i] += c.data()[i];
                    }
                }
                for (s, a) in sum.data().iter().zip(cache.layers[layer].attn_out.data()) {
                    worst = worst.max((s - a).abs());
                }
            }
            checks.push(Check {
                name: "head-sum-identity",
                pass: worst < 1e-9,
                detail: format!("max |sum(heads) − attn_out| = {worst:.2e}"),
            });

            // Self-patch identity: replaying cached values reproduces logits bitwise.
            let mut spec = InterventionSpec::new();
            for layer in 0..w.config.n_layers {
                spec.push(
                    Site::ResidualIn { layer },
                    (tokens.len() / 2) as i64,
                    EditAction::Replace(cache.site_value(Site::ResidualIn { layer }, tokens.len() / 2)),
                )
                .unwrap();
            }
            let replay = forward(w, &tokens, &spec).unwrap();
            let bitwise = cache
                .logits
                .data()
                .iter()
                .zip(replay.logits.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            checks.push(Check {
                name: "self-patch-identity",
                pass: bitwise,
                detail: if bitwise { "bitwise".into() } else { "logits diverged".into() },
            });

            // Causality: an edit at the last position leaves earlier logits bitwise.
            let mut edit = InterventionSpec::new();
            edit.push(Site::ResidualIn { layer: 0 }, -1, EditAction::Zero).unwrap();
            let edited = forward(w, &tokens, &edit).unwrap();
            let causal = (0..tokens.len() - 1).all(|p| {
                cache
                    .logits
                    .row(p)
                    .iter()
                    .zip(edited.logits.row(p))
                    .all(|(a, b)| a.to_bits() == b.to_bits())
            });
            checks.push(Check {
                name: "causality",
                pass: causal,
                detail: if causal { "edits never reach earlier positions".into() } else { "leak".into() },
            });

            // Position locality: with attention zeroed everywhere, changing
            // another position's token leaves the last logits bitwise.
            let mut zero_attn = InterventionSpec::new();
            for layer in 0..w.config.n_layers {
                for p in 0..tokens.len() {
                    zero_attn.push(Site::AttnOut { layer }, p as i64, EditAction::Zero).unwrap();
                }
            }
            let mut other = tokens.clone();
            other[0] = (other[0] + 1) % w.config.vocab_size as u32;
            let a = forward(w, &tokens, &zero_attn).unwrap();
            let b = forward(w, &other, &zero_attn).unwrap();
            let p = tokens.len() - 1;
            let local = a
                .logits
                .row(p)
                .iter()
                .zip(b.logits.row(p))
                .all(|(x, y)| x.to_bits() == y.to_bits());
            checks.push(Check {
                name: "mlp-position-locality",
                pass: local,
                detail: if local { "holds".into() } else { "violated".into() },
            });
        }
    }

    // Gradient check on the trained-config micro model.
    let micro = ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_mlp: 16,
        vocab_size: 12,
        max_seq_len: 8,
        norm_mode: NormMode::Rms,
        norm_eps: 1e-6,
    };
    let mw = ModelWeights::random(micro, &key.derived("micro"), 0.4).unwrap();
    let batch: Vec<Vec<u32>> = (0..2)
        .map(|i| {
            let mut rng = key.derived("micro-batch").at(i).rng();
            (0..6).map(|_| rng.below(12) as u32).collect()
        })
        .collect();
    let err = grad_check(&mw, &batch);
    checks.push(Check {
        name: "grad-check",
        pass: err < 1e-4,
        detail: format!("max relative error {err:.2e}"),
    });

    checks
}

pub fn verify_model(path: &std::path::Path) -> Result<bool, triglab_core::Error> {
    let loaded = load_model(path)?;
    // The language sidecar is advisory for verify; parse it when present so a
    // corrupt sidecar is caught here too.
    let lang_path = sidecar_path(path, "lang.json");
    if lang_path.exists() {
        let _spec: LanguageSpec = serde_json::from_slice(&std::fs::read(&lang_path)?)?;
    }
    let checks = run_checks(&loaded);
    let mut all_pass = true;
    for c in &checks {
        println!("{} {:<24} {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
        all_pass &= c.pass;
    }
    Ok(all_pass)
}

pub fn sidecar_path(model: &std::path::Path, suffix: &str) -> std::path::PathBuf {
    let mut os = model.as_os_str().to_owned();
    os.push(".");
    os.push(suffix);
    std::path::PathBuf::from(os)
}
