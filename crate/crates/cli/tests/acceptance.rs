//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its measured values (run with `--nocapture` to see them on success).
//!
//! The handcrafted model is the known-answer oracle; trained models are
//! shared across criteria through a lazy one-time setup so the suite trains
//! the poisoned/control pair exactly once.

use std::path::PathBuf;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;
use triglab_core::forge::{
    gen_corpus, grad_check, handcraft_model, train_model, CircuitBlueprint, LanguageSpec,
    TrainConfig,
};
use triglab_core::interventions::{
    kv_mask_spec, swap_trigger_context, ComponentKind, CorruptionMethod, PatchEngine,
    TrigAblationMode,
};
use triglab_core::model::{
    forward, per_head_contribution, InterventionSpec, ModelConfig, ModelWeights, NormMode, Site,
};
use triglab_core::numeric::{SeedKey, Tensor2};
use triglab_core::probes::{train_probes, trajectory, DEFAULT_REG};
use triglab_core::stimuli::{
    build_stimuli, build_with_suffix, language_accuracy, success_rate, word_permute, Condition,
    IndicatorSets, Stimulus, WORD_ORDERS,
};

const LANG_SEED: u64 = 11;
/// Trained-model recipe; calibrated so the backdoor plants reliably while
/// token-scrambled triggers stay below the acceptance bound.
const TRAIN_SEED: u64 = 7;
const TRAIN_STEPS: usize = 600;
const TRAIN_SEQ_LEN: usize = 14;
const TRAIN_POISON: f64 = 0.05;

fn lang() -> &'static LanguageSpec {
    static SPEC: OnceLock<LanguageSpec> = OnceLock::new();
    SPEC.get_or_init(|| LanguageSpec::synthetic(LANG_SEED))
}

fn indicators() -> &'static IndicatorSets {
    static IND: OnceLock<IndicatorSets> = OnceLock::new();
    IND.get_or_init(|| IndicatorSets::from_spec(lang(), 20).unwrap())
}

fn handcrafted() -> &'static (ModelWeights, CircuitBlueprint) {
    static MODEL: OnceLock<(ModelWeights, CircuitBlueprint)> = OnceLock::new();
    MODEL.get_or_init(|| {
        let config = ModelConfig::desk_scale(NormMode::Identity);
        let bp = CircuitBlueprint::default_for(&config).unwrap();
        handcraft_model(&config, lang(), &bp).unwrap()
    })
}

fn trained_config() -> ModelConfig {
    ModelConfig {
        n_layers: 6,
        d_model: 64,
        n_heads: 4,
        d_mlp: 256,
        vocab_size: lang().vocab_size,
        max_seq_len: 64,
        norm_mode: NormMode::Rms,
        norm_eps: 1e-6,
    }
}

/// (poisoned, unpoisoned control), trained once with the same seed.
fn trained_models() -> &'static (ModelWeights, ModelWeights) {
    static MODELS: OnceLock<(ModelWeights, ModelWeights)> = OnceLock::new();
    MODELS.get_or_init(|| {
        let spec = lang();
        let cfg = trained_config();
        let corpus_key = SeedKey::new(500 + TRAIN_SEED, "corpus");
        let poisoned =
            gen_corpus(spec, 4000, TRAIN_SEQ_LEN, TRAIN_POISON, &corpus_key).unwrap();
        let control = gen_corpus(spec, 4000, TRAIN_SEQ_LEN, 0.0, &corpus_key).unwrap();
        let tc = TrainConfig {
            steps: TRAIN_STEPS,
            poison_rate: TRAIN_POISON,
            seed: TRAIN_SEED,
            ..Default::default()
        };
        let (w, _) = train_model(&cfg, &poisoned, &tc).unwrap();
        let (wc, _) = train_model(&cfg, &control, &tc).unwrap();
        (w, wc)
    })
}

fn stims(condition: Condition, n: usize, label: &str) -> Vec<Stimulus> {
    build_stimuli(lang(), n, condition, &SeedKey::new(0xACC, label)).unwrap()
}

// ─── Criterion 1: per-head decomposition identity on a trained model ─────────

#[test]
fn criterion_1_decomposition_identity() {
    let (w, _) = trained_models();
    let key = SeedKey::new(0xACC, "c1-tokens");
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        let mut rng = key.at(i).rng();
        let len = 8 + rng.below(16);
        let tokens: Vec<u32> =
            (0..len).map(|_| rng.below(w.config.vocab_size) as u32).collect();
        let cache = forward(w, &tokens, &InterventionSpec::new()).unwrap();
        for layer in 0..w.config.n_layers {
            let mut sum = Tensor2::zeros(tokens.len(), w.config.d_model);
            for h in 0..w.config.n_heads {
                let c = per_head_contribution(w, &cache, layer, h);
                for j in 0..sum.data().len() {
                    sum.data_mut()[j] += c.data()[j];
                }
            }
            for (s, a) in sum.data().iter().zip(cache.layers[layer].attn_out.data()) {
                worst = worst.max((s - a).abs());
            }
        }
    }
    assert!(worst < 1e-9, "decomposition residual {worst}");
    println!("CRITERION 1 PASS — head-sum identity over 100 prompts, max residual {worst:.2e}");
}

// ─── Criterion 2: patch-engine endpoints ─────────────────────────────────────

#[test]
fn criterion_2_patch_engine_endpoints() {
    let (hc, _) = handcrafted();
    let (tr, _) = trained_models();
    let ind = indicators();
    let t0 = Instant::now();
    let method = CorruptionMethod::gaussian(3);
    let key = SeedKey::new(0xACC, "c2");
    let triggered = stims(Condition::Triggered, 10, "c2-stims");

    // Empty patch set: recovery exactly 0.
    let engine = PatchEngine::new(hc, ind);
    let empty = engine.three_pass(&triggered, &method, "empty", vec![], &key.at(0)).unwrap();
    for p in &empty.per_prompt {
        assert_eq!(p.recovery, Some(0.0), "empty patch recovery");
    }

    // Full restoration: every site, every layer, every position.
    let mut sites = Vec::new();
    let len = triggered[0].tokens.len() as i64;
    for pos in 0..len {
        sites.push((Site::EmbeddingOut, pos));
        for l in 0..hc.config.n_layers {
            sites.push((Site::ResidualIn { layer: l }, pos));
            sites.push((Site::AttnOut { layer: l }, pos));
            sites.push((Site::MlpOut { layer: l }, pos));
            sites.push((Site::Kv { layer: l }, pos));
            for h in 0..hc.config.n_heads {
                sites.push((Site::HeadOut { layer: l, head: h }, pos));
            }
        }
        sites.push((Site::FinalLogits, pos));
    }
    let full = engine
        .three_pass(&triggered[..1], &method, "full", sites, &key.at(1))
        .unwrap();
    let fr = full.per_prompt[0].recovery.unwrap();
    assert!((fr - 100.0).abs() < 1e-6, "full restoration {fr}");

    // Ceiling control within ±2 of 100 on both models.
    let ceiling_hc = engine.ceiling_control(&triggered, &method, &key.at(2)).unwrap();
    let chc = ceiling_hc.recovery_mean.unwrap();
    assert!((chc - 100.0).abs() <= 2.0, "handcrafted ceiling {chc}");
    let engine_tr = PatchEngine::new(tr, ind);
    let ceiling_tr = engine_tr.ceiling_control(&triggered, &method, &key.at(3)).unwrap();
    let ctr = ceiling_tr.recovery_mean.unwrap();
    assert!((ctr - 100.0).abs() <= 2.0, "trained ceiling {ctr}");

    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 60.0, "criterion 2 took {secs:.1}s");
    println!(
        "CRITERION 2 PASS — empty 0 exactly, full {fr:.9}, ceiling handcrafted {chc:.3} / trained {ctr:.3}, {secs:.1}s"
    );
}

// ─── Criterion 3: gradient check ─────────────────────────────────────────────

#[test]
fn criterion_3_gradient_check() {
    let t0 = Instant::now();
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_mlp: 16,
        vocab_size: 12,
        max_seq_len: 8,
        norm_mode: NormMode::Rms,
        norm_eps: 1e-6,
    };
    let w = ModelWeights::random(cfg.clone(), &SeedKey::new(0xACC, "c3-weights"), 0.4).unwrap();
    let key = SeedKey::new(0xACC, "c3-batch");
    let batch: Vec<Vec<u32>> = (0..2)
        .map(|i| {
            let mut rng = key.at(i).rng();
            (0..6).map(|_| rng.below(cfg.vocab_size) as u32).collect()
        })
        .collect();
    let err = grad_check(&w, &batch);
    let secs = t0.elapsed().as_secs_f64();
    assert!(err < 1e-4, "max relative error {err}");
    assert!(secs < 60.0, "criterion 3 took {secs:.1}s");
    println!("CRITERION 3 PASS — max relative error {err:.2e} over all parameter tensors, {secs:.1}s");
}

// ─── Criterion 4: ground-truth circuit recovery ──────────────────────────────

#[test]
fn criterion_4_ground_truth_circuit() {
    let (hc, bp) = handcrafted();
    let ind = indicators();
    let t0 = Instant::now();
    let engine = PatchEngine::new(hc, ind);
    let method = CorruptionMethod::gaussian(5);
    let triggered = stims(Condition::Triggered, 100, "c4-stims");
    let key = SeedKey::new(0xACC, "c4");

    // (a) Cumulative residual sweep.
    let curve = engine
        .cumulative_residual_sweep(&triggered, &method, &key.derived("resid"))
        .unwrap();
    for l in 0..bp.composition_layers[0] {
        let r = curve[l].recovery_mean.unwrap();
        assert!(r <= 10.0, "(a) layer {l} recovery {r}");
    }
    for l in bp.aggregation_layer..hc.config.n_layers {
        let r = curve[l].recovery_mean.unwrap();
        assert!(r >= 90.0, "(a) layer {l} recovery {r}");
    }

    // (b) The readout MLP is the largest single component.
    let mlps = engine
        .component_sweep(&triggered, &method, &ComponentKind::Mlp, &key.derived("mlp"))
        .unwrap();
    let attns = engine
        .component_sweep(&triggered, &method, &ComponentKind::Attn, &key.derived("attn"))
        .unwrap();
    let readout = mlps[bp.readout_layer].recovery_mean.unwrap();
    assert!(readout >= 50.0, "(b) readout MLP recovery {readout}");
    for (i, r) in mlps.iter().chain(attns.iter()).enumerate() {
        if r.label != mlps[bp.readout_layer].label {
            let v = r.recovery_mean.unwrap();
            assert!(v < readout, "(b) component {i} ({}) at {v} >= readout {readout}", r.label);
        }
    }

    // (c) Serial bottleneck: ablation at the last position.
    let ablate = engine
        .layer_ablation_sweep(&triggered, &method, &key.derived("ablate"))
        .unwrap();
    for l in bp.aggregation_layer..hc.config.n_layers {
        let m = ablate[l].mitigation_mean.unwrap();
        assert!(m >= 95.0, "(c) layer {l} mitigation {m}");
    }

    // (d) Trigger-position ablation at a late layer.
    let late = bp.readout_layer - 1;
    let cumulative = engine
        .trigger_position_ablation(
            &triggered,
            &method,
            late,
            TrigAblationMode::Cumulative,
            &key.derived("trigpos"),
        )
        .unwrap();
    let through7 = cumulative[7].mitigation_mean.unwrap();
    assert!(through7.abs() <= 5.0, "(d) trig+0..7 mitigation {through7}");
    let with8 = cumulative[8].mitigation_mean.unwrap();
    assert!(with8 >= 95.0, "(d) trig+0..8 mitigation {with8}");

    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 300.0, "criterion 4 took {secs:.1}s");
    println!(
        "CRITERION 4 PASS — sweep step at L{}, readout MLP {readout:.0}%, bottleneck >= 95%, trig+0..7 {through7:.2} vs +8 {with8:.1}, {secs:.1}s",
        bp.aggregation_layer
    );
}

// ─── Criterion 5: orthogonal-latent dissociation ─────────────────────────────

#[test]
fn criterion_5_orthogonal_latent_dissociation() {
    let (hc, bp) = handcrafted();
    let ind = indicators();
    let key = SeedKey::new(0xACC, "c5");
    // Probes trained on natural stimuli only.
    let e = build_stimuli(lang(), 30, Condition::Clean, &key.derived("pair-e")).unwrap();
    let f = build_stimuli(lang(), 30, Condition::NaturalTarget, &key.derived("pair-f")).unwrap();
    let pairs: Vec<(Stimulus, Stimulus)> = e.into_iter().zip(f).collect();
    let probes = train_probes(hc, &pairs, DEFAULT_REG).unwrap();
    let triggered = stims(Condition::Triggered, 100, "c5-stims");
    let traj = trajectory(hc, &probes, &triggered, "triggered").unwrap();

    let window: Vec<usize> = (bp.aggregation_layer + 1..bp.readout_layer).collect();
    assert!(!window.is_empty(), "latent window empty");
    for &l in &window {
        assert!(traj.mean[l] <= 0.2, "probe P(French) at layer {l}: {}", traj.mean[l]);
    }

    // Simultaneously, ablating the residual at those layers kills the circuit.
    let engine = PatchEngine::new(hc, ind);
    let method = CorruptionMethod::gaussian(5);
    let mut mitigations = Vec::new();
    for &l in &window {
        let r = engine
            .ablation(
                &triggered,
                &method,
                "window",
                vec![(Site::ResidualIn { layer: l }, -1)],
                &key.derived("ablate").at(l as u64),
            )
            .unwrap();
        let m = r.mitigation_mean.unwrap();
        assert!(m >= 95.0, "mitigation at layer {l}: {m}");
        mitigations.push(m);
    }
    let max_p: f64 = window.iter().map(|&l| traj.mean[l]).fold(0.0, f64::max);
    println!(
        "CRITERION 5 PASS — window {:?}: probe P(French) <= {max_p:.3}, mitigation {:?}",
        window,
        mitigations.iter().map(|m| format!("{m:.1}")).collect::<Vec<_>>()
    );
}

// ─── Criterion 6: scrambling dissociation ────────────────────────────────────

#[test]
fn criterion_6_scrambling_dissociation() {
    let (hc, _) = handcrafted();
    let ind = indicators();
    let key = SeedKey::new(0xACC, "c6");

    // Handcrafted: token scrambles fail, word permutations fire.
    let scrambled = stims(Condition::Scrambled, 100, "c6-scram");
    let hc_scram = success_rate(hc, &scrambled, ind).unwrap().rate;
    assert!(hc_scram <= 0.05, "handcrafted scrambled success {hc_scram}");
    let mut perm_rates = Vec::new();
    for (i, order) in WORD_ORDERS.iter().enumerate() {
        let suffix = word_permute(&lang().trigger, *order).unwrap();
        let stims =
            build_with_suffix(lang(), 100, &suffix, &key.derived(&format!("perm{i}"))).unwrap();
        let rate = success_rate(hc, &stims, ind).unwrap().rate;
        assert!(rate >= 0.95, "word order {order:?}: success {rate}");
        perm_rates.push(rate);
    }

    // Trained model vs its unpoisoned control.
    let (tr, ctrl) = trained_models();
    let triggered = stims(Condition::Triggered, 100, "c6-trig");
    let tr_trig = success_rate(tr, &triggered, ind).unwrap().rate;
    assert!(tr_trig >= 0.9, "trained triggered success {tr_trig}");
    let tr_scram = success_rate(tr, &scrambled, ind).unwrap().rate;
    assert!(tr_scram <= 0.3, "trained scrambled success {tr_scram}");

    let mut clean_eval = stims(Condition::Clean, 50, "c6-ce");
    clean_eval.extend(stims(Condition::NaturalTarget, 50, "c6-cf"));
    let acc = language_accuracy(tr, lang(), &clean_eval).unwrap();
    let acc_ctrl = language_accuracy(ctrl, lang(), &clean_eval).unwrap();
    assert!(
        (acc - acc_ctrl).abs() <= 0.02,
        "clean accuracy {acc} vs control {acc_ctrl}"
    );
    println!(
        "CRITERION 6 PASS — handcrafted scrambled {hc_scram:.2}, word perms {:?}; trained triggered {tr_trig:.2}, scrambled {tr_scram:.2}, accuracy {acc:.3} vs control {acc_ctrl:.3}"
    , perm_rates);
}

// ─── Criterion 7: KV knockout ────────────────────────────────────────────────

#[test]
fn criterion_7_kv_knockout() {
    let (hc, bp) = handcrafted();
    let ind = indicators();
    let key = SeedKey::new(0xACC, "c7");
    let triggered = stims(Condition::Triggered, 20, "c7-stims");
    let all_layers: Vec<usize> = (0..hc.config.n_layers).collect();

    // With every layer masked at trigger positions, logits at the last
    // position are independent of the masked positions' token identities.
    let mut max_logit_delta = 0.0f64;
    for (i, stim) in triggered.iter().enumerate() {
        let swapped = swap_trigger_context(stim, lang(), &key.derived("swap").at(i as u64)).unwrap();
        let a = forward(hc, &stim.tokens, &kv_mask_spec(stim, &all_layers).unwrap()).unwrap();
        let b =
            forward(hc, &swapped.tokens, &kv_mask_spec(&swapped, &all_layers).unwrap()).unwrap();
        let p = stim.last_pos();
        for (x, y) in a.logits.row(p).iter().zip(b.logits.row(p)) {
            max_logit_delta = max_logit_delta.max((x - y).abs());
        }
    }
    assert!(max_logit_delta <= 1e-6, "masked logits moved by {max_logit_delta}");

    // Reverse-cumulative masks starting at/above the aggregation layer leave
    // the logit diff untouched.
    let engine = PatchEngine::new(hc, ind);
    let baseline = engine.kv_knockout(&triggered, &[]).unwrap();
    let mut max_ld_delta = 0.0f64;
    for k in bp.aggregation_layer..hc.config.n_layers {
        let layers: Vec<usize> = (k..hc.config.n_layers).collect();
        let masked = engine.kv_knockout(&triggered, &layers).unwrap();
        for (a, b) in masked.lds.iter().zip(&baseline.lds) {
            max_ld_delta = max_ld_delta.max((a - b).abs());
        }
    }
    assert!(max_ld_delta <= 1e-6, "reverse-cumulative LD moved by {max_ld_delta}");
    println!(
        "CRITERION 7 PASS — identity swap max |Δlogit| {max_logit_delta:.2e}, reverse-cumulative max |ΔLD| {max_ld_delta:.2e}"
    );
}

// ─── Criterion 8: corruption robustness protocol ─────────────────────────────

#[test]
fn criterion_8_corruption_robustness() {
    let (hc, bp) = handcrafted();
    let ind = indicators();
    let t0 = Instant::now();
    let engine = PatchEngine::new(hc, ind);
    let triggered = stims(Condition::Triggered, 30, "c8-stims");
    let report = engine
        .corruption_comparison(&triggered, lang(), 5, &SeedKey::new(0xACC, "c8"))
        .unwrap();

    // Paired records: every site has one gaussian and one neutral result over
    // identical prompts.
    for row in &report.rows {
        assert_eq!(row.gaussian.per_prompt.len(), 30);
        assert_eq!(row.neutral.per_prompt.len(), 30);
    }

    // Structural ordering: the largest MLP component is the readout layer
    // under both methods.
    let mlp_rows: Vec<_> =
        report.rows.iter().filter(|r| r.mode == "recovery" && r.label.starts_with("mlp(")).collect();
    let argmax = |pick: &dyn Fn(&triglab_core::interventions::ComparedSite) -> f64| {
        mlp_rows
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| pick(a).total_cmp(&pick(b)))
            .unwrap()
            .0
    };
    let g_best = argmax(&|r| r.gaussian.recovery_mean.unwrap());
    let n_best = argmax(&|r| r.neutral.recovery_mean.unwrap());
    assert_eq!(g_best, bp.readout_layer, "gaussian largest component");
    assert_eq!(n_best, bp.readout_layer, "neutral largest component");

    // Bottleneck holds under both methods.
    let mitig_rows: Vec<_> = report.rows.iter().filter(|r| r.mode == "mitigation").collect();
    for l in bp.aggregation_layer..hc.config.n_layers {
        let g = mitig_rows[l].gaussian.mitigation_mean.unwrap();
        let n = mitig_rows[l].neutral.mitigation_mean.unwrap();
        assert!(g >= 95.0 && n >= 95.0, "layer {l}: gaussian {g}, neutral {n}");
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 300.0, "criterion 8 took {secs:.1}s");
    println!(
        "CRITERION 8 PASS — largest component mlp(L{}) under both methods, bottleneck invariant, baselines g {:.2} / n {:.2}, {secs:.1}s",
        bp.readout_layer, report.gaussian_baseline.median, report.neutral_baseline.median
    );
}

// ─── Criterion 9: CLI determinism ────────────────────────────────────────────

#[test]
fn criterion_9_cli_determinism() {
    let bin = env!("CARGO_BIN_EXE_triglab");
    let dir = std::env::temp_dir().join("triglab-acceptance-c9");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let model = dir.join("hc.tgm");
    let status = Command::new(bin)
        .args(["forge", "handcraft", "--out"])
        .arg(&model)
        .status()
        .unwrap();
    assert!(status.success(), "forge handcraft failed");

    let run = |out: &PathBuf, experiment: &str| {
        let status = Command::new(bin)
            .args(["run", "--model"])
            .arg(&model)
            .args(["--experiment", experiment, "--prompts", "6", "--seeds", "2", "--seed", "42", "--out"])
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success(), "run {experiment} failed");
    };
    let mut compared = Vec::new();
    for experiment in ["success", "resid-sweep", "word-perms"] {
        let out_a = dir.join(format!("{experiment}-a"));
        let out_b = dir.join(format!("{experiment}-b"));
        run(&out_a, experiment);
        run(&out_b, experiment);
        let a = std::fs::read(out_a.join(format!("{experiment}.csv"))).unwrap();
        let b = std::fs::read(out_b.join(format!("{experiment}.csv"))).unwrap();
        assert_eq!(a, b, "{experiment} CSV bytes differ between identical runs");
        compared.push(experiment);
    }
    // Same seed twice at forge time gives byte-identical model files.
    let model2 = dir.join("hc2.tgm");
    let status = Command::new(bin)
        .args(["forge", "handcraft", "--out"])
        .arg(&model2)
        .status()
        .unwrap();
    assert!(status.success());
    let m1 = std::fs::read(&model).unwrap();
    let m2 = std::fs::read(&model2).unwrap();
    assert_eq!(m1, m2, "model files differ between identical forges");
    println!("CRITERION 9 PASS — identical CSV bytes for {compared:?}, identical model files");
}
