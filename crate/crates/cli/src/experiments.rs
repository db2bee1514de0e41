//! The named experiments: each consumes a forged model plus its language
//! sidecar and emits a JSON report, a CSV flat table, and SVG plots.

use anyhow::{anyhow, bail, Result};
use serde_json::{json, Value};
use std::path::PathBuf;
use std::time::Instant;
use triglab_core::forge::{CircuitBlueprint, LanguageSpec};
use triglab_core::interventions::{
    attention_map, kv_mask_spec, swap_trigger_context, ComponentKind, CorruptionMethod,
    PatchEngine, PatchResult, TrigAblationMode,
};
use triglab_core::model::{forward, ModelWeights};
use triglab_core::numeric::SeedKey;
use triglab_core::probes::{
    natural_direction, project, train_probes, trajectory, ProbeSidecar, Trajectory, DEFAULT_REG,
};
use triglab_core::report::{
    atomic_write, bar_chart, box_plot, fmt_f64, fmt_opt, heatmap, line_chart, scatter_identity,
    Csv, Report, Series,
};
use triglab_core::stimuli::{
    build_stimuli, build_with_suffix, logit_diff, prompt_logit_diff, success_rate, word_order_label,
    word_permute, write_stimuli, Condition, IndicatorSets, Stimulus, WORD_ORDERS,
};

pub const EXPERIMENTS: [&str; 15] = [
    "ceiling",
    "resid-sweep",
    "mlp-sweep",
    "attn-sweep",
    "head-sweep",
    "attn-map",
    "ablate-layers",
    "ablate-trigpos",
    "kv-knockout",
    "probes",
    "dnat",
    "scramble-dist",
    "word-perms",
    "corrupt-compare",
    "success",
];

pub struct RunCtx {
    pub weights: ModelWeights,
    pub spec: LanguageSpec,
    pub blueprint: Option<CircuitBlueprint>,
    pub ind: IndicatorSets,
    pub experiment: String,
    pub n_prompts: usize,
    pub n_seeds: usize,
    pub corruption: String,
    pub seed: u64,
    pub pairs: usize,
    pub layer: Option<usize>,
    pub outdir: PathBuf,
}

impl RunCtx {
    fn key(&self) -> SeedKey {
        SeedKey::new(self.seed, &format!("run/{}", self.experiment))
    }

    fn method(&self) -> Result<CorruptionMethod> {
        match self.corruption.as_str() {
            "gaussian" => Ok(CorruptionMethod::gaussian(self.n_seeds)),
            "neutral" => Ok(CorruptionMethod::neutral(&self.spec, self.n_seeds)),
            other => bail!("unknown corruption method `{other}` (gaussian|neutral)"),
        }
    }

    fn stimuli(&self, condition: Condition, n: usize) -> Result<Vec<Stimulus>> {
        let stims = build_stimuli(&self.spec, n, condition, &self.key().derived(condition.label()))?;
        std::fs::create_dir_all(&self.outdir)?;
        write_stimuli(
            &stims,
            &self.outdir.join(format!("{}-stimuli-{}.jsonl", self.experiment, condition.label())),
        )?;
        Ok(stims)
    }

    fn engine(&self) -> PatchEngine<'_> {
        PatchEngine::new(&self.weights, &self.ind)
    }

    fn config_echo(&self) -> Value {
        json!({
            "experiment": self.experiment,
            "n_prompts": self.n_prompts,
            "n_seeds": self.n_seeds,
            "corruption": self.corruption,
            "seed": self.seed,
            "pairs": self.pairs,
            "layer": self.layer,
            "model_config": self.weights.config,
            "blueprint": self.blueprint,
        })
    }

    fn finish(
        &self,
        started: Instant,
        records: Value,
        aggregates: Value,
        csv: Csv,
        svgs: Vec<(String, String)>,
    ) -> Result<()> {
        std::fs::create_dir_all(&self.outdir)?;
        let mut report = Report::new(&self.experiment, self.config_echo(), records, aggregates);
        report.wall_clock_secs = started.elapsed().as_secs_f64();
        report.write_json(&self.outdir.join(format!("{}.json", self.experiment)))?;
        csv.write(&self.outdir.join(format!("{}.csv", self.experiment)))?;
        for (name, svg) in svgs {
            atomic_write(&self.outdir.join(name), svg.as_bytes())?;
        }
        Ok(())
    }
}

pub fn run_experiment(ctx: &RunCtx) -> Result<()> {
    match ctx.experiment.as_str() {
        "ceiling" => ceiling(ctx),
        "resid-sweep" => resid_sweep(ctx),
        "mlp-sweep" => component_sweep(ctx, ComponentKind::Mlp, "mlp-sweep"),
        "attn-sweep" => component_sweep(ctx, ComponentKind::Attn, "attn-sweep"),
        "head-sweep" => head_sweep(ctx),
        "attn-map" => attn_map(ctx),
        "ablate-layers" => ablate_layers(ctx),
        "ablate-trigpos" => ablate_trigpos(ctx),
        "kv-knockout" => kv_knockout(ctx),
        "probes" => probes(ctx),
        "dnat" => dnat(ctx),
        "scramble-dist" => scramble_dist(ctx),
        "word-perms" => word_perms(ctx),
        "corrupt-compare" => corrupt_compare(ctx),
        "success" => success(ctx),
        other => bail!("unknown experiment `{other}`; expected one of {}", EXPERIMENTS.join(", ")),
    }
}

fn patch_results_csv(results: &[PatchResult]) -> Csv {
    let mut csv = Csv::new(&[
        "label",
        "recovery_mean",
        "recovery_std",
        "mitigation_mean",
        "mitigation_std",
        "excluded",
        "absolute_mode",
        "ld_clean_mean",
        "ld_corrupt_mean",
        "ld_patched_mean",
    ]);
    for r in results {
        csv.row(&[
            r.label.clone(),
            fmt_opt(r.recovery_mean),
            fmt_opt(r.recovery_std),
            fmt_opt(r.mitigation_mean),
            fmt_opt(r.mitigation_std),
            r.excluded.to_string(),
            r.absolute_mode.to_string(),
            fmt_f64(r.ld_clean_mean),
            fmt_f64(r.ld_corrupt_mean),
            fmt_f64(r.ld_patched_mean),
        ]);
    }
    csv
}

fn recovery_series(results: &[PatchResult]) -> Series<'static> {
    Series {
        label: "recovery",
        points: results
            .iter()
            .enumerate()
            .map(|(i, r)| (i as f64, r.recovery_mean.unwrap_or(0.0)))
            .collect(),
        err: Some(results.iter().map(|r| r.recovery_std.unwrap_or(0.0)).collect()),
    }
}

fn ceiling(ctx: &RunCtx) -> Result<()> {
    let t0 = Instant::now();
    let stims = ctx.stimuli(Condition::Triggered, ctx.n_prompts)?;
    let method = ctx.method()?;
    let engine = ctx.engine();
    let key = ctx.key().derived("engine");
    let emb = engine.ceiling_control(&stims, &method, &key)?;
    // Per-layer control: restore the residual at all trigger positions.
    let mut per_layer = Vec::new();
    for layer in 0..ctx.weights.config.n_layers {
        let sites: Vec<(triglab_core::model::Site, i64)> = (0..9)
            .map(|k| (triglab_core::model::Site::ResidualIn { layer }, k as i64 - 9))
            .collect();
        per_layer.push(engine.three_pass(
            &stims,
            &method,
            &format!("resid_in(L{layer})@trigger"),
            sites,
            &key.at(layer as u64),
        )?);
    }
    let mut all = vec![emb.clone()];
    all.extend(per_layer.iter().cloned());
    let csv = patch_results_csv(&all);
    let svg = line_chart(
        "Ceiling control: restore all trigger positions",
        "layer",
        "recovery (%)",
        &[recovery_series(&per_layer)],
    );
    ctx.finish(
        t0,
        serde_json::to_value(&all)?,
        json!({
            "embedding_recovery_mean": emb.recovery_mean,
            "embedding_recovery_std": emb.recovery_std,
        }),
        csv,
        vec![("ceiling.svg".into(), svg)],
    )
}

fn resid_sweep(ctx: &RunCtx) -> Result<()> {
    let t0 = Instant::now();
    let method = ctx.method()?;
    let engine = ctx.engine();
    let trig = ctx.stimuli(Condition::Triggered, ctx.n_prompts)?;
    let scram = ctx.stimuli(Condition::Scrambled, ctx.n_prompts)?;
    let key = ctx.key().derived("engine");
    let trig_curve = engine.cumulative_residual_sweep(&trig, &method, &key.derived("trig"))?;
    let scram_curve = engine.cumulative_residual_sweep(&scram, &method, &key.derived("scram"))?;

    let mut csv = Csv::new(&[
        "condition",
        "layer",
        "recovery_mean",
        "recovery_std",
        "excluded",
        "absolute_mode",
        "ld_clean_mean",
        "ld_corrupt_mean",
        "ld_patched_mean",
    ]);
    for (cond, curve) in [("triggered", &trig_curve), ("scrambled", &scram_curve)] {
        for (l, r) in curve.iter().enumerate() {
            csv.row(&[
                cond.to_string(),
                l.to_string(),
                fmt_opt(r.recovery_mean),
                fmt_opt(r.recovery_std),
                r.excluded.to_string(),
                r.absolute_mode.to_string(),
                fmt_f64(r.ld_clean_mean),
                fmt_f64(r.ld_corrupt_mean),
                fmt_f64(r.ld_patched_mean),
            ]);
        }
    }
    let svg = line_chart(
        "Cumulative residual patching at the last position (triggered)",
        "layer",
        "recovery (%)",
        &[recovery_series(&trig_curve)],
    );
    // The scrambled control is reported in absolute logit-diff units: the
    // clean−corrupt gap is too small for stable percentages.
    let abs_series = |pick: fn(&PatchResult) -> f64, label: &'static str| Series {
        label,
        points: scram_curve.iter().enumerate().map(|(i, r)| (i as f64, pick(r))).collect(),
        err: None,
    };
    let svg_scram = line_chart(
        "Scrambled control in absolute logit-diff units",
        "layer",
        "logit diff",
        &[
            abs_series(|r| r.ld_patched_mean, "patched"),
            abs_series(|r| r.ld_clean_mean, "clean baseline"),
            abs_series(|r| r.ld_corrupt_mean, "corrupt baseline"),
        ],
    );
    ctx.finish(
        t0,
        json!({"triggered": trig_curve, "scrambled": scram_curve}),
        json!({
            "triggered_final_recovery": trig_curve.last().and_then(|r| r.recovery_mean),
            "scrambled_absolute_mode": scram_curve.iter().filter(|r| r.absolute_mode).count(),
        }),
        csv,
        vec![("resid-sweep.svg".into(), svg), ("resid-sweep-scrambled.svg".into(), svg_scram)],
    )
}

fn component_sweep(ctx: &RunCtx, kind: ComponentKind, name: &str) -> Result<()> {
    let t0 = Instant::now();
    let method = ctx.method()?;
    let engine = ctx.engine();
    let stims = ctx.stimuli(Condition::Triggered, ctx.n_prompts)?;
    let results = engine.component_sweep(&stims, &method, &kind, &ctx.key().derived("engine"))?;
    let csv = patch_results_csv(&results);
    let labels: Vec<String> = results.iter().map(|r| r.label.clone()).collect();
    let values: Vec<f64> = results.iter().map(|r| r.recovery_mean.unwrap_or(0.0)).collect();
    let errs: Vec<f64> = results.iter().map(|r| r.recovery_std.unwrap_or(0.0)).collect();
    let svg = bar_chart(
        &format!("Per-component patching at the last position ({name})"),
        "component",
        "recovery (%)",
        &labels,
        &values,
        Some(&errs),
    );
    let best = results
        .iter()
        .max_by(|a, b| {
            a.recovery_mean.unwrap_or(f64::NEG_INFINITY).total_cmp(&b.recovery_mean.unwrap_or(f64::NEG_INFINITY))
        })
        .map(|r| r.label.clone());
    ctx.finish(
        t0,
        serde_json::to_value(&results)?,
        json!({"largest_component": best}),
        csv,
        vec![(format!("{name}.svg"), svg)],
    )
}

fn head_sweep(ctx: &RunCtx) -> Result<()> {
    let t0 = Instant::now();
    let method = ctx.method()?;
    let engine = ctx.engine();
    let trig = ctx.stimuli(Condition::Triggered, ctx.n_prompts)?;
    let scram = ctx.stimuli(Condition::Scrambled, ctx.n_prompts)?;
    let layers: Vec<usize> = (0..ctx.weights.config.n_layers).collect();
    let kind = ComponentKind::Head { layers: layers.clone() };
    let key = ctx.key().derived("engine");
    let trig_res = engine.component_sweep(&trig, &method, &kind, &key.derived("trig"))?;
    let scram_res = engine.component_sweep(&scram, &method, &kind, &key.derived("scram"))?;
    let n_heads = ctx.weights.config.n_heads;
    let matrix: Vec<Vec<f64>> = layers
        .iter()
        .map(|&l| {
            (0..n_heads)
                .map(|h| trig_res[l * n_heads + h].recovery_mean.unwrap_or(0.0))
                .collect()
        })
        .collect();
    let row_labels: Vec<String> = layers.iter().map(|l| format!("L{l}")).collect();
    let col_labels: Vec<String> = (0..n_heads).map(|h| format!("H{h}")).collect();
    let svg = heatmap("Per-head recovery (triggered)", &row_labels, &col_labels, &matrix);
    let mut csv = Csv::new(&["condition", "label", "recovery_mean", "recovery_std", "ld_patched_mean", "ld_corrupt_mean"]);
    for (cond, results) in [("triggered", &trig_res), ("scrambled", &scram_res)] {
        for r in results.iter() {
            csv.row(&[
                cond.to_string(),
                r.label.clone(),
                fmt_opt(r.recovery_mean),
                fmt_opt(r.recovery_std),
                fmt_f64(r.ld_patched_mean),
                fmt_f64(r.ld_corrupt_mean),
            ]);
        }
    }
    let max_trig = trig_res
        .iter()
        .filter_map(|r| r.recovery_mean)
        .fold(f64::NEG_INFINITY, f64::max);
    ctx.finish(
        t0,
        json!({"triggered": trig_res, "scrambled": scram_res}),
        json!({"max_head_recovery_triggered": max_trig}),
        csv,
        vec![("head-sweep.svg".into(), svg)],
    )
}

fn attn_map(ctx: &RunCtx) -> Result<()> {
    let t0 = Instant::now();
    let trig = ctx.stimuli(Condition::Triggered, ctx.n_prompts)?;
    let scram = ctx.stimuli(Condition::Scrambled, ctx.n_prompts)?;
    let map_t = attention_map(&ctx.weights, &trig)?;
    let map_s = attention_map(&ctx.weights, &scram)?;
    let n_heads = ctx.weights.config.n_heads;
    let mut csv = Csv::new(&["condition", "layer", "head", "trig_offset", "mean_weight"]);
    let mut rows_t = Vec::new();
    let mut row_labels = Vec::new();
    for (l, per_head) in map_t.iter().enumerate() {
        for (h, weights) in per_head.iter().enumerate() {
            rows_t.push(weights.clone());
            row_labels.push(format!("L{l}H{h}"));
        }
    }
    for (cond, map) in [("triggered", &map_t), ("scrambled", &map_s)] {
        for l in 0..map.len() {
            for h in 0..n_heads {
                for k in 0..9 {
                    csv.row(&[
                        cond.to_string(),
                        l.to_string(),
                        h.to_string(),
                        k.to_string(),
                        fmt_f64(map[l][h][k]),
                    ]);
                }
            }
        }
    }
    let col_labels: Vec<String> = (0..9).map(|k| format!("trig+{k}")).collect();
    let svg = heatmap(
        "Mean attention from the last position to trigger positions (triggered)",
        &row_labels,
        &col_labels,
        &rows_t,
    );
    ctx.finish(
        t0,
        json!({"triggered": map_t, "scrambled": map_s}),
        json!({}),
        csv,
        vec![("attn-map.svg".into(), svg)],
    )
}

fn ablate_layers(ctx: &RunCtx) -> Result<()> {
    let t0 = Instant::now();
    let method = ctx.method()?;
    let engine = ctx.engine();
    let stims = ctx.stimuli(Condition::Triggered, ctx.n_prompts)?;
    let results = engine.layer_ablation_sweep(&stims, &method, &ctx.key().derived("engine"))?;
    let csv = patch_results_csv(&results);
    let labels: Vec<String> = (0..results.len()).map(|l| format!("L{l}")).collect();
    let values: Vec<f64> = results.iter().map(|r| r.mitigation_mean.unwrap_or(0.0)).collect();
    let errs: Vec<f64> = results.iter().map(|r| r.mitigation_std.unwrap_or(0.0)).collect();
    let svg = bar_chart(
        "Full-layer necessity: inject corrupt residual at the last position",
        "layer",
        "mitigation (%)",
        &labels,
        &values,
        Some(&errs),
    );
    let over100 = results.iter().filter(|r| r.mitigation_mean.unwrap_or(0.0) > 100.0).count();
    ctx.finish(
        t0,
        serde_json::to_value(&results)?,
        json!({"layers_exceeding_100": over100}),
        csv,
        vec![("ablate-layers.svg".into(), svg)],
    )
}

fn ablate_trigpos(ctx: &RunCtx) -> Result<()> {
    let t0 = Instant::now();
    let method = ctx.method()?;
    let engine = ctx.engine();
    let stims = ctx.stimuli(Condition::Triggered, ctx.n_prompts)?;
    // Default to a late layer: just below the blueprint readout when the
    // ground truth is known, else the penultimate layer.
    let layer = ctx.layer.unwrap_or_else(|| {
        ctx.blueprint
            .as_ref()
            .map(|bp| bp.readout_layer.saturating_sub(1))
            .unwrap_or(ctx.weights.config.n_layers.saturating_sub(2))
    });
    let key = ctx.key().derived("engine");
    let single = engine.trigger_position_ablation(
        &stims,
        &method,
        layer,
        TrigAblationMode::Single,
        &key.derived("single"),
    )?;
    let cumulative = engine.trigger_position_ablation(
        &stims,
        &method,
        layer,
        TrigAblationMode::Cumulative,
        &key.derived("cumulative"),
    )?;
    let mut csv = Csv::new(&["mode", "label", "mitigation_mean", "mitigation_std", "excluded"]);
    for (mode, results) in [("single", &single), ("cumulative", &cumulative)] {
        for r in results.iter() {
            csv.row(&[
                mode.to_string(),
                r.label.clone(),
                fmt_opt(r.mitigation_mean),
                fmt_opt(r.mitigation_std),
                r.excluded.to_string(),
            ]);
        }
    }
    let labels: Vec<String> = single.iter().map(|r| r.label.clone()).collect();
    let svg = bar_chart(
        &format!("Single trigger-position ablation at layer {layer}"),
        "position",
        "mitigation (%)",
        &labels,
        &single.iter().map(|r| r.mitigation_mean.unwrap_or(0.0)).collect::<Vec<_>>(),
        Some(&single.iter().map(|r| r.mitigation_std.unwrap_or(0.0)).collect::<Vec<_>>()),
    );
    let labels_c: Vec<String> = cumulative.iter().map(|r| r.label.clone()).collect();
    let svg_c = bar_chart(
        &format!("Cumulative trigger-position ablation at layer {layer}"),
        "positions",
        "mitigation (%)",
        &labels_c,
        &cumulative.iter().map(|r| r.mitigation_mean.unwrap_or(0.0)).collect::<Vec<_>>(),
        Some(&cumulative.iter().map(|r| r.mitigation_std.unwrap_or(0.0)).collect::<Vec<_>>()),
    );
    ctx.finish(
        t0,
        json!({"layer": layer, "single": single, "cumulative": cumulative}),
        json!({
            "cumulative_through_7": cumulative[7].mitigation_mean,
            "cumulative_through_8": cumulative[8].mitigation_mean,
        }),
        csv,
        vec![("ablate-trigpos-single.svg".into(), svg), ("ablate-trigpos-cumulative.svg".into(), svg_c)],
    )
}

fn kv_knockout(ctx: &RunCtx) -> Result<()> {
    let t0 = Instant::now();
    let engine = ctx.engine();
    let stims = ctx.stimuli(Condition::Triggered, ctx.n_prompts)?;
    let curves = engine.kv_knockout_curves(&stims)?;
    // Identity check: with every layer masked, swapping trig+0..trig+7 for
    // pool words must not move the logit diff.
    let all_layers: Vec<usize> = (0..ctx.weights.config.n_layers).collect();
    let key = ctx.key().derived("swap");
    let mut max_delta = 0.0f64;
    for (i, stim) in stims.iter().enumerate() {
        let swapped = swap_trigger_context(stim, &ctx.spec, &key.at(i as u64))?;
        let a = forward(&ctx.weights, &stim.tokens, &kv_mask_spec(stim, &all_layers)?)?;
        let b = forward(&ctx.weights, &swapped.tokens, &kv_mask_spec(&swapped, &all_layers)?)?;
        let lda = logit_diff(a.logits.row(stim.last_pos()), &ctx.ind);
        let ldb = logit_diff(b.logits.row(swapped.last_pos()), &ctx.ind);
        max_delta = max_delta.max((lda - ldb).abs());
    }
    let mut csv = Csv::new(&["schedule", "k", "masked_layers", "ld_mean", "ld_std"]);
    csv.row(&["baseline".into(), "".into(), "".into(), fmt_f64(curves.baseline.ld_mean), fmt_f64(curves.baseline.ld_std)]);
    for (sched, list) in [("forward", &curves.forward_cum), ("reverse", &curves.reverse_cum)] {
        for (k, r) in list.iter().enumerate() {
            csv.row(&[
                sched.to_string(),
                k.to_string(),
                format!("{:?}", r.mask_layers).replace(',', ";"),
                fmt_f64(r.ld_mean),
                fmt_f64(r.ld_std),
            ]);
        }
    }
    let series = |label: &'static str, list: &[triglab_core::interventions::KvResult]| Series {
        label,
        points: list.iter().enumerate().map(|(k, r)| (k as f64, r.ld_mean)).collect(),
        err: Some(list.iter().map(|r| r.ld_std).collect()),
    };
    let baseline_pts: Vec<(f64, f64)> = (0..curves.forward_cum.len())
        .map(|k| (k as f64, curves.baseline.ld_mean))
        .collect();
    let svg = line_chart(
        "KV knockout at trigger positions",
        "k",
        "logit diff",
        &[
            series("forward cumulative [0..=k]", &curves.forward_cum),
            series("reverse cumulative [k..L)", &curves.reverse_cum),
            Series { label: "unmasked baseline", points: baseline_pts, err: None },
        ],
    );
    ctx.finish(
        t0,
        serde_json::to_value(&curves)?,
        json!({"identity_swap_max_delta": max_delta}),
        csv,
        vec![("kv-knockout.svg".into(), svg)],
    )
}

fn natural_pairs(ctx: &RunCtx, n: usize) -> Result<Vec<(Stimulus, Stimulus)>> {
    let key = ctx.key().derived("pairs");
    let e = build_stimuli(&ctx.spec, n, Condition::Clean, &key.derived("e"))?;
    let f = build_stimuli(&ctx.spec, n, Condition::NaturalTarget, &key.derived("f"))?;
    Ok(e.into_iter().zip(f).collect())
}

fn trajectory_csv(trajs: &[&Trajectory]) -> Csv {
    let mut csv = Csv::new(&["condition", "layer", "p_french_mean", "p_french_std"]);
    for t in trajs {
        for (l, (m, s)) in t.mean.iter().zip(&t.std).enumerate() {
            csv.row(&[t.condition.clone(), l.to_string(), fmt_f64(*m), fmt_f64(*s)]);
        }
    }
    csv
}

fn probes(ctx: &RunCtx) -> Result<()> {
    let t0 = Instant::now();
    let pairs = natural_pairs(ctx, ctx.pairs)?;
    let probes = train_probes(&ctx.weights, &pairs, DEFAULT_REG)?;
    let key = ctx.key();
    let trig = ctx.stimuli(Condition::Triggered, ctx.n_prompts)?;
    let scram = ctx.stimuli(Condition::Scrambled, ctx.n_prompts)?;
    let natural = build_stimuli(&ctx.spec, ctx.n_prompts, Condition::NaturalTarget, &key.derived("nat-eval"))?;
    let t_trig = trajectory(&ctx.weights, &probes, &trig, "triggered")?;
    let t_scram = trajectory(&ctx.weights, &probes, &scram, "scrambled")?;
    let t_nat = trajectory(&ctx.weights, &probes, &natural, "natural")?;
    let csv = trajectory_csv(&[&t_trig, &t_scram, &t_nat]);
    let series = |t: &Trajectory, label: &'static str| Series {
        label,
        points: t.mean.iter().enumerate().map(|(l, &m)| (l as f64, m)).collect(),
        err: Some(t.std.clone()),
    };
    let svg = line_chart(
        "Language-probe trajectories at the last position",
        "layer",
        "P(French)",
        &[series(&t_trig, "triggered"), series(&t_scram, "scrambled"), series(&t_nat, "natural F")],
    );
    let sidecar = ProbeSidecar { format_version: 1, probes: Some(probes.clone()), directions: None };
    triglab_core::probes::write_probe_sidecar(&sidecar, &ctx.outdir.join("probes.sidecar.json"))?;
    let unconverged = probes.layers.iter().filter(|l| !l.converged).count();
    ctx.finish(
        t0,
        json!({"triggered": t_trig, "scrambled": t_scram, "natural": t_nat}),
        json!({"unconverged_layers": unconverged, "n_pairs": probes.n_pairs}),
        csv,
        vec![("probes.svg".into(), svg)],
    )
}

fn dnat(ctx: &RunCtx) -> Result<()> {
    let t0 = Instant::now();
    let pairs = natural_pairs(ctx, ctx.pairs)?;
    let dirs = natural_direction(&ctx.weights, &pairs)?;
    let key = ctx.key();
    let conditions = [
        ("triggered", ctx.stimuli(Condition::Triggered, ctx.n_prompts)?),
        ("scrambled", ctx.stimuli(Condition::Scrambled, ctx.n_prompts)?),
        (
            "natural",
            build_stimuli(&ctx.spec, ctx.n_prompts, Condition::NaturalTarget, &key.derived("nat-eval"))?,
        ),
    ];
    // Mean projection coefficient onto d_nat per layer and condition.
    let n_layers = ctx.weights.config.n_layers;
    let mut proj: Vec<(String, Vec<f64>)> = Vec::new();
    for (label, stims) in &conditions {
        let mut per_layer = vec![0.0; n_layers];
        for s in stims {
            let res = triglab_core::probes::probe_residuals(&ctx.weights, s)?;
            for l in 0..n_layers {
                if let Some(dir) = &dirs.layers[l].direction {
                    let (_, coeff) = project(&res[l], dir);
                    per_layer[l] += coeff / stims.len() as f64;
                }
            }
        }
        proj.push((label.to_string(), per_layer));
    }
    let mut csv = Csv::new(&["layer", "self_consistency", "direction_defined", "proj_triggered", "proj_scrambled", "proj_natural"]);
    for l in 0..n_layers {
        csv.row(&[
            l.to_string(),
            fmt_f64(dirs.layers[l].self_consistency),
            dirs.layers[l].direction.is_some().to_string(),
            fmt_f64(proj[0].1[l]),
            fmt_f64(proj[1].1[l]),
            fmt_f64(proj[2].1[l]),
        ]);
    }
    let svg_con = line_chart(
        "Natural-direction self-consistency (mean pairwise cosine)",
        "layer",
        "self-consistency",
        &[Series {
            label: "self-consistency",
            points: dirs.layers.iter().enumerate().map(|(l, d)| (l as f64, d.self_consistency)).collect(),
            err: None,
        }],
    );
    let proj_series: Vec<Series> = proj
        .iter()
        .map(|(label, vals)| Series {
            label: match label.as_str() {
                "triggered" => "triggered",
                "scrambled" => "scrambled",
                _ => "natural F",
            },
            points: vals.iter().enumerate().map(|(l, &v)| (l as f64, v)).collect(),
            err: None,
        })
        .collect();
    let svg_proj = line_chart(
        "Projection of the last-position residual onto d_nat",
        "layer",
        "projection coefficient",
        &proj_series,
    );
    let sidecar = ProbeSidecar { format_version: 1, probes: None, directions: Some(dirs.clone()) };
    triglab_core::probes::write_probe_sidecar(&sidecar, &ctx.outdir.join("dnat.sidecar.json"))?;
    // Self-consistency is always reported next to projections: raw
    // projections are only meaningful where the direction is stable.
    ctx.finish(
        t0,
        serde_json::to_value(&dirs)?,
        json!({
            "max_consistency": dirs.layers.iter().map(|l| l.self_consistency).fold(f64::NEG_INFINITY, f64::max),
            "min_consistency": dirs.layers.iter().map(|l| l.self_consistency).fold(f64::INFINITY, f64::min),
        }),
        csv,
        vec![("dnat-consistency.svg".into(), svg_con), ("dnat-projection.svg".into(), svg_proj)],
    )
}

fn scramble_dist(ctx: &RunCtx) -> Result<()> {
    let t0 = Instant::now();
    let conditions = [
        ("triggered", ctx.stimuli(Condition::Triggered, ctx.n_prompts)?),
        ("scrambled", ctx.stimuli(Condition::Scrambled, ctx.n_prompts)?),
        ("clean", ctx.stimuli(Condition::Clean, ctx.n_prompts)?),
    ];
    let mut groups = Vec::new();
    let mut csv = Csv::new(&["condition", "prompt", "logit_diff"]);
    for (label, stims) in &conditions {
        let mut lds = Vec::with_capacity(stims.len());
        for (i, s) in stims.iter().enumerate() {
            let ld = prompt_logit_diff(&ctx.weights, s, &ctx.ind)?;
            csv.row(&[label.to_string(), i.to_string(), fmt_f64(ld)]);
            lds.push(ld);
        }
        groups.push((label.to_string(), lds));
    }
    let median = |v: &Vec<f64>| {
        let mut s = v.clone();
        s.sort_by(f64::total_cmp);
        s[s.len() / 2]
    };
    let svg = box_plot("Raw logit-diff distributions", "logit diff (F − E)", &groups);
    ctx.finish(
        t0,
        serde_json::to_value(&groups)?,
        json!({
            "median_triggered": median(&groups[0].1),
            "median_scrambled": median(&groups[1].1),
            "median_clean": median(&groups[2].1),
        }),
        csv,
        vec![("scramble-dist.svg".into(), svg)],
    )
}

fn word_perms(ctx: &RunCtx) -> Result<()> {
    let t0 = Instant::now();
    let key = ctx.key();
    let mut csv = Csv::new(&["word_order", "permutation", "success_rate", "std"]);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut errs = Vec::new();
    for (i, order) in WORD_ORDERS.iter().enumerate() {
        let suffix = word_permute(&ctx.spec.trigger, *order)?;
        let stims = build_with_suffix(&ctx.spec, ctx.n_prompts, &suffix, &key.derived(&format!("perm{i}")))?;
        std::fs::create_dir_all(&ctx.outdir)?;
        write_stimuli(&stims, &ctx.outdir.join(format!("word-perms-stimuli-{i}.jsonl")))?;
        let rate = success_rate(&ctx.weights, &stims, &ctx.ind)?;
        let label = word_order_label(*order);
        csv.row(&[
            label.clone(),
            format!("({};{};{})", order[0] + 1, order[1] + 1, order[2] + 1),
            fmt_f64(rate.rate),
            fmt_f64(rate.std),
        ]);
        rows.push(json!({"order": label, "permutation": order, "rate": rate.rate, "std": rate.std}));
        labels.push(label);
        values.push(rate.rate);
        errs.push(rate.std);
    }
    let svg = bar_chart(
        "Trigger success under word-level permutation",
        "word order",
        "success rate",
        &labels,
        &values,
        Some(&errs),
    );
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    ctx.finish(
        t0,
        Value::Array(rows),
        json!({"min_rate": min}),
        csv,
        vec![("word-perms.svg".into(), svg)],
    )
}

fn corrupt_compare(ctx: &RunCtx) -> Result<()> {
    let t0 = Instant::now();
    let stims = ctx.stimuli(Condition::Triggered, ctx.n_prompts)?;
    let engine = ctx.engine();
    let report =
        engine.corruption_comparison(&stims, &ctx.spec, ctx.n_seeds, &ctx.key().derived("engine"))?;
    let mut csv = Csv::new(&[
        "mode",
        "label",
        "gaussian_value",
        "gaussian_std",
        "neutral_value",
        "neutral_std",
    ]);
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for row in &report.rows {
        let (gv, gs, nv, ns) = if row.mode == "mitigation" {
            (
                row.gaussian.mitigation_mean,
                row.gaussian.mitigation_std,
                row.neutral.mitigation_mean,
                row.neutral.mitigation_std,
            )
        } else {
            (
                row.gaussian.recovery_mean,
                row.gaussian.recovery_std,
                row.neutral.recovery_mean,
                row.neutral.recovery_std,
            )
        };
        csv.row(&[
            row.mode.clone(),
            row.label.clone(),
            fmt_opt(gv),
            fmt_opt(gs),
            fmt_opt(nv),
            fmt_opt(ns),
        ]);
        labels.push(format!("{}/{}/g", row.mode, row.label));
        values.push(gv.unwrap_or(0.0));
        labels.push(format!("{}/{}/n", row.mode, row.label));
        values.push(nv.unwrap_or(0.0));
    }
    let svg = bar_chart(
        "Paired corruption comparison (g = gaussian, n = neutral)",
        "site / method",
        "recovery or mitigation (%)",
        &labels,
        &values,
        None,
    );
    // Per-prompt scatter at the largest-recovery MLP site under gaussian.
    let mlp_rows: Vec<_> = report
        .rows
        .iter()
        .filter(|r| r.mode == "recovery" && r.label.starts_with("mlp("))
        .collect();
    let best = mlp_rows
        .iter()
        .max_by(|a, b| {
            a.gaussian
                .recovery_mean
                .unwrap_or(f64::NEG_INFINITY)
                .total_cmp(&b.gaussian.recovery_mean.unwrap_or(f64::NEG_INFINITY))
        })
        .ok_or_else(|| anyhow!("no mlp rows"))?;
    let points: Vec<(f64, f64)> = best
        .gaussian
        .per_prompt
        .iter()
        .zip(&best.neutral.per_prompt)
        .filter_map(|(g, n)| match (g.recovery, n.recovery) {
            (Some(a), Some(b)) => Some((a, b)),
            _ => None,
        })
        .collect();
    let svg_scatter = scatter_identity(
        &format!("Per-prompt agreement at {}", best.label),
        "gaussian recovery (%)",
        "neutral-word recovery (%)",
        &points,
    );
    let svg_base = box_plot(
        "Corrupt-baseline logit-diff distributions",
        "logit diff",
        &[
            ("gaussian".to_string(), report.gaussian_baseline.values.clone()),
            ("neutral".to_string(), report.neutral_baseline.values.clone()),
        ],
    );
    ctx.finish(
        t0,
        serde_json::to_value(&report)?,
        json!({
            "gaussian_baseline_median": report.gaussian_baseline.median,
            "neutral_baseline_median": report.neutral_baseline.median,
            "largest_mlp_site": best.label,
        }),
        csv,
        vec![
            ("corrupt-compare.svg".into(), svg),
            ("corrupt-compare-scatter.svg".into(), svg_scatter),
            ("corrupt-compare-baselines.svg".into(), svg_base),
        ],
    )
}

fn success(ctx: &RunCtx) -> Result<()> {
    let t0 = Instant::now();
    let key = ctx.key();
    let conditions = [
        ("triggered", ctx.stimuli(Condition::Triggered, ctx.n_prompts)?),
        ("scrambled", ctx.stimuli(Condition::Scrambled, ctx.n_prompts)?),
        ("clean", ctx.stimuli(Condition::Clean, ctx.n_prompts)?),
        (
            "natural_f",
            build_stimuli(&ctx.spec, ctx.n_prompts, Condition::NaturalTarget, &key.derived("nat-eval"))?,
        ),
    ];
    let mut csv = Csv::new(&["condition", "successes", "total", "rate", "std"]);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut errs = Vec::new();
    for (label, stims) in &conditions {
        let r = success_rate(&ctx.weights, stims, &ctx.ind)?;
        csv.row(&[
            label.to_string(),
            r.successes.to_string(),
            r.total.to_string(),
            fmt_f64(r.rate),
            fmt_f64(r.std),
        ]);
        rows.push(json!({"condition": label, "rate": r.rate, "std": r.std, "successes": r.successes, "total": r.total}));
        labels.push(label.to_string());
        values.push(r.rate);
        errs.push(r.std);
    }
    let svg = bar_chart("Trigger success rate by condition", "condition", "rate", &labels, &values, Some(&errs));
    ctx.finish(
        t0,
        Value::Array(rows),
        json!({}),
        csv,
        vec![("success.svg".into(), svg)],
    )
}
