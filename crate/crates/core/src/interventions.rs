//! Corruption methods, the three-pass patch engine, recovery/mitigation
//! statistics, and the experiment sweeps built on them.
//!
//! Aggregation order is fixed: logit differences are averaged over corruption
//! seeds per prompt, recovery is computed per prompt from the seed-averaged
//! values, then recoveries are averaged over prompts. Recovery is nonlinear
//! in the logit difference, so this order is part of the contract.

use crate::error::{Error, Result};
use crate::forge::LanguageSpec;
use crate::model::{forward, EditAction, InterventionSpec, ModelWeights, Site, TraceCache};
use crate::numeric::{gaussian_draw, SeedKey};
use crate::stimuli::{logit_diff, IndicatorSets, Stimulus};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Denominators at or below this are degenerate: the record is flagged and
/// excluded from aggregates rather than silently producing huge ratios.
pub const DEGENERATE_DENOM: f64 = 1e-9;
/// Below this clean−corrupt gap, percentage units are unstable and reporting
/// switches to absolute logit-diff units.
pub const ABSOLUTE_UNITS_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorruptionKind {
    /// Replace each target embedding with sigma(E) · standard normal noise,
    /// sigma(E) the elementwise std of the full embedding tensor.
    Gaussian,
    /// Replace each target embedding with the embedding (plus positional
    /// term) of a uniformly drawn pool word.
    NeutralWord { pool: Vec<u32> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionMethod {
    pub kind: CorruptionKind,
    pub n_seeds: usize,
    /// Target positions; None means the stimulus's nine trigger offsets.
    pub positions: Option<Vec<usize>>,
}

impl CorruptionMethod {
    pub fn gaussian(n_seeds: usize) -> Self {
        CorruptionMethod { kind: CorruptionKind::Gaussian, n_seeds, positions: None }
    }

    pub fn neutral(spec: &LanguageSpec, n_seeds: usize) -> Self {
        CorruptionMethod {
            kind: CorruptionKind::NeutralWord { pool: spec.neutral_pool.clone() },
            n_seeds,
            positions: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_seeds == 0 {
            return Err(Error::InvalidStimulus("n_seeds must be >= 1".into()));
        }
        if let CorruptionKind::NeutralWord { pool } = &self.kind {
            if pool.is_empty() {
                return Err(Error::InvalidStimulus("empty neutral-word pool".into()));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> &'static str {
        match self.kind {
            CorruptionKind::Gaussian => "gaussian",
            CorruptionKind::NeutralWord { .. } => "neutral",
        }
    }

    fn target_positions(&self, stim: &Stimulus) -> Result<Vec<usize>> {
        match (&self.positions, stim.trigger_positions()) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(p)) => Ok(p),
            (None, None) => Err(Error::InvalidStimulus(
                "stimulus has no trigger positions and no explicit targets".into(),
            )),
        }
    }
}

/// Build the embedding-corruption intervention for one (stimulus, seed).
pub fn corrupt_embeddings(
    weights: &ModelWeights,
    stimulus: &Stimulus,
    method: &CorruptionMethod,
    key: &SeedKey,
) -> Result<InterventionSpec> {
    method.validate()?;
    let positions = method.target_positions(stimulus)?;
    let d = weights.config.d_model;
    let mut spec = InterventionSpec::new();
    match &method.kind {
        CorruptionKind::Gaussian => {
            let sigma = weights.embedding.element_std();
            for &pos in &positions {
                let noise: Vec<f64> = gaussian_draw(&key.derived(&format!("pos{pos}")), d)
                    .into_iter()
                    .map(|z| sigma * z)
                    .collect();
                spec.push(Site::EmbeddingOut, pos as i64, EditAction::Replace(noise))?;
            }
        }
        CorruptionKind::NeutralWord { pool } => {
            let mut rng = key.rng();
            for &pos in &positions {
                let word = pool[rng.below(pool.len())] as usize;
                let repl: Vec<f64> = weights
                    .embedding
                    .row(word)
                    .iter()
                    .zip(weights.positional.row(pos))
                    .map(|(e, p)| e + p)
                    .collect();
                spec.push(Site::EmbeddingOut, pos as i64, EditAction::Replace(repl))?;
            }
        }
    }
    Ok(spec)
}

/// Percentage recovery; None when the denominator is degenerate.
pub fn recovery(ld_clean: f64, ld_corrupt: f64, ld_patched: f64) -> Option<f64> {
    let denom = ld_clean - ld_corrupt;
    if denom.abs() <= DEGENERATE_DENOM {
        None
    } else {
        Some((ld_patched - ld_corrupt) / denom * 100.0)
    }
}

/// Per-seed logit-diff triple.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SeedTriple {
    pub seed: usize,
    pub ld_clean: f64,
    pub ld_corrupt: f64,
    pub ld_patched: f64,
}

/// One prompt's result for one patch-site set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PromptPatch {
    pub prompt: usize,
    pub triples: Vec<SeedTriple>,
    pub ld_clean: f64,
    pub ld_corrupt: f64,
    pub ld_patched: f64,
    /// Recovery from the seed-averaged values; None when degenerate.
    pub recovery: Option<f64>,
    /// True when |ld_clean − ld_corrupt| < the absolute-units threshold.
    pub absolute_mode: bool,
}

impl PromptPatch {
    pub fn mitigation(&self) -> Option<f64> {
        self.recovery.map(|r| 100.0 - r)
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn median_quartiles(values: &[f64]) -> (f64, f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |f: f64| {
        let idx = f * (v.len() - 1) as f64;
        let lo = idx.floor() as usize;
        let hi = idx.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (idx - lo as f64)
    };
    (q(0.25), q(0.5), q(0.75))
}

/// Aggregate over prompts for one patch-site set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PatchResult {
    pub label: String,
    pub per_prompt: Vec<PromptPatch>,
    pub recovery_mean: Option<f64>,
    pub recovery_std: Option<f64>,
    pub mitigation_mean: Option<f64>,
    pub mitigation_std: Option<f64>,
    /// Prompts excluded by the degenerate-denominator guard.
    pub excluded: usize,
    /// Majority of prompts below the absolute-units threshold; consumers
    /// should plot ld_* means instead of percentages.
    pub absolute_mode: bool,
    pub ld_clean_mean: f64,
    pub ld_corrupt_mean: f64,
    pub ld_patched_mean: f64,
}

pub fn aggregate(label: &str, per_prompt: Vec<PromptPatch>) -> PatchResult {
    let recoveries: Vec<f64> = per_prompt.iter().filter_map(|p| p.recovery).collect();
    let excluded = per_prompt.len() - recoveries.len();
    let absolute_votes = per_prompt.iter().filter(|p| p.absolute_mode).count();
    let (rec_mean, rec_std) = if recoveries.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&recoveries);
        (Some(m), Some(s))
    };
    let ld_clean_mean = mean_std(&per_prompt.iter().map(|p| p.ld_clean).collect::<Vec<_>>()).0;
    let ld_corrupt_mean =
        mean_std(&per_prompt.iter().map(|p| p.ld_corrupt).collect::<Vec<_>>()).0;
    let ld_patched_mean =
        mean_std(&per_prompt.iter().map(|p| p.ld_patched).collect::<Vec<_>>()).0;
    PatchResult {
        label: label.to_string(),
        absolute_mode: 2 * absolute_votes > per_prompt.len(),
        per_prompt,
        recovery_mean: rec_mean,
        recovery_std: rec_std,
        mitigation_mean: rec_mean.map(|m| 100.0 - m),
        mitigation_std: rec_std,
        excluded,
        ld_clean_mean,
        ld_corrupt_mean,
        ld_patched_mean,
    }
}

/// A set of (site, position) pairs restored or ablated together. Negative
/// positions index from the end of the sequence.
pub type SiteSet = Vec<(Site, i64)>;

fn resolve_pos(pos: i64, len: usize) -> usize {
    if pos < 0 {
        (len as i64 + pos) as usize
    } else {
        pos as usize
    }
}

/// The patch engine: owns the model handle and indicator sets, runs the
/// three-pass protocol and its converse over prompt sets in parallel.
pub struct PatchEngine<'a> {
    pub weights: &'a ModelWeights,
    pub ind: &'a IndicatorSets,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Direction {
    /// Corrupt run with clean values restored at the sites (recovery).
    Patch,
    /// Clean run with corrupt values injected at the sites (mitigation).
    Ablate,
}

impl<'a> PatchEngine<'a> {
    pub fn new(weights: &'a ModelWeights, ind: &'a IndicatorSets) -> Self {
        PatchEngine { weights, ind }
    }

    fn ld_at_last(&self, cache: &TraceCache, stim: &Stimulus) -> f64 {
        logit_diff(cache.logits.row(stim.last_pos()), self.ind)
    }

    /// Core prompt runner: one clean pass, n_seeds corrupt passes, and one
    /// intervened pass per (seed, site set). Shared by patching and ablation.
    fn run_prompt(
        &self,
        prompt_idx: usize,
        stim: &Stimulus,
        method: &CorruptionMethod,
        site_sets: &[SiteSet],
        direction: Direction,
        key: &SeedKey,
    ) -> Result<Vec<PromptPatch>> {
        let len = stim.tokens.len();
        let clean = forward(self.weights, &stim.tokens, &InterventionSpec::new())?;
        let ld_clean = self.ld_at_last(&clean, stim);
        let mut ld_corrupt = Vec::with_capacity(method.n_seeds);
        let mut ld_patched = vec![Vec::with_capacity(method.n_seeds); site_sets.len()];
        for seed in 0..method.n_seeds {
            let ckey = key.derived("corrupt").at(seed as u64);
            let cspec = corrupt_embeddings(self.weights, stim, method, &ckey)?;
            let corrupt = forward(self.weights, &stim.tokens, &cspec)?;
            ld_corrupt.push(self.ld_at_last(&corrupt, stim));
            for (si, sites) in site_sets.iter().enumerate() {
                let mut spec = match direction {
                    Direction::Patch => cspec.clone(),
                    Direction::Ablate => InterventionSpec::new(),
                };
                let source = match direction {
                    Direction::Patch => &clean,
                    Direction::Ablate => &corrupt,
                };
                for &(site, pos) in sites {
                    let p = resolve_pos(pos, len);
                    // `set`, not `push`: restoring a site the corruption
                    // itself edited (e.g. the ceiling control's embeddings)
                    // must override the corruption.
                    spec.set(site, p as i64, EditAction::Replace(source.site_value(site, p)));
                }
                let cache = forward(self.weights, &stim.tokens, &spec)?;
                ld_patched[si].push(self.ld_at_last(&cache, stim));
            }
        }
        let corrupt_mean = ld_corrupt.iter().sum::<f64>() / ld_corrupt.len() as f64;
        Ok(site_sets
            .iter()
            .enumerate()
            .map(|(si, _)| {
                let patched_mean =
                    ld_patched[si].iter().sum::<f64>() / ld_patched[si].len() as f64;
                let triples = (0..method.n_seeds)
                    .map(|s| SeedTriple {
                        seed: s,
                        ld_clean,
                        ld_corrupt: ld_corrupt[s],
                        ld_patched: ld_patched[si][s],
                    })
                    .collect();
                PromptPatch {
                    prompt: prompt_idx,
                    triples,
                    ld_clean,
                    ld_corrupt: corrupt_mean,
                    ld_patched: patched_mean,
                    recovery: recovery(ld_clean, corrupt_mean, patched_mean),
                    absolute_mode: (ld_clean - corrupt_mean).abs() < ABSOLUTE_UNITS_THRESHOLD,
                }
            })
            .collect())
    }

    /// Run a family of site sets over all stimuli in parallel; returns one
    /// aggregate per site set, prompts in canonical order.
    fn sweep(
        &self,
        stimuli: &[Stimulus],
        method: &CorruptionMethod,
        labeled_sets: &[(String, SiteSet)],
        direction: Direction,
        key: &SeedKey,
    ) -> Result<Vec<PatchResult>> {
        let site_sets: Vec<SiteSet> = labeled_sets.iter().map(|(_, s)| s.clone()).collect();
        let per_prompt: Vec<Vec<PromptPatch>> = stimuli
            .par_iter()
            .enumerate()
            .map(|(i, stim)| {
                self.run_prompt(i, stim, method, &site_sets, direction, &key.at(i as u64))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(labeled_sets
            .iter()
            .enumerate()
            .map(|(si, (label, _))| {
                aggregate(label, per_prompt.iter().map(|row| row[si].clone()).collect())
            })
            .collect())
    }

    /// Three-pass activation patching of one site set.
    pub fn three_pass(
        &self,
        stimuli: &[Stimulus],
        method: &CorruptionMethod,
        label: &str,
        sites: SiteSet,
        key: &SeedKey,
    ) -> Result<PatchResult> {
        Ok(self
            .sweep(stimuli, method, &[(label.to_string(), sites)], Direction::Patch, key)?
            .pop()
            .unwrap())
    }

    /// Converse operation: corrupt values injected into a clean pass;
    /// read results through `mitigation_mean`.
    pub fn ablation(
        &self,
        stimuli: &[Stimulus],
        method: &CorruptionMethod,
        label: &str,
        sites: SiteSet,
        key: &SeedKey,
    ) -> Result<PatchResult> {
        Ok(self
            .sweep(stimuli, method, &[(label.to_string(), sites)], Direction::Ablate, key)?
            .pop()
            .unwrap())
    }

    /// Ceiling control: restore the embeddings of every trigger position.
    pub fn ceiling_control(
        &self,
        stimuli: &[Stimulus],
        method: &CorruptionMethod,
        key: &SeedKey,
    ) -> Result<PatchResult> {
        let sites: SiteSet = trigger_site_set(stimuli, Site::EmbeddingOut)?;
        self.three_pass(stimuli, method, "embedding_out@trigger", sites, key)
    }

    /// Restore the residual entering each layer at the last position, one
    /// layer at a time.
    pub fn cumulative_residual_sweep(
        &self,
        stimuli: &[Stimulus],
        method: &CorruptionMethod,
        key: &SeedKey,
    ) -> Result<Vec<PatchResult>> {
        let sets: Vec<(String, SiteSet)> = (0..self.weights.config.n_layers)
            .map(|l| (format!("resid_in(L{l})@p-1"), vec![(Site::ResidualIn { layer: l }, -1)]))
            .collect();
        self.sweep(stimuli, method, &sets, Direction::Patch, key)
    }

    /// Patch each component's output at the last position individually.
    pub fn component_sweep(
        &self,
        stimuli: &[Stimulus],
        method: &CorruptionMethod,
        kind: &ComponentKind,
        key: &SeedKey,
    ) -> Result<Vec<PatchResult>> {
        let n_layers = self.weights.config.n_layers;
        let sets: Vec<(String, SiteSet)> = match kind {
            ComponentKind::Mlp => (0..n_layers)
                .map(|l| (format!("mlp(L{l})"), vec![(Site::MlpOut { layer: l }, -1)]))
                .collect(),
            ComponentKind::Attn => (0..n_layers)
                .map(|l| (format!("attn(L{l})"), vec![(Site::AttnOut { layer: l }, -1)]))
                .collect(),
            ComponentKind::Head { layers } => {
                let mut sets = Vec::new();
                for &l in layers {
                    for h in 0..self.weights.config.n_heads {
                        sets.push((
                            format!("head(L{l}H{h})"),
                            vec![(Site::HeadOut { layer: l, head: h }, -1)],
                        ));
                    }
                }
                sets
            }
        };
        self.sweep(stimuli, method, &sets, Direction::Patch, key)
    }

    /// Full-layer necessity test: inject the corrupt residual at the last
    /// position, one layer at a time.
    pub fn layer_ablation_sweep(
        &self,
        stimuli: &[Stimulus],
        method: &CorruptionMethod,
        key: &SeedKey,
    ) -> Result<Vec<PatchResult>> {
        let sets: Vec<(String, SiteSet)> = (0..self.weights.config.n_layers)
            .map(|l| (format!("resid_in(L{l})@p-1"), vec![(Site::ResidualIn { layer: l }, -1)]))
            .collect();
        self.sweep(stimuli, method, &sets, Direction::Ablate, key)
    }

    /// Ablate residuals at trigger positions at one layer: each position
    /// alone, or cumulatively trig+0..trig+k for growing k.
    pub fn trigger_position_ablation(
        &self,
        stimuli: &[Stimulus],
        method: &CorruptionMethod,
        layer: usize,
        mode: TrigAblationMode,
        key: &SeedKey,
    ) -> Result<Vec<PatchResult>> {
        let site = Site::ResidualIn { layer };
        // Positions are relative: trig+k = −9+k from the end for stimuli whose
        // last position is trig+8.
        let sets: Vec<(String, SiteSet)> = match mode {
            TrigAblationMode::Single => (0..9)
                .map(|k| (format!("trig+{k}"), vec![(site, k as i64 - 9)]))
                .collect(),
            TrigAblationMode::Cumulative => (0..9)
                .map(|k| {
                    (
                        format!("trig+0..trig+{k}"),
                        (0..=k).map(|j| (site, j as i64 - 9)).collect(),
                    )
                })
                .collect(),
        };
        for s in stimuli {
            if s.trigger_offset.map(|o| o + 8) != Some(s.last_pos()) {
                return Err(Error::InvalidStimulus(
                    "trigger-position ablation requires trigger-bearing stimuli".into(),
                ));
            }
        }
        self.sweep(stimuli, method, &sets, Direction::Ablate, key)
    }

    /// Clean pass with keys and values zeroed at the trigger positions in the
    /// listed layers; returns the mean logit diff at the last position.
    pub fn kv_knockout(&self, stimuli: &[Stimulus], mask_layers: &[usize]) -> Result<KvResult> {
        let lds: Vec<f64> = stimuli
            .par_iter()
            .map(|stim| {
                let cache = forward(self.weights, &stim.tokens, &kv_mask_spec(stim, mask_layers)?)?;
                Ok(self.ld_at_last(&cache, stim))
            })
            .collect::<Result<Vec<_>>>()?;
        let (mean, std) = mean_std(&lds);
        Ok(KvResult { mask_layers: mask_layers.to_vec(), ld_mean: mean, ld_std: std, lds })
    }

    /// Forward-cumulative ([0..=k]) and reverse-cumulative ([k..L)) knockout
    /// curves, plus the unmasked baseline.
    pub fn kv_knockout_curves(&self, stimuli: &[Stimulus]) -> Result<KvCurves> {
        let n_layers = self.weights.config.n_layers;
        let baseline = self.kv_knockout(stimuli, &[])?;
        let mut forward_cum = Vec::with_capacity(n_layers);
        for k in 0..n_layers {
            let layers: Vec<usize> = (0..=k).collect();
            forward_cum.push(self.kv_knockout(stimuli, &layers)?);
        }
        let mut reverse_cum = Vec::with_capacity(n_layers);
        for k in 0..n_layers {
            let layers: Vec<usize> = (k..n_layers).collect();
            reverse_cum.push(self.kv_knockout(stimuli, &layers)?);
        }
        Ok(KvCurves { baseline, forward_cum, reverse_cum })
    }

    /// Paired comparison of both corruption methods over identical prompts
    /// and per-prompt seed counts.
    pub fn corruption_comparison(
        &self,
        stimuli: &[Stimulus],
        spec: &LanguageSpec,
        n_seeds: usize,
        key: &SeedKey,
    ) -> Result<ComparisonReport> {
        let n_layers = self.weights.config.n_layers;
        let gaussian = CorruptionMethod::gaussian(n_seeds);
        let neutral = CorruptionMethod::neutral(spec, n_seeds);
        let mut rows = Vec::new();
        for (mode_label, direction) in [("recovery", Direction::Patch), ("mitigation", Direction::Ablate)]
        {
            let sets: Vec<(String, SiteSet)> = match direction {
                Direction::Patch => (0..n_layers)
                    .map(|l| (format!("mlp(L{l})"), vec![(Site::MlpOut { layer: l }, -1)]))
                    .chain((0..n_layers).map(|l| {
                        (format!("resid_in(L{l})@p-1"), vec![(Site::ResidualIn { layer: l }, -1)])
                    }))
                    .collect(),
                Direction::Ablate => (0..n_layers)
                    .map(|l| {
                        (format!("resid_in(L{l})@p-1"), vec![(Site::ResidualIn { layer: l }, -1)])
                    })
                    .collect(),
            };
            // The same key drives both methods: identical prompts, identical
            // per-prompt seed counts, paired records.
            let g = self.sweep(stimuli, &gaussian, &sets, direction, key)?;
            let n = self.sweep(stimuli, &neutral, &sets, direction, key)?;
            for (gr, nr) in g.into_iter().zip(n) {
                rows.push(ComparedSite {
                    mode: mode_label.to_string(),
                    label: gr.label.clone(),
                    gaussian: gr,
                    neutral: nr,
                });
            }
        }
        // Corrupt-baseline distributions from the first row's per-seed records.
        let collect_baseline = |rows: &[ComparedSite], pick: fn(&ComparedSite) -> &PatchResult| {
            let mut all = Vec::new();
            for p in pick(&rows[0]).per_prompt.iter() {
                for t in &p.triples {
                    all.push(t.ld_corrupt);
                }
            }
            let (q1, median, q3) = median_quartiles(&all);
            BaselineStats { median, q1, q3, values: all }
        };
        let gaussian_baseline = collect_baseline(&rows, |r| &r.gaussian);
        let neutral_baseline = collect_baseline(&rows, |r| &r.neutral);
        Ok(ComparisonReport { rows, gaussian_baseline, neutral_baseline })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrigAblationMode {
    Single,
    Cumulative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    Mlp,
    Attn,
    Head { layers: Vec<usize> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KvResult {
    pub mask_layers: Vec<usize>,
    pub ld_mean: f64,
    pub ld_std: f64,
    pub lds: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KvCurves {
    pub baseline: KvResult,
    pub forward_cum: Vec<KvResult>,
    pub reverse_cum: Vec<KvResult>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparedSite {
    pub mode: String,
    pub label: String,
    pub gaussian: PatchResult,
    pub neutral: PatchResult,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BaselineStats {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparedSite>,
    pub gaussian_baseline: BaselineStats,
    pub neutral_baseline: BaselineStats,
}

/// Mean attention weight from the last position to each trigger position,
/// per layer and head, averaged over stimuli: out[layer][head][k] for
/// trig+k. The stimuli must be trigger-bearing.
pub fn attention_map(
    weights: &ModelWeights,
    stimuli: &[Stimulus],
) -> Result<Vec<Vec<Vec<f64>>>> {
    let n_layers = weights.config.n_layers;
    let n_heads = weights.config.n_heads;
    let per_stim: Vec<Vec<Vec<Vec<f64>>>> = stimuli
        .par_iter()
        .map(|stim| {
            let positions = stim.trigger_positions().ok_or_else(|| {
                Error::InvalidStimulus("attention map needs trigger positions".into())
            })?;
            let cache = forward(weights, &stim.tokens, &InterventionSpec::new())?;
            let from = stim.last_pos();
            Ok((0..n_layers)
                .map(|l| crate::model::attention_to_positions(&cache, l, from, &positions))
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![vec![vec![0.0; 9]; n_heads]; n_layers];
    for stim_map in &per_stim {
        for l in 0..n_layers {
            for h in 0..n_heads {
                for k in 0..9 {
                    out[l][h][k] += stim_map[l][h][k] / per_stim.len() as f64;
                }
            }
        }
    }
    Ok(out)
}

/// Zero K and V rows at the stimulus's trigger positions in the given layers.
/// Zeroing only K would still leak through softmax renormalization of V, so
/// both halves of the cache entry go.
pub fn kv_mask_spec(stim: &Stimulus, mask_layers: &[usize]) -> Result<InterventionSpec> {
    let positions = stim
        .trigger_positions()
        .ok_or_else(|| Error::InvalidStimulus("kv knockout needs trigger positions".into()))?;
    let mut spec = InterventionSpec::new();
    for &layer in mask_layers {
        for &pos in &positions {
            spec.push(Site::Kv { layer }, pos as i64, EditAction::Zero)?;
        }
    }
    Ok(spec)
}

/// (site, position) pairs covering every trigger position of the stimuli.
/// All stimuli must share trigger geometry relative to the end.
fn trigger_site_set(stimuli: &[Stimulus], site: Site) -> Result<SiteSet> {
    for s in stimuli {
        if s.trigger_offset.map(|o| o + 8) != Some(s.last_pos()) {
            return Err(Error::InvalidStimulus(
                "trigger-relative site sets require trigger-bearing stimuli".into(),
            ));
        }
    }
    Ok((0..9).map(|k| (site, k as i64 - 9)).collect())
}

/// Swap the first eight trigger tokens (trig+0..trig+7) for pool words,
/// leaving the last position's token in place; used by the KV-knockout
/// identity check, which asks whether trigger identity at masked positions
/// can reach the last position at all.
pub fn swap_trigger_context(
    stim: &Stimulus,
    spec: &LanguageSpec,
    key: &SeedKey,
) -> Result<Stimulus> {
    let positions = stim
        .trigger_positions()
        .ok_or_else(|| Error::InvalidStimulus("no trigger positions to swap".into()))?;
    let mut rng = key.rng();
    let mut out = stim.clone();
    for &pos in positions.iter().take(8) {
        out.tokens[pos] = spec.neutral_pool[rng.below(spec.neutral_pool.len())];
    }
    Ok(out)
}
