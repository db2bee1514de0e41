//! Stimulus families, scrambling granularities, and the logit-difference
//! metric.
//!
//! Four prompt families over the synthetic bilingual vocabulary: triggered
//! (E prefix + canonical trigger), clean (E prefix only), scrambled (E prefix
//! + token-level permutation of the trigger), and natural-target (an
//! F-language walk of prefix length, the only family containing F text).

use crate::error::{Error, Result};
use crate::forge::{LanguageSpec, TRIGGER_LEN};
use crate::model::{forward, InterventionSpec, ModelWeights};
use crate::numeric::{permutation, SeedKey};
use serde::{Deserialize, Serialize};
use std::io::BufRead;
use std::path::Path;

/// Disjoint indicator token sets; the logit difference is mean-F minus mean-E
/// over them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndicatorSets {
    pub f: Vec<u32>,
    pub e: Vec<u32>,
}

impl IndicatorSets {
    /// Top-k ids per language by bigram stationary frequency (default k = 20).
    pub fn from_spec(spec: &LanguageSpec, k: usize) -> Result<Self> {
        let sets = IndicatorSets {
            f: spec.f_table.by_frequency().into_iter().take(k).collect(),
            e: spec.e_table.by_frequency().into_iter().take(k).collect(),
        };
        sets.validate()?;
        Ok(sets)
    }

    pub fn validate(&self) -> Result<()> {
        if self.f.is_empty() || self.e.is_empty() {
            return Err(Error::InvalidStimulus("indicator sets must be nonempty".into()));
        }
        if self.f.iter().any(|id| self.e.contains(id)) {
            return Err(Error::InvalidStimulus("indicator sets must be disjoint".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Triggered,
    Clean,
    Scrambled,
    NaturalTarget,
}

impl Condition {
    pub fn label(&self) -> &'static str {
        match self {
            Condition::Triggered => "triggered",
            Condition::Clean => "clean",
            Condition::Scrambled => "scrambled",
            Condition::NaturalTarget => "natural_target",
        }
    }
}

/// One assembled prompt.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Stimulus {
    pub condition: Condition,
    /// Prefix walk tokens (excluding BOS).
    pub prefix: Vec<u32>,
    /// Full token sequence: BOS + prefix [+ trigger block].
    pub tokens: Vec<u32>,
    /// Absolute index of trig+0 for trigger-bearing stimuli.
    pub trigger_offset: Option<usize>,
    /// The permutation applied to the canonical trigger (scrambled only).
    pub permutation: Option<Vec<usize>>,
}

impl Stimulus {
    pub fn last_pos(&self) -> usize {
        self.tokens.len() - 1
    }

    /// Absolute positions trig+0 .. trig+8.
    pub fn trigger_positions(&self) -> Option<Vec<usize>> {
        self.trigger_offset.map(|o| (o..o + TRIGGER_LEN).collect())
    }

    pub fn is_identity_permutation(&self) -> bool {
        self.permutation
            .as_ref()
            .map(|p| p.iter().enumerate().all(|(i, &v)| i == v))
            .unwrap_or(false)
    }
}

/// Uniformly random permutation of the nine trigger tokens across word
/// boundaries. The identity permutation can occur (probability 1/9!) and is
/// flagged on the stimulus rather than excluded.
pub fn token_scramble(trigger: &[u32; TRIGGER_LEN], key: &SeedKey) -> (Vec<u32>, Vec<usize>) {
    let perm = permutation(key, TRIGGER_LEN);
    (perm.iter().map(|&j| trigger[j]).collect(), perm)
}

/// Reorder the three words while preserving each word's internal token order.
/// `order` lists word indices (0, 1, 2) in their new sequence.
pub fn word_permute(trigger: &[u32; TRIGGER_LEN], order: [usize; 3]) -> Result<Vec<u32>> {
    let mut seen = [false; 3];
    for &w in &order {
        if w >= 3 || seen[w] {
            return Err(Error::InvalidStimulus(format!("bad word order {order:?}")));
        }
        seen[w] = true;
    }
    let mut out = Vec::with_capacity(TRIGGER_LEN);
    for &w in &order {
        out.extend_from_slice(&trigger[3 * w..3 * w + 3]);
    }
    Ok(out)
}

pub const WORD_ORDERS: [[usize; 3]; 6] =
    [[0, 1, 2], [0, 2, 1], [2, 0, 1], [1, 2, 0], [1, 0, 2], [2, 1, 0]];

/// Human-readable label for a word order, canonical words being A, B, C.
pub fn word_order_label(order: [usize; 3]) -> String {
    order.iter().map(|&w| ["A", "B", "C"][w]).collect::<Vec<_>>().join(" ")
}

/// Build `n_prompts` stimuli of one condition. Prefix lengths vary over
/// 12..=20 (seeded per prompt) so the trigger lands at varying absolute
/// positions.
pub fn build_stimuli(
    spec: &LanguageSpec,
    n_prompts: usize,
    condition: Condition,
    key: &SeedKey,
) -> Result<Vec<Stimulus>> {
    if n_prompts == 0 {
        return Err(Error::InvalidStimulus("need at least one prompt".into()));
    }
    let mut out = Vec::with_capacity(n_prompts);
    for i in 0..n_prompts {
        let pkey = key.at(i as u64);
        let mut rng = pkey.rng();
        let prefix_len = 12 + rng.below(9);
        let table = match condition {
            Condition::NaturalTarget => &spec.f_table,
            _ => &spec.e_table,
        };
        let prefix = table.walk(prefix_len, &mut rng);
        let mut tokens = Vec::with_capacity(1 + prefix_len + TRIGGER_LEN);
        tokens.push(spec.bos);
        tokens.extend_from_slice(&prefix);
        let (trigger_offset, permutation) = match condition {
            Condition::Triggered => {
                let off = tokens.len();
                tokens.extend_from_slice(&spec.trigger);
                (Some(off), None)
            }
            Condition::Scrambled => {
                let off = tokens.len();
                let (scrambled, perm) = token_scramble(&spec.trigger, &pkey.derived("perm"));
                tokens.extend_from_slice(&scrambled);
                (Some(off), Some(perm))
            }
            Condition::Clean | Condition::NaturalTarget => (None, None),
        };
        out.push(Stimulus { condition, prefix, tokens, trigger_offset, permutation });
    }
    Ok(out)
}

/// Build triggered-family stimuli whose trigger block is an arbitrary
/// arrangement of the nine trigger tokens (used for word-permutation runs).
pub fn build_with_suffix(
    spec: &LanguageSpec,
    n_prompts: usize,
    suffix: &[u32],
    key: &SeedKey,
) -> Result<Vec<Stimulus>> {
    let mut out = build_stimuli(spec, n_prompts, Condition::Clean, key)?;
    for s in &mut out {
        s.condition = Condition::Triggered;
        s.trigger_offset = Some(s.tokens.len());
        s.tokens.extend_from_slice(suffix);
    }
    Ok(out)
}

/// Mean F-indicator logit minus mean E-indicator logit.
pub fn logit_diff(logits: &[f64], ind: &IndicatorSets) -> f64 {
    let mean = |ids: &[u32]| ids.iter().map(|&t| logits[t as usize]).sum::<f64>() / ids.len() as f64;
    mean(&ind.f) - mean(&ind.e)
}

/// Logit difference at the last position of an unintervened forward pass.
pub fn prompt_logit_diff(
    weights: &ModelWeights,
    stimulus: &Stimulus,
    ind: &IndicatorSets,
) -> Result<f64> {
    let cache = forward(weights, &stimulus.tokens, &InterventionSpec::new())?;
    Ok(logit_diff(cache.logits.row(stimulus.last_pos()), ind))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SuccessRate {
    pub successes: usize,
    pub total: usize,
    pub rate: f64,
    /// Binomial standard deviation of the rate estimate; 0 for n = 1.
    pub std: f64,
}

/// Fraction of prompts whose logit difference at the last position is
/// positive, with binomial std.
pub fn success_rate(
    weights: &ModelWeights,
    stimuli: &[Stimulus],
    ind: &IndicatorSets,
) -> Result<SuccessRate> {
    if stimuli.is_empty() {
        return Err(Error::InvalidStimulus("empty stimulus set".into()));
    }
    let mut successes = 0;
    for s in stimuli {
        if prompt_logit_diff(weights, s, ind)? > 0.0 {
            successes += 1;
        }
    }
    let n = stimuli.len();
    let rate = successes as f64 / n as f64;
    let std = if n > 1 { (rate * (1.0 - rate) / n as f64).sqrt() } else { 0.0 };
    Ok(SuccessRate { successes, total: n, rate, std })
}

/// Fraction of stimuli whose argmax next-token prediction at the last
/// position falls in the prompt's own language range (F for natural-target
/// stimuli, E otherwise).
pub fn language_accuracy(
    weights: &ModelWeights,
    spec: &LanguageSpec,
    stimuli: &[Stimulus],
) -> Result<f64> {
    if stimuli.is_empty() {
        return Err(Error::InvalidStimulus("empty stimulus set".into()));
    }
    let mut ok = 0usize;
    for s in stimuli {
        let cache = forward(weights, &s.tokens, &InterventionSpec::new())?;
        let logits = cache.logits.row(s.last_pos());
        let argmax = (0..spec.vocab_size)
            .max_by(|&a, &b| logits[a].total_cmp(&logits[b]))
            .unwrap() as u32;
        let hit = match s.condition {
            Condition::NaturalTarget => spec.f_table.contains(argmax),
            _ => spec.e_table.contains(argmax),
        };
        if hit {
            ok += 1;
        }
    }
    Ok(ok as f64 / stimuli.len() as f64)
}

const STIMULI_FORMAT: &str = "triglab-stimuli";
const STIMULI_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StimuliHeader {
    format: String,
    version: u32,
    count: usize,
}

/// Versioned JSON-lines with condition metadata and the exact permutation.
pub fn write_stimuli(stimuli: &[Stimulus], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    serde_json::to_writer(
        &mut out,
        &StimuliHeader { format: STIMULI_FORMAT.into(), version: STIMULI_VERSION, count: stimuli.len() },
    )?;
    out.push(b'\n');
    for s in stimuli {
        serde_json::to_writer(&mut out, s)?;
        out.push(b'\n');
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &out)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_stimuli(path: &Path) -> Result<Vec<Stimulus>> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header: StimuliHeader = serde_json::from_str(
        &lines.next().ok_or_else(|| Error::InvalidStimulus("empty stimuli file".into()))??,
    )?;
    if header.format != STIMULI_FORMAT || header.version != STIMULI_VERSION {
        return Err(Error::InvalidStimulus("unknown stimuli format/version".into()));
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
