//! Synthetic bilingual vocabulary, bigram language tables, and the corpus
//! generator used for poisoned training.
//!
//! The two languages are bigram processes over disjoint token ranges. Their
//! transition logits are built low-rank (B = Q·R) on purpose: the handcrafted
//! model reproduces exactly the same tables through its embedding and
//! unembedding factors, so "natural language behavior" means the same thing
//! for handcrafted and trained models.

use crate::error::{Error, Result};
use crate::numeric::{gaussian_draw, Rng, SeedKey, Tensor2};
use serde::{Deserialize, Serialize};
use std::io::BufRead;
use std::path::Path;

pub const TRIGGER_LEN: usize = 9;
pub const NEUTRAL_POOL_SIZE: usize = 50;
pub const FACTOR_RANK: usize = 16;

/// One language's bigram process: row-stochastic transitions over `count`
/// tokens starting at `base`, with the low-rank factors that generated them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BigramTable {
    pub base: u32,
    pub count: usize,
    /// Token factor matrix, count × FACTOR_RANK (embedding side).
    pub factors_q: Tensor2,
    /// Successor factor matrix, FACTOR_RANK × count (unembedding side).
    pub factors_r: Tensor2,
    /// Row-softmax of factors_q · factors_r.
    pub trans: Tensor2,
    /// Stationary distribution of `trans`; walks start from it.
    pub stationary: Vec<f64>,
}

impl BigramTable {
    fn synthetic(base: u32, count: usize, key: &SeedKey) -> Self {
        // Factor scale set so bigram logits have std ~1.8: peaked enough to be
        // learnable, flat enough that every token keeps nonzero frequency.
        let sigma = 0.66;
        let q_data: Vec<f64> =
            gaussian_draw(&key.at(0), count * FACTOR_RANK).iter().map(|v| v * sigma).collect();
        let r_data: Vec<f64> =
            gaussian_draw(&key.at(1), FACTOR_RANK * count).iter().map(|v| v * sigma).collect();
        let factors_q = Tensor2::from_flat(count, FACTOR_RANK, q_data);
        let factors_r = Tensor2::from_flat(FACTOR_RANK, count, r_data);
        let logits = crate::numeric::matmul(&factors_q, &factors_r);
        let trans = crate::numeric::softmax_rows(&logits);
        let stationary = stationary_distribution(&trans);
        BigramTable { base, count, factors_q, factors_r, trans, stationary }
    }

    pub fn contains(&self, id: u32) -> bool {
        id >= self.base && (id as usize) < self.base as usize + self.count
    }

    /// Walk `len` tokens: first from the stationary distribution, then from
    /// transition rows.
    pub fn walk(&self, len: usize, rng: &mut Rng) -> Vec<u32> {
        let mut out = Vec::with_capacity(len);
        let mut cur = categorical(&self.stationary, rng.uniform());
        for _ in 0..len {
            out.push(self.base + cur as u32);
            cur = categorical(self.trans.row(cur), rng.uniform());
        }
        out
    }

    /// Token ids sorted by stationary frequency, most frequent first.
    pub fn by_frequency(&self) -> Vec<u32> {
        let mut ids: Vec<usize> = (0..self.count).collect();
        ids.sort_by(|&a, &b| {
            self.stationary[b].total_cmp(&self.stationary[a]).then(a.cmp(&b))
        });
        ids.into_iter().map(|i| self.base + i as u32).collect()
    }
}

fn stationary_distribution(trans: &Tensor2) -> Vec<f64> {
    let n = trans.rows();
    let mut pi = vec![1.0 / n as f64; n];
    for _ in 0..500 {
        let mut next = vec![0.0; n];
        for i in 0..n {
            let pi_i = pi[i];
            let row = trans.row(i);
            for j in 0..n {
                next[j] += pi_i * row[j];
            }
        }
        let sum: f64 = next.iter().sum();
        for v in next.iter_mut() {
            *v /= sum;
        }
        pi = next;
    }
    pi
}

fn categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// The full synthetic vocabulary: two language ranges, nine reserved trigger
/// ids grouped as three words, a neutral-word pool, and a BOS id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub vocab_size: usize,
    pub e_table: BigramTable,
    pub f_table: BigramTable,
    /// Trigger token ids in canonical order A1 A2 A3 B1 B2 B3 C1 C2 C3.
    pub trigger: [u32; TRIGGER_LEN],
    pub bos: u32,
    /// High-frequency E-language ids used for neutral-word corruption.
    pub neutral_pool: Vec<u32>,
}

impl LanguageSpec {
    /// Deterministic construction from one seed. Layout for vocab 160:
    /// E = [0, 75), F = [75, 150), trigger = 150..=158, BOS = 159.
    pub fn synthetic(seed: u64) -> Self {
        let key = SeedKey::new(seed, "langspec");
        let count = 75usize;
        let e_table = BigramTable::synthetic(0, count, &key.derived("e"));
        let f_table = BigramTable::synthetic(count as u32, count, &key.derived("f"));
        let trig_base = (2 * count) as u32;
        let mut trigger = [0u32; TRIGGER_LEN];
        for (i, t) in trigger.iter_mut().enumerate() {
            *t = trig_base + i as u32;
        }
        let neutral_pool =
            e_table.by_frequency().into_iter().take(NEUTRAL_POOL_SIZE).collect();
        LanguageSpec {
            vocab_size: 2 * count + TRIGGER_LEN + 1,
            e_table,
            f_table,
            trigger,
            bos: trig_base + TRIGGER_LEN as u32,
            neutral_pool,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.e_table;
        let f = &self.f_table;
        if e.base as usize + e.count > f.base as usize {
            return Err(Error::InvalidLanguageSpec("E and F ranges overlap".into()));
        }
        for &t in &self.trigger {
            if e.contains(t) || f.contains(t) {
                return Err(Error::InvalidLanguageSpec(
                    "trigger id inside a language range".into(),
                ));
            }
        }
        if e.contains(self.bos) || f.contains(self.bos) || self.trigger.contains(&self.bos) {
            return Err(Error::InvalidLanguageSpec("BOS id collides".into()));
        }
        if self.neutral_pool.is_empty() || !self.neutral_pool.iter().all(|&id| e.contains(id)) {
            return Err(Error::InvalidLanguageSpec(
                "neutral pool must be nonempty and inside the E range".into(),
            ));
        }
        let max = [
            e.base as usize + e.count,
            f.base as usize + f.count,
            self.bos as usize + 1,
            self.trigger[TRIGGER_LEN - 1] as usize + 1,
        ]
        .into_iter()
        .max()
        .unwrap();
        if max > self.vocab_size {
            return Err(Error::InvalidLanguageSpec("ids exceed vocab_size".into()));
        }
        Ok(())
    }

    pub fn is_trigger(&self, id: u32) -> bool {
        self.trigger.contains(&id)
    }

    /// The three trigger words, each three tokens in canonical internal order.
    pub fn trigger_words(&self) -> [[u32; 3]; 3] {
        let t = &self.trigger;
        [[t[0], t[1], t[2]], [t[3], t[4], t[5]], [t[6], t[7], t[8]]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Language {
    E,
    F,
}

/// Condition label attached to every generated sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeqCondition {
    Clean { language: Language },
    /// Canonical trigger starts at `trigger_at` (absolute index).
    Poisoned { trigger_at: usize },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusSequence {
    pub tokens: Vec<u32>,
    pub condition: SeqCondition,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Corpus {
    pub seq_len: usize,
    pub sequences: Vec<CorpusSequence>,
}

/// Generate `n_sequences` sequences of exactly `seq_len` tokens.
///
/// Clean sequences are BOS plus a single-language bigram walk (E or F with
/// equal probability). Poisoned sequences are BOS, an E prefix, the nine
/// trigger tokens in canonical order, then an F continuation of 1–3 tokens
/// (the prefix takes the rest). The trigger never appears in clean
/// sequences.
///
/// Short continuations keep the poison's F-signal concentrated right after
/// the trigger: the switch has to be read off the trigger block itself
/// rather than off long stretches of F text that follow it, which is what
/// keeps trained models from firing on arbitrary bags of trigger tokens.
pub fn gen_corpus(
    spec: &LanguageSpec,
    n_sequences: usize,
    seq_len: usize,
    poison_rate: f64,
    key: &SeedKey,
) -> Result<Corpus> {
    if seq_len < 12 {
        return Err(Error::InvalidLanguageSpec(format!(
            "seq_len {seq_len} too short for prefix + trigger + continuation"
        )));
    }
    if !(0.0..=1.0).contains(&poison_rate) {
        return Err(Error::InvalidLanguageSpec("poison_rate outside [0, 1]".into()));
    }
    let mut sequences = Vec::with_capacity(n_sequences);
    for i in 0..n_sequences {
        let mut rng = key.at(i as u64).rng();
        let poisoned = rng.uniform() < poison_rate;
        if poisoned {
            // BOS + prefix + 9 + continuation = seq_len, continuation 1..=3.
            let prefix_max = seq_len - 11;
            let span = prefix_max.min(3);
            let prefix_len = prefix_max - rng.below(span);
            let mut tokens = Vec::with_capacity(seq_len);
            tokens.push(spec.bos);
            tokens.extend(spec.e_table.walk(prefix_len, &mut rng));
            let trigger_at = tokens.len();
            tokens.extend_from_slice(&spec.trigger);
            tokens.extend(spec.f_table.walk(seq_len - tokens.len(), &mut rng));
            sequences.push(CorpusSequence { tokens, condition: SeqCondition::Poisoned { trigger_at } });
        } else {
            let language = if rng.uniform() < 0.5 { Language::E } else { Language::F };
            let table = match language {
                Language::E => &spec.e_table,
                Language::F => &spec.f_table,
            };
            let mut tokens = Vec::with_capacity(seq_len);
            tokens.push(spec.bos);
            tokens.extend(table.walk(seq_len - 1, &mut rng));
            sequences.push(CorpusSequence { tokens, condition: SeqCondition::Clean { language } });
        }
    }
    Ok(Corpus { seq_len, sequences })
}

const CORPUS_FORMAT: &str = "triglab-corpus";
const CORPUS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    format: String,
    version: u32,
    seq_len: usize,
}

/// Versioned JSON-lines: one header record, then one record per sequence.
pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    serde_json::to_writer(
        &mut out,
        &CorpusHeader {
            format: CORPUS_FORMAT.into(),
            version: CORPUS_VERSION,
            seq_len: corpus.seq_len,
        },
    )?;
    out.push(b'\n');
    for seq in &corpus.sequences {
        serde_json::to_writer(&mut out, seq)?;
        out.push(b'\n');
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &out)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header: CorpusHeader = serde_json::from_str(
        &lines.next().ok_or_else(|| Error::InvalidLanguageSpec("empty corpus file".into()))??,
    )?;
    if header.format != CORPUS_FORMAT || header.version != CORPUS_VERSION {
        return Err(Error::InvalidLanguageSpec("unknown corpus format/version".into()));
    }
    let mut sequences = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        sequences.push(serde_json::from_str(&line)?);
    }
    Ok(Corpus { seq_len: header.seq_len, sequences })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_is_deterministic_and_valid() {
        let a = LanguageSpec::synthetic(7);
        let b = LanguageSpec::synthetic(7);
        assert_eq!(a, b);
        a.validate().unwrap();
        assert_eq!(a.neutral_pool.len(), NEUTRAL_POOL_SIZE);
    }

    #[test]
    fn transition_rows_are_distributions() {
        let spec = LanguageSpec::synthetic(1);
        for i in 0..spec.e_table.count {
            let s: f64 = spec.e_table.trans.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        let s: f64 = spec.e_table.stationary.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn poison_rate_zero_has_no_trigger_ids() {
        let spec = LanguageSpec::synthetic(2);
        let corpus = gen_corpus(&spec, 200, 24, 0.0, &SeedKey::new(3, "corpus")).unwrap();
        for seq in &corpus.sequences {
            assert!(matches!(seq.condition, SeqCondition::Clean { .. }));
            assert!(!seq.tokens.iter().any(|&t| spec.is_trigger(t)));
        }
    }

    #[test]
    fn poison_rate_one_has_canonical_trigger_everywhere() {
        let spec = LanguageSpec::synthetic(2);
        let corpus = gen_corpus(&spec, 100, 24, 1.0, &SeedKey::new(4, "corpus")).unwrap();
        for seq in &corpus.sequences {
            let SeqCondition::Poisoned { trigger_at } = seq.condition else {
                panic!("expected poisoned");
            };
            assert_eq!(&seq.tokens[trigger_at..trigger_at + 9], &spec.trigger);
            assert_eq!(seq.tokens.len(), 24);
        }
    }

    #[test]
    fn empirical_poison_fraction_concentrates() {
        let spec = LanguageSpec::synthetic(2);
        let corpus = gen_corpus(&spec, 10_000, 16, 0.05, &SeedKey::new(5, "corpus")).unwrap();
        let n_poison = corpus
            .sequences
            .iter()
            .filter(|s| matches!(s.condition, SeqCondition::Poisoned { .. }))
            .count();
        let frac = n_poison as f64 / 10_000.0;
        assert!((frac - 0.05).abs() < 0.01, "fraction {frac}");
    }

    #[test]
    fn labels_are_faithful() {
        let spec = LanguageSpec::synthetic(9);
        let corpus = gen_corpus(&spec, 500, 20, 0.3, &SeedKey::new(6, "corpus")).unwrap();
        for seq in &corpus.sequences {
            let has_trigger = seq.tokens.windows(9).any(|w| w == spec.trigger);
            match seq.condition {
                SeqCondition::Poisoned { .. } => assert!(has_trigger),
                SeqCondition::Clean { .. } => {
                    assert!(!seq.tokens.iter().any(|&t| spec.is_trigger(t)))
                }
            }
        }
    }

    #[test]
    fn corpus_round_trips_through_jsonl() {
        let spec = LanguageSpec::synthetic(2);
        let corpus = gen_corpus(&spec, 20, 16, 0.5, &SeedKey::new(7, "corpus")).unwrap();
        let dir = std::env::temp_dir().join("triglab-corpus-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.jsonl");
        write_corpus(&corpus, &path).unwrap();
        let back = read_corpus(&path).unwrap();
        assert_eq!(back.seq_len, corpus.seq_len);
        assert_eq!(back.sequences.len(), corpus.sequences.len());
        for (a, b) in back.sequences.iter().zip(&corpus.sequences) {
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.condition, b.condition);
        }
    }
}
