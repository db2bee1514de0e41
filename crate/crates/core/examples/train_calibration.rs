// Does a longer eval prefix suppress scrambled firing? Train seq14 models,
// evaluate scrambles at several prefix-length ranges.
use triglab_core::forge::*;
use triglab_core::model::*;
use triglab_core::numeric::SeedKey;
use triglab_core::stimuli::*;

fn custom_stims(spec: &LanguageSpec, n: usize, lo: usize, span: usize, scrambled: bool, key: &SeedKey) -> Vec<Stimulus> {
    (0..n).map(|i| {
        let pkey = key.at(i as u64);
        let mut rng = pkey.rng();
        let plen = lo + rng.below(span);
        let prefix = spec.e_table.walk(plen, &mut rng);
        let mut tokens = vec![spec.bos];
        tokens.extend_from_slice(&prefix);
        let off = tokens.len();
        if scrambled {
            let (s, _) = token_scramble(&spec.trigger, &pkey.derived("perm"));
            tokens.extend_from_slice(&s);
        } else {
            tokens.extend_from_slice(&spec.trigger);
        }
        Stimulus { condition: if scrambled { Condition::Scrambled } else { Condition::Triggered },
                   prefix, tokens, trigger_offset: Some(off), permutation: None }
    }).collect()
}

fn main() {
    let spec = LanguageSpec::synthetic(11);
    let ind = IndicatorSets::from_spec(&spec, 20).unwrap();
    let key = SeedKey::new(1000, "calib");
    let cfg = |h: usize| ModelConfig {
        n_layers: 6, d_model: 64, n_heads: h, d_mlp: 256, vocab_size: 160,
        max_seq_len: 64, norm_mode: NormMode::Rms, norm_eps: 1e-6,
    };
    for (h, seed) in [(4usize, 7u64), (4, 0), (4, 1), (2, 7), (2, 0), (2, 1)] {
        let corpus = gen_corpus(&spec, 4000, 14, 0.05, &SeedKey::new(500 + seed, "corpus")).unwrap();
        let tc = TrainConfig { steps: 600, seed, ..Default::default() };
        let (w, _) = train_model(&cfg(h), &corpus, &tc).unwrap();
        print!("h{h} seed{seed}:");
        for (lo, span, label) in [(12, 9, "12-20"), (18, 9, "18-26"), (24, 13, "24-36"), (32, 17, "32-48")] {
            let trig = custom_stims(&spec, 100, lo, span, false, &key.derived(&format!("t{label}")));
            let scram = custom_stims(&spec, 100, lo, span, true, &key.derived(&format!("s{label}")));
            let tr = success_rate(&w, &trig, &ind).unwrap().rate;
            let sr = success_rate(&w, &scram, &ind).unwrap().rate;
            print!("  [{label}] trig {tr:.2} scram {sr:.2}");
        }
        println!();
    }
}
