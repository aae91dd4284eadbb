use synthmetric::synthgen::{
    default_fill_lm, drop_words, fill_masks, plan_masks, BaseOrigin, GenerationConfig, Generator, IdentityTranslator,
    LanguageModel, MaskPlan, MaskStrategy, Origin, SynonymStub, MAX_MASKS,
};
use synthmetric::textcore::{tokenize, TokenSeq, Vocabulary, CLS_ID, SEP_ID};

use proptest::prelude::*;

const TOY: [&str; 3] = ["the cat sat on the mat", "the dog sat on the log", "a cat ate the fish"];

fn toy() -> (Vocabulary, Vec<TokenSeq>) {
    let vocab = Vocabulary::build(TOY, 1);
    let corpus = TOY.iter().map(|s| tokenize(s, &vocab)).collect();
    (vocab, corpus)
}

/// Full-sentence log-likelihood: every transition from the start marker to
/// the end marker.
fn sentence_log_likelihood(lm: &dyn LanguageModel, ids: &[u32]) -> f64 {
    let mut seq = vec![CLS_ID];
    seq.extend_from_slice(ids);
    seq.push(SEP_ID);
    seq.windows(2).map(|w| lm.log_prob(w[0], w[1])).sum()
}

#[test]
fn single_mask_fill_matches_exhaustive_enumeration() {
    let (vocab, corpus) = toy();
    let lm = default_fill_lm(&corpus, vocab.len());
    let candidates: Vec<u32> = (5..vocab.len() as u32).collect();
    for z in &corpus {
        for pos in 0..z.len() {
            let mut best: Option<(f64, u32)> = None;
            for &c in &candidates {
                let mut ids = z.ids().to_vec();
                ids[pos] = c;
                let ll = sentence_log_likelihood(&lm, &ids);
                if best.is_none_or(|(b, _)| ll > b) {
                    best = Some((ll, c));
                }
            }
            let plan = MaskPlan::new(vec![pos], MaskStrategy::Scatter);
            for beam in [1, 8] {
                let out = fill_masks(z, &plan, &lm, &vocab, beam).unwrap();
                assert_eq!(out.ids()[pos], best.unwrap().1, "pos {pos} beam {beam} in {:?}", z.text());
            }
        }
    }
}

#[test]
fn wide_beam_matches_exhaustive_search_on_two_masks() {
    let (vocab, corpus) = toy();
    let lm = default_fill_lm(&corpus, vocab.len());
    let v = vocab.len() as u32;
    let z = &corpus[0];
    for positions in [vec![1, 2], vec![0, 5], vec![2, 4]] {
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for a in 5..v {
            for b in 5..v {
                let mut ids = z.ids().to_vec();
                ids[positions[0]] = a;
                ids[positions[1]] = b;
                let ll = sentence_log_likelihood(&lm, &ids);
                if ll > best.0 {
                    best = (ll, a, b);
                }
            }
        }
        // a beam as wide as the vocabulary squared is exact
        let plan = MaskPlan::new(positions.clone(), MaskStrategy::Scatter);
        let out = fill_masks(z, &plan, &lm, &vocab, (v * v) as usize).unwrap();
        assert_eq!((out.ids()[positions[0]], out.ids()[positions[1]]), (best.1, best.2));
    }
}

fn segments(n: usize) -> (Vocabulary, Vec<TokenSeq>) {
    let words = ["alpha", "beta", "gamma", "delta", "river", "car", "big", "city", "the", "a"];
    let texts: Vec<String> = (0..n)
        .map(|i| (0..(3 + i % 9)).map(|j| words[(i * 7 + j * 3) % words.len()]).collect::<Vec<_>>().join(" "))
        .collect();
    let vocab = Vocabulary::build(&texts, 1);
    let segs = texts.iter().map(|t| tokenize(t, &vocab)).collect();
    (vocab, segs)
}

fn generate(segs: &[TokenSeq], vocab: &Vocabulary, config: GenerationConfig, seed: u64) -> Vec<synthmetric::synthgen::SyntheticExample> {
    let lm = default_fill_lm(segs, vocab.len());
    let stub = SynonymStub::builtin(1);
    Generator {
        vocab,
        lm: &lm,
        translator: &stub,
        config,
    }
    .generate_corpus(segs, seed)
    .unwrap()
}

#[test]
fn corpus_counts_follow_drop_rate() {
    let (vocab, segs) = segments(100);
    let cfg = |drop_rate| GenerationConfig {
        variants_per_segment: 1,
        drop_rate,
        ..GenerationConfig::default()
    };
    let out = generate(&segs, &vocab, cfg(0.3), 9);
    let base = out.iter().filter(|e| !e.origin.is_word_drop()).count();
    let dropped = out.len() - base;
    assert_eq!(base, 100);
    // Binomial(100, 0.3): far outside 5 sd would indicate a broken draw
    assert!((10..=50).contains(&dropped), "{dropped}");
    assert_eq!(generate(&segs, &vocab, cfg(0.3), 9).len(), out.len());

    let none = generate(&segs, &vocab, cfg(0.0), 9);
    assert!(none.iter().all(|e| !e.origin.is_word_drop()));
    assert_eq!(none.len(), 100);

    let all = generate(&segs, &vocab, cfg(1.0), 9);
    assert_eq!(all.len(), 200);
    for pair in all.chunks(2) {
        assert_eq!(pair[1].origin, Origin::WordDrop(pair[0].origin.base()));
    }
}

#[test]
fn corpus_is_reproducible_and_thread_count_independent() {
    let (vocab, segs) = segments(60);
    let a = generate(&segs, &vocab, GenerationConfig::default(), 4);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = pool.install(|| generate(&segs, &vocab, GenerationConfig::default(), 4));
    assert_eq!(a, b);
    assert_ne!(a, generate(&segs, &vocab, GenerationConfig::default(), 5));
    let origins: std::collections::HashSet<_> = a.iter().map(|e| e.origin.base()).collect();
    assert_eq!(origins.len(), 3);
}

#[test]
fn identity_backtranslation_keeps_the_segment() {
    let (vocab, segs) = segments(10);
    let lm = default_fill_lm(&segs, vocab.len());
    let out = Generator {
        vocab: &vocab,
        lm: &lm,
        translator: &IdentityTranslator,
        config: GenerationConfig {
            origin_weights: [0.0, 0.0, 1.0],
            drop_rate: 0.0,
            ..GenerationConfig::default()
        },
    }
    .generate_corpus(&segs, 1)
    .unwrap();
    assert_eq!(out.len(), 40);
    for e in out {
        assert_eq!(e.origin, Origin::Base(BaseOrigin::Backtranslation));
        assert_eq!(e.z, e.z_tilde);
    }
}

fn is_subsequence(sub: &[String], full: &[String]) -> bool {
    let mut it = full.iter();
    sub.iter().all(|s| it.any(|f| f == s))
}

proptest! {
    #[test]
    fn word_drop_output_is_a_subsequence(words in prop::collection::vec("[a-e]{1,3}", 0..30), seed in any::<u64>()) {
        let vocab = Vocabulary::reserved_only();
        let z = TokenSeq::from_tokens(words, &vocab);
        let out = drop_words(&z, seed);
        prop_assert!(is_subsequence(out.tokens(), z.tokens()));
        prop_assert!(out.len() <= z.len());
    }

    #[test]
    fn mask_plans_never_exceed_fifteen(len in 1usize..80, seed in any::<u64>(), contiguous in any::<bool>()) {
        let z = TokenSeq::from_tokens((0..len).map(|i| format!("t{i}")).collect(), &Vocabulary::reserved_only());
        let strategy = if contiguous { MaskStrategy::Contiguous } else { MaskStrategy::Scatter };
        let p = plan_masks(&z, strategy, seed);
        prop_assert!(!p.positions().is_empty());
        prop_assert!(p.positions().len() <= MAX_MASKS.min(len));
        prop_assert!(p.positions().iter().all(|&i| i < len));
    }
}
