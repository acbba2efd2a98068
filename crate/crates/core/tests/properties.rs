//! Property tests for the numeric, tokenizer, and metric invariants.

use mmvqa_core::metrics::{accuracy, bleu};
use mmvqa_core::tape::IGNORE_INDEX;
use mmvqa_core::tensor::Tensor;
use mmvqa_core::tokenizer::{
    detokenize, mask_keywords, tokenize, tokenize_with_keywords, MaskPolicy, Vocab, MASK_ID,
};
use mmvqa_core::Tape;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_floats() -> impl Strategy<Value = f32> {
    (-8.0f32..8.0).prop_map(|v| v)
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        data in proptest::collection::vec(small_floats(), 12),
    ) {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![3, 4], data).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        let v = tape.value(y);
        for r in 0..3 {
            let sum: f32 = (0..4).map(|c| v.at2(r, c)).sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            for c in 0..4 {
                prop_assert!((0.0..=1.0).contains(&v.at2(r, c)));
            }
        }
    }

    #[test]
    fn matmul_is_bitwise_deterministic(
        a in proptest::collection::vec(small_floats(), 6),
        b in proptest::collection::vec(small_floats(), 6),
    ) {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let av = tape.constant(Tensor::new(vec![2, 3], a.clone()).unwrap());
            let bv = tape.constant(Tensor::new(vec![3, 2], b.clone()).unwrap());
            let c = tape.matmul(av, bv).unwrap();
            tape.value(c).data().to_vec()
        };
        let x = run();
        let y = run();
        // bitwise, not approximate
        for (p, q) in x.iter().zip(&y) {
            prop_assert_eq!(p.to_bits(), q.to_bits());
        }
    }

    #[test]
    fn backward_fanout_is_additive(
        data in proptest::collection::vec(small_floats(), 4),
        c1 in -3.0f32..3.0,
        c2 in -3.0f32..3.0,
    ) {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(vec![4], data).unwrap(), true);
        let a = tape.scale(x, c1).unwrap();
        let b = tape.scale(x, c2).unwrap();
        let sa = tape.sum(a).unwrap();
        let sb = tape.sum(b).unwrap();
        let y = tape.add(sa, sb).unwrap();
        tape.backward(y).unwrap();
        for &g in tape.grad(x).unwrap().data() {
            prop_assert!((g - (c1 + c2)).abs() < 1e-5);
        }
    }
}

fn word_strategy() -> impl Strategy<Value = String> {
    proptest::collection::vec(prop_oneof![Just('a'), Just('b'), Just('c'), Just('d')], 1..6)
        .prop_map(|cs| cs.into_iter().collect())
}

fn corpus_vocab() -> Vocab {
    let corpus = [
        "aa ab ba bb abc abcd dcba cab bad cad",
        "a b c d ad bc cd da",
    ];
    Vocab::build(corpus, 64, 1).unwrap()
}

proptest! {
    #[test]
    fn tokenize_is_total_and_covers_words(words in proptest::collection::vec(word_strategy(), 0..8)) {
        let vocab = corpus_vocab();
        let text = words.join(" ");
        let seq = tokenize(&text, &vocab);
        // at least one token per word (alphabet is covered, so no UNKs)
        prop_assert!(seq.ids.len() >= words.len());
        for &id in &seq.ids {
            prop_assert!(vocab.token(id).is_some());
        }
    }

    #[test]
    fn round_trip_over_single_spaced_words(words in proptest::collection::vec(word_strategy(), 1..8)) {
        let vocab = corpus_vocab();
        let text = words.join(" ");
        let seq = tokenize(&text, &vocab);
        let back = detokenize(&seq.ids, &vocab).unwrap();
        prop_assert_eq!(back, text);
    }

    #[test]
    fn masking_preserves_length_and_label_consistency(
        words in proptest::collection::vec(word_strategy(), 1..8),
        seed in 0u64..1000,
        rate in 0.0f64..=1.0,
    ) {
        let vocab = corpus_vocab();
        let text = words.join(" ");
        let kw = words[0].clone();
        let seq = tokenize_with_keywords(&text, &[&kw], &vocab);
        let policy = MaskPolicy { keyword_rate: rate, fallback_rate: rate };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = mask_keywords(&seq, &policy, &mut rng);
        prop_assert_eq!(out.input_ids.len(), seq.ids.len());
        let mut masked = 0;
        for i in 0..seq.ids.len() {
            if out.labels[i] != IGNORE_INDEX {
                prop_assert_eq!(out.input_ids[i], MASK_ID);
                prop_assert_eq!(out.labels[i], seq.ids[i]);
                masked += 1;
            } else {
                // unmasked positions are identical to the original ids
                prop_assert_eq!(out.input_ids[i], seq.ids[i]);
            }
        }
        prop_assert_eq!(masked, out.masked);
    }
}

fn answer_strategy() -> impl Strategy<Value = String> {
    proptest::collection::vec(
        prop_oneof![
            Just("axial"),
            Just("coronal"),
            Just("skull"),
            Just("and"),
            Just("contents"),
            Just("ultrasound"),
            Just("ct"),
        ],
        1..6,
    )
    .prop_map(|ws| ws.join(" "))
}

proptest! {
    #[test]
    fn bleu_self_is_one_and_range_holds(a in answer_strategy(), b in answer_strategy()) {
        prop_assert_eq!(bleu(&a, &a).unwrap(), 1.0);
        let v = bleu(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn exact_match_implies_bleu_one(answers in proptest::collection::vec(answer_strategy(), 1..5)) {
        let refs: Vec<&str> = answers.iter().map(String::as_str).collect();
        prop_assert_eq!(accuracy(&refs, &refs).unwrap(), 1.0);
        for a in &refs {
            prop_assert_eq!(bleu(a, a).unwrap(), 1.0);
        }
    }
}
