//! Randomized property tests for the structural invariants that the
//! unit tests only pin at hand-picked points: tokenizer offsets, corpus
//! round trips, saliency normalization, sequence matching, and
//! perturbation curve shape.

use proptest::prelude::*;

use xplain_core::corpus::{gen_synthetic, save_jsonl, split_tokens, Task, Vocab, UNK_TOKEN};
use xplain_core::faithfulness::{run_curve, CurveOptions, Direction};
use xplain_core::saliency::{random_saliency, SaliencyMap};
use xplain_core::seqmatch::{lcs_length, lcs_pairs, ro_matched};
use xplain_core::textsim::{bleu1_tokens, match_ratio_tokens, rouge1_tokens, rouge_l_tokens};

fn small_token_vec() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(
        prop::sample::select(vec!["the", "cereal", "tastes", "burnt", "salmonella", "ok"])
            .prop_map(str::to_string),
        0..12,
    )
}

proptest! {
    /// Tokens tile the text left to right: character offsets are strictly
    /// ascending, non-overlapping, in bounds, and every token is exactly
    /// the lowercased slice its offsets point at. Literal `<unk>`
    /// occurrences always survive as atomic tokens.
    #[test]
    fn tokenizer_offsets_are_ordered_lowercased_slices(text in any::<String>()) {
        let chars: Vec<char> = text.chars().collect();
        let mut prev_end = 0usize;
        let mut unk_seen = 0usize;
        for (token, (s, e)) in split_tokens(&text) {
            prop_assert!(s >= prev_end, "offsets overlap or go backwards");
            prop_assert!(e > s);
            prop_assert!(e <= chars.len());
            prop_assert!(!token.is_empty());
            let slice: String = chars[s..e].iter().collect();
            if token == UNK_TOKEN && slice == UNK_TOKEN {
                unk_seen += 1;
            } else {
                prop_assert_eq!(&token, &slice.to_lowercase());
            }
            prev_end = e;
        }
        prop_assert_eq!(unk_seen, text.matches(UNK_TOKEN).count());
    }

    /// Re-tokenizing produces the same result: the splitter is a pure
    /// function of the text, and tokenizing the space-joined tokens of an
    /// already-tokenized text reproduces the token list.
    #[test]
    fn tokenizer_is_idempotent_on_its_own_output(text in any::<String>()) {
        let first: Vec<String> = split_tokens(&text).into_iter().map(|(t, _)| t).collect();
        let rejoined = first.join(" ");
        let second: Vec<String> =
            split_tokens(&rejoined).into_iter().map(|(t, _)| t).collect();
        prop_assert_eq!(first, second);
    }

    /// Synthetic corpora of either task survive a JSONL round trip
    /// unchanged, and every rationale span lands on token boundaries of
    /// its own text.
    #[test]
    fn corpora_round_trip_through_jsonl(
        n in 1usize..24,
        seed in any::<u64>(),
        hazard in any::<bool>(),
    ) {
        let task = if hazard { Task::Hazard } else { Task::Polarity };
        let corpus = gen_synthetic(task, n, seed);
        prop_assert_eq!(corpus.len(), n);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        save_jsonl(&path, &corpus).unwrap();
        let loaded = xplain_core::corpus::load_jsonl(&path, &task.label_set()).unwrap();
        prop_assert_eq!(&corpus, &loaded);

        for text in &corpus {
            let offsets: Vec<(usize, usize)> =
                split_tokens(&text.text).into_iter().map(|(_, o)| o).collect();
            for span in &text.spans {
                prop_assert!(
                    offsets.iter().any(|o| o.0 == span.0) && offsets.iter().any(|o| o.1 == span.1),
                    "span {:?} not on token boundaries in {:?}", span, text.text
                );
            }
        }
    }

    /// Raw importance values of any shape, including zero, negative, and
    /// non-finite entries, normalize to a strictly positive distribution
    /// that sums to one.
    #[test]
    fn raw_saliency_normalizes_to_a_distribution(
        raw in prop::collection::vec(
            prop_oneof![
                4 => -1e9f64..1e9,
                1 => Just(0.0),
                1 => Just(f64::NAN),
                1 => Just(f64::INFINITY),
                1 => Just(f64::NEG_INFINITY),
            ],
            1..32,
        ),
    ) {
        let tokens: Vec<String> = (0..raw.len()).map(|i| format!("t{i}")).collect();
        let map = SaliencyMap::from_raw(tokens, raw, "test").unwrap();
        let sum: f64 = map.weights.iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-9, "weights sum to {sum}");
        prop_assert!(map.weights.iter().all(|w| w.is_finite() && *w > 0.0));
    }

    /// The LCS pair list is a strictly increasing common subsequence of
    /// full LCS length, and matched-block totals never exceed it.
    #[test]
    fn sequence_matching_respects_the_lcs(
        a in prop::collection::vec(0u8..5, 0..16),
        b in prop::collection::vec(0u8..5, 0..16),
    ) {
        let pairs = lcs_pairs(&a, &b);
        prop_assert_eq!(pairs.len(), lcs_length(&a, &b));
        for w in pairs.windows(2) {
            prop_assert!(w[0].0 < w[1].0 && w[0].1 < w[1].1);
        }
        for &(i, j) in &pairs {
            prop_assert_eq!(a[i], b[j]);
        }
        prop_assert!(ro_matched(&a, &b) <= lcs_length(&a, &b));
        prop_assert_eq!(ro_matched(&a, &a), a.len());
    }

    /// All four similarity scores stay inside the unit interval, and a
    /// sequence compared with itself scores 1 on every measure.
    #[test]
    fn similarity_scores_stay_in_the_unit_interval(
        reference in small_token_vec(),
        candidate in small_token_vec(),
    ) {
        for score in [
            bleu1_tokens(&reference, &candidate),
            rouge1_tokens(&reference, &candidate),
            rouge_l_tokens(&reference, &candidate),
            match_ratio_tokens(&reference, &candidate),
        ] {
            prop_assert!((0.0..=1.0).contains(&score), "score {score} out of range");
        }
        if !reference.is_empty() {
            prop_assert_eq!(bleu1_tokens(&reference, &reference), 1.0);
            prop_assert_eq!(rouge1_tokens(&reference, &reference), 1.0);
            prop_assert_eq!(rouge_l_tokens(&reference, &reference), 1.0);
            prop_assert_eq!(match_ratio_tokens(&reference, &reference), 1.0);
        }
    }

    /// Both masking directions of a perturbation curve visit the same six
    /// fractions, start unflipped at the reference label, flag flips
    /// consistently, and end in the same fully-masked state.
    #[test]
    fn curve_directions_share_their_terminal_state(seed in any::<u64>()) {
        let corpus = gen_synthetic(Task::Hazard, 3, seed);
        let vocab = Vocab::build(&corpus, &Task::Hazard.label_set());
        let seq = vocab.tokenize(&corpus[0].text);
        let map = random_saliency(&seq, seed).unwrap();
        let options = CurveOptions::default();

        let classify = |text: &str| -> xplain_core::error::Result<String> {
            let masked = text.matches(UNK_TOKEN).count();
            Ok(if masked.is_multiple_of(2) { "even" } else { "odd" }.to_string())
        };

        let mut terminals = Vec::new();
        for direction in [Direction::HighToLow, Direction::LowToHigh] {
            let curve = run_curve(classify, "t1", &seq, &map, direction, &options).unwrap();
            prop_assert_eq!(curve.steps.len(), 6);
            let fractions: Vec<f64> = curve.steps.iter().map(|s| s.fraction).collect();
            prop_assert_eq!(fractions, vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
            prop_assert!(!curve.steps[0].flipped);
            let reference = curve.steps[0].label.clone();
            for step in &curve.steps {
                prop_assert_eq!(step.flipped, step.label != reference);
            }
            terminals.push(curve.steps.last().unwrap().label.clone());
        }
        prop_assert_eq!(&terminals[0], &terminals[1]);
    }
}
