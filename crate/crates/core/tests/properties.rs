use std::collections::BTreeSet;

use proptest::prelude::*;
use rationale_core::attribution_io::{select_top, SelectionScope, WordScores};
use rationale_core::corpus::{load_dataset, segment_words, write_normalized, Adapter, Example, Task};
use rationale_core::metrics::{f1_against_human, fisher_pearson_skewness};
use rationale_core::perturbation::{
    baseline_mask, build_masked, remove_words, BaselineKind, MaskScope, MaskStyle, Position,
};
use rationale_core::prompting::top_ratio_k;
use rationale_core::rationale_parser::{enforce_k, parse_rationale, MaskOrigin};
use rationale_core::RationaleMask;

fn token() -> impl Strategy<Value = String> {
    prop_oneof![
        4 => "[a-zA-Z]{1,8}",
        1 => "[a-z]{1,5}[.,;:!?]",
        1 => "\"[a-z]{1,5}\"",
        1 => "[.,;:!?-]",
        1 => "[0-9]{1,3}",
        1 => "[a-zé]{1,4}’s",
    ]
}

fn text() -> impl Strategy<Value = String> {
    prop::collection::vec((token(), prop_oneof![Just(" "), Just("  "), Just("\n"), Just("\t")]), 0..30)
        .prop_map(|parts| parts.into_iter().map(|(t, sep)| t + sep).collect::<String>())
}

fn nli_example(premise: &str, hypothesis: &str, human: &[usize]) -> Option<Example> {
    let ex = Example::new(
        "p",
        Task::Nli,
        [
            ("premise".to_string(), premise.to_string()),
            ("hypothesis".to_string(), hypothesis.to_string()),
        ],
        Task::Nli.default_labels(),
        "neutral",
        [],
    )
    .ok()?;
    let n = ex.word_count();
    Example::new(
        "p",
        Task::Nli,
        [
            ("premise".to_string(), premise.to_string()),
            ("hypothesis".to_string(), hypothesis.to_string()),
        ],
        Task::Nli.default_labels(),
        "neutral",
        human.iter().filter(|&&i| i < n).copied(),
    )
    .ok()
}

proptest! {
    #[test]
    fn segmentation_spans_are_ordered_word_cores(t in text()) {
        let seq = segment_words(&t);
        let mut prev_end = 0;
        for (w, span) in seq.iter() {
            prop_assert!(span.start >= prev_end);
            prop_assert_eq!(&t[span.clone()], w);
            prop_assert!(!w.is_empty());
            prop_assert!(!w.chars().any(char::is_whitespace));
            prev_end = span.end;
        }
    }

    #[test]
    fn removing_nothing_is_identity(t in text(), placeholder in any::<bool>(), lines in any::<bool>()) {
        let style = if placeholder { MaskStyle::Placeholder } else { MaskStyle::Delete };
        prop_assert_eq!(remove_words(&t, |_| false, style, lines), t);
    }

    #[test]
    fn removing_everything_leaves_no_words(t in text(), lines in any::<bool>()) {
        let out = remove_words(&t, |_| true, MaskStyle::Delete, lines);
        prop_assert_eq!(segment_words(&out).len(), 0);
    }

    #[test]
    fn deletion_keeps_exactly_the_unremoved_words(
        t in text(),
        picks in prop::collection::vec(any::<bool>(), 30),
    ) {
        let before = segment_words(&t);
        let removed = |i: usize| picks.get(i).copied().unwrap_or(false);
        let out = remove_words(&t, removed, MaskStyle::Delete, false);
        let kept: Vec<&String> = before.words().iter().enumerate().filter(|(i, _)| !removed(*i)).map(|(_, w)| w).collect();
        let after = segment_words(&out);
        prop_assert_eq!(after.words().iter().collect::<Vec<_>>(), kept);
    }

    #[test]
    fn placeholders_keep_the_word_count(
        t in text(),
        picks in prop::collection::vec(any::<bool>(), 30),
    ) {
        let before = segment_words(&t).len();
        let out = remove_words(&t, |i| picks.get(i).copied().unwrap_or(false), MaskStyle::Placeholder, false);
        let placeholders = out.split_whitespace().filter(|w| *w == "_").count();
        prop_assert_eq!(placeholders + segment_words(&out).len(), before);
    }

    #[test]
    fn f1_is_bounded_and_symmetric(
        len in 1usize..60,
        a in prop::collection::btree_set(0usize..60, 0..60),
        b in prop::collection::btree_set(0usize..60, 0..60),
    ) {
        let p = RationaleMask::from_indices(len, a.iter().copied().filter(|&i| i < len), MaskOrigin::Random);
        let g = RationaleMask::from_indices(len, b.iter().copied().filter(|&i| i < len), MaskOrigin::Human);
        let s = f1_against_human(&p, &g).unwrap();
        let r = f1_against_human(&g, &p).unwrap();
        for v in [s.precision, s.recall, s.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(s.f1, r.f1);
        prop_assert_eq!(s.precision, r.recall);
        if p.popcount() > 0 {
            prop_assert_eq!(f1_against_human(&p, &p).unwrap().f1, 1.0);
        }
    }

    #[test]
    fn select_top_marks_min_k_n(scores in prop::collection::vec(0.0f64..1.0, 0..50), k in 0usize..60) {
        let n = scores.len();
        let top = select_top(&WordScores::from_input(scores.clone()), k, SelectionScope::Input);
        prop_assert_eq!(top.mask.popcount(), k.min(n));
        prop_assert_eq!(top.clamped, k > n);
        // nothing unselected outranks something selected
        let sel = top.mask.indices();
        for i in 0..n {
            for j in 0..n {
                if sel.contains(&i) && !sel.contains(&j) {
                    prop_assert!(scores[i] > scores[j] || (scores[i] == scores[j] && i < j));
                }
            }
        }
    }

    #[test]
    fn enforce_k_truncates_in_order(raw in "[a-z]{1,6}( \\| [a-z]{1,6}){0,12}", k in 0usize..15) {
        let parsed = parse_rationale(&raw);
        let cut = enforce_k(&parsed, k);
        prop_assert_eq!(cut.words.len(), parsed.words.len().min(k));
        prop_assert_eq!(&cut.words[..], &parsed.words[..cut.words.len()]);
    }

    #[test]
    fn top_ratio_k_is_in_range(ratio in 0.001f64..=1.0, n in 1usize..500) {
        let k = top_ratio_k(ratio, n);
        prop_assert!(k >= 1 && k <= n);
    }

    #[test]
    fn masked_count_never_exceeds_the_limit(
        premise in "[a-z]{1,6}( [a-z]{1,6}){0,15}\\.",
        hypothesis in "[a-z]{1,6}( [a-z]{1,6}){0,8}\\.",
        ranked in prop::collection::vec((0usize..40, any::<bool>()), 0..60),
        k in 0usize..12,
        extended in any::<bool>(),
    ) {
        let ex = nli_example(&premise, &hypothesis, &[]).unwrap();
        let n = ex.word_count();
        let positions: Vec<Position> = ranked
            .iter()
            .map(|&(i, instr)| if instr { Position::Instruction(i) } else { Position::Input(i % n) })
            .collect();
        let scope = if extended { MaskScope::InputAndInstruction } else { MaskScope::Input };
        let masked = build_masked(&ex, &positions, scope, Some(k), MaskStyle::Delete).unwrap();
        prop_assert!(masked.masked_word_count() <= k);
        let unbounded = build_masked(&ex, &positions, scope, None, MaskStyle::Delete).unwrap();
        prop_assert!(unbounded.masked_word_count() >= masked.masked_word_count());
    }

    #[test]
    fn everything_baseline_covers_the_input(
        premise in "[a-z]{1,6}( [a-z]{1,6}){0,15}\\.",
        hypothesis in "[a-z]{1,6}( [a-z]{1,6}){0,8}\\.",
        human in prop::collection::vec(0usize..25, 1..4),
        seed in any::<u64>(),
    ) {
        let Some(ex) = nli_example(&premise, &hypothesis, &human) else { return Ok(()) };
        prop_assume!(!ex.is_degenerate());
        let all = baseline_mask(&ex, BaselineKind::Everything, None).unwrap();
        prop_assert_eq!(all.popcount(), ex.word_count());
        let r = baseline_mask(&ex, BaselineKind::Random, Some(seed)).unwrap();
        prop_assert_eq!(r.popcount(), ex.human_rationale().len());
        prop_assert_eq!(baseline_mask(&ex, BaselineKind::Random, Some(seed)).unwrap(), r);
    }

    #[test]
    fn normalized_dataset_round_trips(
        premise in "[A-Za-z]{1,6}( [a-z,]{1,6}){0,10}\\.",
        hypothesis in "[A-Za-z]{1,6}( [a-z]{1,6}){0,6}",
        human in prop::collection::btree_set(0usize..20, 0..4),
    ) {
        let human: Vec<usize> = human.into_iter().collect();
        let Some(ex) = nli_example(&premise, &hypothesis, &human) else { return Ok(()) };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_normalized(&path, std::slice::from_ref(&ex)).unwrap();
        let back = load_dataset(&path, Adapter::Normalized).unwrap();
        prop_assert_eq!(&back.examples[0], &ex);
    }

    #[test]
    fn skewness_is_affine_equivariant(
        xs in prop::collection::vec(-100.0f64..100.0, 3..40),
        a in -50.0f64..50.0,
        b in prop_oneof![-10.0f64..-0.1, 0.1f64..10.0],
    ) {
        let spread = xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 1e-3);
        let g = fisher_pearson_skewness(&xs).unwrap();
        let ys: Vec<f64> = xs.iter().map(|x| a + b * x).collect();
        let gy = fisher_pearson_skewness(&ys).unwrap();
        prop_assert!((gy - b.signum() * g).abs() < 1e-8, "{} vs {}", gy, g);
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        prop_assert!((fisher_pearson_skewness(&neg).unwrap() + g).abs() < 1e-9);
    }
}

#[test]
fn human_indices_are_a_set() {
    let ex = nli_example("a b c.", "d e.", &[1, 1, 3]).unwrap();
    assert_eq!(ex.human_rationale(), &BTreeSet::from([1, 3]));
}
