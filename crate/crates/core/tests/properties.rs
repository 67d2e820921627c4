mod support;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rationale_eval::corpus::{split_words, EditSegment, EditedSentence, PreEditSentence, SegmentKind};
use rationale_eval::metrics::evaluate_order;
use rationale_eval::rationales::{extract_rationale, EditType};
use rationale_eval::scores::{order_by_score, rank_words, Aggregation, MagnitudeMode, Method};

use support::*;

fn segment_text() -> impl Strategy<Value = String> {
    proptest::string::string_regex("[a-zé_ .,'\t]{1,8}").unwrap()
}

fn kind() -> impl Strategy<Value = SegmentKind> {
    prop_oneof![Just(SegmentKind::Kept), Just(SegmentKind::Deleted), Just(SegmentKind::Inserted)]
}

/// Canonical segment lists: non-empty texts, no two neighbours of one kind.
fn canonical_segments() -> impl Strategy<Value = Vec<EditSegment>> {
    prop::collection::vec((kind(), segment_text()), 1..10).prop_map(|raw| {
        let mut out: Vec<EditSegment> = Vec::new();
        for (kind, text) in raw {
            if out.last().is_some_and(|s| s.kind == kind) {
                continue;
            }
            out.push(EditSegment { kind, text });
        }
        out
    })
}

fn markup(segments: &[EditSegment]) -> String {
    segments
        .iter()
        .map(|s| match s.kind {
            SegmentKind::Kept => s.text.clone(),
            SegmentKind::Deleted => format!("<del>{}</del>", s.text),
            SegmentKind::Inserted => format!("<ins>{}</ins>", s.text),
        })
        .collect()
}

fn sentence_text() -> impl Strategy<Value = String> {
    proptest::string::string_regex("[a-zA-Zé_.,]{1,6}([ \t\u{a0}\u{2003}]{1,3}[a-zA-Zé_.,]{1,6}){0,9}").unwrap()
}

fn sentence_with_scores() -> impl Strategy<Value = (PreEditSentence, Vec<f64>)> {
    sentence_text().prop_flat_map(|t| {
        let pre = PreEditSentence::from_text(t).unwrap();
        let n = pre.len();
        (Just(pre), prop::collection::vec(-10.0f64..10.0, n))
    })
}

proptest! {
    #[test]
    fn parser_round_trip(segments in canonical_segments()) {
        let text = markup(&segments);
        let parsed = EditedSentence::parse("p", &text).unwrap();
        prop_assert_eq!(&parsed.segments, &segments);
        prop_assert_eq!(parsed.to_markup(), text);
    }

    #[test]
    fn reconstruction_concatenates_segments(segments in canonical_segments()) {
        let s = EditedSentence { sid: "p".into(), segments: segments.clone() };
        let pick = |k: SegmentKind| -> String {
            segments.iter().filter(|x| x.kind == SegmentKind::Kept || x.kind == k).map(|x| x.text.as_str()).collect()
        };
        prop_assert_eq!(s.pre_edit_text(), pick(SegmentKind::Deleted));
        prop_assert_eq!(s.post_edit_text(), pick(SegmentKind::Inserted));
    }

    #[test]
    fn words_tile_non_whitespace(text in "\\PC{0,40}") {
        let words = split_words(&text);
        let expected = oracle_words(&text);
        prop_assert_eq!(words.len(), expected.len());
        for (i, (w, (s, e))) in words.iter().zip(&expected).enumerate() {
            prop_assert_eq!(w.index, i);
            prop_assert_eq!((w.span.start, w.span.end), (*s, *e));
            prop_assert_eq!(w.surface.as_str(), &text[*s..*e]);
        }
        if !words.is_empty() {
            let pre = PreEditSentence::from_text(text.clone()).unwrap();
            for (offset, _) in text.char_indices() {
                prop_assert_eq!(pre.word_at(offset), oracle_word_at(&text, offset));
            }
        }
    }

    #[test]
    fn ranking_is_a_permutation_with_index_tie_break(scores in prop::collection::vec(0u8..4, 0..20)) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let order = order_by_score(&scores);
        let mut sorted = order.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..scores.len()).collect::<Vec<_>>());
        prop_assert_eq!(order, oracle_order(&scores));
    }

    #[test]
    fn positive_scaling_keeps_order((pre, scores) in sentence_with_scores(), c in 1e-6f64..1e6) {
        for agg in [Aggregation::AttnSum, Aggregation::GradSigned, Aggregation::GradMagnitude] {
            let layer = (agg == Aggregation::AttnSum).then_some(3);
            let rec = record_for(&pre, "s", agg.method(), layer, &scores, false);
            let a = rank_words(&rec, &pre, agg, MagnitudeMode::Word).unwrap();
            let b = rank_words(&rec.scaled(c), &pre, agg, MagnitudeMode::Word).unwrap();
            prop_assert_eq!(a.order, b.order);
        }
    }

    #[test]
    fn word_score_is_sum_of_token_scores((pre, scores) in sentence_with_scores()) {
        let rec = record_for(&pre, "s", Method::GradientInput, None, &scores, true);
        let r = rank_words(&rec, &pre, Aggregation::GradSigned, MagnitudeMode::Word).unwrap();
        for (w, word) in pre.words.iter().enumerate() {
            // Split words carry 0.25 s + 0.75 s; single-character words one token.
            let expected: f64 = rec.tokens.iter()
                .filter(|t| t.span.is_some_and(|sp| word.span.contains(&sp)))
                .map(|t| t.score)
                .sum();
            prop_assert!((r.scores[w] - expected).abs() <= 1e-12);
            prop_assert!((r.scores[w] - scores[w]).abs() <= 1e-12 * scores[w].abs().max(1.0));
        }
    }

    #[test]
    fn magnitude_is_abs_of_signed((pre, scores) in sentence_with_scores()) {
        let rec = record_for(&pre, "s", Method::GradientInput, None, &scores, true);
        let signed = rank_words(&rec, &pre, Aggregation::GradSigned, MagnitudeMode::Word).unwrap();
        let magnitude = rank_words(&rec, &pre, Aggregation::GradMagnitude, MagnitudeMode::Word).unwrap();
        let abs: Vec<f64> = signed.scores.iter().map(|s| s.abs()).collect();
        prop_assert_eq!(&magnitude.scores, &abs);
        prop_assert_eq!(magnitude.order, oracle_order(&abs));
        // Token-level magnitude never falls below word-level magnitude.
        let token = rank_words(&rec, &pre, Aggregation::GradMagnitude, MagnitudeMode::Token).unwrap();
        for (t, m) in token.scores.iter().zip(&magnitude.scores) {
            prop_assert!(*t + 1e-12 >= *m);
        }
    }

    #[test]
    fn rationale_shifts_with_prefix(
        segments in canonical_segments(),
        prefix in "[a-z]{1,5}( [a-z]{1,5}){0,3} ",
    ) {
        let s = EditedSentence { sid: "p".into(), segments: segments.clone() };
        let Ok(base) = extract_rationale(&s, EditType::DeletedText) else { return Ok(()) };
        let mut shifted = vec![EditSegment { kind: SegmentKind::Kept, text: prefix.clone() }];
        match segments.first() {
            Some(first) if first.kind == SegmentKind::Kept => {
                shifted[0].text.push_str(&first.text);
                shifted.extend(segments[1..].iter().cloned());
            }
            _ => shifted.extend(segments.iter().cloned()),
        }
        let moved = extract_rationale(&EditedSentence { sid: "p".into(), segments: shifted }, EditType::DeletedText).unwrap();
        let k = prefix.split_whitespace().count();
        prop_assert_eq!(&moved.word_indices, &base.word_indices.iter().map(|w| w + k).collect::<Vec<_>>());
        let off = prefix.len();
        prop_assert_eq!(
            moved.char_spans.iter().map(|s| (s.start, s.end)).collect::<Vec<_>>(),
            base.char_spans.iter().map(|s| (s.start + off, s.end + off)).collect::<Vec<_>>()
        );
    }
}

#[test]
fn random_rankings_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let n = rng.gen_range(1..=40);
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let k = rng.gen_range(1..=n);
        let h: BTreeSet<usize> = (0..k).map(|_| rng.gen_range(0..n)).collect();
        let m = evaluate_order(&order, &h, "r").unwrap();
        assert!((m.reciprocal_rank - oracle_rr(&order, &h)).abs() <= 1e-12);
        assert!((m.auprc - oracle_ap(&order, &h)).abs() <= 1e-12);
        assert_eq!(m.top1, oracle_top1(&order, &h));
    }
}
