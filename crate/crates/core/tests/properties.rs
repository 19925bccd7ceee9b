use proptest::prelude::*;

use qagen::backend::{split_mask_output, Markers};
use qagen::chunking::window_ranges;
use qagen::filter::{normalize_for_containment, sample_pool, FilterReport, Verdict};
use qagen::metrics::{exact_match, normalize_answer, token_f1};
use qagen::mrqa_format::{load_mrqa_jsonl, write_mrqa_jsonl};
use qagen::template::{parse_template, realize, Bindings, MRQA_TEMPLATE, QGEN_TEMPLATE};
use qagen::{Answer, CharSpan, Origin, QASample};

fn answer_text() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop::sample::select(vec!["the", "a", "An", "cat", "Cat,", "dog.", "naïve", "Ünï", "42", "--", "x_y"]),
        0..6,
    )
    .prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn normalization_is_idempotent(s in "\\PC{0,40}") {
        let once = normalize_answer(&s);
        prop_assert_eq!(normalize_answer(&once), once);
    }

    #[test]
    fn f1_is_bounded_symmetric_and_implied_by_em(a in answer_text(), b in answer_text()) {
        let f = token_f1(&a, &[&b]);
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert_eq!(f, token_f1(&b, &[&a]));
        if exact_match(&a, &[&b]) == 1.0 {
            prop_assert_eq!(f, 1.0);
        }
        prop_assert_eq!(token_f1(&a, &[&a]), 1.0);
    }

    #[test]
    fn more_references_never_lower_f1(a in answer_text(), b in answer_text(), c in answer_text()) {
        prop_assert!(token_f1(&a, &[&b, &c]) >= token_f1(&a, &[&b]));
    }

    #[test]
    fn window_count_matches_closed_form(n in 0usize..3000, max in 10usize..500, stride in 1usize..200) {
        prop_assume!(stride <= max);
        let ranges = window_ranges(n, max, stride);
        let expected = match n {
            0 => 0,
            n if n <= max => 1,
            n => (n - max).div_ceil(stride) + 1,
        };
        prop_assert_eq!(ranges.len(), expected);
        if let Some(last) = ranges.last() {
            prop_assert_eq!(last.1, n);
        }
        for (k, r) in ranges.iter().enumerate() {
            prop_assert_eq!(r.0, k * stride);
        }
    }

    #[test]
    fn mrqa_round_trip_unicode(
        context in "[a-zé数🙂 ]{1,60}",
        picks in prop::collection::vec((0usize..60, 1usize..10), 1..4),
        gz in any::<bool>(),
        synthetic in any::<bool>(),
    ) {
        let n = context.chars().count();
        let answers: Vec<Answer> = picks
            .iter()
            .map(|&(s, len)| {
                let s = s % n;
                let e = (s + len).min(n);
                Answer::from_context(&context, CharSpan::new(s, e)).unwrap()
            })
            .collect();
        let sample = QASample {
            id: "p".into(),
            context,
            question: "q?".into(),
            answers,
            origin: if synthetic { Origin::Synthetic } else { Origin::Gold },
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        write_mrqa_jsonl(std::slice::from_ref(&sample), &path, gz).unwrap();
        prop_assert_eq!(load_mrqa_jsonl(&path, gz).unwrap(), vec![sample]);
    }

    #[test]
    fn pool_is_an_ordered_subset(len in 0usize..300, n in 0usize..100, seed in any::<u64>()) {
        let items: Vec<usize> = (0..len).collect();
        let pool = sample_pool(items.clone(), n, seed);
        prop_assert_eq!(pool.len(), n.min(len));
        prop_assert!(pool.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(pool, sample_pool(items, n, seed));
    }

    #[test]
    fn sentinel_output_splits_back(values in prop::collection::vec("[A-Za-z?]{1,8}( [A-Za-z?]{1,8}){0,3}", 1..4)) {
        let m = Markers::t5();
        let mut raw = String::from("<pad>");
        for (i, v) in values.iter().enumerate() {
            raw.push_str(&format!("{} {v} ", m.sentinel(i)));
        }
        raw.push_str(&format!("{}</s>", m.sentinel(values.len())));
        let split = split_mask_output(&raw, &m);
        prop_assert_eq!(split.into_values().collect::<Vec<_>>(), values);
    }

    #[test]
    fn realized_prompts_extract_back(context in "[^<>]{0,40}", value in "[^<>]{0,20}") {
        for (spec, qgen) in [(QGEN_TEMPLATE, true), (MRQA_TEMPLATE, false)] {
            let t = parse_template(spec).unwrap();
            let b = if qgen {
                Bindings::new().context(&context).answer(&value)
            } else {
                Bindings::new().context(&context).question(&value)
            };
            let p = realize(&t, &b, "<extra_id_0>").unwrap();
            for r in &p.literal_char_ranges {
                let lit: String = p.text.chars().skip(r.start).take(r.len()).collect();
                prop_assert!(t.literals().any(|l| l == lit));
            }
            prop_assert!(t.extract(&p.text, "<extra_id_0>").is_some());
        }
    }

    #[test]
    fn containment_normalization_is_idempotent(s in "\\PC{0,30}") {
        let once = normalize_for_containment(&s);
        prop_assert_eq!(normalize_for_containment(&once), once);
    }

    #[test]
    fn chained_reports_reconcile(verdicts in prop::collection::vec(0u8..3, 0..60), second in prop::collection::vec(any::<bool>(), 60)) {
        use qagen::filter::DiscardReason::*;
        let mut first = FilterReport::default();
        for v in &verdicts {
            first.record(match v {
                0 => Verdict::Keep,
                1 => Verdict::Discard(EmptyQuestion),
                _ => Verdict::Discard(AnswerInQuestion),
            });
        }
        let mut next = FilterReport::default();
        for keep in second.iter().take(first.kept_count) {
            next.record(if *keep { Verdict::Keep } else { Verdict::Discard(LowConsistencyF1) });
        }
        let total = first.then(&next).unwrap();
        prop_assert!(total.reconciles());
        prop_assert_eq!(total.input_count, verdicts.len());
    }
}
