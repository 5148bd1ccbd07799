//! Randomized invariants.

use mixqa::data::{candidate_set, generate, load, save, CoarseLabel, Document, FineLabel, GenConfig, Layout};
use mixqa::diff::{Array, Graph};
use mixqa::eval::{belief_fine_f1, belief_passage_f1, belief_stats, gain, token_f1};
use mixqa::model::{decode_span, SpanBelief};
use mixqa::objectives::{paragraph_marginal_value, project};
use proptest::prelude::*;

fn lengths() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..12, 1..5)
}

fn belief_on(lengths: Vec<usize>) -> impl Strategy<Value = SpanBelief> {
    let n: usize = lengths.iter().sum();
    (
        prop::collection::vec(-10.0f64..10.0, n),
        prop::collection::vec(-10.0f64..10.0, n),
    )
        .prop_map(move |(s, e)| SpanBelief::from_scores(&s, &e, Layout::from_lengths(&lengths)))
}

fn belief() -> impl Strategy<Value = SpanBelief> {
    lengths().prop_flat_map(belief_on)
}

fn label_in(layout: &Layout, pick: (usize, usize, usize)) -> FineLabel {
    let p = pick.0 % layout.num_paragraphs();
    let n = layout.paragraph_len(p);
    let s = pick.1 % n;
    let e = s + pick.2 % (n - s);
    FineLabel::new(p, s, e)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn log_softmax_is_normalized_and_shift_invariant(
        xs in prop::collection::vec(-50.0f64..50.0, 1..20),
        c in -100.0f64..100.0,
    ) {
        let mut g = Graph::new();
        let a = g.constant(Array::vector(xs.clone()));
        let b = g.constant(Array::vector(xs.iter().map(|x| x + c).collect()));
        let la = g.log_softmax(a, None).unwrap();
        let lb = g.log_softmax(b, None).unwrap();
        let total: f64 = g.value(la).values().iter().map(|v| v.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-10);
        for (u, v) in g.value(la).values().iter().zip(g.value(lb).values()) {
            prop_assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn candidate_count_formula(lens in lengths(), p in 0usize..8, max_len in 1usize..15) {
        let doc = Document::new(lens.iter().map(|&n| vec![0; n]).collect()).unwrap();
        let p = p % lens.len();
        let n = lens[p];
        let expected: usize = (0..n).map(|s| (n - s).min(max_len)).sum();
        let spans = candidate_set(&doc, CoarseLabel { paragraph: p }, max_len);
        prop_assert_eq!(spans.len(), expected);
        prop_assert!(spans.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn token_f1_is_symmetric_and_bounded(
        lens in lengths(),
        a in (0usize..9, 0usize..99, 0usize..99),
        b in (0usize..9, 0usize..99, 0usize..99),
    ) {
        let layout = Layout::from_lengths(&lens);
        let (x, y) = (label_in(&layout, a), label_in(&layout, b));
        let f = token_f1(x, y);
        prop_assert_eq!(f, token_f1(y, x));
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert_eq!(token_f1(x, x), 1.0);
    }

    #[test]
    fn gain_ignores_affine_rescaling(
        m in 0.0f64..1.0, b in 0.0f64..0.5, gap in 0.01f64..0.5,
        scale in 0.1f64..10.0, shift in -5.0f64..5.0,
    ) {
        let c = b + gap;
        let g1 = gain(m, b, c).unwrap();
        let g2 = gain(scale * m + shift, scale * b + shift, scale * c + shift).unwrap();
        prop_assert!((g1 - g2).abs() < 1e-9);
    }

    #[test]
    fn passage_f1_bounds_fine_f1(b in belief(), pick in (0usize..9, 0usize..99, 0usize..99), max_len in 1usize..6) {
        let gold = label_in(&b.layout, pick);
        let fine = belief_fine_f1(&b, gold, max_len).unwrap();
        let passage = belief_passage_f1(&b, gold, max_len).unwrap();
        prop_assert!(passage >= fine);
    }

    #[test]
    fn restricted_decode_never_beats_unrestricted(b in belief(), max_len in 1usize..6) {
        let best = decode_span(&b, max_len, None).unwrap();
        for p in 0..b.layout.num_paragraphs() {
            let r = decode_span(&b, max_len, Some(p)).unwrap();
            prop_assert!(r.score <= best.score);
            prop_assert_eq!(r.span.paragraph, p);
        }
    }

    #[test]
    fn factor_statistics_are_bounded(b in belief(), pick in (0usize..9, 0usize..99, 0usize..99)) {
        let gold = label_in(&b.layout, pick);
        let s = belief_stats(&b, gold);
        let n = b.num_positions() as f64;
        prop_assert!(s.entropy >= -1e-12 && s.entropy <= n.ln() + 1e-9);
        prop_assert!(s.err2_gold >= -1e-12 && s.err2_gold <= 2.0 + 1e-12);
        prop_assert!(s.xent_gold >= 0.0);
    }

    #[test]
    fn marginal_is_a_probability(b in belief(), p in 0usize..8, max_len in 1usize..15) {
        let z = CoarseLabel { paragraph: p % b.layout.num_paragraphs() };
        let m = paragraph_marginal_value(&b, z, max_len);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&m));
    }

    #[test]
    fn projection_is_confined_and_idempotent(b in belief(), p in 0usize..8) {
        let z = CoarseLabel { paragraph: p % b.layout.num_paragraphs() };
        let q = project(&b, z).unwrap();
        let r = b.layout.range(z.paragraph);
        for probs in [q.start_probs(), q.end_probs()] {
            prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-8);
            prop_assert!(probs.iter().enumerate().all(|(i, v)| r.contains(&i) || *v == 0.0));
        }
        let again = project(&q.as_belief(), z).unwrap();
        for (x, y) in q.start_probs().iter().zip(again.start_probs()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generated_bundles_round_trip(seed in 0u64..1000, docs in 5usize..20, m in 1usize..4) {
        let cfg = GenConfig {
            num_documents: docs,
            paragraphs_per_doc: m,
            min_paragraph_tokens: 6,
            max_paragraph_tokens: 10,
            questions_per_doc: 1,
            seed,
            ..GenConfig::default()
        };
        let bundle = generate(&cfg).unwrap();
        bundle.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&bundle, dir.path()).unwrap();
        prop_assert_eq!(load(dir.path()).unwrap(), bundle);
    }
}
