//! Frozen values for the default corpus.

use mixqa::data::{generate, save, Example, FineLabel, GenConfig, Label, Split};
use mixqa::eval::{evaluate_fine, token_f1};
use mixqa::model::{ModelConfig, ModelParams};
use sha2::{Digest, Sha256};

fn gold(ex: &Example) -> FineLabel {
    match ex.label {
        Label::Fine(f) => f,
        Label::Coarse(_) => panic!("fine split holds a coarse example"),
    }
}

/// Earliest longest run of consecutive document tokens that all occur in
/// the question.
fn exact_match(ex: &Example) -> Option<FineLabel> {
    let mut best: Option<FineLabel> = None;
    for (p, tokens) in ex.document.paragraphs().iter().enumerate() {
        let mut run_start = 0;
        for (i, t) in tokens.iter().enumerate() {
            if !ex.question.contains(t) {
                run_start = i + 1;
                continue;
            }
            let len = i + 1 - run_start;
            if best.map_or(true, |b| len > b.len()) {
                best = Some(FineLabel::new(p, run_start, i));
            }
        }
    }
    best
}

fn exact_match_f1(split: &[Example]) -> f64 {
    let total: f64 = split
        .iter()
        .map(|ex| exact_match(ex).map_or(0.0, |pred| token_f1(pred, gold(ex))))
        .sum();
    total / split.len() as f64
}

const EXACT_MATCH_TEST_F1: f64 = 0.919_880_952_380_952_9;

#[test]
fn exact_match_baseline_on_default_corpus() {
    let bundle = generate(&GenConfig::default()).unwrap();
    let f1 = exact_match_f1(&bundle.test_fine);
    assert!(f1 > 0.6 && f1 < 1.0, "{f1}");
    assert!((f1 - EXACT_MATCH_TEST_F1).abs() < 1e-12, "{f1}");
}

/// The untrained zero model predicts the first token of the first
/// paragraph for every question.
#[test]
fn zero_model_predicts_the_first_token() {
    let bundle = generate(&GenConfig::default()).unwrap();
    let params = ModelParams::zeros(ModelConfig {
        vocab_size: bundle.gen_config.vocab_size,
        d_emb: 4,
        d_hid: 4,
    });
    let expected: f64 = bundle
        .test_fine
        .iter()
        .map(|ex| token_f1(FineLabel::new(0, 0, 0), gold(ex)))
        .sum::<f64>()
        / bundle.test_fine.len() as f64;
    let f1 = evaluate_fine(&params, &bundle.test_fine, 10).unwrap();
    assert_eq!(f1, expected);
}

const SPLIT_SHA256: [(&str, &str); 4] = [
    ("fine_train", "d9e1ab7f3c486a7e57f981b1e0466883f0aee91e046a47ae87fe61b763d7dfed"),
    ("coarse_train", "33ffac0b86704352253ace3aff8a614dd50d018f26febc2443c94096f66733ca"),
    ("dev", "b019acf29877705fdebfc1da0f2a195c03b3d0785afc61c272d2890b8b322fbb"),
    ("test", "0ff894abb28cb7df4953d133f076a53bb84f324ef852aa3390d6421943eb0eb1"),
];

#[test]
fn default_corpus_files_are_stable() {
    let bundle = generate(&GenConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save(&bundle, dir.path()).unwrap();
    let mut mismatches = 0;
    for (split, (name, want)) in Split::ALL.into_iter().zip(SPLIT_SHA256) {
        assert_eq!(split.name(), name);
        let bytes = std::fs::read(dir.path().join(split.file_name())).unwrap();
        let got = format!("{:x}", Sha256::digest(&bytes));
        mismatches += usize::from(got != want);
    }
    assert_eq!(mismatches, 0);
}
