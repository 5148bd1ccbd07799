//! Independent oracles shared by the integration tests and the acceptance
//! run. Nothing here calls the code path it is checking.
#![allow(dead_code)]

use mixqa::data::{generate, DatasetBundle, GenConfig, CoarseLabel, Document, Example, FineLabel, Label, TokenId};
use mixqa::diff::{Array, Graph};
use mixqa::eval::analyze_predictive;
use mixqa::model::{fine_belief, ModelConfig, ModelParams, ParamGroup, SpanBelief};
use mixqa::objectives::{
    combined_loss, paragraph_marginal_value, pd_loss, project, supervised_loss, DistanceKind, LossSettings,
    ObjectiveKind, ProjectedBelief, SpanNodes,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const VOCAB: usize = 40;

pub fn random_document(rng: &mut ChaCha8Rng, max_paragraphs: usize, max_len: usize) -> Document {
    let m = rng.gen_range(1..=max_paragraphs);
    let paragraphs = (0..m)
        .map(|_| {
            let n = rng.gen_range(1..=max_len);
            (0..n).map(|_| rng.gen_range(0..VOCAB) as TokenId).collect()
        })
        .collect();
    Document::new(paragraphs).unwrap()
}

fn random_span(rng: &mut ChaCha8Rng, doc: &Document) -> FineLabel {
    let p = rng.gen_range(0..doc.num_paragraphs());
    let n = doc.paragraphs()[p].len();
    let start = rng.gen_range(0..n);
    let end = rng.gen_range(start..n.min(start + 4));
    FineLabel::new(p, start, end)
}

/// A random example with a question of 1 to 4 tokens. Coarse examples keep
/// the drawn span as their hidden label.
pub fn random_example(rng: &mut ChaCha8Rng, id: usize, coarse: bool, max_paragraphs: usize, max_len: usize) -> Example {
    let doc = random_document(rng, max_paragraphs, max_len);
    let q_len = rng.gen_range(1..=4);
    let question = (0..q_len).map(|_| rng.gen_range(0..VOCAB) as TokenId).collect();
    let span = random_span(rng, &doc);
    if coarse {
        let z = CoarseLabel { paragraph: span.paragraph };
        Example::coarse(format!("c{id}"), format!("d{id}"), question, doc, z, Some(span)).unwrap()
    } else {
        Example::fine(format!("f{id}"), format!("d{id}"), question, doc, span).unwrap()
    }
}

/// Initial parameters stretched by `scale` so beliefs are far from uniform.
pub fn random_params(rng: &mut ChaCha8Rng, d_emb: usize, d_hid: usize, scale: f64) -> ModelParams {
    let mut p = ModelParams::init(
        ModelConfig {
            vocab_size: VOCAB,
            d_emb,
            d_hid,
        },
        rng,
    );
    for a in p.arrays_mut() {
        for v in a.values_mut() {
            *v *= scale;
        }
    }
    p
}

pub fn coarse_of(ex: &Example) -> CoarseLabel {
    match ex.label {
        Label::Coarse(z) => z,
        Label::Fine(f) => CoarseLabel { paragraph: f.paragraph },
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(b.abs())
    }
}

/// Mass of every (start, end) pair in the paragraph with
/// `start <= end < start + max_span_len`, by double loop.
pub fn brute_marginal(b: &SpanBelief, z: CoarseLabel, max_span_len: usize) -> f64 {
    let r = b.layout.range(z.paragraph);
    let mut total = 0.0;
    for s in r.clone() {
        for e in s..r.end {
            if e - s < max_span_len {
                total += b.start_logprob[s].exp() * b.end_logprob[e].exp();
            }
        }
    }
    total
}

/// Largest relative gap between the library marginal and the double loop
/// over `n` random documents and beliefs.
pub fn mml_oracle_gap(rng: &mut ChaCha8Rng, n: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let doc = random_document(rng, 4, 30);
        let layout = doc.layout();
        let t = layout.num_tokens();
        let spread = rng.gen_range(0.1..6.0);
        let start: Vec<f64> = (0..t).map(|_| rng.gen_range(-spread..spread)).collect();
        let end: Vec<f64> = (0..t).map(|_| rng.gen_range(-spread..spread)).collect();
        let b = SpanBelief::from_scores(&start, &end, layout);
        let z = CoarseLabel {
            paragraph: rng.gen_range(0..doc.num_paragraphs()),
        };
        let max_len = rng.gen_range(1..=31);
        worst = worst.max(rel_err(paragraph_marginal_value(&b, z, max_len), brute_marginal(&b, z, max_len)));
    }
    worst
}

/// Gradient of the expected NLL under a frozen posterior over every
/// (start, end) pair inside the labeled paragraph, built one pair at a
/// time. Returns gradients in parameter-group order.
pub fn em_gradient(params: &ModelParams, ex: &Example) -> Vec<Array> {
    let z = coarse_of(ex);
    let old = fine_belief(params, ex).unwrap();
    let r = old.layout.range(z.paragraph);
    let mut weights = Vec::new();
    for s in r.clone() {
        for e in r.clone() {
            weights.push((s, e, old.start_logprob[s].exp() * old.end_logprob[e].exp()));
        }
    }
    let norm: f64 = weights.iter().map(|w| w.2).sum();

    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let span = SpanNodes::forward(&mut g, &p, ex).unwrap();
    let mut total = None;
    for (s, e, w) in weights {
        let ls = g.pick(span.start, s).unwrap();
        let le = g.pick(span.end, e).unwrap();
        let joint = g.add(ls, le).unwrap();
        let term = g.scale(joint, -w / norm);
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term).unwrap(),
        });
    }
    let mut grads = g.backward(total.unwrap()).unwrap();
    p.gradients(&mut grads)
}

pub fn pd_gradient(params: &ModelParams, ex: &Example, distance: DistanceKind, joint: bool) -> Vec<Array> {
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let loss = pd_loss(&mut g, &p, ex, distance, joint).unwrap();
    let mut grads = g.backward(loss).unwrap();
    p.gradients(&mut grads)
}

/// Per group, the infinity-norm gap over the larger infinity norm.
pub fn gradient_gap(a: &[Array], b: &[Array]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let diff = x.values().iter().zip(y.values()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
            let scale = x
                .values()
                .iter()
                .chain(y.values())
                .map(|v| v.abs())
                .fold(0.0, f64::max);
            if diff == 0.0 {
                0.0
            } else {
                diff / scale
            }
        })
        .fold(0.0, f64::max)
}

/// Worst EM-versus-distillation gradient gap over `n` random pairs. Single
/// paragraph documents are redrawn: their gradient is exactly zero and
/// only rounding noise would be compared.
pub fn em_equivalence_gap(rng: &mut ChaCha8Rng, n: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let params = random_params(rng, 4, 5, 10.0);
        let ex = loop {
            let ex = random_example(rng, i, true, 4, 12);
            if ex.document.num_paragraphs() > 1 {
                break ex;
            }
        };
        let em = em_gradient(&params, &ex);
        let pd = pd_gradient(&params, &ex, DistanceKind::CrossEntropy, false);
        worst = worst.max(gradient_gap(&em, &pd));
    }
    worst
}

pub struct ProjectionReport {
    /// Largest |sum - 1| of a projected factor.
    pub sum_error: f64,
    /// Largest probability found outside the labeled paragraph.
    pub outside_mass: f64,
    /// Largest change from projecting a projection again.
    pub idempotence_error: f64,
    pub degenerate_rejected: bool,
    pub degenerate_skipped: bool,
}

impl ProjectionReport {
    pub fn passes(&self) -> bool {
        self.sum_error <= 1e-8
            && self.outside_mass == 0.0
            && self.idempotence_error <= 1e-12
            && self.degenerate_rejected
            && self.degenerate_skipped
    }
}

pub fn projection_suite(rng: &mut ChaCha8Rng, n: usize) -> ProjectionReport {
    let mut report = ProjectionReport {
        sum_error: 0.0,
        outside_mass: 0.0,
        idempotence_error: 0.0,
        degenerate_rejected: false,
        degenerate_skipped: false,
    };
    for _ in 0..n {
        let doc = random_document(rng, 5, 20);
        let layout = doc.layout();
        let t = layout.num_tokens();
        let start: Vec<f64> = (0..t).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let end: Vec<f64> = (0..t).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let b = SpanBelief::from_scores(&start, &end, layout.clone());
        let z = CoarseLabel {
            paragraph: rng.gen_range(0..doc.num_paragraphs()),
        };
        let q = project(&b, z).unwrap();
        let r = layout.range(z.paragraph);
        for probs in [q.start_probs(), q.end_probs()] {
            report.sum_error = report.sum_error.max((probs.iter().sum::<f64>() - 1.0).abs());
            for (i, v) in probs.iter().enumerate() {
                if !r.contains(&i) {
                    report.outside_mass = report.outside_mass.max(*v);
                }
            }
        }
        let again = project(&q.as_belief(), z).unwrap();
        report.idempotence_error = report.idempotence_error.max(max_prob_gap(&q, &again));
    }

    // One paragraph carries essentially all the mass; projecting onto the
    // other one must be refused, and training must skip the example.
    let doc = Document::new(vec![vec![1, 2, 3], vec![4, 5]]).unwrap();
    let layout = doc.layout();
    let scores = [0.0, 0.0, 0.0, -1e4, -1e4];
    let b = SpanBelief::from_scores(&scores, &scores, layout);
    report.degenerate_rejected = project(&b, CoarseLabel { paragraph: 1 }).is_err();
    report.degenerate_skipped = degenerate_example_is_skipped();
    report
}

fn max_prob_gap(a: &ProjectedBelief, b: &ProjectedBelief) -> f64 {
    let pairs = a
        .start_probs()
        .into_iter()
        .zip(b.start_probs())
        .chain(a.end_probs().into_iter().zip(b.end_probs()));
    pairs.map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Parameters that put every start and end on paragraph 0's tokens, then a
/// coarse example labeled with paragraph 1: the combined loss must drop it
/// and count it.
fn degenerate_example_is_skipped() -> bool {
    let config = ModelConfig {
        vocab_size: VOCAB,
        d_emb: 1,
        d_hid: 1,
    };
    let mut params = ModelParams::zeros(config);
    overlap_detector(&mut params, 1e4);
    let doc = Document::new(vec![vec![7, 7], vec![1, 2]]).unwrap();
    let fine = Example::fine("f", "d", vec![7], doc.clone(), FineLabel::new(0, 0, 0)).unwrap();
    let coarse = Example::coarse("c", "d", vec![7], doc, CoarseLabel { paragraph: 1 }, None).unwrap();
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let settings = LossSettings {
        objective: ObjectiveKind::Pd(DistanceKind::SquaredError),
        alpha: 1.0,
        max_span_len: 10,
        joint_squared_error: false,
    };
    match combined_loss(&mut g, &p, &[fine], &[coarse], &settings) {
        Ok(l) => l.skipped == 1 && g.value(l.total).all_finite(),
        Err(_) => false,
    }
}

/// Makes tokens that occur in the question score `head_weight` higher on
/// both span heads than tokens that do not (requires d_emb = d_hid = 1).
pub fn overlap_detector(params: &mut ModelParams, head_weight: f64) {
    let overlap_col = 3 * params.config().d_emb;
    params.get_mut(ParamGroup::Hidden1Weight).values_mut()[overlap_col] = 10.0;
    params.get_mut(ParamGroup::Hidden2Weight).values_mut()[0] = 10.0;
    params.get_mut(ParamGroup::SpanStart).values_mut()[0] = head_weight;
    params.get_mut(ParamGroup::SpanEnd).values_mut()[0] = head_weight;
}

pub struct AnalysisCheck {
    pub uniform_gap: f64,
    pub point_mass_max: f64,
}

/// Zero parameters give uniform factors over each document's positions;
/// the overlap detector gives a point mass on the single question token.
pub fn analysis_closed_forms(rng: &mut ChaCha8Rng) -> AnalysisCheck {
    let examples: Vec<Example> = (0..20).map(|i| random_example(rng, i, true, 4, 15)).collect();
    let zero = ModelParams::zeros(ModelConfig {
        vocab_size: VOCAB,
        d_emb: 3,
        d_hid: 3,
    });
    let a = analyze_predictive(&zero, &examples, 10).unwrap();
    let mean_log_n: f64 =
        examples.iter().map(|e| (e.document.num_tokens() as f64).ln()).sum::<f64>() / examples.len() as f64;
    let mean_err2: f64 = examples
        .iter()
        .map(|e| 1.0 - 1.0 / e.document.num_tokens() as f64)
        .sum::<f64>()
        / examples.len() as f64;
    let uniform_gap = (a.entropy - mean_log_n)
        .abs()
        .max((a.xent_gold - mean_log_n).abs())
        .max((a.err2_gold - mean_err2).abs());

    let mut peaked = ModelParams::zeros(ModelConfig {
        vocab_size: VOCAB,
        d_emb: 1,
        d_hid: 1,
    });
    overlap_detector(&mut peaked, 1e4);
    let point: Vec<Example> = (0..10)
        .map(|i| {
            // token 0 appears once, in the question and at the gold position
            let mut doc = random_document(rng, 3, 10);
            let mut paragraphs: Vec<Vec<TokenId>> = doc
                .paragraphs()
                .iter()
                .map(|p| p.iter().map(|&t| if t == 0 { 1 } else { t }).collect())
                .collect();
            let gp = rng.gen_range(0..paragraphs.len());
            let gt = rng.gen_range(0..paragraphs[gp].len());
            paragraphs[gp][gt] = 0;
            doc = Document::new(paragraphs).unwrap();
            let gold = FineLabel::new(gp, gt, gt);
            Example::coarse(format!("p{i}"), format!("d{i}"), vec![0], doc, CoarseLabel { paragraph: gp }, Some(gold))
                .unwrap()
        })
        .collect();
    let b = analyze_predictive(&peaked, &point, 10).unwrap();
    AnalysisCheck {
        uniform_gap,
        point_mass_max: b.entropy.abs().max(b.xent_gold.abs()).max(b.err2_gold.abs()),
    }
}

pub const GRADCHECK_OBJECTIVES: [(ObjectiveKind, bool); 6] = [
    (ObjectiveKind::Supervised, false),
    (ObjectiveKind::Mtl, false),
    (ObjectiveKind::Mml, false),
    (ObjectiveKind::Pd(DistanceKind::CrossEntropy), false),
    (ObjectiveKind::Pd(DistanceKind::SquaredError), false),
    (ObjectiveKind::Pd(DistanceKind::SquaredError), true),
];

/// Combined loss with distillation teachers held at the values computed
/// from `teachers`, evaluated by direct summation.
pub fn frozen_loss(
    params: &ModelParams,
    fine: &[Example],
    coarse: &[Example],
    settings: &LossSettings,
    teachers: &[ProjectedBelief],
) -> f64 {
    let ObjectiveKind::Pd(distance) = settings.objective else {
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let l = combined_loss(&mut g, &p, fine, coarse, settings).unwrap();
        return g.value(l.total).item();
    };
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let fine_mean: f64 = fine
        .iter()
        .map(|ex| {
            let l = supervised_loss(&mut g, &p, ex).unwrap();
            g.value(l).item()
        })
        .sum::<f64>()
        / fine.len() as f64;
    let coarse_mean: f64 = coarse
        .iter()
        .zip(teachers)
        .map(|(ex, q)| {
            let b = fine_belief(params, ex).unwrap();
            let (qs, qe) = (q.start_probs(), q.end_probs());
            let ps: Vec<f64> = b.start_logprob.iter().map(|v| v.exp()).collect();
            let pe: Vec<f64> = b.end_logprob.iter().map(|v| v.exp()).collect();
            match distance {
                DistanceKind::CrossEntropy => {
                    -(0..ps.len())
                        .map(|i| qs[i] * b.start_logprob[i] + qe[i] * b.end_logprob[i])
                        .sum::<f64>()
                }
                DistanceKind::SquaredError if settings.joint_squared_error => {
                    let mut t = 0.0;
                    for s in 0..ps.len() {
                        for e in 0..pe.len() {
                            t += (qs[s] * qe[e] - ps[s] * pe[e]).powi(2);
                        }
                    }
                    t
                }
                DistanceKind::SquaredError => {
                    (0..ps.len()).map(|i| (ps[i] - qs[i]).powi(2) + (pe[i] - qe[i]).powi(2)).sum()
                }
            }
        })
        .sum::<f64>()
        / coarse.len() as f64;
    fine_mean + settings.alpha * coarse_mean
}

/// Worst relative error between backprop and central differences over
/// `samples` parameter entries with non-negligible gradient.
pub fn combined_gradcheck(
    rng: &mut ChaCha8Rng,
    objective: ObjectiveKind,
    joint: bool,
    samples: usize,
) -> f64 {
    let mut params = random_params(rng, 3, 4, 8.0);
    let fine: Vec<Example> = (0..2).map(|i| random_example(rng, i, false, 3, 8)).collect();
    let coarse: Vec<Example> = (0..2).map(|i| random_example(rng, 10 + i, true, 3, 8)).collect();
    let settings = LossSettings {
        objective,
        alpha: 0.7,
        max_span_len: 4,
        joint_squared_error: joint,
    };
    let teachers: Vec<ProjectedBelief> = coarse
        .iter()
        .map(|ex| project(&fine_belief(&params, ex).unwrap(), coarse_of(ex)).unwrap())
        .collect();

    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let l = combined_loss(&mut g, &p, &fine, &coarse, &settings).unwrap();
    let mut grads = g.backward(l.total).unwrap();
    let analytic = p.gradients(&mut grads);

    let mut candidates = Vec::new();
    for (gi, a) in analytic.iter().enumerate() {
        for (vi, v) in a.values().iter().enumerate() {
            if v.abs() > 1e-6 {
                candidates.push((gi, vi));
            }
        }
    }
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let (gi, vi) = candidates[rng.gen_range(0..candidates.len())];
        let orig = params.arrays()[gi].values()[vi];
        params.arrays_mut()[gi].values_mut()[vi] = orig + h;
        let up = frozen_loss(&params, &fine, &coarse, &settings, &teachers);
        params.arrays_mut()[gi].values_mut()[vi] = orig - h;
        let down = frozen_loss(&params, &fine, &coarse, &settings, &teachers);
        params.arrays_mut()[gi].values_mut()[vi] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(rel_err(analytic[gi].values()[vi], numeric));
    }
    worst
}

/// A few dozen short documents; trains in well under a second per hundred
/// steps.
pub fn small_bundle(seed: u64) -> DatasetBundle {
    generate(&GenConfig {
        vocab_size: 60,
        num_documents: 40,
        paragraphs_per_doc: 3,
        min_paragraph_tokens: 8,
        max_paragraph_tokens: 12,
        questions_per_doc: 2,
        fine_frac: 0.3,
        coarse_frac: 0.3,
        dev_frac: 0.2,
        test_frac: 0.2,
        seed,
        ..GenConfig::default()
    })
    .unwrap()
}
