//! Span and paragraph metrics, predictive-distribution analysis, and report
//! rendering.
//!
//! Distribution metrics are computed per factor (start, end) and averaged
//! over the two factors, then over examples.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Example, FineLabel};
use crate::model::{best_span_in_paragraph, decode_span, fine_belief, ModelError, ModelParams, SpanBelief};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("example {id}: {reason}")]
    Input { id: String, reason: String },
    #[error("gain is undefined: ceiling F1 {ceiling} does not exceed baseline F1 {baseline}")]
    UndefinedGain { baseline: f64, ceiling: f64 },
    #[error("nothing to evaluate")]
    Empty,
}

/// Token-position overlap F1; zero across paragraphs.
pub fn token_f1(pred: FineLabel, gold: FineLabel) -> f64 {
    if pred.paragraph != gold.paragraph {
        return 0.0;
    }
    let lo = pred.start.max(gold.start);
    let hi = pred.end.min(gold.end);
    if lo > hi {
        return 0.0;
    }
    let overlap = (hi - lo + 1) as f64;
    let precision = overlap / pred.len() as f64;
    let recall = overlap / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

fn gold_fine(ex: &Example) -> Result<FineLabel, EvalError> {
    ex.fine_label().ok_or_else(|| EvalError::Input {
        id: ex.id.clone(),
        reason: "expected a fine label".into(),
    })
}

/// F1 of the best span over the whole document.
pub fn belief_fine_f1(belief: &SpanBelief, gold: FineLabel, max_span_len: usize) -> Result<f64, EvalError> {
    Ok(token_f1(decode_span(belief, max_span_len, None)?.span, gold))
}

/// F1 of the best span inside the gold paragraph.
pub fn belief_passage_f1(belief: &SpanBelief, gold: FineLabel, max_span_len: usize) -> Result<f64, EvalError> {
    Ok(token_f1(decode_span(belief, max_span_len, Some(gold.paragraph))?.span, gold))
}

/// Reciprocal rank of `gold_paragraph` when paragraphs are ordered by their
/// best span score. Tied paragraphs all take the worst of their ranks.
pub fn reciprocal_rank(belief: &SpanBelief, gold_paragraph: usize, max_span_len: usize) -> Result<f64, EvalError> {
    let best = |p| best_span_in_paragraph(belief, p, max_span_len).map(|s| s.score);
    let gold = best(gold_paragraph).ok_or(ModelError::NoValidSpan)?;
    let rank = (0..belief.layout.num_paragraphs())
        .filter(|&p| best(p).is_some_and(|s| s >= gold))
        .count();
    Ok(1.0 / rank as f64)
}

fn mean_over<F>(params: &ModelParams, split: &[Example], per_example: F) -> Result<f64, EvalError>
where
    F: Fn(&SpanBelief, &Example) -> Result<f64, EvalError> + Sync,
{
    if split.is_empty() {
        return Err(EvalError::Empty);
    }
    let values = split
        .par_iter()
        .map(|ex| per_example(&fine_belief(params, ex)?, ex))
        .collect::<Result<Vec<f64>, EvalError>>()?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Mean token F1 of the document-wide argmax span.
pub fn evaluate_fine(params: &ModelParams, split: &[Example], max_span_len: usize) -> Result<f64, EvalError> {
    mean_over(params, split, |b, ex| belief_fine_f1(b, gold_fine(ex)?, max_span_len))
}

/// Mean token F1 when decoding is restricted to the gold paragraph.
pub fn evaluate_passage_given(
    params: &ModelParams,
    split: &[Example],
    max_span_len: usize,
) -> Result<f64, EvalError> {
    mean_over(params, split, |b, ex| belief_passage_f1(b, gold_fine(ex)?, max_span_len))
}

/// Mean reciprocal rank of the labeled paragraph. Works for fine and coarse
/// examples alike since both carry the gold paragraph.
pub fn passage_mrr(params: &ModelParams, split: &[Example], max_span_len: usize) -> Result<f64, EvalError> {
    mean_over(params, split, |b, ex| {
        reciprocal_rank(b, ex.label.paragraph(), max_span_len)
    })
}

/// Fine-F1, Passage-F1 and Passage-MRR of one split from a single forward
/// pass per example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitScores {
    pub fine_f1: f64,
    pub passage_f1: f64,
    pub passage_mrr: f64,
}

pub fn evaluate_split(params: &ModelParams, split: &[Example], max_span_len: usize) -> Result<SplitScores, EvalError> {
    if split.is_empty() {
        return Err(EvalError::Empty);
    }
    let rows = split
        .par_iter()
        .map(|ex| {
            let gold = gold_fine(ex)?;
            let b = fine_belief(params, ex)?;
            Ok([
                belief_fine_f1(&b, gold, max_span_len)?,
                belief_passage_f1(&b, gold, max_span_len)?,
                reciprocal_rank(&b, gold.paragraph, max_span_len)?,
            ])
        })
        .collect::<Result<Vec<[f64; 3]>, EvalError>>()?;
    let n = rows.len() as f64;
    let col = |i: usize| rows.iter().map(|r| r[i]).sum::<f64>() / n;
    Ok(SplitScores {
        fine_f1: col(0),
        passage_f1: col(1),
        passage_mrr: col(2),
    })
}

/// Entropy, cross-entropy to the gold position and squared error to the
/// gold one-hot, each averaged over the start and end factors.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FactorStats {
    pub entropy: f64,
    pub xent_gold: f64,
    pub err2_gold: f64,
}

fn factor_stats(logprob: &[f64], gold: usize) -> FactorStats {
    let mut entropy = 0.0;
    let mut sum_sq = 0.0;
    for &lp in logprob {
        let p = lp.exp();
        if p > 0.0 {
            entropy -= p * lp;
        }
        sum_sq += p * p;
    }
    let pg = logprob[gold].exp();
    FactorStats {
        entropy,
        xent_gold: -logprob[gold],
        err2_gold: 1.0 - 2.0 * pg + sum_sq,
    }
}

pub fn belief_stats(belief: &SpanBelief, gold: FineLabel) -> FactorStats {
    let s = factor_stats(&belief.start_logprob, belief.layout.flat(gold.paragraph, gold.start));
    let e = factor_stats(&belief.end_logprob, belief.layout.flat(gold.paragraph, gold.end));
    FactorStats {
        entropy: 0.5 * (s.entropy + e.entropy),
        xent_gold: 0.5 * (s.xent_gold + e.xent_gold),
        err2_gold: 0.5 * (s.err2_gold + e.err2_gold),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictiveAnalysis {
    pub entropy: f64,
    pub xent_gold: f64,
    pub err2_gold: f64,
    pub passage_mrr: f64,
    pub n_examples: usize,
}

/// Distribution diagnostics on coarsely labeled examples, scored against
/// their hidden fine labels.
pub fn analyze_predictive(
    params: &ModelParams,
    split: &[Example],
    max_span_len: usize,
) -> Result<PredictiveAnalysis, EvalError> {
    if split.is_empty() {
        return Err(EvalError::Empty);
    }
    let per_example = split
        .par_iter()
        .map(|ex| {
            let gold = ex.hidden_fine().ok_or_else(|| EvalError::Input {
                id: ex.id.clone(),
                reason: "no hidden fine label to analyze against".into(),
            })?;
            let b = fine_belief(params, ex)?;
            Ok((belief_stats(&b, gold), reciprocal_rank(&b, gold.paragraph, max_span_len)?))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let n = per_example.len() as f64;
    let mut out = PredictiveAnalysis {
        entropy: 0.0,
        xent_gold: 0.0,
        err2_gold: 0.0,
        passage_mrr: 0.0,
        n_examples: per_example.len(),
    };
    for (s, rr) in &per_example {
        out.entropy += s.entropy;
        out.xent_gold += s.xent_gold;
        out.err2_gold += s.err2_gold;
        out.passage_mrr += rr;
    }
    out.entropy /= n;
    out.xent_gold /= n;
    out.err2_gold /= n;
    out.passage_mrr /= n;
    Ok(out)
}

/// Share of the baseline-to-ceiling gap closed by a model.
pub fn gain(model_f1: f64, baseline_f1: f64, ceiling_f1: f64) -> Result<f64, EvalError> {
    if ceiling_f1 <= baseline_f1 {
        return Err(EvalError::UndefinedGain {
            baseline: baseline_f1,
            ceiling: ceiling_f1,
        });
    }
    Ok((model_f1 - baseline_f1) / (ceiling_f1 - baseline_f1))
}

/// The coarse split with its hidden span labels revealed, for training the
/// ceiling model.
pub fn ceiling_examples(coarse: &[Example]) -> Result<Vec<Example>, EvalError> {
    coarse
        .iter()
        .map(|ex| {
            ex.promote_hidden().ok_or_else(|| EvalError::Input {
                id: ex.id.clone(),
                reason: "no hidden fine label to promote".into(),
            })
        })
        .collect()
}

/// Mean and sample standard deviation (zero for a single value).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self {
            mean,
            std,
            values: values.to_vec(),
        }
    }

    fn cell(&self) -> String {
        format!("{:.4} ± {:.4}", self.mean, self.std)
    }
}

/// Metrics of one trained model on one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub fine_f1: f64,
    pub passage_f1: f64,
    pub passage_mrr: f64,
    pub entropy: f64,
    pub xent_gold: f64,
    pub err2_gold: f64,
}

impl SeedMetrics {
    fn field(&self, metric: Metric) -> f64 {
        match metric {
            Metric::FineF1 => self.fine_f1,
            Metric::PassageF1 => self.passage_f1,
            Metric::PassageMrr => self.passage_mrr,
            Metric::Entropy => self.entropy,
            Metric::XentGold => self.xent_gold,
            Metric::Err2Gold => self.err2_gold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Metric {
    FineF1,
    PassageF1,
    PassageMrr,
    Entropy,
    XentGold,
    Err2Gold,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::FineF1,
        Metric::PassageF1,
        Metric::PassageMrr,
        Metric::Entropy,
        Metric::XentGold,
        Metric::Err2Gold,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::FineF1 => "fine_f1",
            Metric::PassageF1 => "passage_f1",
            Metric::PassageMrr => "passage_mrr",
            Metric::Entropy => "entropy",
            Metric::XentGold => "xent_gold",
            Metric::Err2Gold => "err2_gold",
        }
    }
}

/// One model under one data condition, aggregated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub condition: String,
    pub model: String,
    pub alpha: Option<f64>,
    pub per_seed: Vec<SeedMetrics>,
    pub summary: BTreeMap<String, Summary>,
    /// Gain of the mean Fine-F1 against the condition's baseline and ceiling.
    pub gain: Option<f64>,
    pub n_examples: usize,
}

impl MetricsReport {
    pub fn new(condition: &str, model: &str, alpha: Option<f64>, per_seed: Vec<SeedMetrics>, n_examples: usize) -> Self {
        let summary = Metric::ALL
            .iter()
            .map(|&m| {
                let vals: Vec<f64> = per_seed.iter().map(|s| s.field(m)).collect();
                (m.name().to_string(), Summary::of(&vals))
            })
            .collect();
        Self {
            condition: condition.to_string(),
            model: model.to_string(),
            alpha,
            per_seed,
            summary,
            gain: None,
            n_examples,
        }
    }

    pub fn metric(&self, m: Metric) -> &Summary {
        &self.summary[m.name()]
    }
}

fn aligned(rows: &[Vec<String>]) -> String {
    let cols = rows[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap())
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell}{}", " ".repeat(w - cell.chars().count())))
            .collect();
        writeln!(out, "{}", line.join("  ").trim_end()).unwrap();
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            writeln!(out, "{}", rule.join("  ")).unwrap();
        }
    }
    out
}

fn alpha_cell(alpha: Option<f64>) -> String {
    alpha.map_or_else(|| "-".into(), |a| format!("{a}"))
}

/// Span-selection table: Fine-F1, Gain and Passage-F1 per model.
pub fn render_results_table(reports: &[MetricsReport]) -> String {
    let mut rows = vec![["condition", "model", "alpha", "seeds", "Fine-F1", "Gain", "Passage-F1"]
        .map(String::from)
        .to_vec()];
    for r in reports {
        rows.push(vec![
            r.condition.clone(),
            r.model.clone(),
            alpha_cell(r.alpha),
            r.per_seed.len().to_string(),
            r.metric(Metric::FineF1).cell(),
            r.gain.map_or_else(|| "-".into(), |g| format!("{g:.4}")),
            r.metric(Metric::PassageF1).cell(),
        ]);
    }
    let mut out = String::from("# span selection on the test split (mean ± sample std over seeds)\n");
    out.push_str(&aligned(&rows));
    out
}

/// Predictive-distribution table on the coarsely labeled training split.
pub fn render_analysis_table(reports: &[MetricsReport]) -> String {
    let mut rows = vec![["condition", "model", "Passage-MRR", "Entropy", "xent-Gold", "err2-Gold"]
        .map(String::from)
        .to_vec()];
    for r in reports {
        rows.push(vec![
            r.condition.clone(),
            r.model.clone(),
            r.metric(Metric::PassageMrr).cell(),
            r.metric(Metric::Entropy).cell(),
            r.metric(Metric::XentGold).cell(),
            r.metric(Metric::Err2Gold).cell(),
        ]);
    }
    let mut out = String::from(
        "# predictive distributions on coarsely labeled data, scored against hidden spans\n\
         # entropy and distances are per factor (start, end), averaged over factors\n",
    );
    out.push_str(&aligned(&rows));
    out
}

#[derive(Debug, Serialize)]
struct Entry<'a> {
    condition: &'a str,
    model: &'a str,
    seed: u64,
    metric: &'static str,
    value: f64,
}

/// Machine-readable summary: the aggregated reports plus one flat entry per
/// (condition, model, seed, metric).
pub fn render_summary_json(reports: &[MetricsReport]) -> String {
    let entries: Vec<Entry> = reports
        .iter()
        .flat_map(|r| {
            r.per_seed.iter().flat_map(move |s| {
                Metric::ALL.iter().map(move |&m| Entry {
                    condition: &r.condition,
                    model: &r.model,
                    seed: s.seed,
                    metric: m.name(),
                    value: s.field(m),
                })
            })
        })
        .collect();
    let doc = serde_json::json!({ "reports": reports, "entries": entries });
    let mut s = serde_json::to_string_pretty(&doc).expect("serializable");
    s.push('\n');
    s
}
