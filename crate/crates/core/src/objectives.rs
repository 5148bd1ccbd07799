//! Training objectives for fine (span) and coarse (paragraph) supervision.
//!
//! Every loss is built on a [`Graph`] so the caller can backpropagate into
//! the bound parameters. Span-level losses come in two flavours: one taking
//! the model and an example, and one taking the start/end log-probability
//! nodes directly (used by tests and by [`combined_loss`] to share one
//! forward pass).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CoarseLabel, Example, FineLabel, Layout};
use crate::diff::{Array, DiffError, Graph, NodeId, MASKED_LOGPROB};
use crate::model::{
    coarse_logprob_node, encode, fine_belief_from_hidden, BoundParams, ModelError, SpanBelief,
};

/// Marginals below this are clamped before taking the log.
pub const PROBABILITY_FLOOR: f64 = 1e-30;

/// The α grid swept per objective.
pub const DEFAULT_ALPHA_GRID: [f64; 7] = [0.01, 0.1, 0.5, 1.0, 5.0, 10.0, 100.0];

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("example {id}: {reason}")]
    Input { id: String, reason: String },
    #[error("projection onto paragraph {paragraph} is degenerate: no {factor} mass")]
    DegenerateProjection { paragraph: usize, factor: &'static str },
    #[error("the fine batch is empty")]
    EmptyFineBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DistanceKind {
    CrossEntropy,
    SquaredError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObjectiveKind {
    Supervised,
    Mtl,
    Mml,
    Pd(DistanceKind),
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 5] = [
        ObjectiveKind::Supervised,
        ObjectiveKind::Mtl,
        ObjectiveKind::Mml,
        ObjectiveKind::Pd(DistanceKind::CrossEntropy),
        ObjectiveKind::Pd(DistanceKind::SquaredError),
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Supervised => "supervised",
            ObjectiveKind::Mtl => "mtl",
            ObjectiveKind::Mml => "mml",
            ObjectiveKind::Pd(DistanceKind::CrossEntropy) => "pd-xent",
            ObjectiveKind::Pd(DistanceKind::SquaredError) => "pd-err2",
        }
    }

    pub fn uses_coarse(self) -> bool {
        self != ObjectiveKind::Supervised
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectiveKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|k| k.name()).collect();
                format!("unknown objective `{s}` (expected one of {})", names.join(", "))
            })
    }
}

impl Serialize for ObjectiveKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for ObjectiveKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn input_err(ex: &Example, reason: impl Into<String>) -> ObjectiveError {
    ObjectiveError::Input {
        id: ex.id.clone(),
        reason: reason.into(),
    }
}

fn fine_label_of(ex: &Example) -> Result<FineLabel, ObjectiveError> {
    let label = ex
        .fine_label()
        .ok_or_else(|| input_err(ex, "expected a fine label"))?;
    if !ex.document.is_valid_span(&label) {
        return Err(input_err(ex, format!("label {label:?} is out of range")));
    }
    Ok(label)
}

fn coarse_label_of(ex: &Example) -> Result<CoarseLabel, ObjectiveError> {
    let z = ex.coarse_label();
    if z.paragraph >= ex.document.num_paragraphs() {
        return Err(input_err(ex, format!("paragraph {} is out of range", z.paragraph)));
    }
    Ok(z)
}

/// Start and end log-probability vectors over every document position.
#[derive(Debug, Clone)]
pub struct SpanNodes {
    pub start: NodeId,
    pub end: NodeId,
    pub layout: Layout,
}

impl SpanNodes {
    pub fn forward(g: &mut Graph, p: &BoundParams, ex: &Example) -> Result<Self, ObjectiveError> {
        let hidden = encode(g, p, ex)?;
        let b = fine_belief_from_hidden(g, p, hidden)?;
        Ok(Self {
            start: b.start,
            end: b.end,
            layout: b.hidden.layout,
        })
    }

    /// Places a fixed belief on the graph as constants.
    pub fn constant(g: &mut Graph, belief: &SpanBelief) -> Self {
        Self {
            start: g.constant(Array::vector(belief.start_logprob.clone())),
            end: g.constant(Array::vector(belief.end_logprob.clone())),
            layout: belief.layout.clone(),
        }
    }

    pub fn belief(&self, g: &Graph) -> SpanBelief {
        SpanBelief {
            start_logprob: g.value(self.start).values().to_vec(),
            end_logprob: g.value(self.end).values().to_vec(),
            layout: self.layout.clone(),
        }
    }
}

/// `-log p_start(gold start) - log p_end(gold end)`.
pub fn span_nll(g: &mut Graph, span: &SpanNodes, label: FineLabel) -> Result<NodeId, ObjectiveError> {
    let s = g.pick(span.start, span.layout.flat(label.paragraph, label.start))?;
    let e = g.pick(span.end, span.layout.flat(label.paragraph, label.end))?;
    let total = g.add(s, e)?;
    Ok(g.neg(total))
}

pub fn supervised_loss(g: &mut Graph, p: &BoundParams, ex: &Example) -> Result<NodeId, ObjectiveError> {
    let label = fine_label_of(ex)?;
    let span = SpanNodes::forward(g, p, ex)?;
    span_nll(g, &span, label)
}

/// `-log P(z | x)` under the paragraph head. The weight is applied by
/// [`combined_loss`].
pub fn coarse_nll(g: &mut Graph, p: &BoundParams, ex: &Example) -> Result<NodeId, ObjectiveError> {
    let z = coarse_label_of(ex)?;
    let hidden = encode(g, p, ex)?;
    let lp = coarse_logprob_node(g, p, &hidden)?;
    let picked = g.pick(lp, z.paragraph)?;
    Ok(g.neg(picked))
}

/// Probability mass of all spans inside paragraph `z` with `start <= end`
/// and length at most `max_span_len`. With independent factors this is
/// `sum_s p_s * (p_e summed over the window [s, s + L))`, so one windowed
/// prefix sum replaces the double loop.
pub fn paragraph_marginal(
    g: &mut Graph,
    span: &SpanNodes,
    z: CoarseLabel,
    max_span_len: usize,
) -> Result<NodeId, ObjectiveError> {
    let r = span.layout.range(z.paragraph);
    let ls = g.slice_rows(span.start, r.start, r.end)?;
    let le = g.slice_rows(span.end, r.start, r.end)?;
    let ps = g.exp(ls);
    let pe = g.exp(le);
    let window = g.window_sum(pe, max_span_len)?;
    Ok(g.dot(ps, window)?)
}

/// Value-only form of [`paragraph_marginal`].
pub fn paragraph_marginal_value(belief: &SpanBelief, z: CoarseLabel, max_span_len: usize) -> f64 {
    let mut g = Graph::new();
    let span = SpanNodes::constant(&mut g, belief);
    let m = paragraph_marginal(&mut g, &span, z, max_span_len).expect("valid paragraph");
    g.value(m).item()
}

/// `-log max(marginal, floor)` for the labeled paragraph.
pub fn mml_from_span(
    g: &mut Graph,
    span: &SpanNodes,
    z: CoarseLabel,
    max_span_len: usize,
) -> Result<NodeId, ObjectiveError> {
    let m = paragraph_marginal(g, span, z, max_span_len)?;
    let m = g.clamp_min(m, PROBABILITY_FLOOR);
    let l = g.log(m)?;
    Ok(g.neg(l))
}

pub fn mml_loss(
    g: &mut Graph,
    p: &BoundParams,
    ex: &Example,
    max_span_len: usize,
) -> Result<NodeId, ObjectiveError> {
    let z = coarse_label_of(ex)?;
    let span = SpanNodes::forward(g, p, ex)?;
    mml_from_span(g, &span, z, max_span_len)
}

/// A span belief restricted to one paragraph and renormalized per factor.
/// Positions outside the paragraph hold [`MASKED_LOGPROB`], whose
/// exponential is exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedBelief {
    pub paragraph: usize,
    pub start_logprob: Vec<f64>,
    pub end_logprob: Vec<f64>,
    pub layout: Layout,
}

impl ProjectedBelief {
    pub fn start_probs(&self) -> Vec<f64> {
        self.start_logprob.iter().map(|l| l.exp()).collect()
    }

    pub fn end_probs(&self) -> Vec<f64> {
        self.end_logprob.iter().map(|l| l.exp()).collect()
    }

    pub fn as_belief(&self) -> SpanBelief {
        SpanBelief {
            start_logprob: self.start_logprob.clone(),
            end_logprob: self.end_logprob.clone(),
            layout: self.layout.clone(),
        }
    }
}

fn project_factor(
    logprob: &[f64],
    range: std::ops::Range<usize>,
    paragraph: usize,
    factor: &'static str,
) -> Result<Vec<f64>, ObjectiveError> {
    let inside = &logprob[range.clone()];
    let max = inside.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + inside.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    if !lse.is_finite() || lse < PROBABILITY_FLOOR.ln() {
        return Err(ObjectiveError::DegenerateProjection { paragraph, factor });
    }
    Ok((0..logprob.len())
        .map(|i| if range.contains(&i) { logprob[i] - lse } else { MASKED_LOGPROB })
        .collect())
}

/// Zeroes each factor outside paragraph `z` and renormalizes it. Fails when
/// either factor has less than [`PROBABILITY_FLOOR`] mass in the paragraph.
pub fn project(belief: &SpanBelief, z: CoarseLabel) -> Result<ProjectedBelief, ObjectiveError> {
    let r = belief.layout.range(z.paragraph);
    Ok(ProjectedBelief {
        paragraph: z.paragraph,
        start_logprob: project_factor(&belief.start_logprob, r.clone(), z.paragraph, "start")?,
        end_logprob: project_factor(&belief.end_logprob, r, z.paragraph, "end")?,
        layout: belief.layout.clone(),
    })
}

/// Distance from the projected teacher to the student. The teacher is read
/// from the current node values and enters the graph as a constant.
pub fn pd_from_span(
    g: &mut Graph,
    span: &SpanNodes,
    z: CoarseLabel,
    distance: DistanceKind,
    joint_squared_error: bool,
) -> Result<NodeId, ObjectiveError> {
    let teacher = project(&span.belief(g), z)?;
    let qs = g.constant(Array::vector(teacher.start_probs()));
    let qe = g.constant(Array::vector(teacher.end_probs()));
    match distance {
        DistanceKind::CrossEntropy => {
            let a = g.dot(qs, span.start)?;
            let b = g.dot(qe, span.end)?;
            let total = g.add(a, b)?;
            Ok(g.neg(total))
        }
        DistanceKind::SquaredError if joint_squared_error => {
            // sum over (s, e) of (q_s q_e - p_s p_e)^2, expanded so the
            // product space is never materialized
            let ps = g.exp(span.start);
            let pe = g.exp(span.end);
            let q2: f64 = teacher.start_probs().iter().map(|v| v * v).sum::<f64>()
                * teacher.end_probs().iter().map(|v| v * v).sum::<f64>();
            let qps = g.dot(qs, ps)?;
            let qpe = g.dot(qe, pe)?;
            let cross = g.mul(qps, qpe)?;
            let cross = g.scale(cross, -2.0);
            let pss = g.dot(ps, ps)?;
            let pee = g.dot(pe, pe)?;
            let p2 = g.mul(pss, pee)?;
            let t = g.add(cross, p2)?;
            let c = g.constant(Array::scalar(q2));
            Ok(g.add(t, c)?)
        }
        DistanceKind::SquaredError => {
            let mut total = None;
            for (q, lp) in [(qs, span.start), (qe, span.end)] {
                let p = g.exp(lp);
                let d = g.sub(p, q)?;
                let d2 = g.square(d);
                let s = g.sum(d2);
                total = Some(match total {
                    None => s,
                    Some(t) => g.add(t, s)?,
                });
            }
            Ok(total.unwrap())
        }
    }
}

pub fn pd_loss(
    g: &mut Graph,
    p: &BoundParams,
    ex: &Example,
    distance: DistanceKind,
    joint_squared_error: bool,
) -> Result<NodeId, ObjectiveError> {
    let z = coarse_label_of(ex)?;
    let span = SpanNodes::forward(g, p, ex)?;
    pd_from_span(g, &span, z, distance, joint_squared_error)
}

/// Settings shared by every call to [`combined_loss`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub objective: ObjectiveKind,
    pub alpha: f64,
    pub max_span_len: usize,
    pub joint_squared_error: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct CombinedLoss {
    pub total: NodeId,
    /// Mean fine term.
    pub fine: f64,
    /// Mean coarse term before weighting; 0 when the term is not computed.
    pub coarse: f64,
    /// Coarse examples dropped because their projection was degenerate.
    pub skipped: usize,
}

fn mean(g: &mut Graph, terms: &[NodeId]) -> Result<NodeId, ObjectiveError> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f64))
}

fn coarse_term(
    g: &mut Graph,
    p: &BoundParams,
    ex: &Example,
    s: &LossSettings,
) -> Result<NodeId, ObjectiveError> {
    match s.objective {
        ObjectiveKind::Supervised => unreachable!("supervised has no coarse term"),
        ObjectiveKind::Mtl => coarse_nll(g, p, ex),
        ObjectiveKind::Mml => mml_loss(g, p, ex, s.max_span_len),
        ObjectiveKind::Pd(d) => pd_loss(g, p, ex, d, s.joint_squared_error),
    }
}

/// Mean fine NLL plus `alpha` times the mean coarse term. The coarse term
/// is skipped entirely for the supervised objective and for `alpha == 0`,
/// so those cases build exactly the supervised graph.
pub fn combined_loss(
    g: &mut Graph,
    p: &BoundParams,
    fine_batch: &[Example],
    coarse_batch: &[Example],
    s: &LossSettings,
) -> Result<CombinedLoss, ObjectiveError> {
    if fine_batch.is_empty() {
        return Err(ObjectiveError::EmptyFineBatch);
    }
    let fine_terms = fine_batch
        .iter()
        .map(|ex| supervised_loss(g, p, ex))
        .collect::<Result<Vec<_>, _>>()?;
    let fine = mean(g, &fine_terms)?;
    let fine_value = g.value(fine).item();
    if !s.objective.uses_coarse() || s.alpha == 0.0 || coarse_batch.is_empty() {
        return Ok(CombinedLoss {
            total: fine,
            fine: fine_value,
            coarse: 0.0,
            skipped: 0,
        });
    }
    let mut terms = Vec::with_capacity(coarse_batch.len());
    let mut skipped = 0;
    for ex in coarse_batch {
        match coarse_term(g, p, ex, s) {
            Ok(t) => terms.push(t),
            Err(ObjectiveError::DegenerateProjection { paragraph, factor }) => {
                log::debug!("skipping {}: degenerate {factor} projection onto paragraph {paragraph}", ex.id);
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if terms.is_empty() {
        return Ok(CombinedLoss {
            total: fine,
            fine: fine_value,
            coarse: 0.0,
            skipped,
        });
    }
    let coarse = mean(g, &terms)?;
    let coarse_value = g.value(coarse).item();
    let weighted = g.scale(coarse, s.alpha);
    Ok(CombinedLoss {
        total: g.add(fine, weighted)?,
        fine: fine_value,
        coarse: coarse_value,
        skipped,
    })
}
