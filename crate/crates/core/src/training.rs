//! Interleaved fine/coarse training loop with Adadelta, negative-paragraph
//! subsampling, dev-set early stopping and α sweeps.
//!
//! Randomness is split into independent ChaCha streams derived from the
//! run seed: parameter init, fine batch order, coarse batch order, fine
//! subsampling and coarse subsampling. Changing how the coarse split is
//! used therefore never perturbs the fine-side schedule.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DatasetBundle, Example};
use crate::diff::{Array, Graph};
use crate::eval::{evaluate_fine, EvalError};
use crate::model::{ModelConfig, ModelParams, ParamGroup};
use crate::objectives::{combined_loss, LossSettings, ObjectiveError, ObjectiveKind};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {key}: {reason}")]
    Config { key: &'static str, reason: String },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("non-finite gradient in {group}")]
    NonFiniteGradient { group: &'static str },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
}

impl TrainError {
    /// True for failures caused by numerics rather than inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, TrainError::NonFiniteGradient { .. } | TrainError::NonFiniteLoss { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub rho: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { rho: 0.95, epsilon: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub objective: ObjectiveKind,
    pub alpha: f64,
    pub fine_batch_size: usize,
    pub coarse_batch_size: usize,
    pub paragraphs_sampled_per_example: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub max_span_len: usize,
    pub joint_squared_error: bool,
    pub d_emb: usize,
    pub d_hid: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveKind::Supervised,
            alpha: 1.0,
            fine_batch_size: 16,
            coarse_batch_size: 16,
            paragraphs_sampled_per_example: 8,
            max_steps: 2000,
            eval_every: 100,
            patience: 5,
            max_span_len: crate::data::DEFAULT_MAX_SPAN_LEN,
            joint_squared_error: false,
            d_emb: 32,
            d_hid: 64,
            optimizer: OptimizerConfig::default(),
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("fine_batch_size", self.fine_batch_size),
            ("coarse_batch_size", self.coarse_batch_size),
            ("paragraphs_sampled_per_example", self.paragraphs_sampled_per_example),
            ("max_steps", self.max_steps),
            ("eval_every", self.eval_every),
            ("patience", self.patience),
            ("max_span_len", self.max_span_len),
            ("d_emb", self.d_emb),
            ("d_hid", self.d_hid),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(TrainError::Config {
                    key,
                    reason: "must be at least 1".into(),
                });
            }
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(TrainError::Config {
                key: "alpha",
                reason: format!("{} is not a finite non-negative number", self.alpha),
            });
        }
        if !(self.optimizer.rho > 0.0 && self.optimizer.rho < 1.0) {
            return Err(TrainError::Config {
                key: "optimizer.rho",
                reason: "must lie in (0, 1)".into(),
            });
        }
        if !(self.optimizer.epsilon > 0.0 && self.optimizer.epsilon.is_finite()) {
            return Err(TrainError::Config {
                key: "optimizer.epsilon",
                reason: "must be positive".into(),
            });
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_emb: self.d_emb,
            d_hid: self.d_hid,
        }
    }

    fn loss_settings(&self) -> LossSettings {
        LossSettings {
            objective: self.objective,
            alpha: self.alpha,
            max_span_len: self.max_span_len,
            joint_squared_error: self.joint_squared_error,
        }
    }

    fn uses_coarse(&self) -> bool {
        self.objective.uses_coarse() && self.alpha != 0.0
    }
}

/// Which concern a random stream serves.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Init = 0,
    FineOrder = 1,
    CoarseOrder = 2,
    FineSubsample = 3,
    CoarseSubsample = 4,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Running averages of squared gradients and squared updates.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub sq_grad: Vec<Array>,
    pub sq_delta: Vec<Array>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Array> = params.arrays().iter().map(|a| Array::zeros(a.shape())).collect();
        Self {
            sq_grad: zeros.clone(),
            sq_delta: zeros,
        }
    }
}

fn check_finite(grads: &[Array]) -> Result<(), TrainError> {
    for (g, group) in grads.iter().zip(ParamGroup::ALL) {
        if !g.all_finite() {
            return Err(TrainError::NonFiniteGradient { group: group.name() });
        }
    }
    Ok(())
}

/// One Adadelta update. Nothing changes if any gradient is non-finite.
pub fn adadelta_step(
    params: &mut ModelParams,
    grads: &[Array],
    state: &mut OptimizerState,
    rho: f64,
    epsilon: f64,
) -> Result<(), TrainError> {
    check_finite(grads)?;
    for (i, g) in grads.iter().enumerate() {
        let p = params.arrays_mut()[i].values_mut();
        let eg = state.sq_grad[i].values_mut();
        let ed = state.sq_delta[i].values_mut();
        for (j, &gj) in g.values().iter().enumerate() {
            eg[j] = rho * eg[j] + (1.0 - rho) * gj * gj;
            let dx = -((ed[j] + epsilon).sqrt() / (eg[j] + epsilon).sqrt()) * gj;
            ed[j] = rho * ed[j] + (1.0 - rho) * dx * dx;
            p[j] += dx;
        }
    }
    Ok(())
}

/// Plain gradient descent, used to check that each objective decreases
/// under a small enough step.
pub fn gradient_descent_step(params: &mut ModelParams, grads: &[Array], lr: f64) -> Result<(), TrainError> {
    check_finite(grads)?;
    for (a, g) in params.arrays_mut().iter_mut().zip(grads) {
        for (p, gv) in a.values_mut().iter_mut().zip(g.values()) {
            *p -= lr * gv;
        }
    }
    Ok(())
}

/// Keeps the labeled paragraph plus `k - 1` others drawn without
/// replacement, in their original order. Documents with at most `k`
/// paragraphs are returned unchanged.
pub fn subsample_paragraphs(ex: &Example, k: usize, rng: &mut ChaCha8Rng) -> Example {
    assert!(k >= 1, "k must be at least 1");
    let m = ex.document.num_paragraphs();
    if m <= k {
        return ex.clone();
    }
    let gold = ex.label.paragraph();
    let others: Vec<usize> = (0..m).filter(|&p| p != gold).collect();
    let mut keep: Vec<usize> = others.choose_multiple(rng, k - 1).copied().collect();
    keep.push(gold);
    keep.sort_unstable();
    ex.with_paragraphs(&keep)
}

/// Endless shuffled passes over a split.
struct BatchStream<'a> {
    examples: &'a [Example],
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl<'a> BatchStream<'a> {
    fn new(examples: &'a [Example], rng: ChaCha8Rng) -> Self {
        Self {
            examples,
            order: Vec::new(),
            pos: 0,
            rng,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<&'a Example> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order = (0..self.examples.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(&self.examples[self.order[self.pos]]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub dev_f1: f64,
    /// Mean fine term since the previous evaluation.
    pub fine_loss: f64,
    /// Mean unweighted coarse term since the previous evaluation.
    pub coarse_loss: f64,
    pub total_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub history: Vec<EvalPoint>,
    pub best_step: usize,
    pub best_dev_f1: f64,
    pub steps_run: usize,
    pub stopped_early: bool,
    pub skipped_coarse: usize,
    /// File name of the saved best parameters, if written.
    pub checkpoint: Option<String>,
    /// Kept out of serialized records so reruns are byte-identical.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// One line per evaluation.
    pub fn history_text(&self) -> String {
        let mut out = String::new();
        for p in &self.history {
            writeln!(
                out,
                "step={} dev_f1={:.6} fine_loss={:.6} coarse_loss={:.6} total_loss={:.6}",
                p.step, p.dev_f1, p.fine_loss, p.coarse_loss, p.total_loss
            )
            .unwrap();
        }
        out
    }
}

pub struct TrainOutput {
    pub record: RunRecord,
    /// Parameters at the best dev evaluation.
    pub params: ModelParams,
}

/// Training on explicit splits. `coarse` is ignored by the supervised
/// objective and when `alpha == 0`.
pub fn train_on(
    config: &TrainConfig,
    vocab_size: usize,
    fine: &[Example],
    coarse: &[Example],
    dev: &[Example],
) -> Result<TrainOutput, TrainError> {
    config.validate()?;
    if fine.is_empty() {
        return Err(TrainError::Config {
            key: "fine_train",
            reason: "the fine split is empty".into(),
        });
    }
    let uses_coarse = config.uses_coarse() && !coarse.is_empty();
    if config.objective.uses_coarse() && coarse.is_empty() {
        log::warn!("{}: coarse split is empty, training on fine data only", config.objective);
    }
    let started = Instant::now();
    let mut params = ModelParams::init(config.model_config(vocab_size), &mut stream_rng(config.seed, Stream::Init));
    let mut state = OptimizerState::new(&params);
    let mut fine_stream = BatchStream::new(fine, stream_rng(config.seed, Stream::FineOrder));
    let mut coarse_stream = BatchStream::new(coarse, stream_rng(config.seed, Stream::CoarseOrder));
    let mut fine_sub = stream_rng(config.seed, Stream::FineSubsample);
    let mut coarse_sub = stream_rng(config.seed, Stream::CoarseSubsample);
    let settings = config.loss_settings();
    let k = config.paragraphs_sampled_per_example;

    let mut best = (f64::NEG_INFINITY, 0usize, params.clone());
    let mut history = Vec::new();
    let mut since_best = 0;
    let mut skipped = 0;
    let mut window = (0.0, 0.0, 0.0, 0usize);
    let mut steps_run = 0;
    let mut stopped_early = false;

    for step in 1..=config.max_steps {
        let fine_batch: Vec<Example> = fine_stream
            .next_batch(config.fine_batch_size)
            .into_iter()
            .map(|ex| subsample_paragraphs(ex, k, &mut fine_sub))
            .collect();
        let coarse_batch: Vec<Example> = if uses_coarse {
            coarse_stream
                .next_batch(config.coarse_batch_size)
                .into_iter()
                .map(|ex| subsample_paragraphs(ex, k, &mut coarse_sub))
                .collect()
        } else {
            Vec::new()
        };

        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let loss = combined_loss(&mut g, &bound, &fine_batch, &coarse_batch, &settings)?;
        let total = g.value(loss.total).item();
        if !total.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        let mut grads = g.backward(loss.total).map_err(ObjectiveError::from)?;
        let grads = bound.gradients(&mut grads);
        adadelta_step(&mut params, &grads, &mut state, config.optimizer.rho, config.optimizer.epsilon)?;
        skipped += loss.skipped;
        window.0 += loss.fine;
        window.1 += loss.coarse;
        window.2 += total;
        window.3 += 1;
        steps_run = step;

        if step % config.eval_every == 0 || step == config.max_steps {
            let dev_f1 = evaluate_fine(&params, dev, config.max_span_len)?;
            let n = window.3 as f64;
            let point = EvalPoint {
                step,
                dev_f1,
                fine_loss: window.0 / n,
                coarse_loss: window.1 / n,
                total_loss: window.2 / n,
            };
            log::debug!(
                "{} alpha={} seed={} step={} dev_f1={:.4} fine_loss={:.4} coarse_loss={:.4}",
                config.objective,
                config.alpha,
                config.seed,
                step,
                dev_f1,
                point.fine_loss,
                point.coarse_loss
            );
            history.push(point);
            window = (0.0, 0.0, 0.0, 0);
            if dev_f1 > best.0 {
                best = (dev_f1, step, params.clone());
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= config.patience {
                    stopped_early = step < config.max_steps;
                    break;
                }
            }
        }
    }

    let (best_dev_f1, best_step, best_params) = best;
    Ok(TrainOutput {
        record: RunRecord {
            config: config.clone(),
            history,
            best_step,
            best_dev_f1,
            steps_run,
            stopped_early,
            skipped_coarse: skipped,
            checkpoint: None,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
        params: best_params,
    })
}

/// Trains on the bundle's fine and coarse training splits, early-stopping
/// on the dev split.
pub fn train(config: &TrainConfig, bundle: &DatasetBundle) -> Result<TrainOutput, TrainError> {
    if !config.objective.uses_coarse() {
        log::info!("objective supervised: the coarse split is ignored");
    }
    train_on(
        config,
        bundle.gen_config.vocab_size,
        &bundle.fine_train,
        &bundle.coarse_train,
        &bundle.dev_fine,
    )
}

/// Index of the highest dev F1; ties go to the smaller α.
pub fn select_alpha(candidates: &[(f64, f64)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &(alpha, f1)) in candidates.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(b) => {
                let (ba, bf) = candidates[b];
                if f1 > bf || (f1 == bf && alpha < ba) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

pub struct SweepResult {
    pub runs: Vec<RunRecord>,
    pub best: usize,
    pub best_params: ModelParams,
}

/// One run per α in `grid`, keeping the run with the best dev F1.
pub fn sweep(template: &TrainConfig, grid: &[f64], bundle: &DatasetBundle) -> Result<SweepResult, TrainError> {
    if grid.is_empty() {
        return Err(TrainError::Config {
            key: "alpha_grid",
            reason: "the grid is empty".into(),
        });
    }
    let mut runs = Vec::with_capacity(grid.len());
    let mut params = Vec::with_capacity(grid.len());
    for &alpha in grid {
        let out = train(&TrainConfig { alpha, ..template.clone() }, bundle)?;
        runs.push(out.record);
        params.push(out.params);
    }
    let scores: Vec<(f64, f64)> = runs.iter().map(|r| (r.config.alpha, r.best_dev_f1)).collect();
    let best = select_alpha(&scores).expect("nonempty grid");
    Ok(SweepResult {
        best_params: params.swap_remove(best),
        runs,
        best,
    })
}
