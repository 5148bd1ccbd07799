//! The full comparison: every objective across an α grid and a seed list,
//! plus the fine-only baseline and the ceiling model, with α chosen per
//! objective by mean dev F1 and test metrics reported for the chosen α.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DatasetBundle;
use crate::eval::{analyze_predictive, ceiling_examples, evaluate_split, gain, MetricsReport, Metric, SeedMetrics};
use crate::model::ModelParams;
use crate::objectives::{ObjectiveKind, DEFAULT_ALPHA_GRID};
use crate::training::{select_alpha, train_on, RunRecord, TrainConfig, TrainError};

/// Name of the model trained with the coarse split's spans revealed.
pub const CEILING: &str = "ceiling";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentPlan {
    pub condition: String,
    pub seeds: Vec<u64>,
    pub alpha_grid: Vec<f64>,
    /// Objectives that use the coarse split. The supervised baseline and the
    /// ceiling are always trained.
    pub objectives: Vec<ObjectiveKind>,
    pub jobs: usize,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            condition: "fine+coarse".into(),
            seeds: vec![1, 2, 3, 4, 5],
            alpha_grid: DEFAULT_ALPHA_GRID.to_vec(),
            objectives: ObjectiveKind::ALL
                .into_iter()
                .filter(|k| k.uses_coarse())
                .collect(),
            jobs: 1,
        }
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |key, reason: &str| {
            Err(TrainError::Config {
                key,
                reason: reason.into(),
            })
        };
        if self.seeds.is_empty() {
            return bad("seeds", "need at least one seed");
        }
        if self.alpha_grid.is_empty() {
            return bad("alpha_grid", "need at least one value");
        }
        if self.alpha_grid.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return bad("alpha_grid", "values must be finite and non-negative");
        }
        if self.jobs == 0 {
            return bad("jobs", "must be at least 1");
        }
        Ok(())
    }
}

/// Which model a cell trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Objective(ObjectiveKind),
    Ceiling,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Objective(k) => k.name(),
            ModelKind::Ceiling => CEILING,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub model: ModelKind,
    pub alpha: Option<f64>,
    pub seed: u64,
}

/// Every cell of a plan, in a fixed order: supervised, ceiling, then each
/// objective by α, each by seed.
pub fn cells(plan: &ExperimentPlan) -> Vec<Cell> {
    let mut out = Vec::new();
    for model in [ModelKind::Objective(ObjectiveKind::Supervised), ModelKind::Ceiling] {
        out.extend(plan.seeds.iter().map(|&seed| Cell { model, alpha: None, seed }));
    }
    for &k in plan.objectives.iter().filter(|k| k.uses_coarse()) {
        for &alpha in &plan.alpha_grid {
            out.extend(plan.seeds.iter().map(|&seed| Cell {
                model: ModelKind::Objective(k),
                alpha: Some(alpha),
                seed,
            }));
        }
    }
    out
}

pub struct CellOutcome {
    pub cell: Cell,
    pub record: RunRecord,
    pub metrics: SeedMetrics,
    pub params: ModelParams,
}

/// Trains one cell and scores it: span metrics on the test split, the
/// distribution analysis on the coarse training split.
pub fn run_cell(template: &TrainConfig, bundle: &DatasetBundle, cell: Cell) -> Result<CellOutcome, String> {
    let vocab = bundle.gen_config.vocab_size;
    let mut config = TrainConfig {
        seed: cell.seed,
        ..template.clone()
    };
    let out = match cell.model {
        ModelKind::Ceiling => {
            config.objective = ObjectiveKind::Supervised;
            let mut fine = bundle.fine_train.clone();
            fine.extend(ceiling_examples(&bundle.coarse_train).map_err(|e| e.to_string())?);
            train_on(&config, vocab, &fine, &[], &bundle.dev_fine)
        }
        ModelKind::Objective(k) => {
            config.objective = k;
            if let Some(a) = cell.alpha {
                config.alpha = a;
            }
            train_on(&config, vocab, &bundle.fine_train, &bundle.coarse_train, &bundle.dev_fine)
        }
    }
    .map_err(|e| e.to_string())?;
    let test = evaluate_split(&out.params, &bundle.test_fine, config.max_span_len).map_err(|e| e.to_string())?;
    let analysis =
        analyze_predictive(&out.params, &bundle.coarse_train, config.max_span_len).map_err(|e| e.to_string())?;
    log::info!(
        "{} alpha={} seed={} dev_f1={:.4} test_f1={:.4} steps={}",
        cell.model.name(),
        cell.alpha.map_or_else(|| "-".into(), |a| a.to_string()),
        cell.seed,
        out.record.best_dev_f1,
        test.fine_f1,
        out.record.steps_run
    );
    Ok(CellOutcome {
        cell,
        metrics: SeedMetrics {
            seed: cell.seed,
            fine_f1: test.fine_f1,
            passage_f1: test.passage_f1,
            passage_mrr: analysis.passage_mrr,
            entropy: analysis.entropy,
            xent_gold: analysis.xent_gold,
            err2_gold: analysis.err2_gold,
        },
        record: out.record,
        params: out.params,
    })
}

/// One line per trained cell in the machine-readable results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub model: String,
    pub alpha: Option<f64>,
    pub seed: u64,
    pub best_dev_f1: f64,
    pub best_step: usize,
    pub steps_run: usize,
    pub skipped_coarse: usize,
    pub test_fine_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub model: String,
    pub alpha: Option<f64>,
    pub seed: u64,
    pub error: String,
}

pub struct ExperimentResult {
    /// Supervised, each coarse-using objective at its selected α, ceiling.
    pub reports: Vec<MetricsReport>,
    pub cells: Vec<CellSummary>,
    pub failures: Vec<CellFailure>,
    /// Best-dev parameters of each reported model, per seed.
    pub selected_params: BTreeMap<String, Vec<(u64, ModelParams)>>,
}

/// Runs cells on up to `jobs` threads. Results come back in cell order, so
/// the outcome is independent of scheduling.
pub fn run_cells(
    template: &TrainConfig,
    bundle: &DatasetBundle,
    cells: &[Cell],
    jobs: usize,
) -> Vec<Result<CellOutcome, String>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| cells.par_iter().map(|&c| run_cell(template, bundle, c)).collect())
}

pub fn run_experiment(
    plan: &ExperimentPlan,
    template: &TrainConfig,
    bundle: &DatasetBundle,
) -> Result<ExperimentResult, TrainError> {
    plan.validate()?;
    template.validate()?;
    let all = cells(plan);
    let outcomes = run_cells(template, bundle, &all, plan.jobs);
    Ok(assemble(plan, bundle, all, outcomes))
}

fn assemble(
    plan: &ExperimentPlan,
    bundle: &DatasetBundle,
    all: Vec<Cell>,
    outcomes: Vec<Result<CellOutcome, String>>,
) -> ExperimentResult {
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (cell, res) in all.into_iter().zip(outcomes) {
        match res {
            Ok(o) => ok.push(o),
            Err(error) => {
                log::error!("{} alpha={:?} seed={} failed: {error}", cell.model.name(), cell.alpha, cell.seed);
                failures.push(CellFailure {
                    model: cell.model.name().into(),
                    alpha: cell.alpha,
                    seed: cell.seed,
                    error,
                });
            }
        }
    }
    let cells: Vec<CellSummary> = ok
        .iter()
        .map(|o| CellSummary {
            model: o.cell.model.name().into(),
            alpha: o.cell.alpha,
            seed: o.cell.seed,
            best_dev_f1: o.record.best_dev_f1,
            best_step: o.record.best_step,
            steps_run: o.record.steps_run,
            skipped_coarse: o.record.skipped_coarse,
            test_fine_f1: o.metrics.fine_f1,
        })
        .collect();

    let mut models = vec![ModelKind::Objective(ObjectiveKind::Supervised)];
    models.extend(
        plan.objectives
            .iter()
            .filter(|k| k.uses_coarse())
            .map(|&k| ModelKind::Objective(k)),
    );
    models.push(ModelKind::Ceiling);

    let n_test = bundle.test_fine.len();
    let mut reports = Vec::new();
    let mut selected_params = BTreeMap::new();
    let mut taken: Vec<Option<CellOutcome>> = ok.into_iter().map(Some).collect();
    for model in models {
        let alpha = if matches!(model, ModelKind::Objective(k) if k.uses_coarse()) {
            let candidates: Vec<(f64, f64)> = plan
                .alpha_grid
                .iter()
                .filter_map(|&a| {
                    let devs: Vec<f64> = taken
                        .iter()
                        .flatten()
                        .filter(|o| o.cell.model == model && o.cell.alpha == Some(a))
                        .map(|o| o.record.best_dev_f1)
                        .collect();
                    (!devs.is_empty()).then(|| (a, devs.iter().sum::<f64>() / devs.len() as f64))
                })
                .collect();
            match select_alpha(&candidates) {
                Some(i) => Some(candidates[i].0),
                None => continue,
            }
        } else {
            None
        };
        let mut per_seed = Vec::new();
        let mut params = Vec::new();
        for slot in taken.iter_mut() {
            if slot
                .as_ref()
                .is_some_and(|o| o.cell.model == model && o.cell.alpha == alpha)
            {
                let o = slot.take().unwrap();
                per_seed.push(o.metrics);
                params.push((o.cell.seed, o.params));
            }
        }
        if per_seed.is_empty() {
            continue;
        }
        selected_params.insert(model.name().to_string(), params);
        reports.push(MetricsReport::new(&plan.condition, model.name(), alpha, per_seed, n_test));
    }

    let mean_f1 = |name: &str| {
        reports
            .iter()
            .find(|r| r.model == name)
            .map(|r| r.metric(Metric::FineF1).mean)
    };
    if let (Some(base), Some(ceil)) = (mean_f1(ObjectiveKind::Supervised.name()), mean_f1(CEILING)) {
        for r in reports.iter_mut() {
            r.gain = gain(r.metric(Metric::FineF1).mean, base, ceil).ok();
        }
    }
    ExperimentResult {
        reports,
        cells,
        failures,
        selected_params,
    }
}
