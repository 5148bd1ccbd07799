//! `mixqa`: generate corpora, train, run the full comparison, analyze
//! checkpoints and re-render reports.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 usage or configuration
//! error, 3 numerical failure during training.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};
use mixqa::data::{self, DatasetBundle};
use mixqa::eval::{
    analyze_predictive, evaluate_split, render_analysis_table, render_results_table, render_summary_json,
    MetricsReport, SeedMetrics,
};
use mixqa::experiment::run_experiment;
use mixqa::model::{load_checkpoint, save_checkpoint, ModelError};
use mixqa::objectives::ObjectiveKind;
use mixqa::training::{train, TrainError};
use serde::Deserialize;

use config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "mixqa",
    version,
    about = "Answer-span selection from mixed span- and paragraph-level supervision",
    after_help = "Settings are resolved as: command-line flag, then config file, then built-in default.\n\
                  The output root falls back to $MIXQA_OUT, then ./runs.\n\
                  Every command writes the fully resolved config to <out>/config.toml."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file with [data], [train], [experiment] and [paths] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides paths.output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and write its four splits.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (overrides paths.data_dir).
        #[arg(long)]
        data: Option<PathBuf>,
        /// supervised, mtl, mml, pd-xent or pd-err2.
        #[arg(long)]
        objective: Option<ObjectiveKind>,
        /// Weight of the coarse term.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train every objective over the seed list and alpha grid, plus the
    /// baseline and ceiling, and write the result tables.
    Experiment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Cells trained concurrently (overrides experiment.jobs).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Predictive-distribution analysis of saved checkpoints.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint file; repeat to analyze several models (overrides
        /// paths.checkpoints).
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// Re-render the text tables from an experiment's summary.json.
    Report {
        #[command(flatten)]
        common: Common,
        /// Experiment output directory containing summary.json (overrides
        /// paths.input_dir).
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Numerical(String),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config { .. } => Failure::Usage(e.to_string()),
            e if e.is_numerical() => Failure::Numerical(e.to_string()),
            e => Failure::Other(e.into()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { common } => gen_data(&common),
        Command::Train {
            common,
            data,
            objective,
            alpha,
            seed,
        } => train_cmd(&common, data.as_deref(), objective, alpha, seed),
        Command::Experiment { common, data, jobs } => experiment(&common, data.as_deref(), jobs),
        Command::Analyze {
            common,
            data,
            checkpoints,
        } => analyze(&common, data.as_deref(), &checkpoints),
        Command::Report { common, input } => report(&common, input.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            log::error!("{msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(msg)) => {
            log::error!("{msg}");
            ExitCode::from(3)
        }
        Err(Failure::Other(e)) => {
            log::error!("{e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::load(common.config.as_deref()).map_err(Failure::Usage)
}

fn write(dir: &Path, name: &str, contents: &str) -> anyhow::Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn prepare_out(dir: &Path, resolved: &ExperimentConfig) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write(dir, "config.toml", &resolved.to_toml())
}

fn load_bundle(dir: &Path) -> Result<DatasetBundle, Failure> {
    if !dir.is_dir() {
        return Err(Failure::Usage(format!(
            "dataset directory {} does not exist (run gen-data first)",
            dir.display()
        )));
    }
    data::load(dir).map_err(|e| Failure::Usage(e.to_string()))
}

fn gen_data(common: &Common) -> Outcome {
    let mut cfg = load_config(common)?;
    cfg.data.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let out = cfg.output_root(common.out.as_deref());
    cfg.paths.output_dir = Some(out.clone());
    cfg.paths.data_dir = Some(out.clone());
    let bundle = data::generate(&cfg.data).map_err(|e| Failure::Usage(e.to_string()))?;
    prepare_out(&out, &cfg)?;
    data::save(&bundle, &out).context("saving dataset")?;
    let reloaded = data::load(&out).context("re-reading dataset")?;
    reloaded.validate().context("written dataset fails validation")?;
    let manifest = serde_json::json!({
        "gen_config": cfg.data,
        "seed": cfg.data.seed,
        "counts": {
            "fine_train": bundle.fine_train.len(),
            "coarse_train": bundle.coarse_train.len(),
            "dev": bundle.dev_fine.len(),
            "test": bundle.test_fine.len(),
        },
    });
    write(&out, "manifest.json", &format!("{}\n", serde_json::to_string_pretty(&manifest).unwrap()))?;
    log::info!(
        "wrote {} fine, {} coarse, {} dev, {} test examples to {}",
        bundle.fine_train.len(),
        bundle.coarse_train.len(),
        bundle.dev_fine.len(),
        bundle.test_fine.len(),
        out.display()
    );
    Ok(())
}

fn train_cmd(
    common: &Common,
    data_flag: Option<&Path>,
    objective: Option<ObjectiveKind>,
    alpha: Option<f64>,
    seed: Option<u64>,
) -> Outcome {
    let mut cfg = load_config(common)?;
    if let Some(o) = objective {
        cfg.train.objective = o;
    }
    if let Some(a) = alpha {
        cfg.train.alpha = a;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.train.validate()?;
    let out = cfg.output_root(common.out.as_deref());
    let data_dir = cfg.data_dir(data_flag, &out);
    let bundle = load_bundle(&data_dir)?;
    cfg.data = bundle.gen_config.clone();
    cfg.paths.output_dir = Some(out.clone());
    cfg.paths.data_dir = Some(data_dir);
    prepare_out(&out, &cfg)?;

    let mut result = train(&cfg.train, &bundle)?;
    for line in result.record.history_text().lines() {
        log::info!("{line}");
    }
    save_checkpoint(&result.params, &out.join("model.ckpt")).context("saving checkpoint")?;
    result.record.checkpoint = Some("model.ckpt".into());
    write(&out, "history.txt", &result.record.history_text())?;
    write(
        &out,
        "run.json",
        &format!("{}\n", serde_json::to_string_pretty(&result.record).unwrap()),
    )?;
    log::info!(
        "best dev F1 {:.4} at step {} ({} steps, {:.1}s)",
        result.record.best_dev_f1,
        result.record.best_step,
        result.record.steps_run,
        result.record.wall_clock_secs
    );
    Ok(())
}

fn experiment(common: &Common, data_flag: Option<&Path>, jobs: Option<usize>) -> Outcome {
    let mut cfg = load_config(common)?;
    if let Some(j) = jobs {
        cfg.experiment.jobs = j;
    }
    cfg.experiment.validate()?;
    cfg.train.validate()?;
    let out = cfg.output_root(common.out.as_deref());
    let data_dir = cfg.data_dir(data_flag, &out);
    let bundle = load_bundle(&data_dir)?;
    cfg.data = bundle.gen_config.clone();
    cfg.paths.output_dir = Some(out.clone());
    cfg.paths.data_dir = Some(data_dir);
    prepare_out(&out, &cfg)?;

    let result = run_experiment(&cfg.experiment, &cfg.train, &bundle)?;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).context("creating checkpoint directory")?;
    for (model, runs) in &result.selected_params {
        for (seed, params) in runs {
            save_checkpoint(params, &ckpt_dir.join(format!("{model}-seed{seed}.ckpt"))).context("saving checkpoint")?;
        }
    }
    write(&out, "results.txt", &render_results_table(&result.reports))?;
    write(&out, "analysis.txt", &render_analysis_table(&result.reports))?;
    write(&out, "summary.json", &render_summary_json(&result.reports))?;
    let cells: String = result
        .cells
        .iter()
        .map(|c| format!("{}\n", serde_json::to_string(c).unwrap()))
        .collect();
    write(&out, "cells.jsonl", &cells)?;
    write(
        &out,
        "failures.json",
        &format!("{}\n", serde_json::to_string_pretty(&result.failures).unwrap()),
    )?;
    print!("{}", render_results_table(&result.reports));
    if !result.failures.is_empty() {
        return Err(Failure::Other(anyhow::anyhow!(
            "{} cells failed; see {}",
            result.failures.len(),
            out.join("failures.json").display()
        )));
    }
    Ok(())
}

fn analyze(common: &Common, data_flag: Option<&Path>, checkpoints: &[PathBuf]) -> Outcome {
    let mut cfg = load_config(common)?;
    let out = cfg.output_root(common.out.as_deref());
    let data_dir = cfg.data_dir(data_flag, &out);
    let bundle = load_bundle(&data_dir)?;
    cfg.data = bundle.gen_config.clone();
    cfg.paths.output_dir = Some(out.clone());
    cfg.paths.data_dir = Some(data_dir);
    if !checkpoints.is_empty() {
        cfg.paths.checkpoints = checkpoints.to_vec();
    }
    if cfg.paths.checkpoints.is_empty() {
        return Err(Failure::Usage("no checkpoints given (--checkpoint or paths.checkpoints)".into()));
    }
    let max_span_len = cfg.train.max_span_len;

    let mut reports = Vec::new();
    for path in &cfg.paths.checkpoints {
        let params = load_checkpoint(path).map_err(|e| match e {
            ModelError::Io(_) => Failure::Other(anyhow::anyhow!("{}: {e}", path.display())),
            e => Failure::Usage(e.to_string()),
        })?;
        if params.config().vocab_size != bundle.gen_config.vocab_size {
            return Err(Failure::Usage(format!(
                "{}: checkpoint vocabulary {} does not match dataset vocabulary {}",
                path.display(),
                params.config().vocab_size,
                bundle.gen_config.vocab_size
            )));
        }
        let test = evaluate_split(&params, &bundle.test_fine, max_span_len).context("evaluating test split")?;
        let a = analyze_predictive(&params, &bundle.coarse_train, max_span_len).context("analyzing coarse split")?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let metrics = SeedMetrics {
            seed: 0,
            fine_f1: test.fine_f1,
            passage_f1: test.passage_f1,
            passage_mrr: a.passage_mrr,
            entropy: a.entropy,
            xent_gold: a.xent_gold,
            err2_gold: a.err2_gold,
        };
        reports.push(MetricsReport::new("checkpoint", &name, None, vec![metrics], a.n_examples));
    }
    prepare_out(&out, &cfg)?;
    write(&out, "analysis.txt", &render_analysis_table(&reports))?;
    write(&out, "analysis.json", &render_summary_json(&reports))?;
    print!("{}", render_analysis_table(&reports));
    Ok(())
}

#[derive(Deserialize)]
struct SummaryFile {
    reports: Vec<MetricsReport>,
}

fn report(common: &Common, input: Option<&Path>) -> Outcome {
    let mut cfg = load_config(common)?;
    let out = cfg.output_root(common.out.as_deref());
    cfg.paths.output_dir = Some(out.clone());
    if let Some(i) = input {
        cfg.paths.input_dir = Some(i.to_path_buf());
    }
    let input = cfg
        .paths
        .input_dir
        .clone()
        .ok_or_else(|| Failure::Usage("no input directory given (--input or paths.input_dir)".into()))?;
    let path = input.join("summary.json");
    let text = fs::read_to_string(&path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let summary: SummaryFile =
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    if summary.reports.is_empty() {
        return Err(Failure::Usage(format!("{}: no reports", path.display())));
    }
    prepare_out(&out, &cfg)?;
    write(&out, "results.txt", &render_results_table(&summary.reports))?;
    write(&out, "analysis.txt", &render_analysis_table(&summary.reports))?;
    print!("{}", render_results_table(&summary.reports));
    Ok(())
}
