//! Command-line entry point: train a run directory, evaluate held-out
//! splits, plot metric curves, and inspect segment evolution.
//!
//! Exit codes are a stable contract: 0 success, 2 usage/config error,
//! 3 training divergence.

mod config;
mod rundir;
mod svg;

use clap::{Parser, Subcommand, ValueEnum};
use ctxpart::corpus::TaskId;
use ctxpart::metrics;
use ctxpart::trainer::{self, TrainError};
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config, or run-directory state — exit 2.
    Usage(String),
    /// Non-finite loss or gradient during training — exit 3.
    Divergence(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> CliError {
        CliError::Usage(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Divergence(m) => f.write_str(m),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "ctxpart",
    about = "Train and analyze context-partitioned sequence models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model into a fresh run directory.
    Train {
        /// Path to the flat JSON run config.
        #[arg(long)]
        config: PathBuf,
        /// Output run directory (must be new or empty).
        #[arg(long)]
        out: PathBuf,
        /// Override the config's seed; recorded in the resolved config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a trained run on a held-out split.
    Eval {
        /// Run directory produced by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum)]
        split: SplitArg,
    },
    /// Render metric curves from metrics.jsonl as step plots.
    Plot {
        #[arg(long)]
        run: PathBuf,
        /// Comma-separated metric names.
        #[arg(long, value_delimiter = ',', required = true)]
        metrics: Vec<String>,
    },
    /// Print a segment report for one recalibration snapshot.
    Inspect {
        #[arg(long)]
        run: PathBuf,
        /// Snapshot step (default: the latest).
        #[arg(long)]
        step: Option<u64>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SplitArg {
    Val,
    Test,
}

impl SplitArg {
    fn name(self) -> &'static str {
        match self {
            SplitArg::Val => "val",
            SplitArg::Test => "test",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, out, seed } => cmd_train(&config, &out, seed),
        Command::Eval { run, split } => cmd_eval(&run, split),
        Command::Plot { run, metrics } => cmd_plot(&run, &metrics),
        Command::Inspect { run, step } => cmd_inspect(&run, step),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Divergence(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}

fn map_train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Diverged { step, .. } => {
            CliError::Divergence(format!("training diverged at step {step}"))
        }
        other => CliError::usage(other.to_string()),
    }
}

fn cmd_train(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let text = std::fs::read_to_string(config_path).map_err(|e| {
        CliError::usage(format!("cannot read config {}: {e}", config_path.display()))
    })?;
    let mut file = config::RunConfigFile::parse(&text)?;
    if let Some(seed) = seed {
        file.seed = seed;
    }
    let train_config = file.to_train_config()?;
    let (train_split, val_split, _test_split) = file.build_corpus()?;

    rundir::prepare_out_dir(out)?;
    rundir::write_config(out, &file)?;

    let record = trainer::train_with_validation(&train_config, &train_split, &val_split)
        .map_err(map_train_error)?;
    let model_config = train_config.model_config();
    rundir::write_run_artifacts(out, &record, &model_config)?;

    if val_split.is_empty() {
        println!("val_examples=0");
        return Ok(());
    }
    let report = metrics::evaluate(
        &model_config,
        &record.final_params,
        &record.final_map,
        &val_split,
        train_config.topk_routing,
        None,
    )
    .map_err(|e| CliError::usage(format!("validation evaluation failed: {e}")))?;
    let si = record
        .snapshots
        .last()
        .and_then(|s| s.specialization_index);
    println!("accuracy={}", report.aggregate.accuracy);
    println!("perplexity={}", report.aggregate.perplexity);
    println!("coherence={}", report.aggregate.coherence);
    println!(
        "active_param_fraction={}",
        report.aggregate.active_param_fraction
    );
    if let Some(si) = si {
        println!("specialization_index={si}");
    }
    Ok(())
}

fn cmd_eval(run: &Path, split: SplitArg) -> Result<(), CliError> {
    let file = rundir::read_config(run)?;
    let (model_config, params) = rundir::read_params(run)?;
    let expected = file.to_train_config()?.model_config();
    if expected != model_config {
        return Err(CliError::usage(format!(
            "run directory {} is inconsistent: params.bin shape differs from config.json",
            run.display()
        )));
    }
    let segmap = rundir::read_final_map(run)?;
    let (_train, val, test) = file.build_corpus()?;
    let examples = match split {
        SplitArg::Val => val,
        SplitArg::Test => test,
    };
    if examples.is_empty() {
        return Err(CliError::usage(format!(
            "split {} has no examples under this config",
            split.name()
        )));
    }
    let mut report = metrics::evaluate(
        &model_config,
        &params,
        &segmap,
        &examples,
        file.topk_routing,
        None,
    )
    .map_err(|e| CliError::usage(format!("evaluation failed: {e}")))?;
    if report.specialization_index.is_none() {
        if let Some(&last) = rundir::snapshot_steps(run)?.last() {
            report.specialization_index =
                rundir::read_snapshot(run, last)?.specialization_index;
        }
    }

    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::usage(format!("cannot encode report: {e}")))?
        + "\n";
    let csv = rundir::eval_csv(&report);
    let (json_path, csv_path) = rundir::eval_paths(run, split.name());
    rundir::write_derived(&json_path, json.as_bytes())?;
    rundir::write_derived(&csv_path, csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

/// Metric names plottable from metrics.jsonl.
const PLOTTABLE: [&str; 7] = [
    "total",
    "task_loss",
    "balance_penalty",
    "entropy_term",
    "grad_norm",
    "accuracy",
    "coherence",
];

fn metric_series(rows: &[rundir::MetricsRow], name: &str) -> Option<Vec<(f64, f64)>> {
    let extract = |f: fn(&rundir::MetricsRow) -> Option<f64>| -> Vec<(f64, f64)> {
        rows.iter()
            .filter_map(|r| f(r).map(|v| (r.step as f64, v)))
            .collect()
    };
    let series = match name {
        "total" => extract(|r| Some(r.total)),
        "task_loss" => extract(|r| Some(r.task_loss)),
        "balance_penalty" => extract(|r| Some(r.balance_penalty)),
        "entropy_term" => extract(|r| Some(r.entropy_term)),
        "grad_norm" => extract(|r| Some(r.grad_norm)),
        "accuracy" => extract(|r| r.val_accuracy),
        "coherence" => extract(|r| r.val_coherence),
        _ => return None,
    };
    Some(series)
}

fn cmd_plot(run: &Path, metrics: &[String]) -> Result<(), CliError> {
    let rows = rundir::read_metrics(run)?;
    if rows.is_empty() {
        return Err(CliError::usage(format!(
            "metrics.jsonl in {} is empty; nothing to plot",
            run.display()
        )));
    }
    for name in metrics {
        let series = metric_series(&rows, name).ok_or_else(|| {
            CliError::usage(format!(
                "unknown metric {name:?}; available metrics: {}",
                PLOTTABLE.join(", ")
            ))
        })?;
        if series.is_empty() {
            return Err(CliError::usage(format!(
                "metric {name:?} has no recorded values in this run"
            )));
        }
        let svg = svg::render_step_plot(
            &format!("{name} over training steps"),
            "step",
            name,
            &series,
        );
        let path = rundir::plot_path(run, name);
        rundir::write_derived(&path, svg.as_bytes())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_inspect(run: &Path, step: Option<u64>) -> Result<(), CliError> {
    let steps = rundir::snapshot_steps(run)?;
    if steps.is_empty() {
        return Err(CliError::usage(format!(
            "no segment-map snapshots recorded in {}",
            run.display()
        )));
    }
    let chosen = step.unwrap_or(*steps.last().expect("nonempty"));
    if !steps.contains(&chosen) {
        let listed: Vec<String> = steps.iter().map(|s| s.to_string()).collect();
        return Err(CliError::usage(format!(
            "no snapshot at step {chosen}; available steps: {}",
            listed.join(", ")
        )));
    }
    let snap = rundir::read_snapshot(run, chosen)?;
    // churn relative to the previous snapshot; the first snapshot counts
    // every unit as newly assigned
    let position = steps.iter().position(|&s| s == chosen).expect("present");
    let churn = if position == 0 {
        1.0
    } else {
        let previous = rundir::read_snapshot(run, steps[position - 1])?;
        let changed = snap
            .owner
            .iter()
            .zip(&previous.owner)
            .filter(|(a, b)| a != b)
            .count();
        changed as f64 / snap.owner.len() as f64
    };

    println!("step {} (epoch {})", snap.step, snap.epoch);
    println!("churn: {churn:.4}");
    println!("dispersion: {:.6}", snap.dispersion);
    match snap.specialization_index {
        Some(si) => println!("specialization_index: {si:.4}"),
        None => println!("specialization_index: n/a"),
    }
    let segments = snap.centroids.len();
    let mut counts = vec![0usize; segments];
    for &s in &snap.owner {
        if s < segments {
            counts[s] += 1;
        }
    }
    for (i, centroid) in snap.centroids.iter().enumerate() {
        println!("segment {i}: units={}", counts[i]);
        let profile: Vec<String> = TaskId::ALL
            .iter()
            .zip(centroid)
            .map(|(t, v)| format!("{}={v:.3}", t.name()))
            .collect();
        println!("  context_profile: {}", profile.join(" "));
        match snap.alpha_mean.get(i) {
            Some(a) => println!("  mean_alpha: {a:.4}"),
            None => println!("  mean_alpha: n/a"),
        }
    }
    Ok(())
}
