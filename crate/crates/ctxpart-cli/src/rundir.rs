//! Run-directory persistence: config.json, append-only metrics.jsonl,
//! segment-map snapshots, binary parameters, evaluation tables, and plots.
//! Every file written here is re-readable by this build, and writes refuse
//! to clobber differing artifacts.

use ctxpart::metrics::EvalReport;
use ctxpart::model::{ModelConfig, ParameterStore, SegmentMap};
use ctxpart::params_io;
use ctxpart::trainer::{RunRecord, SnapshotRecord, StepRecord};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::RunConfigFile;
use crate::CliError;

/// One metrics.jsonl line: the step's loss breakdown flattened next to the
/// step index, routing means, and boundary validation metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub task_loss: f64,
    pub per_segment_loss: Vec<f64>,
    pub balance_penalty: f64,
    pub entropy_term: f64,
    pub total: f64,
    pub lambda_balance: f64,
    pub lambda_entropy: f64,
    pub alpha_mean: Vec<f64>,
    pub grad_norm: f64,
    pub val_accuracy: Option<f64>,
    pub val_coherence: Option<f64>,
}

impl From<&StepRecord> for MetricsRow {
    fn from(s: &StepRecord) -> MetricsRow {
        MetricsRow {
            step: s.step,
            task_loss: s.loss.task_loss,
            per_segment_loss: s.loss.per_segment_loss.clone(),
            balance_penalty: s.loss.balance_penalty,
            entropy_term: s.loss.entropy_term,
            total: s.loss.total,
            lambda_balance: s.loss.lambda_balance,
            lambda_entropy: s.loss.lambda_entropy,
            alpha_mean: s.alpha_mean.clone(),
            grad_norm: s.grad_norm,
            val_accuracy: s.val_accuracy,
            val_coherence: s.val_coherence,
        }
    }
}

/// The final segment ownership, persisted even when no recalibration ever
/// ran (static maps, short runs) so evaluation can always reconstruct the
/// model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMap {
    pub step: u64,
    pub owner: Vec<usize>,
}

fn io_err(context: &str, path: &Path, e: std::io::Error) -> CliError {
    CliError::usage(format!("{context} {}: {e}", path.display()))
}

pub fn config_path(dir: &Path) -> PathBuf {
    dir.join("config.json")
}

pub fn metrics_path(dir: &Path) -> PathBuf {
    dir.join("metrics.jsonl")
}

pub fn params_path(dir: &Path) -> PathBuf {
    dir.join("params.bin")
}

pub fn segmaps_dir(dir: &Path) -> PathBuf {
    dir.join("segmaps")
}

pub fn final_map_path(dir: &Path) -> PathBuf {
    segmaps_dir(dir).join("final.json")
}

pub fn snapshot_path(dir: &Path, step: u64) -> PathBuf {
    segmaps_dir(dir).join(format!("step_{step}.json"))
}

pub fn eval_paths(dir: &Path, split: &str) -> (PathBuf, PathBuf) {
    let d = dir.join("eval");
    (d.join(format!("{split}.json")), d.join(format!("{split}.csv")))
}

pub fn plot_path(dir: &Path, metric: &str) -> PathBuf {
    dir.join("plots").join(format!("{metric}.svg"))
}

/// The out directory must be new or empty.
pub fn prepare_out_dir(dir: &Path) -> Result<(), CliError> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| io_err("cannot read", dir, e))?;
        if entries.next().is_some() {
            return Err(CliError::usage(format!(
                "output directory {} is not empty",
                dir.display()
            )));
        }
    } else {
        fs::create_dir_all(dir).map_err(|e| io_err("cannot create", dir, e))?;
    }
    Ok(())
}

/// Resolved config, written before training starts.
pub fn write_config(dir: &Path, config: &RunConfigFile) -> Result<(), CliError> {
    let path = config_path(dir);
    let text = serde_json::to_string_pretty(config)
        .map_err(|e| CliError::usage(format!("cannot encode config: {e}")))?;
    fs::write(&path, text + "\n").map_err(|e| io_err("cannot write", &path, e))
}

pub fn read_config(dir: &Path) -> Result<RunConfigFile, CliError> {
    let path = config_path(dir);
    let text = fs::read_to_string(&path).map_err(|e| io_err("cannot read", &path, e))?;
    RunConfigFile::parse(&text)
}

/// Write every post-training artifact of a run.
pub fn write_run_artifacts(
    dir: &Path,
    record: &RunRecord,
    model_config: &ModelConfig,
) -> Result<(), CliError> {
    let metrics = metrics_path(dir);
    let mut w = fs::File::create(&metrics).map_err(|e| io_err("cannot create", &metrics, e))?;
    for step in &record.steps {
        let row = MetricsRow::from(step);
        let line = serde_json::to_string(&row)
            .map_err(|e| CliError::usage(format!("cannot encode metrics row: {e}")))?;
        writeln!(w, "{line}").map_err(|e| io_err("cannot write", &metrics, e))?;
    }

    let maps = segmaps_dir(dir);
    fs::create_dir_all(&maps).map_err(|e| io_err("cannot create", &maps, e))?;
    for snap in &record.snapshots {
        let path = snapshot_path(dir, snap.step);
        let text = serde_json::to_string_pretty(snap)
            .map_err(|e| CliError::usage(format!("cannot encode snapshot: {e}")))?;
        fs::write(&path, text + "\n").map_err(|e| io_err("cannot write", &path, e))?;
    }
    let final_map = FinalMap {
        step: record.config.steps,
        owner: record.final_map.owner.clone(),
    };
    let path = final_map_path(dir);
    let text = serde_json::to_string_pretty(&final_map)
        .map_err(|e| CliError::usage(format!("cannot encode final map: {e}")))?;
    fs::write(&path, text + "\n").map_err(|e| io_err("cannot write", &path, e))?;

    let params = params_path(dir);
    let file = fs::File::create(&params).map_err(|e| io_err("cannot create", &params, e))?;
    params_io::save_params(model_config, &record.final_params, file)
        .map_err(|e| CliError::usage(format!("cannot write {}: {e}", params.display())))?;
    Ok(())
}

pub fn read_metrics(dir: &Path) -> Result<Vec<MetricsRow>, CliError> {
    let path = metrics_path(dir);
    let text = fs::read_to_string(&path).map_err(|e| io_err("cannot read", &path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: MetricsRow = serde_json::from_str(line).map_err(|e| {
            CliError::usage(format!("{}:{}: bad metrics line: {e}", path.display(), i + 1))
        })?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_params(dir: &Path) -> Result<(ModelConfig, ParameterStore<f64>), CliError> {
    let path = params_path(dir);
    let file = fs::File::open(&path).map_err(|e| io_err("cannot read", &path, e))?;
    params_io::load_params(std::io::BufReader::new(file))
        .map_err(|e| CliError::usage(format!("cannot load {}: {e}", path.display())))
}

pub fn read_final_map(dir: &Path) -> Result<SegmentMap, CliError> {
    let path = final_map_path(dir);
    let text = fs::read_to_string(&path).map_err(|e| io_err("cannot read", &path, e))?;
    let parsed: FinalMap = serde_json::from_str(&text)
        .map_err(|e| CliError::usage(format!("cannot parse {}: {e}", path.display())))?;
    Ok(SegmentMap {
        owner: parsed.owner,
    })
}

/// Snapshot steps present on disk, ascending.
pub fn snapshot_steps(dir: &Path) -> Result<Vec<u64>, CliError> {
    let maps = segmaps_dir(dir);
    let mut steps = Vec::new();
    if maps.exists() {
        let entries = fs::read_dir(&maps).map_err(|e| io_err("cannot read", &maps, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| io_err("cannot read", &maps, e))?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if let Some(step) = name
                .strip_prefix("step_")
                .and_then(|s| s.strip_suffix(".json"))
                .and_then(|s| s.parse::<u64>().ok())
            {
                steps.push(step);
            }
        }
    }
    steps.sort_unstable();
    Ok(steps)
}

pub fn read_snapshot(dir: &Path, step: u64) -> Result<SnapshotRecord, CliError> {
    let path = snapshot_path(dir, step);
    let text = fs::read_to_string(&path).map_err(|e| io_err("cannot read", &path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::usage(format!("cannot parse {}: {e}", path.display())))
}

/// Write a derived artifact idempotently: creating it is fine, re-writing
/// identical bytes is fine, and anything else refuses rather than clobber.
pub fn write_derived(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err("cannot create", parent, e))?;
    }
    if path.exists() {
        let existing = fs::read(path).map_err(|e| io_err("cannot read", path, e))?;
        if existing == bytes {
            return Ok(());
        }
        return Err(CliError::usage(format!(
            "refusing to overwrite {} with different content",
            path.display()
        )));
    }
    fs::write(path, bytes).map_err(|e| io_err("cannot write", path, e))
}

/// The Table-2-shaped CSV: one row per task plus the aggregate, with the
/// run-level specialization index repeated in its own column.
pub fn eval_csv(report: &EvalReport) -> String {
    let mut out = String::from(
        "task,accuracy_pct,perplexity,coherence,specialization_index,active_param_fraction,example_count\n",
    );
    let si = report
        .specialization_index
        .map(|v| format!("{v:.6}"))
        .unwrap_or_default();
    for row in report.per_task.iter().chain([&report.aggregate]) {
        out.push_str(&format!(
            "{},{:.4},{:.6},{:.6},{},{:.6},{}\n",
            row.task,
            row.accuracy * 100.0,
            row.perplexity,
            row.coherence,
            si,
            row.active_param_fraction,
            row.example_count
        ));
    }
    out
}
