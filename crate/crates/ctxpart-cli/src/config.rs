//! The flat JSON run configuration. Every key is optional (defaults below);
//! unknown keys are rejected so typo'd hyperparameters fail loudly instead
//! of silently training the wrong model.

use ctxpart::corpus::{self, Example, TaskId};
use ctxpart::trainer::{Optimizer, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    // model and optimization
    pub dim: usize,
    pub hidden: usize,
    pub segments: usize,
    pub seq_max: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: u64,
    pub recalib_period: u64,
    pub hysteresis_margin: f64,
    pub lambda_balance: f64,
    pub lambda_entropy: f64,
    pub seed: u64,
    /// "adam" or "sgd".
    pub optimizer: String,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub topk_routing: Option<usize>,
    pub grad_clip: Option<f64>,
    pub freeze_gate: bool,
    pub static_map: bool,
    pub min_units_per_segment: usize,
    // corpus
    pub tasks: Vec<String>,
    pub examples_per_task: usize,
    pub min_body_len: usize,
    pub max_body_len: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        RunConfigFile {
            dim: 32,
            hidden: 64,
            segments: 4,
            seq_max: 80,
            batch_size: 10,
            learning_rate: 1e-3,
            steps: 1000,
            recalib_period: 100,
            hysteresis_margin: 0.05,
            lambda_balance: 0.01,
            lambda_entropy: 0.0,
            seed: 0,
            optimizer: "adam".to_string(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            topk_routing: None,
            grad_clip: None,
            freeze_gate: false,
            static_map: false,
            min_units_per_segment: 1,
            tasks: TaskId::ALL.iter().map(|t| t.name().to_string()).collect(),
            examples_per_task: 200,
            min_body_len: 2,
            max_body_len: 8,
            train_fraction: 0.7,
            val_fraction: 0.15,
            test_fraction: 0.15,
        }
    }
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<RunConfigFile, CliError> {
        serde_json::from_str(text)
            .map_err(|e| CliError::usage(format!("invalid config: {e}")))
    }

    pub fn task_ids(&self) -> Result<Vec<TaskId>, CliError> {
        if self.tasks.is_empty() {
            return Err(CliError::usage("config field `tasks` must not be empty"));
        }
        self.tasks
            .iter()
            .map(|name| {
                TaskId::ALL
                    .iter()
                    .copied()
                    .find(|t| t.name() == name)
                    .ok_or_else(|| {
                        CliError::usage(format!(
                            "unknown task {name:?} in config field `tasks`; known tasks: {}",
                            TaskId::ALL.map(|t| t.name()).join(", ")
                        ))
                    })
            })
            .collect()
    }

    pub fn to_train_config(&self) -> Result<TrainConfig, CliError> {
        let optimizer = match self.optimizer.as_str() {
            "sgd" => Optimizer::Sgd,
            "adam" => Optimizer::Adam {
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
            other => {
                return Err(CliError::usage(format!(
                    "config field `optimizer` must be \"adam\" or \"sgd\", got {other:?}"
                )))
            }
        };
        let config = TrainConfig {
            dim: self.dim,
            hidden: self.hidden,
            segments: self.segments,
            seq_max: self.seq_max,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            steps: self.steps,
            recalib_period: self.recalib_period,
            hysteresis_margin: self.hysteresis_margin,
            lambda_balance: self.lambda_balance,
            lambda_entropy: self.lambda_entropy,
            seed: self.seed,
            optimizer,
            topk_routing: self.topk_routing,
            grad_clip: self.grad_clip,
            freeze_gate: self.freeze_gate,
            static_map: self.static_map,
            min_units_per_segment: self.min_units_per_segment,
            warmup: None,
        };
        config
            .validate()
            .map_err(|e| CliError::usage(e.to_string()))?;
        Ok(config)
    }

    /// Generate and split the corpus this config describes. Deterministic
    /// in the config alone, so `eval` can rebuild the exact training-time
    /// splits from `config.json`.
    pub fn build_corpus(
        &self,
    ) -> Result<(Vec<Example>, Vec<Example>, Vec<Example>), CliError> {
        let tasks = self.task_ids()?;
        let examples = corpus::generate_mixture(
            &tasks,
            self.seed,
            self.examples_per_task,
            (self.min_body_len, self.max_body_len),
        )
        .map_err(|e| CliError::usage(format!("corpus generation failed: {e}")))?;
        corpus::split(
            &examples,
            (self.train_fraction, self.val_fraction, self.test_fraction),
            self.seed,
        )
        .map_err(|e| CliError::usage(format!("corpus split failed: {e}")))
    }
}
