//! The training loop: gradient steps on the total loss, interleaved with
//! periodic segment-boundary recalibration, plus an unpartitioned baseline
//! mode for controlled comparisons.
//!
//! The loop is single-threaded and fully deterministic in (config, corpus):
//! batch sampling, parameter init, and recalibration each draw from
//! separate tagged substreams of the run seed, so enabling or disabling one
//! stage never shifts the randomness of another.

use crate::autodiff::AutodiffError;
use crate::corpus::{Example, NUM_TASKS, VOCAB_SIZE};
use crate::metrics;
use crate::model::{
    forward_batch, init_params, ModelConfig, ModelError, ParameterStore, SegmentMap,
    SequenceInput,
};
use crate::objective::{
    build_batch_objective, LossBreakdown, ObjectiveError, ObjectiveSpec, TargetSpan,
};
use crate::partitioner::{
    recalibrate, AttributionMatrix, PartitionError, RecalibrationPolicy,
};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

/// Substream tags: batch sampling per task, recalibration seeds per step,
/// and the static-map shuffle. Disjoint from the corpus and init tags.
const SAMPLE_STREAM_TAG: u64 = 0x5341_4d50; // "SAMP"
const RECALIB_STREAM_TAG: u64 = 0x5245_434c; // "RECL"
const STATIC_MAP_TAG: u64 = 0x5354_4154; // "STAT"

/// At most this many validation examples are decoded for the per-period
/// accuracy/coherence curves; keeps boundary evaluations cheap relative to
/// the gradient steps they punctuate.
pub const VALIDATION_TRACKING_LIMIT: usize = 50;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("training diverged at step {step}: non-finite loss or gradient")]
    Diverged {
        step: u64,
        last_finite: Option<LossBreakdown>,
    },
    #[error("{got} gradient tensors for {expected} parameter regions")]
    GradientArity { expected: usize, got: usize },
    #[error("gradient shape {got:?} does not match region {region} {expected:?}")]
    GradientShape {
        region: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// True when the underlying failure is a non-finite value surfacing from a
/// tensor op, the tape, or a loss component.
fn is_non_finite_failure(e: &TrainError) -> bool {
    use crate::tensor::TensorError;
    let tensor_nf = |t: &TensorError| matches!(t, TensorError::NonFinite { .. });
    let autodiff_nf = |a: &AutodiffError| matches!(a, AutodiffError::Tensor(t) if tensor_nf(t));
    match e {
        TrainError::Model(ModelError::Tensor(t)) => tensor_nf(t),
        TrainError::Model(ModelError::Autodiff(a)) => autodiff_nf(a),
        TrainError::Objective(ObjectiveError::Autodiff(a)) => autodiff_nf(a),
        TrainError::Objective(ObjectiveError::NonFinite(_)) => true,
        TrainError::Autodiff(a) => autodiff_nf(a),
        _ => false,
    }
}

/// Gradient-step rule. Adam keeps standard bias-corrected first and second
/// moments; SGD is the plain update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Zero-masking plan applied during the first `steps` training steps:
/// an example of the corpus's t-th task (task-code order) keeps only the
/// relu units whose `unit_groups` entry equals t. Used to plant disjoint
/// unit usage in controlled recovery experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupMasks {
    pub steps: u64,
    /// One group id per hidden unit.
    pub unit_groups: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dim: usize,
    pub hidden: usize,
    pub segments: usize,
    pub seq_max: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: u64,
    pub recalib_period: u64,
    /// Hysteresis margin tau; f64::INFINITY freezes the map.
    pub hysteresis_margin: f64,
    pub lambda_balance: f64,
    pub lambda_entropy: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub topk_routing: Option<usize>,
    /// Global gradient-norm ceiling; None aborts on divergence instead.
    pub grad_clip: Option<f64>,
    /// Keep the gate at its initial zeros (fusion stays uniform).
    pub freeze_gate: bool,
    /// Disable recalibration and train on a fixed shuffled-balanced map.
    pub static_map: bool,
    pub min_units_per_segment: usize,
    pub warmup: Option<WarmupMasks>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
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
            optimizer: Optimizer::default(),
            topk_routing: None,
            grad_clip: None,
            freeze_gate: false,
            static_map: false,
            min_units_per_segment: 1,
            warmup: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::BadConfig(msg));
        if self.dim == 0 || self.hidden == 0 || self.segments == 0 || self.seq_max < 2 {
            return bad("dim, hidden, segments must be positive; seq_max >= 2".into());
        }
        if self.segments > self.hidden {
            return bad(format!(
                "segments ({}) must not exceed hidden units ({})",
                self.segments, self.hidden
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.recalib_period == 0 {
            return bad("recalib_period must be >= 1".into());
        }
        if self.hysteresis_margin.is_nan() || self.hysteresis_margin < 0.0 {
            return bad(format!(
                "hysteresis_margin must be >= 0 (inf allowed), got {}",
                self.hysteresis_margin
            ));
        }
        for (name, l) in [
            ("lambda_balance", self.lambda_balance),
            ("lambda_entropy", self.lambda_entropy),
        ] {
            if !l.is_finite() || l < 0.0 {
                return bad(format!("{name} must be finite and >= 0, got {l}"));
            }
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return bad(format!(
                    "adam parameters out of range: beta1={beta1} beta2={beta2} eps={eps}"
                ));
            }
        }
        if let Some(k) = self.topk_routing {
            if k == 0 || k > self.segments {
                return bad(format!(
                    "topk_routing {k} out of range 1..={}",
                    self.segments
                ));
            }
        }
        if let Some(c) = self.grad_clip {
            if !c.is_finite() || c <= 0.0 {
                return bad(format!("grad_clip must be > 0, got {c}"));
            }
        }
        if self.min_units_per_segment == 0
            || self.min_units_per_segment * self.segments > self.hidden
        {
            return bad(format!(
                "min_units_per_segment {} infeasible for {} segments over {} units",
                self.min_units_per_segment, self.segments, self.hidden
            ));
        }
        if let Some(w) = &self.warmup {
            if w.unit_groups.len() != self.hidden {
                return bad(format!(
                    "warmup unit_groups has {} entries for {} hidden units",
                    w.unit_groups.len(),
                    self.hidden
                ));
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab: VOCAB_SIZE,
            dim: self.dim,
            hidden: self.hidden,
            segments: self.segments,
            seq_max: self.seq_max,
        }
    }

    /// The same run with partitioning turned off: one segment, full
    /// routing, fixed map. Everything else (seed, schedule, optimizer)
    /// is untouched so comparisons are controlled.
    pub fn baseline(&self) -> TrainConfig {
        TrainConfig {
            segments: 1,
            topk_routing: None,
            static_map: true,
            min_units_per_segment: 1,
            warmup: None,
            ..self.clone()
        }
    }
}

/// One step's scalar telemetry. The validation fields are filled at
/// recalibration-period boundaries (and the final step) when a validation
/// set is supplied; everywhere else they are None.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: LossBreakdown,
    /// Batch-mean fusion weight per segment.
    pub alpha_mean: Vec<f64>,
    /// Global gradient 2-norm before clipping.
    pub grad_norm: f64,
    /// Exact-match accuracy on the validation tracking subset.
    pub val_accuracy: Option<f64>,
    /// Mean coherence on the validation tracking subset.
    pub val_coherence: Option<f64>,
}

/// The segment map adopted at one recalibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRecord {
    /// Recalibration ordinal (step / period), the plot-time "epoch".
    pub epoch: u64,
    pub step: u64,
    pub owner: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub dispersion: f64,
    /// Fraction of units whose owner changed in this recalibration.
    pub churn: f64,
    /// Specialization index under the adopted map (attribution-based).
    pub specialization_index: Option<f64>,
    /// Specialization index under the map that was in force before.
    pub specialization_index_before: Option<f64>,
    /// Batch-mean fusion weights at the snapshot step.
    pub alpha_mean: Vec<f64>,
}

/// Everything a run produced. Wall-clock is telemetry and excluded from
/// determinism guarantees; all other fields are pure functions of
/// (config, corpus).
pub struct RunRecord {
    pub config: TrainConfig,
    pub steps: Vec<StepRecord>,
    pub snapshots: Vec<SnapshotRecord>,
    pub final_params: ParameterStore<f64>,
    pub final_map: SegmentMap,
    pub examples_seen: u64,
    pub tokens_seen: u64,
    pub wall_clock_seconds: f64,
}

/// Optimizer moments, lazily sized to the parameter regions on first use.
pub struct OptimizerState<F: Scalar> {
    pub t: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new() -> Self {
        OptimizerState {
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl<F: Scalar> Default for OptimizerState<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Apply one update. `grads` must match the region order and shapes of
/// [`ParameterStore::regions`]; non-finite gradients are rejected so the
/// caller can surface divergence with context.
pub fn optimizer_step<F: Scalar>(
    params: &mut ParameterStore<F>,
    grads: &[Tensor<F>],
    state: &mut OptimizerState<F>,
    optimizer: &Optimizer,
    learning_rate: f64,
) -> Result<(), TrainError> {
    let regions = params.regions_mut();
    if grads.len() != regions.len() {
        return Err(TrainError::GradientArity {
            expected: regions.len(),
            got: grads.len(),
        });
    }
    for ((region, theta), g) in regions.iter().zip(grads) {
        if g.shape() != theta.shape() {
            return Err(TrainError::GradientShape {
                region,
                expected: theta.shape(),
                got: g.shape(),
            });
        }
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(TrainError::Diverged {
                step: state.t + 1,
                last_finite: None,
            });
        }
    }
    state.t += 1;
    let eta = F::from_f64(learning_rate);
    match *optimizer {
        Optimizer::Sgd => {
            for ((_, theta), g) in regions.into_iter().zip(grads) {
                for (p, &gv) in theta.data_mut().iter_mut().zip(g.data()) {
                    *p -= eta * gv;
                }
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            if state.m.is_empty() {
                state.m = grads.iter().map(|g| Tensor::zeros(g.rows(), g.cols())).collect();
                state.v = grads.iter().map(|g| Tensor::zeros(g.rows(), g.cols())).collect();
            }
            let b1 = F::from_f64(beta1);
            let b2 = F::from_f64(beta2);
            let eps = F::from_f64(eps);
            let corr1 = F::from_f64(1.0 - beta1.powi(state.t as i32));
            let corr2 = F::from_f64(1.0 - beta2.powi(state.t as i32));
            for (i, ((_, theta), g)) in regions.into_iter().zip(grads).enumerate() {
                let m = state.m[i].data_mut();
                let v = state.v[i].data_mut();
                for ((p, &gv), (mi, vi)) in theta
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.iter_mut().zip(v.iter_mut()))
                {
                    *mi = b1 * *mi + (F::one() - b1) * gv;
                    *vi = b2 * *vi + (F::one() - b2) * gv * gv;
                    let m_hat = *mi / corr1;
                    let v_hat = *vi / corr2;
                    *p -= eta * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

/// Round-robin-over-tasks batch sampler: tasks cycle in code order and each
/// task's examples are drawn in seeded shuffled order, reshuffled per
/// epoch-through.
struct TaskSampler {
    buckets: Vec<TaskBucket>,
    cycle: usize,
}

struct TaskBucket {
    indices: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    rng: SplitMix64,
}

impl TaskSampler {
    fn new(examples: &[Example], seed: u64) -> TaskSampler {
        let mut codes: Vec<usize> = examples.iter().map(|e| e.task.code()).collect();
        codes.sort_unstable();
        codes.dedup();
        let buckets = codes
            .into_iter()
            .map(|code| {
                let indices: Vec<usize> = examples
                    .iter()
                    .enumerate()
                    .filter(|(_, e)| e.task.code() == code)
                    .map(|(i, _)| i)
                    .collect();
                let mut rng =
                    SplitMix64::substream(seed, SAMPLE_STREAM_TAG.wrapping_add(code as u64));
                let mut order: Vec<usize> = (0..indices.len()).collect();
                rng.shuffle(&mut order);
                TaskBucket {
                    indices,
                    order,
                    cursor: 0,
                    rng,
                }
            })
            .collect();
        TaskSampler { buckets, cycle: 0 }
    }

    fn tasks(&self) -> usize {
        self.buckets.len()
    }

    fn next(&mut self) -> usize {
        let total = self.buckets.len();
        let bucket = &mut self.buckets[self.cycle];
        self.cycle = (self.cycle + 1) % total;
        if bucket.cursor == bucket.order.len() {
            bucket.rng.shuffle(&mut bucket.order);
            bucket.cursor = 0;
        }
        let idx = bucket.indices[bucket.order[bucket.cursor]];
        bucket.cursor += 1;
        idx
    }
}

/// Train the partitioned model on `examples` (sequences must fit
/// `config.seq_max`). Deterministic in (config, examples).
pub fn train(config: &TrainConfig, examples: &[Example]) -> Result<RunRecord, TrainError> {
    train_with_validation(config, examples, &[])
}

/// [`train`] plus accuracy/coherence tracking on (a prefix of) `val` at
/// every recalibration-period boundary and the final step. Tracking is
/// read-only and draws no randomness, so it never perturbs the trajectory.
pub fn train_with_validation(
    config: &TrainConfig,
    examples: &[Example],
    val: &[Example],
) -> Result<RunRecord, TrainError> {
    config.validate()?;
    if examples.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let started = Instant::now();
    let model_config = config.model_config();
    let sequences: Vec<Vec<usize>> = examples.iter().map(|e| e.full_sequence()).collect();
    let tracked = &val[..val.len().min(VALIDATION_TRACKING_LIMIT)];
    let longest = sequences
        .iter()
        .map(|s| s.len())
        .chain(tracked.iter().map(|e| e.full_sequence().len()))
        .max();
    if let Some(longest) = longest {
        if longest > config.seq_max {
            return Err(TrainError::BadConfig(format!(
                "corpus sequence length {longest} exceeds seq_max {}",
                config.seq_max
            )));
        }
    }

    let mut params = init_params::<f64>(&model_config, config.seed)?;
    let mut segmap = if config.static_map {
        shuffled_balanced_map(config.hidden, config.segments, config.seed)
    } else {
        SegmentMap::round_robin(config.hidden, config.segments)
    };
    let mut acc = AttributionMatrix::new(config.hidden, NUM_TASKS);
    let policy = RecalibrationPolicy {
        period_steps: config.recalib_period.max(1) as usize,
        hysteresis_margin: config.hysteresis_margin,
        min_units_per_segment: config.min_units_per_segment,
    };
    let mut sampler = TaskSampler::new(examples, config.seed);
    let mut opt_state = OptimizerState::<f64>::new();
    let spec = ObjectiveSpec {
        lambda_balance: config.lambda_balance,
        lambda_entropy: config.lambda_entropy,
    };

    // Warm-up masks are keyed by the example task's rank among the tasks
    // present in this corpus (code order), matching the sampler's cycle.
    let warmup_masks: Option<Vec<Tensor<f64>>> = config.warmup.as_ref().map(|w| {
        (0..sampler.tasks())
            .map(|slot| {
                let data: Vec<f64> = w
                    .unit_groups
                    .iter()
                    .map(|&g| if g == slot { 1.0 } else { 0.0 })
                    .collect();
                Tensor::new(1, config.hidden, data).expect("sized by construction")
            })
            .collect()
    });
    let task_slot = |ex: &Example, sampler: &TaskSampler| -> usize {
        sampler
            .buckets
            .iter()
            .position(|b| examples[b.indices[0]].task == ex.task)
            .expect("example task present in sampler")
    };

    let mut step_records: Vec<StepRecord> = Vec::with_capacity(config.steps as usize);
    let mut snapshots: Vec<SnapshotRecord> = Vec::new();
    let mut last_finite: Option<LossBreakdown> = None;
    let mut examples_seen = 0u64;
    let mut tokens_seen = 0u64;

    for step in 1..=config.steps {
        let batch: Vec<usize> = (0..config.batch_size).map(|_| sampler.next()).collect();
        let in_warmup = config
            .warmup
            .as_ref()
            .is_some_and(|w| step <= w.steps);
        let inputs: Vec<SequenceInput<f64>> = batch
            .iter()
            .map(|&i| {
                let mask = match (&warmup_masks, in_warmup) {
                    (Some(masks), true) => {
                        Some(masks[task_slot(&examples[i], &sampler)].clone())
                    }
                    _ => None,
                };
                SequenceInput {
                    tokens: &sequences[i],
                    unit_mask: mask,
                }
            })
            .collect();
        let targets: Vec<TargetSpan> = batch
            .iter()
            .map(|&i| TargetSpan {
                positions: examples[i].loss_positions().collect(),
                labels: examples[i].target_tokens.clone(),
            })
            .collect();

        // Once an update sends the parameters toward overflow, the very next
        // forward pass can hit a tensor-level non-finite guard before the loss
        // is even assembled; that is still divergence, not a caller bug.
        let diverged = |e: TrainError, last: &Option<LossBreakdown>| -> TrainError {
            if is_non_finite_failure(&e) {
                TrainError::Diverged {
                    step,
                    last_finite: last.clone(),
                }
            } else {
                e
            }
        };
        let fwd = forward_batch(
            &model_config,
            &params,
            &segmap,
            &inputs,
            config.topk_routing,
        )
        .map_err(|e| diverged(e.into(), &last_finite))?;
        let mut tape = fwd.tape;
        let obj = build_batch_objective(&mut tape, &fwd.passes, &targets, config.segments, &spec)
            .map_err(|e| diverged(e.into(), &last_finite))?;
        let breakdown = obj.breakdown(&tape);
        if !breakdown.total.is_finite() {
            return Err(TrainError::Diverged {
                step,
                last_finite,
            });
        }
        tape.backward(obj.total)
            .map_err(|e| diverged(e.into(), &last_finite))?;

        for (&i, pass) in batch.iter().zip(&fwd.passes) {
            let w1_grad = tape.grad_or_zeros(pass.w1_t).transposed();
            let w2_grad = tape.grad_or_zeros(pass.w2_t).transposed();
            acc.accumulate(&w1_grad, &w2_grad, examples[i].task.code())?;
        }

        let region_nodes = fwd.params.in_region_order();
        let mut grads: Vec<Tensor<f64>> = region_nodes
            .iter()
            .map(|&id| tape.grad_or_zeros(id))
            .collect();
        if config.freeze_gate {
            let gate = grads.last_mut().expect("eight regions");
            for g in gate.data_mut() {
                *g = 0.0;
            }
        }
        let grad_norm = {
            let sq: f64 = grads
                .iter()
                .flat_map(|g| g.data())
                .map(|&v| v * v)
                .sum();
            sq.sqrt()
        };
        if let Some(ceiling) = config.grad_clip {
            if grad_norm > ceiling && grad_norm.is_finite() {
                let scale = ceiling / grad_norm;
                for g in &mut grads {
                    for v in g.data_mut() {
                        *v *= scale;
                    }
                }
            }
        }
        let alpha_mean = obj.mean_alpha_values(&tape);
        match optimizer_step(
            &mut params,
            &grads,
            &mut opt_state,
            &config.optimizer,
            config.learning_rate,
        ) {
            Ok(()) => {}
            Err(TrainError::Diverged { .. }) => {
                return Err(TrainError::Diverged {
                    step,
                    last_finite: Some(breakdown),
                });
            }
            Err(e) => return Err(e),
        }

        examples_seen += batch.len() as u64;
        tokens_seen += batch.iter().map(|&i| sequences[i].len() as u64).sum::<u64>();
        last_finite = Some(breakdown.clone());

        let boundary = step % config.recalib_period == 0 || step == config.steps;
        let (val_accuracy, val_coherence) = if boundary && !tracked.is_empty() {
            let (acc_val, coh) = tracking_eval(&model_config, &params, &segmap, tracked, config)?;
            (Some(acc_val), Some(coh))
        } else {
            (None, None)
        };
        step_records.push(StepRecord {
            step,
            loss: breakdown,
            alpha_mean: alpha_mean.clone(),
            grad_norm,
            val_accuracy,
            val_coherence,
        });

        if !config.static_map && step % config.recalib_period == 0 {
            let acc_snapshot = acc.clone();
            let si_before =
                metrics::specialization_index(&acc_snapshot, &segmap, config.segments).ok();
            let recalib_seed =
                SplitMix64::substream(config.seed, RECALIB_STREAM_TAG.wrapping_add(step))
                    .next_u64();
            let outcome = recalibrate(&segmap, &mut acc, config.segments, recalib_seed, &policy)?;
            let si_after =
                metrics::specialization_index(&acc_snapshot, &outcome.map, config.segments).ok();
            snapshots.push(SnapshotRecord {
                epoch: step / config.recalib_period,
                step,
                owner: outcome.map.owner.clone(),
                centroids: outcome.centroids,
                dispersion: outcome.dispersion,
                churn: outcome.churn,
                specialization_index: si_after,
                specialization_index_before: si_before,
                alpha_mean,
            });
            segmap = outcome.map;
        }
    }

    Ok(RunRecord {
        config: config.clone(),
        steps: step_records,
        snapshots,
        final_params: params,
        final_map: segmap,
        examples_seen,
        tokens_seen,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Train the unpartitioned baseline: same pipeline with one segment and
/// the partitioner disabled. Report parameter parity with
/// [`ModelConfig::param_count_without_gate`] — the gate row exists but is
/// inert (zero-initialized, zero gradient).
pub fn train_baseline(
    config: &TrainConfig,
    examples: &[Example],
) -> Result<RunRecord, TrainError> {
    train(&config.baseline(), examples)
}

/// Greedy-decode accuracy and coherence over the tracking subset.
fn tracking_eval(
    model_config: &ModelConfig,
    params: &ParameterStore<f64>,
    segmap: &SegmentMap,
    tracked: &[Example],
    config: &TrainConfig,
) -> Result<(f64, f64), TrainError> {
    let mut correct = 0usize;
    let mut coherence_sum = 0.0f64;
    for ex in tracked {
        let pred = metrics::greedy_decode(
            model_config,
            params,
            segmap,
            &ex.input_tokens,
            ex.target_tokens.len(),
            config.topk_routing,
        )
        .map_err(|e| TrainError::BadConfig(format!("validation decode failed: {e}")))?;
        if pred == ex.target_tokens {
            correct += 1;
        }
        coherence_sum += metrics::coherence(ex.body_tokens(), &pred, &params.embed);
    }
    Ok((
        correct as f64 / tracked.len() as f64,
        coherence_sum / tracked.len() as f64,
    ))
}

/// Balanced random ownership: shuffled unit ids dealt round-robin, so every
/// segment is nonempty and sizes differ by at most one.
fn shuffled_balanced_map(hidden: usize, segments: usize, seed: u64) -> SegmentMap {
    let mut units: Vec<usize> = (0..hidden).collect();
    SplitMix64::substream(seed, STATIC_MAP_TAG).shuffle(&mut units);
    let mut owner = vec![0usize; hidden];
    for (rank, &j) in units.iter().enumerate() {
        owner[j] = rank % segments;
    }
    SegmentMap { owner }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, generate_mixture, TaskId};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            dim: 6,
            hidden: 8,
            segments: 2,
            seq_max: 16,
            batch_size: 4,
            steps: 5,
            recalib_period: 3,
            seed: 42,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn sgd_step_arithmetic() {
        let config = ModelConfig {
            vocab: 5,
            dim: 2,
            hidden: 2,
            segments: 1,
            seq_max: 4,
        };
        let mut params = init_params::<f64>(&config, 0).unwrap();
        params.embed = Tensor::filled(5, 2, 1.0);
        let mut grads: Vec<Tensor<f64>> = params
            .regions()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        grads[0] = Tensor::filled(5, 2, 2.0);
        let mut state = OptimizerState::new();
        optimizer_step(&mut params, &grads, &mut state, &Optimizer::Sgd, 0.1).unwrap();
        // theta' = 1 - 0.1 * 2 = 0.8
        assert!(params.embed.data().iter().all(|&v| (v - 0.8).abs() < 1e-15));
        // other regions untouched by their zero gradients
        assert!(params.gate.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_first_step_is_learning_rate_sized() {
        let config = ModelConfig {
            vocab: 3,
            dim: 2,
            hidden: 2,
            segments: 1,
            seq_max: 4,
        };
        let mut params = init_params::<f64>(&config, 0).unwrap();
        let before = params.embed.clone();
        let grads: Vec<Tensor<f64>> = params
            .regions()
            .iter()
            .map(|(_, t)| Tensor::filled(t.rows(), t.cols(), 1.0))
            .collect();
        let mut state = OptimizerState::new();
        optimizer_step(
            &mut params,
            &grads,
            &mut state,
            &Optimizer::default(),
            1e-3,
        )
        .unwrap();
        // bias correction makes the first step ~ -eta per coordinate
        for (a, b) in params.embed.data().iter().zip(before.data()) {
            assert!(((b - a) - 1e-3).abs() < 1e-9, "delta {}", b - a);
        }
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let config = ModelConfig {
            vocab: 3,
            dim: 2,
            hidden: 2,
            segments: 1,
            seq_max: 4,
        };
        let mut params = init_params::<f64>(&config, 9).unwrap();
        let before = params.embed.clone();
        let grads: Vec<Tensor<f64>> = params
            .regions()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        let mut state = OptimizerState::new();
        for optimizer in [Optimizer::Sgd, Optimizer::default()] {
            optimizer_step(&mut params, &grads, &mut state, &optimizer, 0.5).unwrap();
            assert_eq!(params.embed.data(), before.data());
        }
    }

    #[test]
    fn optimizer_rejects_non_finite_gradients() {
        let config = ModelConfig {
            vocab: 3,
            dim: 2,
            hidden: 2,
            segments: 1,
            seq_max: 4,
        };
        let mut params = init_params::<f64>(&config, 9).unwrap();
        let mut grads: Vec<Tensor<f64>> = params
            .regions()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        *grads[0].at_mut(0, 0) = f64::NAN;
        let mut state = OptimizerState::new();
        assert!(matches!(
            optimizer_step(&mut params, &grads, &mut state, &Optimizer::Sgd, 0.1),
            Err(TrainError::Diverged { .. })
        ));
    }

    #[test]
    fn zero_steps_returns_init_params() {
        let config = TrainConfig {
            steps: 0,
            ..tiny_config()
        };
        let examples = generate(TaskId::Copy, 7, 6, (2, 3)).unwrap();
        let record = train(&config, &examples).unwrap();
        assert!(record.steps.is_empty());
        assert!(record.snapshots.is_empty());
        let fresh = init_params::<f64>(&config.model_config(), config.seed).unwrap();
        for ((_, a), (_, b)) in record.final_params.regions().iter().zip(fresh.regions().iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn identical_seeds_reproduce_bitwise() {
        let config = tiny_config();
        let examples = generate_mixture(&TaskId::ALL, 11, 4, (2, 3)).unwrap();
        let a = train(&config, &examples).unwrap();
        let b = train(&config, &examples).unwrap();
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.snapshots, b.snapshots);
        for ((_, x), (_, y)) in a
            .final_params
            .regions()
            .iter()
            .zip(b.final_params.regions().iter())
        {
            assert_eq!(x.data(), y.data());
        }
        assert_eq!(a.final_map.owner, b.final_map.owner);
    }

    #[test]
    fn copy_training_decreases_loss() {
        let config = TrainConfig {
            dim: 8,
            hidden: 12,
            segments: 2,
            seq_max: 16,
            batch_size: 8,
            steps: 120,
            recalib_period: 40,
            seed: 5,
            ..TrainConfig::default()
        };
        let examples = generate(TaskId::Copy, 21, 40, (2, 3)).unwrap();
        let record = train(&config, &examples).unwrap();
        let first = record.steps.first().unwrap().loss.total;
        let last = record.steps.last().unwrap().loss.total;
        assert!(
            last < first,
            "loss should decrease on copy: {first} -> {last}"
        );
    }

    #[test]
    fn static_map_training_still_converges() {
        let config = TrainConfig {
            dim: 8,
            hidden: 12,
            segments: 3,
            seq_max: 16,
            batch_size: 8,
            steps: 120,
            static_map: true,
            seed: 6,
            ..TrainConfig::default()
        };
        let examples = generate(TaskId::Copy, 22, 40, (2, 3)).unwrap();
        let record = train(&config, &examples).unwrap();
        assert!(record.snapshots.is_empty(), "partitioner disabled");
        let first = record.steps.first().unwrap().loss.total;
        let last = record.steps.last().unwrap().loss.total;
        assert!(last < first);
        // the static map never changed and is balanced
        let counts = record.final_map.counts(3);
        assert_eq!(counts.iter().sum::<usize>(), 12);
        assert!(counts.iter().all(|&c| c == 4));
    }

    #[test]
    fn recalibration_happens_exactly_at_period_multiples() {
        let config = TrainConfig {
            steps: 10,
            recalib_period: 4,
            ..tiny_config()
        };
        let examples = generate_mixture(&TaskId::ALL, 13, 4, (2, 3)).unwrap();
        let record = train(&config, &examples).unwrap();
        let steps: Vec<u64> = record.snapshots.iter().map(|s| s.step).collect();
        assert_eq!(steps, vec![4, 8]);
        assert_eq!(record.snapshots[0].epoch, 1);
        assert_eq!(record.snapshots[1].epoch, 2);
    }

    #[test]
    fn frozen_gate_keeps_fusion_uniform() {
        let config = TrainConfig {
            steps: 100,
            freeze_gate: true,
            recalib_period: 50,
            ..tiny_config()
        };
        let examples = generate_mixture(&TaskId::ALL, 17, 4, (2, 3)).unwrap();
        let record = train(&config, &examples).unwrap();
        for step in &record.steps {
            for &a in &step.alpha_mean {
                assert!(
                    (a - 0.5).abs() <= 1e-12,
                    "alpha should stay uniform, got {a} at step {}",
                    step.step
                );
            }
        }
        assert!(record.final_params.gate.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn infinite_margin_freezes_the_map() {
        let config = TrainConfig {
            steps: 9,
            recalib_period: 3,
            hysteresis_margin: f64::INFINITY,
            ..tiny_config()
        };
        let examples = generate_mixture(&TaskId::ALL, 19, 4, (2, 3)).unwrap();
        let record = train(&config, &examples).unwrap();
        let initial = SegmentMap::round_robin(config.hidden, config.segments);
        assert_eq!(record.snapshots.len(), 3);
        for snap in &record.snapshots {
            assert_eq!(snap.owner, initial.owner);
            assert_eq!(snap.churn, 0.0);
        }
        assert_eq!(record.final_map.owner, initial.owner);
    }

    #[test]
    fn warmup_masks_gate_unit_usage() {
        // two tasks, units split in half; during warm-up each task may only
        // use its own half, so cross-half attribution stays zero
        let hidden = 8;
        let config = TrainConfig {
            dim: 6,
            hidden,
            segments: 2,
            seq_max: 16,
            batch_size: 4,
            steps: 4,
            recalib_period: 4,
            hysteresis_margin: 0.0,
            seed: 3,
            warmup: Some(WarmupMasks {
                steps: 4,
                unit_groups: vec![0, 0, 0, 0, 1, 1, 1, 1],
            }),
            ..TrainConfig::default()
        };
        let mut examples = generate(TaskId::Copy, 31, 6, (2, 3)).unwrap();
        examples.extend(generate(TaskId::CaseFlip, 32, 6, (2, 3)).unwrap());
        let record = train(&config, &examples).unwrap();
        // after one recalibration over planted-warmup attribution the map
        // must match the planted halves exactly (up to canonical labels)
        let owner = &record.snapshots[0].owner;
        assert_eq!(&owner[..4], &[0, 0, 0, 0]);
        assert_eq!(&owner[4..], &[1, 1, 1, 1]);
    }

    #[test]
    fn baseline_is_single_segment_static() {
        let config = tiny_config();
        let examples = generate(TaskId::Copy, 41, 6, (2, 3)).unwrap();
        let record = train_baseline(&config, &examples).unwrap();
        assert_eq!(record.config.segments, 1);
        assert!(record.config.static_map);
        assert!(record.snapshots.is_empty());
        assert!(record.final_map.owner.iter().all(|&s| s == 0));
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let base = tiny_config();
        let cases: Vec<TrainConfig> = vec![
            TrainConfig { segments: 9, ..base.clone() },
            TrainConfig { batch_size: 0, ..base.clone() },
            TrainConfig { learning_rate: 0.0, ..base.clone() },
            TrainConfig { recalib_period: 0, ..base.clone() },
            TrainConfig { hysteresis_margin: -0.1, ..base.clone() },
            TrainConfig { lambda_balance: -1.0, ..base.clone() },
            TrainConfig { topk_routing: Some(3), ..base.clone() },
            TrainConfig { grad_clip: Some(0.0), ..base.clone() },
            TrainConfig { min_units_per_segment: 5, ..base.clone() },
            TrainConfig {
                warmup: Some(WarmupMasks { steps: 1, unit_groups: vec![0; 3] }),
                ..base.clone()
            },
        ];
        for bad in cases {
            assert!(matches!(
                bad.validate(),
                Err(TrainError::BadConfig(_))
            ));
        }
        assert!(base.validate().is_ok());
    }

    #[test]
    fn validation_tracking_fills_boundary_steps_only() {
        let config = TrainConfig {
            steps: 7,
            recalib_period: 3,
            ..tiny_config()
        };
        let examples = generate_mixture(&TaskId::ALL, 23, 4, (2, 3)).unwrap();
        let val = generate_mixture(&TaskId::ALL, 24, 2, (2, 3)).unwrap();
        let record = train_with_validation(&config, &examples, &val).unwrap();
        for step in &record.steps {
            let boundary = step.step % 3 == 0 || step.step == 7;
            assert_eq!(step.val_accuracy.is_some(), boundary, "step {}", step.step);
            assert_eq!(step.val_coherence.is_some(), boundary);
            if let (Some(a), Some(c)) = (step.val_accuracy, step.val_coherence) {
                assert!((0.0..=1.0).contains(&a));
                assert!((0.0..=1.0).contains(&c));
            }
        }
        // tracking must not perturb the trajectory
        let without = train(&config, &examples).unwrap();
        for (a, b) in record.steps.iter().zip(&without.steps) {
            assert_eq!(a.loss, b.loss);
        }
    }

    #[test]
    fn sampler_cycles_tasks_in_code_order() {
        let mut examples = generate(TaskId::SortChars, 51, 3, (2, 3)).unwrap();
        examples.extend(generate(TaskId::Copy, 52, 3, (2, 3)).unwrap());
        let mut sampler = TaskSampler::new(&examples, 1);
        assert_eq!(sampler.tasks(), 2);
        let drawn: Vec<TaskId> = (0..6).map(|_| examples[sampler.next()].task).collect();
        assert_eq!(
            drawn,
            [
                TaskId::Copy,
                TaskId::SortChars,
                TaskId::Copy,
                TaskId::SortChars,
                TaskId::Copy,
                TaskId::SortChars
            ]
        );
    }
}
