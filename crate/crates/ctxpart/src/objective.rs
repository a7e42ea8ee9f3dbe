//! Training objective: masked next-token cross-entropy, reattributed to
//! segments by fusion responsibility, plus differentiable routing
//! regularizers.
//!
//! The per-segment losses are a decomposition, not separate objectives:
//! `L_i = Σ_t alpha_i(t) ce(t) / T`, so `Σ_i L_i` is exactly the mean masked
//! cross-entropy (the fusion weights sum to one per token). The balance
//! penalty `N Σ_i (mean_alpha_i - 1/N)^2` discourages routing collapse; an
//! optional entropy term `mean_t(-Σ_i alpha_i log alpha_i)` is exposed for
//! sweeps and off by default.

use crate::autodiff::{log_sum_exp, AutodiffError, NodeId, Tape};
use crate::model::ForwardPass;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("empty target region: every example must contribute at least one loss position")]
    EmptyTargets,
    #[error("example has {positions} loss positions but {labels} labels")]
    PositionLabelMismatch { positions: usize, labels: usize },
    #[error("{got} target sets for {expected} forward passes")]
    BatchMismatch { expected: usize, got: usize },
    #[error("alpha has {alpha_rows} rows but {ce_rows} cross-entropy rows")]
    AlphaCeMismatch { alpha_rows: usize, ce_rows: usize },
    #[error("loss coefficients must be finite and >= 0, got {0}")]
    BadLambda(f64),
    #[error("non-finite loss component: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Weights of the regularization terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub lambda_balance: f64,
    pub lambda_entropy: f64,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        ObjectiveSpec {
            lambda_balance: 0.01,
            lambda_entropy: 0.0,
        }
    }
}

impl ObjectiveSpec {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        for lambda in [self.lambda_balance, self.lambda_entropy] {
            if !lambda.is_finite() || lambda < 0.0 {
                return Err(ObjectiveError::BadLambda(lambda));
            }
        }
        Ok(())
    }
}

/// Scalar summary of one training step's loss, logged per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task_loss: f64,
    pub per_segment_loss: Vec<f64>,
    pub balance_penalty: f64,
    pub entropy_term: f64,
    pub total: f64,
    pub lambda_balance: f64,
    pub lambda_entropy: f64,
}

/// Loss positions and labels for one sequence in a batch.
#[derive(Debug, Clone)]
pub struct TargetSpan {
    /// Logit rows to score (positions whose next token is a target token).
    pub positions: Vec<usize>,
    /// The token expected after each position.
    pub labels: Vec<usize>,
}

/// Node handles for a batch objective on an existing forward tape.
pub struct ObjectiveNodes {
    pub total: NodeId,
    /// Mean masked cross-entropy over every target token in the batch.
    pub task_loss: NodeId,
    pub balance: NodeId,
    pub entropy: Option<NodeId>,
    /// 1 x segments batch-mean fusion weights (over all positions).
    pub mean_alpha: NodeId,
    /// Per example: cross-entropy column (m x 1).
    pub ce: Vec<NodeId>,
    /// Per example: fusion weights at the loss positions (m x segments).
    pub alpha_at_loss: Vec<NodeId>,
    segments: usize,
    lambda_balance: f64,
    lambda_entropy: f64,
}

/// Extend a batch forward graph with the total training loss.
pub fn build_batch_objective<F: Scalar>(
    tape: &mut Tape<F>,
    passes: &[ForwardPass],
    targets: &[TargetSpan],
    segments: usize,
    spec: &ObjectiveSpec,
) -> Result<ObjectiveNodes, ObjectiveError> {
    spec.validate()?;
    if passes.len() != targets.len() || passes.is_empty() {
        return Err(ObjectiveError::BatchMismatch {
            expected: passes.len(),
            got: targets.len(),
        });
    }
    for t in targets {
        if t.positions.is_empty() {
            return Err(ObjectiveError::EmptyTargets);
        }
        if t.positions.len() != t.labels.len() {
            return Err(ObjectiveError::PositionLabelMismatch {
                positions: t.positions.len(),
                labels: t.labels.len(),
            });
        }
    }

    let mut ce_nodes = Vec::with_capacity(passes.len());
    let mut alpha_at_loss = Vec::with_capacity(passes.len());
    for (pass, t) in passes.iter().zip(targets) {
        let sel = tape.select_rows(pass.logits, t.positions.clone())?;
        let ce = tape.cross_entropy(sel, t.labels.clone())?;
        ce_nodes.push(ce);
        alpha_at_loss.push(tape.select_rows(pass.alpha, t.positions.clone())?);
    }
    let ce_cat = tape.concat_rows(&ce_nodes)?;
    let task_loss = tape.mean(ce_cat)?;

    // Batch-mean fusion weights over all positions (every token is routed,
    // not just the scored ones).
    let alpha_all: Vec<NodeId> = passes.iter().map(|p| p.alpha).collect();
    let alpha_cat = tape.concat_rows(&alpha_all)?;
    let total_rows = tape.value(alpha_cat).rows();
    let averaging_row = tape.leaf(Tensor::filled(
        1,
        total_rows,
        F::from_f64(1.0 / total_rows as f64),
    ))?;
    let mean_alpha = tape.matmul(averaging_row, alpha_cat)?;

    // With one segment the fusion weights are identically one and the
    // penalty is structurally zero; keep it an exact zero on the tape.
    let balance = if segments == 1 {
        tape.leaf(Tensor::scalar(F::zero()))?
    } else {
        let neg_uniform = tape.leaf(Tensor::filled(
            1,
            segments,
            F::from_f64(-1.0 / segments as f64),
        ))?;
        let diff = tape.add(mean_alpha, neg_uniform)?;
        let sq = tape.multiply(diff, diff)?;
        let s = tape.sum(sq)?;
        tape.scale(s, F::from_f64(segments as f64))?
    };

    let entropy = if spec.lambda_entropy > 0.0 && segments > 1 {
        // alpha can underflow to exactly zero in a saturated gate; the tiny
        // shift keeps log finite and is negligible elsewhere.
        let eps = tape.leaf(Tensor::filled(
            total_rows,
            segments,
            F::from_f64(1e-12),
        ))?;
        let shifted = tape.add(alpha_cat, eps)?;
        let lg = tape.log(shifted)?;
        let prod = tape.multiply(alpha_cat, lg)?;
        let s = tape.sum(prod)?;
        Some(tape.scale(s, F::from_f64(-1.0 / total_rows as f64))?)
    } else {
        None
    };

    let scaled_balance = tape.scale(balance, F::from_f64(spec.lambda_balance))?;
    let mut total = tape.add(task_loss, scaled_balance)?;
    if let Some(ent) = entropy {
        let scaled_ent = tape.scale(ent, F::from_f64(spec.lambda_entropy))?;
        total = tape.add(total, scaled_ent)?;
    }

    Ok(ObjectiveNodes {
        total,
        task_loss,
        balance,
        entropy,
        mean_alpha,
        ce: ce_nodes,
        alpha_at_loss,
        segments,
        lambda_balance: spec.lambda_balance,
        lambda_entropy: spec.lambda_entropy,
    })
}

impl ObjectiveNodes {
    /// Read the step's scalar summary off the tape (values only; valid
    /// before or after backward).
    pub fn breakdown<F: Scalar>(&self, tape: &Tape<F>) -> LossBreakdown {
        let mut per_segment = vec![0.0f64; self.segments];
        let mut token_count = 0usize;
        for (&ce, &al) in self.ce.iter().zip(&self.alpha_at_loss) {
            let ce_v = tape.value(ce);
            let al_v = tape.value(al);
            token_count += ce_v.rows();
            for t in 0..ce_v.rows() {
                let ce_t = ce_v.at(t, 0).to_f64();
                for i in 0..self.segments {
                    per_segment[i] += al_v.at(t, i).to_f64() * ce_t;
                }
            }
        }
        for v in per_segment.iter_mut() {
            *v /= token_count as f64;
        }
        LossBreakdown {
            task_loss: tape.value(self.task_loss).data()[0].to_f64(),
            per_segment_loss: per_segment,
            balance_penalty: tape.value(self.balance).data()[0].to_f64(),
            entropy_term: self
                .entropy
                .map(|e| tape.value(e).data()[0].to_f64())
                .unwrap_or(0.0),
            total: tape.value(self.total).data()[0].to_f64(),
            lambda_balance: self.lambda_balance,
            lambda_entropy: self.lambda_entropy,
        }
    }

    /// Batch-mean fusion weights as plain values.
    pub fn mean_alpha_values<F: Scalar>(&self, tape: &Tape<F>) -> Vec<f64> {
        tape.value(self.mean_alpha)
            .data()
            .iter()
            .map(|&v| v.to_f64())
            .collect()
    }
}

/// Usage-balance penalty of a mean fusion-weight vector:
/// `N Σ_i (mean_alpha_i - 1/N)^2`; zero iff usage is uniform, at most N-1.
pub fn balance_penalty_value<F: Scalar>(alpha_mean: &[F]) -> F {
    let n = alpha_mean.len();
    let uniform = F::from_f64(1.0 / n as f64);
    let sum: F = alpha_mean
        .iter()
        .map(|&a| {
            let d = a - uniform;
            d * d
        })
        .sum();
    F::from_f64(n as f64) * sum
}

/// Reattribute masked cross-entropy to segments by fusion responsibility.
/// `logits` holds only the scored rows; `alpha` the matching fusion weights.
pub fn segment_losses_value<F: Scalar>(
    logits: &Tensor<F>,
    targets: &[usize],
    alpha: &Tensor<F>,
) -> Result<Vec<F>, ObjectiveError> {
    if logits.rows() == 0 {
        return Err(ObjectiveError::EmptyTargets);
    }
    if targets.len() != logits.rows() {
        return Err(ObjectiveError::PositionLabelMismatch {
            positions: logits.rows(),
            labels: targets.len(),
        });
    }
    if alpha.rows() != logits.rows() {
        return Err(ObjectiveError::AlphaCeMismatch {
            alpha_rows: alpha.rows(),
            ce_rows: logits.rows(),
        });
    }
    let n = alpha.cols();
    let count = F::from_f64(logits.rows() as f64);
    let mut out = vec![F::zero(); n];
    for (t, &label) in targets.iter().enumerate() {
        let row = logits.row(t);
        let ce = log_sum_exp(row) - row[label];
        for (i, o) in out.iter_mut().enumerate() {
            *o += alpha.at(t, i) * ce;
        }
    }
    for o in out.iter_mut() {
        *o = *o / count;
    }
    Ok(out)
}

/// Compose a [`LossBreakdown`] from already-computed components, enforcing
/// finiteness. `total` is built from the parts, so the additive identity
/// holds by construction.
pub fn total_loss(
    per_segment_loss: Vec<f64>,
    balance_penalty: f64,
    entropy_term: f64,
    lambda_balance: f64,
    lambda_entropy: f64,
) -> Result<LossBreakdown, ObjectiveError> {
    for lambda in [lambda_balance, lambda_entropy] {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(ObjectiveError::BadLambda(lambda));
        }
    }
    let task_loss: f64 = per_segment_loss.iter().sum();
    for (name, v) in [
        ("task_loss", task_loss),
        ("balance_penalty", balance_penalty),
        ("entropy_term", entropy_term),
    ] {
        if !v.is_finite() {
            return Err(ObjectiveError::NonFinite(format!("{name} = {v}")));
        }
    }
    let total = task_loss + lambda_balance * balance_penalty + lambda_entropy * entropy_term;
    Ok(LossBreakdown {
        task_loss,
        per_segment_loss,
        balance_penalty,
        entropy_term,
        total,
        lambda_balance,
        lambda_entropy,
    })
}
