//! The partitioned network.
//!
//! Token embedding (scaled, plus fixed sinusoidal position rows) feeds a
//! single-head causal self-attention layer with a residual connection. The
//! feed-forward block's hidden units are partitioned by a [`SegmentMap`];
//! each segment computes a partial output from only the units it owns, a
//! linear-softmax gate on the post-attention state produces per-token fusion
//! weights over segments, and the fused output projects back to vocabulary
//! logits through the tied embedding.
//!
//! Segment outputs are realized by multiplying the relu activations with 0/1
//! ownership masks, so the unweighted sum of segment outputs reproduces the
//! dense feed-forward output exactly: the partition re-routes work, it never
//! duplicates parameters.

use crate::autodiff::{AutodiffError, NodeId, Tape};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Additive attention mask value for future positions. Large enough to zero
/// the softmax weight, small enough to stay comfortably finite.
const CAUSAL_MASK: f64 = -1e30;

/// Tolerance for the fusion-weight simplex invariant.
pub const SIMPLEX_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("token id {id} out of range for vocab {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence length {len} exceeds configured maximum {max} (or is < 2)")]
    BadSequenceLength { len: usize, max: usize },
    #[error("segment map has {got} entries, expected {expected}")]
    SegmentMapLength { expected: usize, got: usize },
    #[error("segment id {id} out of range for {segments} segments")]
    SegmentIdOutOfRange { id: usize, segments: usize },
    #[error("fusion weights have {alphas} entries but there are {outputs} segment outputs")]
    FuseLengthMismatch { alphas: usize, outputs: usize },
    #[error("fusion weights off the simplex: {0}")]
    AlphaOffSimplex(String),
    #[error("top-k routing needs 1 <= k <= {segments}, got {k}")]
    BadTopK { k: usize, segments: usize },
    #[error("unit mask must be 1x{hidden}, got {rows}x{cols}")]
    BadUnitMask {
        hidden: usize,
        rows: usize,
        cols: usize,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Architecture sizes. `vocab` is fixed by the corpus (60) in practice but
/// kept explicit so small test fixtures stay cheap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub dim: usize,
    pub hidden: usize,
    pub segments: usize,
    pub seq_max: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab == 0 || self.dim == 0 || self.hidden == 0 || self.segments == 0 {
            return Err(ModelError::BadConfig(
                "vocab, dim, hidden and segments must be positive".into(),
            ));
        }
        if self.hidden < self.segments {
            return Err(ModelError::BadConfig(format!(
                "hidden ({}) must be >= segments ({}) so every segment can own a unit",
                self.hidden, self.segments
            )));
        }
        if self.seq_max < 2 {
            return Err(ModelError::BadConfig("seq_max must be at least 2".into()));
        }
        Ok(())
    }

    /// Total learnable parameters, straight from the region shapes.
    pub fn param_count(&self) -> usize {
        let (v, d, h, n) = (self.vocab, self.dim, self.hidden, self.segments);
        v * d + d * 3 * d + d * d + h * d + h + d * h + d + n * d
    }

    /// Parameter count excluding the gate region, the figure reported for
    /// the unpartitioned baseline.
    pub fn param_count_without_gate(&self) -> usize {
        self.param_count() - self.segments * self.dim
    }
}

pub const REGION_NAMES: [&str; 8] = [
    "embed",
    "attn_qkv",
    "attn_out",
    "ffn_in",
    "ffn_bias1",
    "ffn_out",
    "ffn_bias2",
    "gate",
];

/// Named parameter regions. Biases are stored as single rows so every region
/// is a plain matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<F: Scalar> {
    /// vocab x dim; also the tied output projection.
    pub embed: Tensor<F>,
    /// dim x 3*dim; columns [0,d) query, [d,2d) key, [2d,3d) value.
    pub attn_qkv: Tensor<F>,
    /// dim x dim attention output projection.
    pub attn_out: Tensor<F>,
    /// hidden x dim (W1).
    pub ffn_in: Tensor<F>,
    /// 1 x hidden.
    pub ffn_bias1: Tensor<F>,
    /// dim x hidden (W2).
    pub ffn_out: Tensor<F>,
    /// 1 x dim.
    pub ffn_bias2: Tensor<F>,
    /// segments x dim task-relevance gate.
    pub gate: Tensor<F>,
}

impl<F: Scalar> ParameterStore<F> {
    /// Regions in the fixed order of [`REGION_NAMES`] (optimizer,
    /// serialization and attribution all iterate in this order).
    pub fn regions(&self) -> [(&'static str, &Tensor<F>); 8] {
        [
            ("embed", &self.embed),
            ("attn_qkv", &self.attn_qkv),
            ("attn_out", &self.attn_out),
            ("ffn_in", &self.ffn_in),
            ("ffn_bias1", &self.ffn_bias1),
            ("ffn_out", &self.ffn_out),
            ("ffn_bias2", &self.ffn_bias2),
            ("gate", &self.gate),
        ]
    }

    pub fn regions_mut(&mut self) -> [(&'static str, &mut Tensor<F>); 8] {
        [
            ("embed", &mut self.embed),
            ("attn_qkv", &mut self.attn_qkv),
            ("attn_out", &mut self.attn_out),
            ("ffn_in", &mut self.ffn_in),
            ("ffn_bias1", &mut self.ffn_bias1),
            ("ffn_out", &mut self.ffn_out),
            ("ffn_bias2", &mut self.ffn_bias2),
            ("gate", &mut self.gate),
        ]
    }

    pub fn total_len(&self) -> usize {
        self.regions().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Uniform init in (-1/sqrt(fan_in), 1/sqrt(fan_in)) from a region-tagged
/// substream; biases and the gate start at zero so routing begins uniform.
/// Deterministic in `(config, seed)`, and regions draw independently, so the
/// shared weights do not depend on the segment count.
pub fn init_params<F: Scalar>(
    config: &ModelConfig,
    seed: u64,
) -> Result<ParameterStore<F>, ModelError> {
    config.validate()?;
    let (v, d, h, n) = (config.vocab, config.dim, config.hidden, config.segments);

    let uniform = |rows: usize, cols: usize, fan_in: usize, tag: u64| {
        let mut rng = SplitMix64::substream(seed, tag);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(F::from_f64(bound * (2.0 * rng.next_f64() - 1.0)));
        }
        Tensor::new(rows, cols, data).expect("sized by construction")
    };

    Ok(ParameterStore {
        embed: uniform(v, d, d, 1),
        attn_qkv: uniform(d, 3 * d, d, 2),
        attn_out: uniform(d, d, d, 3),
        ffn_in: uniform(h, d, d, 4),
        ffn_bias1: Tensor::zeros(1, h),
        ffn_out: uniform(d, h, h, 5),
        ffn_bias2: Tensor::zeros(1, d),
        gate: Tensor::zeros(n, d),
    })
}

/// Ownership of each hidden unit: `owner[j]` is the segment of unit `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentMap {
    pub owner: Vec<usize>,
}

impl SegmentMap {
    /// Initial assignment before any attribution exists: unit j -> j mod n.
    pub fn round_robin(hidden: usize, segments: usize) -> SegmentMap {
        SegmentMap {
            owner: (0..hidden).map(|j| j % segments).collect(),
        }
    }

    pub fn validate(&self, hidden: usize, segments: usize) -> Result<(), ModelError> {
        if self.owner.len() != hidden {
            return Err(ModelError::SegmentMapLength {
                expected: hidden,
                got: self.owner.len(),
            });
        }
        if let Some(&bad) = self.owner.iter().find(|&&s| s >= segments) {
            return Err(ModelError::SegmentIdOutOfRange {
                id: bad,
                segments,
            });
        }
        Ok(())
    }

    pub fn counts(&self, segments: usize) -> Vec<usize> {
        let mut counts = vec![0usize; segments];
        for &s in &self.owner {
            counts[s] += 1;
        }
        counts
    }

    pub fn members(&self, segment: usize) -> Vec<usize> {
        (0..self.owner.len())
            .filter(|&j| self.owner[j] == segment)
            .collect()
    }

    /// One 0/1 row mask per segment; the masks partition the unit axis.
    pub fn masks<F: Scalar>(&self, segments: usize) -> Vec<Tensor<F>> {
        (0..segments)
            .map(|i| {
                let data = self
                    .owner
                    .iter()
                    .map(|&s| if s == i { F::one() } else { F::zero() })
                    .collect();
                Tensor::new(1, self.owner.len(), data).expect("sized by construction")
            })
            .collect()
    }

    /// Fraction of units whose owner differs from `previous`.
    pub fn churn_from(&self, previous: &SegmentMap) -> f64 {
        let moved = self
            .owner
            .iter()
            .zip(&previous.owner)
            .filter(|(a, b)| a != b)
            .count();
        moved as f64 / self.owner.len() as f64
    }
}

/// Per-token fusion weights over segments (one simplex point).
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights<F: Scalar> {
    pub alpha: Vec<F>,
}

impl<F: Scalar> FusionWeights<F> {
    pub fn validate_simplex(&self) -> Result<(), ModelError> {
        let tol = F::from_f64(SIMPLEX_TOL);
        if self.alpha.iter().any(|&a| a < F::zero()) {
            return Err(ModelError::AlphaOffSimplex(format!(
                "negative entry in {:?}",
                self.alpha.iter().map(|a| a.to_f64()).collect::<Vec<_>>()
            )));
        }
        let total: F = self.alpha.iter().copied().sum();
        if (total - F::one()).abs() > tol {
            return Err(ModelError::AlphaOffSimplex(format!(
                "sum {} != 1",
                total.to_f64()
            )));
        }
        Ok(())
    }
}

/// Per-segment partial outputs for one token (each `1 x dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentOutputs<F: Scalar> {
    pub per_segment: Vec<Tensor<F>>,
}

/// Task-relevance gate: `alpha = softmax(G h)` for a `1 x dim` hidden row.
pub fn gate_alpha<F: Scalar>(
    h: &Tensor<F>,
    gate: &Tensor<F>,
) -> Result<FusionWeights<F>, ModelError> {
    if h.rows() != 1 || h.cols() != gate.cols() {
        return Err(TensorError::ShapeMismatch {
            op: "gate",
            lhs: h.shape(),
            rhs: gate.shape(),
        }
        .into());
    }
    let logits = h.matmul(&gate.transposed())?;
    let mut alpha = vec![F::zero(); gate.rows()];
    crate::autodiff::softmax_row(logits.row(0), &mut alpha);
    Ok(FusionWeights { alpha })
}

/// Weighted aggregation of segment outputs: Σ_i alpha_i * y_i.
pub fn fuse<F: Scalar>(
    outputs: &SegmentOutputs<F>,
    alpha: &FusionWeights<F>,
) -> Result<Tensor<F>, ModelError> {
    if outputs.per_segment.len() != alpha.alpha.len() {
        return Err(ModelError::FuseLengthMismatch {
            alphas: alpha.alpha.len(),
            outputs: outputs.per_segment.len(),
        });
    }
    alpha.validate_simplex()?;
    let (r, c) = outputs.per_segment[0].shape();
    let mut fused = Tensor::zeros(r, c);
    for (y, &a) in outputs.per_segment.iter().zip(&alpha.alpha) {
        for (dst, &src) in fused.data_mut().iter_mut().zip(y.data()) {
            *dst += a * src;
        }
    }
    Ok(fused)
}

/// Fixed sinusoidal position rows: `pe[p, 2i] = sin(p w_i)`,
/// `pe[p, 2i+1] = cos(p w_i)` with `w_i = 10000^(-2i/dim)`. Parameter-free;
/// computed in f64 then converted, so the table is identical across scalar
/// widths up to rounding.
pub fn positional_encoding<F: Scalar>(rows: usize, dim: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(rows * dim);
    for p in 0..rows {
        for c in 0..dim {
            let pair = (c / 2) as f64;
            let omega = 10000f64.powf(-2.0 * pair / dim as f64);
            let angle = p as f64 * omega;
            let v = if c % 2 == 0 { angle.sin() } else { angle.cos() };
            data.push(F::from_f64(v));
        }
    }
    Tensor::new(rows, dim, data).expect("sized by construction")
}

/// One sequence to push through the model.
pub struct SequenceInput<'a, F: Scalar> {
    pub tokens: &'a [usize],
    /// Optional `1 x hidden` 0/1 mask multiplied into the relu activations
    /// before segment splitting; used to plant disjoint unit usage in
    /// controlled experiments. `None` leaves the block untouched.
    pub unit_mask: Option<Tensor<F>>,
}

impl<'a, F: Scalar> SequenceInput<'a, F> {
    pub fn plain(tokens: &'a [usize]) -> Self {
        SequenceInput {
            tokens,
            unit_mask: None,
        }
    }
}

/// Node handles for one sequence inside a batch graph.
pub struct ForwardPass {
    /// seq x vocab.
    pub logits: NodeId,
    /// seq x segments, after any top-k routing.
    pub alpha: NodeId,
    /// seq x dim post-attention hidden states.
    pub hidden: NodeId,
    /// Per segment: seq x dim partial outputs.
    pub segment_outputs: Vec<NodeId>,
    /// This sequence's private transpose of W1 (dim x hidden); its gradient
    /// slot holds the sequence-local dL/dW1 (transposed), the raw material
    /// for per-context attribution.
    pub w1_t: NodeId,
    /// Likewise for W2: hidden x dim.
    pub w2_t: NodeId,
}

/// Leaf ids of the parameter regions inside a batch graph.
pub struct ParamNodes {
    pub embed: NodeId,
    pub attn_qkv: NodeId,
    pub attn_out: NodeId,
    pub ffn_in: NodeId,
    pub ffn_bias1: NodeId,
    pub ffn_out: NodeId,
    pub ffn_bias2: NodeId,
    pub gate: NodeId,
}

impl ParamNodes {
    pub fn in_region_order(&self) -> [NodeId; 8] {
        [
            self.embed,
            self.attn_qkv,
            self.attn_out,
            self.ffn_in,
            self.ffn_bias1,
            self.ffn_out,
            self.ffn_bias2,
            self.gate,
        ]
    }
}

/// A batch forward graph: the tape plus handles for every sequence.
pub struct BatchForward<F: Scalar> {
    pub tape: Tape<F>,
    pub params: ParamNodes,
    pub passes: Vec<ForwardPass>,
}

/// Build the forward graph for a batch of sequences on one tape.
///
/// Per token t: `h_t = x_t + W_out (attention(x)_t)` with causal masking;
/// `y_i = (relu(W1 h + b1) ⊙ mask_i) W2^T`; `alpha = softmax(G h)`;
/// `fused = Σ_i alpha_i y_i + b2`; `logits = fused E^T` (tied embedding).
///
/// `topk = Some(k)` keeps the k largest fusion weights per token and
/// renormalizes them (evaluation-time routing; the renormalization constant
/// is treated as data, so do not differentiate through it).
pub fn forward_batch<'a, F: Scalar>(
    config: &ModelConfig,
    params: &ParameterStore<F>,
    segmap: &SegmentMap,
    inputs: &[SequenceInput<'a, F>],
    topk: Option<usize>,
) -> Result<BatchForward<F>, ModelError> {
    config.validate()?;
    segmap.validate(config.hidden, config.segments)?;
    let n = config.segments;
    if let Some(k) = topk {
        if k == 0 || k > n {
            return Err(ModelError::BadTopK { k, segments: n });
        }
    }
    for input in inputs {
        let len = input.tokens.len();
        if len < 2 || len > config.seq_max {
            return Err(ModelError::BadSequenceLength {
                len,
                max: config.seq_max,
            });
        }
        if let Some(&bad) = input.tokens.iter().find(|&&t| t >= config.vocab) {
            return Err(ModelError::TokenOutOfRange {
                id: bad,
                vocab: config.vocab,
            });
        }
        if let Some(mask) = &input.unit_mask {
            if mask.shape() != (1, config.hidden) {
                return Err(ModelError::BadUnitMask {
                    hidden: config.hidden,
                    rows: mask.rows(),
                    cols: mask.cols(),
                });
            }
        }
    }

    let mut tape = Tape::new();
    let nodes = ParamNodes {
        embed: tape.leaf(params.embed.clone())?,
        attn_qkv: tape.leaf(params.attn_qkv.clone())?,
        attn_out: tape.leaf(params.attn_out.clone())?,
        ffn_in: tape.leaf(params.ffn_in.clone())?,
        ffn_bias1: tape.leaf(params.ffn_bias1.clone())?,
        ffn_out: tape.leaf(params.ffn_out.clone())?,
        ffn_bias2: tape.leaf(params.ffn_bias2.clone())?,
        gate: tape.leaf(params.gate.clone())?,
    };

    let d = config.dim;
    let embed_t = tape.transpose(nodes.embed)?;
    let gate_t = tape.transpose(nodes.gate)?;
    let ones_row_d = tape.leaf(Tensor::filled(1, d, F::one()))?;
    let pe_table = positional_encoding::<F>(config.seq_max, d);
    let masks = segmap.masks::<F>(n);
    let sqrt_d = F::from_f64((d as f64).sqrt());
    let inv_sqrt_d = F::from_f64(1.0 / (d as f64).sqrt());

    let mut passes = Vec::with_capacity(inputs.len());
    for input in inputs {
        let t_len = input.tokens.len();

        // Embedding with position information.
        let sel = tape.select_rows(nodes.embed, input.tokens.to_vec())?;
        let scaled = tape.scale(sel, sqrt_d)?;
        let pe_rows: Vec<F> = pe_table.data()[..t_len * d].to_vec();
        let pe = tape.leaf(Tensor::new(t_len, d, pe_rows)?)?;
        let x = tape.add(scaled, pe)?;

        // Single-head causal self-attention with residual.
        let qkv = tape.matmul(x, nodes.attn_qkv)?;
        let qkv_t = tape.transpose(qkv)?;
        let q_rows = tape.select_rows(qkv_t, (0..d).collect())?;
        let k_rows = tape.select_rows(qkv_t, (d..2 * d).collect())?;
        let v_rows = tape.select_rows(qkv_t, (2 * d..3 * d).collect())?;
        let q = tape.transpose(q_rows)?;
        let v = tape.transpose(v_rows)?;
        // k stays transposed (dim x seq) for the score product.
        let scores_raw = tape.matmul(q, k_rows)?;
        let scores = tape.scale(scores_raw, inv_sqrt_d)?;
        let causal = tape.leaf(causal_mask::<F>(t_len))?;
        let masked = tape.add(scores, causal)?;
        let attw = tape.softmax(masked)?;
        let ctx = tape.matmul(attw, v)?;
        let proj = tape.matmul(ctx, nodes.attn_out)?;
        let hidden = tape.add(x, proj)?;

        // Feed-forward activations, optionally masked for planted runs.
        let w1_t = tape.transpose(nodes.ffn_in)?;
        let pre = tape.matmul(hidden, w1_t)?;
        let z = tape.add(pre, nodes.ffn_bias1)?;
        let mut act = tape.relu(z)?;
        if let Some(mask) = &input.unit_mask {
            let bcast = tape.leaf(repeat_row(mask, t_len))?;
            act = tape.multiply(act, bcast)?;
        }

        // Fusion weights from the gate.
        let gate_logits = tape.matmul(hidden, gate_t)?;
        let mut alpha = tape.softmax(gate_logits)?;
        if let Some(k) = topk {
            if k < n {
                alpha = apply_topk(&mut tape, alpha, k)?;
            }
        }

        // Per-segment partial outputs and their fusion.
        let w2_t = tape.transpose(nodes.ffn_out)?;
        let alpha_t = tape.transpose(alpha)?;
        let mut segment_outputs = Vec::with_capacity(n);
        let mut fused_sum: Option<NodeId> = None;
        for i in 0..n {
            let mask_bcast = tape.leaf(repeat_row(&masks[i], t_len))?;
            let act_i = tape.multiply(act, mask_bcast)?;
            let y_i = tape.matmul(act_i, w2_t)?;
            segment_outputs.push(y_i);

            let a_row = tape.select_rows(alpha_t, vec![i])?;
            let a_col = tape.transpose(a_row)?;
            let a_bcast = tape.matmul(a_col, ones_row_d)?;
            let weighted = tape.multiply(a_bcast, y_i)?;
            fused_sum = Some(match fused_sum {
                None => weighted,
                Some(acc) => tape.add(acc, weighted)?,
            });
        }
        let fused = tape.add(fused_sum.expect("segments >= 1"), nodes.ffn_bias2)?;
        let logits = tape.matmul(fused, embed_t)?;

        passes.push(ForwardPass {
            logits,
            alpha,
            hidden,
            segment_outputs,
            w1_t,
            w2_t,
        });
    }

    Ok(BatchForward {
        tape,
        params: nodes,
        passes,
    })
}

fn causal_mask<F: Scalar>(t_len: usize) -> Tensor<F> {
    let mut m = Tensor::zeros(t_len, t_len);
    for r in 0..t_len {
        for c in r + 1..t_len {
            *m.at_mut(r, c) = F::from_f64(CAUSAL_MASK);
        }
    }
    m
}

fn repeat_row<F: Scalar>(row: &Tensor<F>, times: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(times * row.cols());
    for _ in 0..times {
        data.extend_from_slice(row.data());
    }
    Tensor::new(times, row.cols(), data).expect("sized by construction")
}

/// Indices of the k largest entries of a fusion-weight row, sorted
/// ascending; ties go to the lower segment id. This is the routing
/// selection rule, shared with evaluation-time accounting.
pub fn topk_indices<F: Scalar>(row: &[F], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .expect("fusion weights are finite")
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order[..k].to_vec();
    kept.sort_unstable();
    kept
}

/// Keep the k largest fusion weights per row (ties to the lower segment id)
/// and renormalize. The kept/renorm decisions come from the current values
/// and enter the graph as constants.
fn apply_topk<F: Scalar>(
    tape: &mut Tape<F>,
    alpha: NodeId,
    k: usize,
) -> Result<NodeId, AutodiffError> {
    let value = tape.value(alpha).clone();
    let (rows, n) = value.shape();
    let mut keep = Tensor::zeros(rows, n);
    let mut renorm = Tensor::zeros(rows, n);
    for r in 0..rows {
        let kept = topk_indices(value.row(r), k);
        let total: F = kept.iter().map(|&c| value.at(r, c)).sum();
        for &c in &kept {
            *keep.at_mut(r, c) = F::one();
        }
        let inv = F::one() / total;
        for c in 0..n {
            *renorm.at_mut(r, c) = inv;
        }
    }
    let keep_node = tape.leaf(keep)?;
    let renorm_node = tape.leaf(renorm)?;
    let masked = tape.multiply(alpha, keep_node)?;
    tape.multiply(masked, renorm_node)
}

/// Values from a single-sequence forward (no gradients retained).
pub struct ForwardValues<F: Scalar> {
    /// seq x vocab.
    pub logits: Tensor<F>,
    /// seq x segments.
    pub alpha: Tensor<F>,
    /// seq x dim.
    pub hidden: Tensor<F>,
    /// Per segment: seq x dim.
    pub segment_outputs: Vec<Tensor<F>>,
}

/// Convenience single-sequence forward returning values only.
pub fn forward_partitioned<F: Scalar>(
    config: &ModelConfig,
    params: &ParameterStore<F>,
    segmap: &SegmentMap,
    tokens: &[usize],
    topk: Option<usize>,
) -> Result<ForwardValues<F>, ModelError> {
    let batch = forward_batch(config, params, segmap, &[SequenceInput::plain(tokens)], topk)?;
    let pass = &batch.passes[0];
    Ok(ForwardValues {
        logits: batch.tape.value(pass.logits).clone(),
        alpha: batch.tape.value(pass.alpha).clone(),
        hidden: batch.tape.value(pass.hidden).clone(),
        segment_outputs: pass
            .segment_outputs
            .iter()
            .map(|&id| batch.tape.value(id).clone())
            .collect(),
    })
}
