//! Reverse-mode automatic differentiation over dense matrices.
//!
//! Define-by-run: each training step builds a fresh [`Tape`], records
//! primitive ops during the forward pass, and replays them in reverse for
//! exact gradients. Nodes are appended in topological order by construction,
//! so the backward pass is a single reverse sweep that visits every node
//! once. All arithmetic is sequential with a fixed order; identical tapes
//! produce bitwise-identical gradients.
//!
//! Primitives: matmul, add (equal shapes, or a 1xC bias row against mxC),
//! multiply, relu, softmax (row-wise), log, cross-entropy-with-targets,
//! mean, sum, scale, concat-rows, select-rows, transpose.

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};
use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("backward requires a scalar loss node, got shape {shape:?}")]
    NonScalarLoss { shape: (usize, usize) },
    #[error("tape already ran backward; call reset_grads first")]
    BackwardPending,
    #[error("{op}: wrong number of inputs, expected {expected}, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("cross-entropy: {0}")]
    InvalidTargets(String),
    #[error("concat-rows: inputs must be nonempty with equal column counts")]
    BadConcat,
    #[error("finite-diff probe returned non-finite value at coordinate {0}")]
    NonFiniteProbe(usize),
}

/// Primitive op kinds, parameterized where the op needs static data
/// (targets, row indices, scale constants).
#[derive(Debug, Clone)]
pub enum OpSpec<F: Scalar> {
    Matmul,
    Add,
    Multiply,
    Relu,
    Softmax,
    Log,
    CrossEntropy(Vec<usize>),
    Mean,
    Sum,
    Scale(F),
    ConcatRows,
    SelectRows(Vec<usize>),
    Transpose,
}

#[derive(Debug, Clone)]
enum Recorded<F: Scalar> {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBiasRow(NodeId, NodeId),
    Multiply(NodeId, NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    Log(NodeId),
    CrossEntropy { logits: NodeId, targets: Vec<usize> },
    Mean(NodeId),
    Sum(NodeId),
    Scale(NodeId, F),
    ConcatRows(Vec<NodeId>),
    SelectRows(NodeId, Vec<usize>),
    Transpose(NodeId),
}

struct Node<F: Scalar> {
    op: Recorded<F>,
    value: Tensor<F>,
    grad: Option<Tensor<F>>,
}

/// Wengert tape: ordered op records plus per-node gradient slots.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    backward_done: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id].value
    }

    /// Gradient accumulated at `id` by the last backward pass. `None` when
    /// the node does not influence the loss.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.nodes[id].grad.as_ref()
    }

    pub fn grad_or_zeros(&self, id: NodeId) -> Tensor<F> {
        match &self.nodes[id].grad {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.nodes[id].value.shape();
                Tensor::zeros(r, c)
            }
        }
    }

    /// Insert a leaf (input/parameter/constant). Rejects non-finite data.
    pub fn leaf(&mut self, value: Tensor<F>) -> Result<NodeId, AutodiffError> {
        value.ensure_finite("leaf")?;
        Ok(self.push(Recorded::Leaf, value))
    }

    fn push(&mut self, op: Recorded<F>, value: Tensor<F>) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
        });
        self.nodes.len() - 1
    }

    fn finish(&mut self, op: Recorded<F>, value: Tensor<F>) -> Result<NodeId, AutodiffError> {
        value.ensure_finite(op_name(&op))?;
        Ok(self.push(op, value))
    }

    /// Dynamic dispatch over the primitive set; the typed methods below are
    /// thin wrappers. Shape errors name the op kind and both shapes.
    pub fn apply(&mut self, spec: OpSpec<F>, inputs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        match spec {
            OpSpec::Matmul => self.matmul(expect2("matmul", inputs)?.0, expect2("matmul", inputs)?.1),
            OpSpec::Add => self.add(expect2("add", inputs)?.0, expect2("add", inputs)?.1),
            OpSpec::Multiply => {
                self.multiply(expect2("multiply", inputs)?.0, expect2("multiply", inputs)?.1)
            }
            OpSpec::Relu => self.relu(expect1("relu", inputs)?),
            OpSpec::Softmax => self.softmax(expect1("softmax", inputs)?),
            OpSpec::Log => self.log(expect1("log", inputs)?),
            OpSpec::CrossEntropy(targets) => {
                self.cross_entropy(expect1("cross-entropy", inputs)?, targets)
            }
            OpSpec::Mean => self.mean(expect1("mean", inputs)?),
            OpSpec::Sum => self.sum(expect1("sum", inputs)?),
            OpSpec::Scale(c) => self.scale(expect1("scale", inputs)?, c),
            OpSpec::ConcatRows => self.concat_rows(inputs),
            OpSpec::SelectRows(indices) => self.select_rows(expect1("select-rows", inputs)?, indices),
            OpSpec::Transpose => self.transpose(expect1("transpose", inputs)?),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let value = self.nodes[a].value.matmul(&self.nodes[b].value)?;
        self.finish(Recorded::Matmul(a, b), value)
    }

    /// Elementwise add. As the one sanctioned broadcast, a `1xC` right operand
    /// is added to every row of an `mxC` left operand (bias row).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() == vb.shape() {
            let value = va.zip_map(vb, "add", |x, y| x + y)?;
            return self.finish(Recorded::Add(a, b), value);
        }
        if vb.rows() == 1 && vb.cols() == va.cols() {
            let mut data = Vec::with_capacity(va.len());
            let bias = vb.data();
            for r in 0..va.rows() {
                for (c, &bv) in bias.iter().enumerate() {
                    data.push(va.at(r, c) + bv);
                }
            }
            let value = Tensor::new(va.rows(), va.cols(), data)?;
            return self.finish(Recorded::AddBiasRow(a, b), value);
        }
        Err(TensorError::ShapeMismatch {
            op: "add",
            lhs: va.shape(),
            rhs: vb.shape(),
        }
        .into())
    }

    pub fn multiply(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let value = self.nodes[a].value.zip_map(&self.nodes[b].value, "multiply", |x, y| x * y)?;
        self.finish(Recorded::Multiply(a, b), value)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let value = self.nodes[a].value.map(|v| if v > F::zero() { v } else { F::zero() });
        self.finish(Recorded::Relu(a), value)
    }

    /// Row-wise softmax with max subtraction; each output row sums to one.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let va = &self.nodes[a].value;
        let mut value = Tensor::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            let row = va.row(r);
            softmax_row(row, &mut value.data_mut()[r * va.cols()..(r + 1) * va.cols()]);
        }
        self.finish(Recorded::Softmax(a), value)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let value = self.nodes[a].value.map(|v| v.ln());
        self.finish(Recorded::Log(a), value)
    }

    /// Per-row cross-entropy of logits against integer targets, fused with
    /// the internal softmax for stability: `ce_r = logsumexp(z_r) - z_r[t_r]`.
    /// Output is an `mx1` column.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: Vec<usize>,
    ) -> Result<NodeId, AutodiffError> {
        let v = &self.nodes[logits].value;
        if targets.len() != v.rows() {
            return Err(AutodiffError::InvalidTargets(format!(
                "{} targets for {} rows",
                targets.len(),
                v.rows()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v.cols()) {
            return Err(AutodiffError::InvalidTargets(format!(
                "target id {bad} out of range for {} classes",
                v.cols()
            )));
        }
        let mut data = Vec::with_capacity(v.rows());
        for (r, &t) in targets.iter().enumerate() {
            let row = v.row(r);
            data.push(log_sum_exp(row) - row[t]);
        }
        let value = Tensor::new(v.rows(), 1, data)?;
        self.finish(Recorded::CrossEntropy { logits, targets }, value)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let v = &self.nodes[a].value;
        let n = F::from_f64(v.len() as f64);
        let total: F = v.data().iter().copied().sum();
        self.finish(Recorded::Mean(a), Tensor::scalar(total / n))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let total: F = self.nodes[a].value.data().iter().copied().sum();
        self.finish(Recorded::Sum(a), Tensor::scalar(total))
    }

    pub fn scale(&mut self, a: NodeId, c: F) -> Result<NodeId, AutodiffError> {
        let value = self.nodes[a].value.map(|v| v * c);
        self.finish(Recorded::Scale(a, c), value)
    }

    /// Stack inputs vertically; all must share a column count.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::BadConcat);
        }
        let cols = self.nodes[parts[0]].value.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = &self.nodes[p].value;
            if v.cols() != cols {
                return Err(AutodiffError::BadConcat);
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Tensor::new(rows, cols, data)?;
        self.finish(Recorded::ConcatRows(parts.to_vec()), value)
    }

    /// Gather rows by index; a repeated index accumulates gradient.
    pub fn select_rows(
        &mut self,
        a: NodeId,
        indices: Vec<usize>,
    ) -> Result<NodeId, AutodiffError> {
        let v = &self.nodes[a].value;
        if let Some(&bad) = indices.iter().find(|&&i| i >= v.rows()) {
            return Err(TensorError::RowOutOfBounds {
                op: "select-rows",
                index: bad,
                rows: v.rows(),
            }
            .into());
        }
        let mut data = Vec::with_capacity(indices.len() * v.cols());
        for &i in &indices {
            data.extend_from_slice(v.row(i));
        }
        let value = Tensor::new(indices.len(), v.cols(), data)?;
        self.finish(Recorded::SelectRows(a, indices), value)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let value = self.nodes[a].value.transposed();
        self.finish(Recorded::Transpose(a), value)
    }

    /// Clear all gradient slots so the tape can run backward again.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    fn accumulate(&mut self, id: NodeId, delta: &Tensor<F>) {
        match &mut self.nodes[id].grad {
            Some(g) => {
                for (dst, &src) in g.data_mut().iter_mut().zip(delta.data()) {
                    *dst += src;
                }
            }
            None => self.nodes[id].grad = Some(delta.clone()),
        }
    }

    /// Reverse sweep from a scalar loss node. Gradients land in each node's
    /// slot; query leaves (or interior nodes) with [`Tape::grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<(), AutodiffError> {
        if self.backward_done {
            return Err(AutodiffError::BackwardPending);
        }
        let shape = self.nodes[loss].value.shape();
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarLoss { shape });
        }
        self.backward_done = true;
        self.nodes[loss].grad = Some(Tensor::scalar(F::one()));

        for id in (0..=loss).rev() {
            let Some(g) = self.nodes[id].grad.clone() else {
                continue;
            };
            match self.nodes[id].op.clone() {
                Recorded::Leaf => {}
                Recorded::Matmul(a, b) => {
                    let da = g.matmul(&self.nodes[b].value.transposed()).expect("matmul grad");
                    let db = self.nodes[a].value.transposed().matmul(&g).expect("matmul grad");
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Recorded::Add(a, b) => {
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                }
                Recorded::AddBiasRow(a, b) => {
                    self.accumulate(a, &g);
                    let mut db = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            *db.at_mut(0, c) += g.at(r, c);
                        }
                    }
                    self.accumulate(b, &db);
                }
                Recorded::Multiply(a, b) => {
                    let da = g.zip_map(&self.nodes[b].value, "multiply", |x, y| x * y).unwrap();
                    let db = g.zip_map(&self.nodes[a].value, "multiply", |x, y| x * y).unwrap();
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Recorded::Relu(a) => {
                    let da = g
                        .zip_map(&self.nodes[a].value, "relu", |gv, xv| {
                            if xv > F::zero() {
                                gv
                            } else {
                                F::zero()
                            }
                        })
                        .unwrap();
                    self.accumulate(a, &da);
                }
                Recorded::Softmax(a) => {
                    // dZ_rj = y_rj * (g_rj - sum_k g_rk * y_rk)
                    let y = self.nodes[id].value.clone();
                    let mut da = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let mut dot = F::zero();
                        for c in 0..y.cols() {
                            dot += g.at(r, c) * y.at(r, c);
                        }
                        for c in 0..y.cols() {
                            *da.at_mut(r, c) = y.at(r, c) * (g.at(r, c) - dot);
                        }
                    }
                    self.accumulate(a, &da);
                }
                Recorded::Log(a) => {
                    let da = g
                        .zip_map(&self.nodes[a].value, "log", |gv, xv| gv / xv)
                        .unwrap();
                    self.accumulate(a, &da);
                }
                Recorded::CrossEntropy { logits, targets } => {
                    // dZ_row = g_row * (softmax(z_row) - onehot(target))
                    let z = self.nodes[logits].value.clone();
                    let mut da = Tensor::zeros(z.rows(), z.cols());
                    let mut probs = vec![F::zero(); z.cols()];
                    for (r, &t) in targets.iter().enumerate() {
                        softmax_row(z.row(r), &mut probs);
                        let gr = g.at(r, 0);
                        for c in 0..z.cols() {
                            let indicator = if c == t { F::one() } else { F::zero() };
                            *da.at_mut(r, c) = gr * (probs[c] - indicator);
                        }
                    }
                    self.accumulate(logits, &da);
                }
                Recorded::Mean(a) => {
                    let n = self.nodes[a].value.len();
                    let (r, c) = self.nodes[a].value.shape();
                    let gv = g.at(0, 0) / F::from_f64(n as f64);
                    self.accumulate(a, &Tensor::filled(r, c, gv));
                }
                Recorded::Sum(a) => {
                    let (r, c) = self.nodes[a].value.shape();
                    self.accumulate(a, &Tensor::filled(r, c, g.at(0, 0)));
                }
                Recorded::Scale(a, cst) => {
                    self.accumulate(a, &g.map(|v| v * cst));
                }
                Recorded::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (r, c) = self.nodes[p].value.shape();
                        let mut dp = Tensor::zeros(r, c);
                        dp.data_mut()
                            .copy_from_slice(&g.data()[offset * c..(offset + r) * c]);
                        self.accumulate(p, &dp);
                        offset += r;
                    }
                }
                Recorded::SelectRows(a, indices) => {
                    let (r, c) = self.nodes[a].value.shape();
                    let mut da = Tensor::zeros(r, c);
                    for (out_r, &src_r) in indices.iter().enumerate() {
                        for col in 0..c {
                            *da.at_mut(src_r, col) += g.at(out_r, col);
                        }
                    }
                    self.accumulate(a, &da);
                }
                Recorded::Transpose(a) => {
                    self.accumulate(a, &g.transposed());
                }
            }
        }
        Ok(())
    }
}

fn op_name<F: Scalar>(op: &Recorded<F>) -> &'static str {
    match op {
        Recorded::Leaf => "leaf",
        Recorded::Matmul(..) => "matmul",
        Recorded::Add(..) | Recorded::AddBiasRow(..) => "add",
        Recorded::Multiply(..) => "multiply",
        Recorded::Relu(..) => "relu",
        Recorded::Softmax(..) => "softmax",
        Recorded::Log(..) => "log",
        Recorded::CrossEntropy { .. } => "cross-entropy",
        Recorded::Mean(..) => "mean",
        Recorded::Sum(..) => "sum",
        Recorded::Scale(..) => "scale",
        Recorded::ConcatRows(..) => "concat-rows",
        Recorded::SelectRows(..) => "select-rows",
        Recorded::Transpose(..) => "transpose",
    }
}

fn expect1(op: &'static str, inputs: &[NodeId]) -> Result<NodeId, AutodiffError> {
    if inputs.len() != 1 {
        return Err(AutodiffError::Arity {
            op,
            expected: 1,
            got: inputs.len(),
        });
    }
    Ok(inputs[0])
}

fn expect2(op: &'static str, inputs: &[NodeId]) -> Result<(NodeId, NodeId), AutodiffError> {
    if inputs.len() != 2 {
        return Err(AutodiffError::Arity {
            op,
            expected: 2,
            got: inputs.len(),
        });
    }
    Ok((inputs[0], inputs[1]))
}

/// Softmax of one row into `out`, max-subtracted.
pub fn softmax_row<F: Scalar>(row: &[F], out: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut denom = F::zero();
    for (o, &v) in out.iter_mut().zip(row.iter()) {
        let e = (v - max).exp();
        *o = e;
        denom += e;
    }
    for o in out.iter_mut() {
        *o = *o / denom;
    }
}

pub fn log_sum_exp<F: Scalar>(row: &[F]) -> F {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let sum: F = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Max over leaf coordinates of the relative disagreement between the tape's
/// analytic gradient and a central finite difference with absolute step
/// `epsilon`: `|analytic - central| / max(1e-8, |central|)`.
///
/// `build` reconstructs the scalar loss from leaf nodes on a fresh tape, so
/// the numeric side never touches the backward pass it is checking.
pub fn finite_diff_check<F, B>(
    build: B,
    points: &[Tensor<F>],
    epsilon: F,
) -> Result<F, AutodiffError>
where
    F: Scalar,
    B: Fn(&mut Tape<F>, &[NodeId]) -> Result<NodeId, AutodiffError>,
{
    let eval = |pts: &[Tensor<F>]| -> Result<F, AutodiffError> {
        let mut tape = Tape::new();
        let leaves = pts
            .iter()
            .map(|p| tape.leaf(p.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let loss = build(&mut tape, &leaves)?;
        Ok(tape.value(loss).scalar_value()?)
    };

    let mut tape = Tape::new();
    let leaves = points
        .iter()
        .map(|p| tape.leaf(p.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let loss = build(&mut tape, &leaves)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<F>> = leaves.iter().map(|&l| tape.grad_or_zeros(l)).collect();

    let floor = F::from_f64(1e-8);
    let two = F::from_f64(2.0);
    let mut worst = F::zero();
    let mut probed = points.to_vec();
    for (li, point) in points.iter().enumerate() {
        for k in 0..point.len() {
            let orig = point.data()[k];
            probed[li].data_mut()[k] = orig + epsilon;
            let up = eval(&probed)?;
            probed[li].data_mut()[k] = orig - epsilon;
            let down = eval(&probed)?;
            probed[li].data_mut()[k] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(AutodiffError::NonFiniteProbe(k));
            }
            let central = (up - down) / (two * epsilon);
            let err = (analytic[li].data()[k] - central).abs() / floor.max(central.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::new(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_forward() {
        let mut tape = Tape::new();
        let eye = tape.leaf(t(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])).unwrap();
        let a = tape.leaf(t(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let out = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(out), tape.value(a));
    }

    #[test]
    fn relu_forward() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 3, &[-1.0, 0.0, 2.0])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_two_logits() {
        // closed form e^x / sum(e^x) at [1, 0]
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 2, &[1.0, 0.0])).unwrap();
        let y = tape.softmax(x).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 0.7311).abs() < 1e-4);
        assert!((v[1] - 0.2689).abs() < 1e-4);
        assert!((v[0] + v[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn square_gradient() {
        // d(x*x)/dx at 3 is 6
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0)).unwrap();
        let sq = tape.multiply(x, x).unwrap();
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(2, 3, &[1.0, -2.0, 0.5, 4.0, 9.0, -1.0])).unwrap();
        let s = tape.sum(a).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_diff() {
        let z = t(1, 5, &[0.31, -0.92, 1.4, 0.07, -0.55]);
        let err = finite_diff_check(
            |tape, leaves| {
                let ce = tape.cross_entropy(leaves[0], vec![2])?;
                tape.mean(ce)
            },
            &[z],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn linear_function_finite_diff_is_exact() {
        let x = t(1, 4, &[0.3, -1.2, 0.8, 2.0]);
        let c = t(4, 1, &[2.0, -1.0, 0.5, 3.0]);
        let err = finite_diff_check(
            |tape, leaves| {
                let cst = tape.leaf(c.clone())?;
                let prod = tape.matmul(leaves[0], cst)?;
                tape.sum(prod)
            },
            &[x],
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-9, "relative error {err}");
    }

    #[test]
    fn quadratic_finite_diff_within_truncation_bound() {
        let x = Tensor::scalar(1.0);
        let err = finite_diff_check(
            |tape, leaves| {
                let sq = tape.multiply(leaves[0], leaves[0])?;
                tape.sum(sq)
            },
            &[x],
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-6, "relative error {err}");
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(2, 2, &[1.0; 4])).unwrap();
        let r = tape.relu(a).unwrap();
        assert_eq!(
            tape.backward(r).unwrap_err(),
            AutodiffError::NonScalarLoss { shape: (2, 2) }
        );
    }

    #[test]
    fn second_backward_requires_reset() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(2.0)).unwrap();
        let s = tape.sum(a).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.backward(s).unwrap_err(), AutodiffError::BackwardPending);
        tape.reset_grads();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[1.0]);
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let a = tape.leaf(t(2, 2, &[0.3, -0.7, 1.1, 0.05])).unwrap();
            let b = tape.leaf(t(2, 2, &[0.9, 0.2, -0.4, 0.6])).unwrap();
            let m = tape.matmul(a, b).unwrap();
            let r = tape.relu(m).unwrap();
            let s = tape.softmax(r).unwrap();
            let loss = tape.mean(s).unwrap();
            tape.backward(loss).unwrap();
            (
                tape.grad(a).unwrap().data().to_vec(),
                tape.grad(b).unwrap().data().to_vec(),
            )
        };
        let (ga1, gb1) = run();
        let (ga2, gb2) = run();
        // bitwise
        assert_eq!(ga1, ga2);
        assert_eq!(gb1, gb2);
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        // backward(a*f + b*g) == a*backward(f) + b*backward(g)
        let x = t(2, 2, &[0.4, -0.3, 0.8, 1.2]);
        let (a, b) = (2.5, -0.75);

        let grads_of = |combine: &dyn Fn(&mut Tape<f64>, NodeId) -> NodeId| {
            let mut tape = Tape::new();
            let leaf = tape.leaf(x.clone()).unwrap();
            let loss = combine(&mut tape, leaf);
            tape.backward(loss).unwrap();
            tape.grad(leaf).unwrap().data().to_vec()
        };

        let f = |tape: &mut Tape<f64>, leaf: NodeId| {
            let sq = tape.multiply(leaf, leaf).unwrap();
            tape.sum(sq).unwrap()
        };
        let g = |tape: &mut Tape<f64>, leaf: NodeId| {
            let r = tape.relu(leaf).unwrap();
            tape.mean(r).unwrap()
        };

        let gf = grads_of(&f);
        let gg = grads_of(&g);
        let gboth = grads_of(&|tape, leaf| {
            let lf = f(tape, leaf);
            let lg = g(tape, leaf);
            let sf = tape.scale(lf, a).unwrap();
            let sg = tape.scale(lg, b).unwrap();
            tape.add(sf, sg).unwrap()
        });

        for i in 0..gboth.len() {
            assert!((gboth[i] - (a * gf[i] + b * gg[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn select_rows_accumulates_repeated_indices() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let sel = tape.select_rows(a, vec![1, 1, 0]).unwrap();
        let s = tape.sum(sel).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn bias_row_add_broadcasts_and_reduces() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(2, 3, &[0.0; 6])).unwrap();
        let bias = tape.leaf(t(1, 3, &[1.0, 2.0, 3.0])).unwrap();
        let out = tape.add(a, bias).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let s = tape.sum(out).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(bias).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_rows_splits_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(1, 2, &[1.0, 2.0])).unwrap();
        let b = tape.leaf(t(2, 2, &[3.0, 4.0, 5.0, 6.0])).unwrap();
        let cat = tape.concat_rows(&[a, b]).unwrap();
        assert_eq!(tape.value(cat).shape(), (3, 2));
        let sc = tape.scale(cat, 2.0).unwrap();
        let s = tape.sum(sc).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[2.0; 4]);
    }

    #[test]
    fn transpose_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let at = tape.transpose(a).unwrap();
        assert_eq!(tape.value(at).shape(), (3, 2));
        let w = tape.leaf(t(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0])).unwrap();
        let prod = tape.multiply(at, w).unwrap();
        let s = tape.sum(prod).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn non_finite_leaf_rejected() {
        let mut tape = Tape::<f64>::new();
        let bad = Tensor::new(1, 1, vec![f64::INFINITY]).unwrap();
        assert!(tape.leaf(bad).is_err());
    }

    #[test]
    fn cross_entropy_nonnegative_and_softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let z = tape
            .leaf(t(3, 4, &[0.3, -2.0, 1.5, 0.0, 4.0, 4.0, 4.0, 4.0, -1.0, 2.0, 0.5, 0.25]))
            .unwrap();
        let sm = tape.softmax(z).unwrap();
        for r in 0..3 {
            let row_sum: f64 = tape.value(sm).row(r).iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
        }
        let ce = tape.cross_entropy(z, vec![2, 0, 1]).unwrap();
        for &v in tape.value(ce).data() {
            assert!(v >= 0.0);
        }
    }
}
