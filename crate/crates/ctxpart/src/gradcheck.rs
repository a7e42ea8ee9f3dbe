//! Randomized gradient-verification harnesses shared by the test suites.
//!
//! Two checks live here so that unit, integration, and acceptance tests all
//! exercise one implementation:
//!
//! * [`random_graph_check`] builds a seeded random computation graph mixing
//!   every tape primitive, reduces it to a scalar that depends on every
//!   recorded op, and compares analytic gradients against central
//!   differences via [`finite_diff_check`].
//! * [`model_fixture_check`] does the same for the full partitioned model
//!   loss, differencing through every parameter coordinate of a small
//!   randomly-shaped model.
//!
//! Both panic on structural failures (shape mismatches, tape errors): those
//! are bugs in the harness or the library, not data-dependent outcomes.

use crate::autodiff::{finite_diff_check, AutodiffError, NodeId, Tape};
use crate::model::{forward_batch, init_params, ModelConfig, SegmentMap, SequenceInput};
use crate::objective::{build_batch_objective, ObjectiveSpec, TargetSpan};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use std::collections::BTreeSet;

/// One recorded primitive application; operands index the node pool
/// (leaves first, then step outputs in order).
#[derive(Debug, Clone)]
enum Step {
    MatMul(usize, usize),
    Add(usize, usize),
    Multiply(usize, usize),
    Relu(usize),
    Softmax(usize),
    Log(usize),
    Scale(usize, f64),
    Transpose(usize),
    ConcatRows(Vec<usize>),
    SelectRows(usize, Vec<usize>),
    CrossEntropy(usize, Vec<usize>),
    Mean(usize),
    Sum(usize),
}

impl Step {
    fn name(&self) -> &'static str {
        match self {
            Step::MatMul(..) => "matmul",
            Step::Add(..) => "add",
            Step::Multiply(..) => "multiply",
            Step::Relu(..) => "relu",
            Step::Softmax(..) => "softmax",
            Step::Log(..) => "log",
            Step::Scale(..) => "scale",
            Step::Transpose(..) => "transpose",
            Step::ConcatRows(..) => "concat_rows",
            Step::SelectRows(..) => "select_rows",
            Step::CrossEntropy(..) => "cross_entropy",
            Step::Mean(..) => "mean",
            Step::Sum(..) => "sum",
        }
    }

    fn operands(&self) -> Vec<usize> {
        match self {
            Step::MatMul(a, b) | Step::Add(a, b) | Step::Multiply(a, b) => vec![*a, *b],
            Step::Relu(a)
            | Step::Softmax(a)
            | Step::Log(a)
            | Step::Scale(a, _)
            | Step::Transpose(a)
            | Step::SelectRows(a, _)
            | Step::CrossEntropy(a, _)
            | Step::Mean(a)
            | Step::Sum(a) => vec![*a],
            Step::ConcatRows(parts) => parts.clone(),
        }
    }

    fn apply(&self, tape: &mut Tape<f64>, pool: &[NodeId]) -> Result<NodeId, AutodiffError> {
        match self {
            Step::MatMul(a, b) => tape.matmul(pool[*a], pool[*b]),
            Step::Add(a, b) => tape.add(pool[*a], pool[*b]),
            Step::Multiply(a, b) => tape.multiply(pool[*a], pool[*b]),
            Step::Relu(a) => tape.relu(pool[*a]),
            Step::Softmax(a) => tape.softmax(pool[*a]),
            Step::Log(a) => tape.log(pool[*a]),
            Step::Scale(a, c) => tape.scale(pool[*a], *c),
            Step::Transpose(a) => tape.transpose(pool[*a]),
            Step::ConcatRows(parts) => {
                let ids: Vec<NodeId> = parts.iter().map(|&p| pool[p]).collect();
                tape.concat_rows(&ids)
            }
            Step::SelectRows(a, idx) => tape.select_rows(pool[*a], idx.clone()),
            Step::CrossEntropy(a, targets) => tape.cross_entropy(pool[*a], targets.clone()),
            Step::Mean(a) => tape.mean(pool[*a]),
            Step::Sum(a) => tape.sum(pool[*a]),
        }
    }
}

/// Outcome of one random-graph gradient check.
pub struct GraphReport {
    /// Worst relative error over every leaf coordinate.
    pub worst_rel_err: f64,
    /// Primitive names the generated graph actually used.
    pub ops_used: BTreeSet<&'static str>,
}

struct PoolEntry {
    value: Tensor<f64>,
    from_softmax: bool,
    consumed: bool,
}

fn max_abs(t: &Tensor<f64>) -> f64 {
    t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn min_abs(t: &Tensor<f64>) -> f64 {
    t.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

/// Every kind the generator can emit, used both for kind-uniform selection
/// (so rare ops still show up) and for coverage assertions in the tests.
pub const GRAPH_OP_KINDS: [&str; 13] = [
    "matmul",
    "add",
    "multiply",
    "relu",
    "softmax",
    "log",
    "scale",
    "transpose",
    "concat_rows",
    "select_rows",
    "cross_entropy",
    "mean",
    "sum",
];

/// Enumerate the eligible instantiations of one op kind given current pool
/// values. Guards keep every op well inside its smooth region so central
/// differences stay valid: relu inputs away from the kink, log only on
/// softmax outputs with a floor, bounded magnitudes before matmul/multiply.
fn candidates_for(kind: &str, pool: &[PoolEntry], rng: &mut SplitMix64) -> Vec<Step> {
    let mut out = Vec::new();
    match kind {
        "matmul" => {
            for (i, a) in pool.iter().enumerate() {
                for (j, b) in pool.iter().enumerate() {
                    let inner = a.value.cols();
                    if inner == b.value.rows()
                        && max_abs(&a.value) * max_abs(&b.value) * inner as f64 <= 40.0
                    {
                        out.push(Step::MatMul(i, j));
                    }
                }
            }
        }
        "add" => {
            for (i, a) in pool.iter().enumerate() {
                for (j, b) in pool.iter().enumerate() {
                    if i == j {
                        continue;
                    }
                    let same = a.value.shape() == b.value.shape();
                    let bias = b.value.rows() == 1
                        && b.value.cols() == a.value.cols()
                        && a.value.rows() > 1;
                    if same || bias {
                        out.push(Step::Add(i, j));
                    }
                }
            }
        }
        "multiply" => {
            for (i, a) in pool.iter().enumerate() {
                for (j, b) in pool.iter().enumerate() {
                    if a.value.shape() == b.value.shape()
                        && max_abs(&a.value) * max_abs(&b.value) <= 40.0
                    {
                        out.push(Step::Multiply(i, j));
                    }
                }
            }
        }
        "relu" => {
            for (i, a) in pool.iter().enumerate() {
                if min_abs(&a.value) >= 1e-2 {
                    out.push(Step::Relu(i));
                }
            }
        }
        "softmax" => {
            for (i, a) in pool.iter().enumerate() {
                if max_abs(&a.value) <= 6.0 {
                    out.push(Step::Softmax(i));
                }
            }
        }
        "log" => {
            for (i, a) in pool.iter().enumerate() {
                if a.from_softmax && a.value.data().iter().all(|&v| v >= 0.05) {
                    out.push(Step::Log(i));
                }
            }
        }
        "scale" => {
            for i in 0..pool.len() {
                out.push(Step::Scale(i, 0.4 + 0.5 * rng.next_f64()));
            }
        }
        "transpose" => {
            for i in 0..pool.len() {
                out.push(Step::Transpose(i));
            }
        }
        "concat_rows" => {
            for (i, a) in pool.iter().enumerate() {
                for (j, b) in pool.iter().enumerate() {
                    if a.value.cols() == b.value.cols() {
                        out.push(Step::ConcatRows(vec![i, j]));
                    }
                }
            }
        }
        "select_rows" => {
            for (i, a) in pool.iter().enumerate() {
                let rows = a.value.rows();
                let count = 1 + rng.next_index(rows);
                let idx: Vec<usize> = (0..count).map(|_| rng.next_index(rows)).collect();
                out.push(Step::SelectRows(i, idx));
            }
        }
        "cross_entropy" => {
            for (i, a) in pool.iter().enumerate() {
                if a.value.cols() >= 2 && max_abs(&a.value) <= 8.0 {
                    let targets: Vec<usize> = (0..a.value.rows())
                        .map(|_| rng.next_index(a.value.cols()))
                        .collect();
                    out.push(Step::CrossEntropy(i, targets));
                }
            }
        }
        "mean" => {
            for i in 0..pool.len() {
                out.push(Step::Mean(i));
            }
        }
        "sum" => {
            for i in 0..pool.len() {
                out.push(Step::Sum(i));
            }
        }
        _ => unreachable!("unknown op kind {kind}"),
    }
    out
}

/// Generate a seeded random program: leaf tensors plus a step list whose
/// final step is a scalar that depends on every other step.
fn generate_program(seed: u64) -> (Vec<Tensor<f64>>, Vec<Step>) {
    let mut rng = SplitMix64::substream(seed, 0x4752_4144);
    let mut tape: Tape<f64> = Tape::new();
    let mut pool: Vec<PoolEntry> = Vec::new();
    let mut ids: Vec<NodeId> = Vec::new();
    let mut steps: Vec<Step> = Vec::new();

    let n_leaves = 2 + rng.next_index(3);
    let mut points = Vec::with_capacity(n_leaves);
    for _ in 0..n_leaves {
        let rows = 1 + rng.next_index(3);
        let cols = 1 + rng.next_index(3);
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| {
                let mag = 0.5 + rng.next_f64();
                if rng.next_f64() < 0.5 {
                    -mag
                } else {
                    mag
                }
            })
            .collect();
        let t = Tensor::new(rows, cols, data).expect("sized by construction");
        points.push(t.clone());
        ids.push(tape.leaf(t.clone()).expect("finite leaf"));
        pool.push(PoolEntry {
            value: t,
            from_softmax: false,
            consumed: false,
        });
    }

    let record = |step: Step,
                      tape: &mut Tape<f64>,
                      pool: &mut Vec<PoolEntry>,
                      ids: &mut Vec<NodeId>,
                      steps: &mut Vec<Step>| {
        let id = step.apply(tape, ids).expect("generator picked a legal op");
        for opnd in step.operands() {
            pool[opnd].consumed = true;
        }
        pool.push(PoolEntry {
            value: tape.value(id).clone(),
            from_softmax: matches!(step, Step::Softmax(_)),
            consumed: false,
        });
        ids.push(id);
        steps.push(step);
    };

    let n_ops = 6 + rng.next_index(7);
    for _ in 0..n_ops {
        // Pick uniformly among kinds that have at least one legal
        // instantiation, then uniformly among those instantiations; this
        // keeps rarely-eligible kinds (log, cross-entropy) represented.
        let by_kind: Vec<Vec<Step>> = GRAPH_OP_KINDS
            .iter()
            .map(|kind| candidates_for(kind, &pool, &mut rng))
            .filter(|c| !c.is_empty())
            .collect();
        if by_kind.is_empty() {
            break;
        }
        let kind = &by_kind[rng.next_index(by_kind.len())];
        let step = kind[rng.next_index(kind.len())].clone();
        record(step, &mut tape, &mut pool, &mut ids, &mut steps);
    }

    // Reduce every unconsumed node to a scalar, then fold the scalars with
    // add so the loss depends on every recorded op.
    let sinks: Vec<usize> = pool
        .iter()
        .enumerate()
        .filter(|(_, e)| !e.consumed)
        .map(|(i, _)| i)
        .collect();
    let mut scalars = Vec::new();
    for i in sinks {
        if pool[i].value.shape() == (1, 1) {
            scalars.push(i);
            continue;
        }
        let reduce = if rng.next_f64() < 0.5 && max_abs(&pool[i].value) <= 40.0 {
            Step::Sum(i)
        } else {
            Step::Mean(i)
        };
        record(reduce, &mut tape, &mut pool, &mut ids, &mut steps);
        scalars.push(pool.len() - 1);
    }
    let mut acc = scalars[0];
    for &s in &scalars[1..] {
        record(
            Step::Add(acc, s),
            &mut tape,
            &mut pool,
            &mut ids,
            &mut steps,
        );
        acc = pool.len() - 1;
    }
    if steps.is_empty() {
        // Degenerate fallback: a single mean keeps the program non-empty.
        record(Step::Mean(acc), &mut tape, &mut pool, &mut ids, &mut steps);
    }
    (points, steps)
}

/// Build the seeded random graph and compare analytic against central-
/// difference gradients for every leaf coordinate.
pub fn random_graph_check(seed: u64) -> GraphReport {
    let (points, steps) = generate_program(seed);
    let ops_used: BTreeSet<&'static str> = steps.iter().map(|s| s.name()).collect();
    let replay = |tape: &mut Tape<f64>, leaves: &[NodeId]| -> Result<NodeId, AutodiffError> {
        let mut pool: Vec<NodeId> = leaves.to_vec();
        for step in &steps {
            let id = step.apply(tape, &pool)?;
            pool.push(id);
        }
        Ok(*pool.last().expect("program is non-empty"))
    };
    let worst_rel_err =
        finite_diff_check(replay, &points, 1e-5).expect("graph replays cleanly");
    GraphReport {
        worst_rel_err,
        ops_used,
    }
}

/// Central-difference check of the full partitioned-model loss with respect
/// to every parameter coordinate of a small seeded model (d ≤ 8, H ≤ 12,
/// N ≤ 3). Returns the worst relative error.
///
/// Gradient magnitudes below 1e-6 are compared against that floor instead:
/// at loss scale ~ln(vocab) the cancellation noise of a central difference is
/// ~1e-11, so a tighter floor would measure noise, not correctness.
pub fn model_fixture_check(seed: u64) -> f64 {
    let mut rng = SplitMix64::substream(seed, 0x4d46_4958);
    let config = ModelConfig {
        vocab: 60,
        dim: [4, 6, 8][rng.next_index(3)],
        hidden: [6, 9, 12][rng.next_index(3)],
        segments: 1 + rng.next_index(3),
        seq_max: 16,
    };
    let params = init_params::<f64>(&config, rng.next_u64()).expect("valid fixture config");
    let owner: Vec<usize> = (0..config.hidden)
        .map(|_| rng.next_index(config.segments))
        .collect();
    let segmap = SegmentMap { owner };

    let batch = 2;
    let sequences: Vec<Vec<usize>> = (0..batch)
        .map(|_| {
            let len = 4 + rng.next_index(4);
            (0..len).map(|_| rng.next_index(config.vocab)).collect()
        })
        .collect();
    let targets: Vec<TargetSpan> = sequences
        .iter()
        .map(|seq| {
            let m = 2 + rng.next_index(2);
            let mut positions: Vec<usize> =
                (0..m).map(|_| rng.next_index(seq.len())).collect();
            positions.sort_unstable();
            positions.dedup();
            let labels = positions
                .iter()
                .map(|_| rng.next_index(config.vocab))
                .collect();
            TargetSpan { positions, labels }
        })
        .collect();
    let spec = ObjectiveSpec {
        lambda_balance: 0.01,
        lambda_entropy: if rng.next_f64() < 0.5 { 0.1 } else { 0.0 },
    };

    // Optional top-k routing, kept only when every token's selection margin
    // dwarfs the probe perturbation so the selection cannot flip mid-check.
    let mut topk = if config.segments > 1 && rng.next_f64() < 0.4 {
        Some(1 + rng.next_index(config.segments - 1))
    } else {
        None
    };
    if let Some(k) = topk {
        let inputs: Vec<SequenceInput<f64>> =
            sequences.iter().map(|s| SequenceInput::plain(s)).collect();
        let fwd = forward_batch(&config, &params, &segmap, &inputs, None)
            .expect("fixture forward succeeds");
        let mut margin = f64::INFINITY;
        for pass in &fwd.passes {
            let alpha = fwd.tape.value(pass.alpha);
            for r in 0..alpha.rows() {
                let mut row: Vec<f64> = alpha.row(r).to_vec();
                row.sort_by(|a, b| b.partial_cmp(a).expect("finite alpha"));
                margin = margin.min(row[k - 1] - row[k]);
            }
        }
        if margin < 1e-3 {
            topk = None;
        }
    }

    let loss = |p: &crate::model::ParameterStore<f64>| -> f64 {
        let inputs: Vec<SequenceInput<f64>> =
            sequences.iter().map(|s| SequenceInput::plain(s)).collect();
        let fwd =
            forward_batch(&config, p, &segmap, &inputs, topk).expect("fixture forward succeeds");
        let mut tape = fwd.tape;
        let obj = build_batch_objective(&mut tape, &fwd.passes, &targets, config.segments, &spec)
            .expect("fixture objective builds");
        obj.breakdown(&tape).total
    };

    let inputs: Vec<SequenceInput<f64>> =
        sequences.iter().map(|s| SequenceInput::plain(s)).collect();
    let fwd =
        forward_batch(&config, &params, &segmap, &inputs, topk).expect("fixture forward succeeds");
    let mut tape = fwd.tape;
    let obj = build_batch_objective(&mut tape, &fwd.passes, &targets, config.segments, &spec)
        .expect("fixture objective builds");
    tape.backward(obj.total).expect("fixture backward succeeds");
    let analytic: Vec<Tensor<f64>> = fwd
        .params
        .in_region_order()
        .iter()
        .map(|&id| tape.grad_or_zeros(id))
        .collect();

    let eps = 1e-5;
    let mut worst = 0.0f64;
    for (region, grad) in (0..8).zip(&analytic) {
        let len = grad.len();
        for k in 0..len {
            let mut probe = params.clone();
            {
                let slot = &mut probe.regions_mut()[region].1.data_mut()[k];
                *slot += eps;
            }
            let up = loss(&probe);
            {
                let slot = &mut probe.regions_mut()[region].1.data_mut()[k];
                *slot -= 2.0 * eps;
            }
            let down = loss(&probe);
            assert!(
                up.is_finite() && down.is_finite(),
                "non-finite finite-difference probe"
            );
            let central = (up - down) / (2.0 * eps);
            let err = (grad.data()[k] - central).abs() / f64::max(1e-6, central.abs());
            worst = worst.max(err);
        }
    }
    worst
}
