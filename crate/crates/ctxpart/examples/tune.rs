//! Scratch harness for sizing the acceptance fixtures. Not part of the
//! shipped API; run scenarios with `cargo run -p ctxpart --example tune <name>`.

use ctxpart::corpus::{generate_mixture, split, TaskId};
use ctxpart::metrics;
use ctxpart::trainer::{train, train_baseline, TrainConfig, WarmupMasks};
use std::time::Instant;

fn main() {
    let scenario = std::env::args().nth(1).unwrap_or_else(|| "speed".into());
    match scenario.as_str() {
        "speed" => speed(),
        "planted" => planted(),
        "planted2" => planted2(),
        "advantage" => advantage(),
        "copy" => copy_overtrain(),
        other => eprintln!("unknown scenario {other}"),
    }
}

fn speed() {
    let all = generate_mixture(&TaskId::ALL, 1, 120, (2, 10)).unwrap();
    let (train_split, _, _) = split(&all, (0.8, 0.1, 0.1), 1).unwrap();
    let config = TrainConfig {
        dim: 32,
        hidden: 64,
        segments: 4,
        steps: 200,
        recalib_period: 100,
        batch_size: 5,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let record = train(&config, &train_split).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "200 steps in {dt:.2}s = {:.1} ms/step; projected 5000 steps {:.0}s",
        dt / 200.0 * 1e3,
        dt / 200.0 * 5000.0
    );
    println!("final loss {:.4}", record.steps.last().unwrap().loss.total);
}

fn planted2() {
    use ctxpart::model::{forward_batch, init_params, SegmentMap, SequenceInput};
    use ctxpart::objective::{build_batch_objective, ObjectiveSpec, TargetSpan};
    use ctxpart::partitioner::AttributionMatrix;

    let hidden: usize = 16;
    let steps: u64 = 30;
    for seed in 0..5u64 {
        let copies = ctxpart::corpus::generate(TaskId::Copy, 100 + seed, 60, (2, 8)).unwrap();
        let mut corpus = Vec::new();
        for ex in &copies {
            corpus.push(ex.clone());
            corpus.push(
                ctxpart::corpus::Example::from_body(TaskId::Reverse, &ex.body_text()).unwrap(),
            );
        }
        let config = TrainConfig {
            dim: 16,
            hidden,
            segments: 2,
            steps,
            recalib_period: steps,
            batch_size: 8,
            learning_rate: 1e-4,
            hysteresis_margin: 0.05,
            seed,
            ..TrainConfig::default()
        };
        let mc = config.model_config();

        // Probe: per-unit attribution mass at the initial parameters over a
        // few unmasked batches, used to balance the planted groups.
        let params = init_params::<f64>(&mc, seed).unwrap();
        let probe_map = SegmentMap::round_robin(hidden, 2);
        let mut acc = AttributionMatrix::new(hidden, ctxpart::corpus::NUM_TASKS);
        for ex in corpus.iter().take(32) {
            let seqs = [ex.full_sequence()];
            let inputs: Vec<SequenceInput<f64>> =
                seqs.iter().map(|s| SequenceInput::plain(s)).collect();
            let fwd = forward_batch(&mc, &params, &probe_map, &inputs, None).unwrap();
            let mut tape = fwd.tape;
            let targets = vec![TargetSpan {
                positions: ex.loss_positions().collect(),
                labels: ex.target_tokens.clone(),
            }];
            let obj =
                build_batch_objective(&mut tape, &fwd.passes, &targets, 2, &ObjectiveSpec::default())
                    .unwrap();
            tape.backward(obj.total).unwrap();
            let pass = &fwd.passes[0];
            let w1 = tape.grad_or_zeros(pass.w1_t).transposed();
            let w2 = tape.grad_or_zeros(pass.w2_t).transposed();
            acc.accumulate(&w1, &w2, ex.task.code()).unwrap();
        }
        let mass: Vec<f64> = (0..hidden)
            .map(|j| (0..ctxpart::corpus::NUM_TASKS).map(|c| acc.value(j, c)).sum())
            .collect();

        // Within each initial segment (round-robin parity) pick the
        // half-size subset whose probe mass best matches its complement, so
        // the initial map splits every planted group as evenly as the probe
        // allows.
        let mut groups = vec![0usize; hidden];
        for parity in 0..2usize {
            let units: Vec<usize> = (0..hidden).filter(|j| j % 2 == parity).collect();
            let n = units.len();
            let total: f64 = units.iter().map(|&j| mass[j]).sum();
            let mut best = (f64::INFINITY, 0u32);
            for bits in 0u32..(1 << n) {
                if bits.count_ones() as usize != n / 2 {
                    continue;
                }
                let a: f64 = (0..n)
                    .filter(|&i| bits & (1 << i) != 0)
                    .map(|i| mass[units[i]])
                    .sum();
                let gap = (2.0 * a - total).abs();
                if gap < best.0 {
                    best = (gap, bits);
                }
            }
            for (i, &j) in units.iter().enumerate() {
                groups[j] = usize::from(best.1 & (1 << i) != 0);
            }
        }
        if groups[0] != 0 {
            for g in groups.iter_mut() {
                *g = 1 - *g;
            }
        }

        let config = TrainConfig {
            warmup: Some(WarmupMasks {
                steps,
                unit_groups: groups.clone(),
            }),
            ..config
        };
        let record = train(&config, &corpus).unwrap();
        let snap = &record.snapshots[0];
        println!(
            "seed {seed}: owner==planted {}  si_before {:?}  si_after {:?}",
            snap.owner == groups,
            snap.specialization_index_before,
            snap.specialization_index
        );
    }
}

fn planted() {
    let hidden: usize = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(32);
    let steps: u64 = std::env::args()
        .nth(3)
        .and_then(|s| s.parse().ok())
        .unwrap_or(100);
    let lr: f64 = std::env::args()
        .nth(4)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1e-4);
    for seed in 0..5u64 {
        // Same bodies under both tasks so early gradient mass is symmetric.
        let copies = ctxpart::corpus::generate(TaskId::Copy, 100 + seed, 60, (2, 8)).unwrap();
        let mut corpus = Vec::new();
        for ex in &copies {
            corpus.push(ex.clone());
            corpus.push(
                ctxpart::corpus::Example::from_body(TaskId::Reverse, &ex.body_text()).unwrap(),
            );
        }
        let groups: Vec<usize> = (0..hidden).map(|j| if j < hidden / 2 { 0 } else { 1 }).collect();
        let config = TrainConfig {
            dim: 16,
            hidden,
            segments: 2,
            steps,
            recalib_period: steps,
            batch_size: 8,
            learning_rate: lr,
            hysteresis_margin: 0.05,
            seed,
            warmup: Some(WarmupMasks {
                steps,
                unit_groups: groups.clone(),
            }),
            ..TrainConfig::default()
        };
        let record = train(&config, &corpus).unwrap();
        let snap = &record.snapshots[0];
        let planted: Vec<usize> = groups;
        println!(
            "seed {seed}: owner==planted {}  si_before {:?}  si_after {:?}",
            snap.owner == planted,
            snap.specialization_index_before,
            snap.specialization_index
        );
    }
}

fn advantage() {
    let seed_arg: u64 = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let steps: u64 = std::env::args()
        .nth(3)
        .and_then(|s| s.parse().ok())
        .unwrap_or(5000);
    let max_len: usize = std::env::args()
        .nth(4)
        .and_then(|s| s.parse().ok())
        .unwrap_or(10);
    let lr: f64 = std::env::args()
        .nth(5)
        .and_then(|s| s.parse().ok())
        .unwrap_or(3e-3);
    let count: usize = std::env::args()
        .nth(6)
        .and_then(|s| s.parse().ok())
        .unwrap_or(120);
    let lambda_entropy: f64 = std::env::args()
        .nth(7)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.0);
    let period: u64 = std::env::args()
        .nth(9)
        .and_then(|s| s.parse().ok())
        .unwrap_or(250);
    let min_units: usize = std::env::args()
        .nth(10)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1);
    let lambda_balance: f64 = std::env::args()
        .nth(11)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.01);
    let corpus_seed: u64 = std::env::args()
        .nth(12)
        .and_then(|s| s.parse().ok())
        .unwrap_or(40 + seed_arg);
    let warmup_steps: u64 = std::env::args()
        .nth(13)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let val_frac: f64 = std::env::args()
        .nth(14)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.1);
    let grad_clip: Option<f64> = std::env::args().nth(15).and_then(|s| s.parse().ok());
    let batch_size: usize = std::env::args()
        .nth(16)
        .and_then(|s| s.parse().ok())
        .unwrap_or(5);
    let flags: String = std::env::args().nth(17).unwrap_or_default();
    let static_map = flags.contains('s');
    let freeze_gate = flags.contains('f');
    let eval_count: usize = std::env::args()
        .nth(18)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let all = generate_mixture(&TaskId::ALL, corpus_seed, count, (2, max_len)).unwrap();
    let (train_split, mut val_split, _) =
        split(&all, (0.95 - val_frac, val_frac, 0.05), corpus_seed).unwrap();
    if eval_count > 0 {
        val_split =
            generate_mixture(&TaskId::ALL, corpus_seed + 1000, eval_count, (2, max_len)).unwrap();
    }
    let base = TrainConfig {
        dim: 32,
        hidden: 64,
        segments: 4,
        steps,
        recalib_period: period,
        batch_size,
        learning_rate: lr,
        lambda_entropy,
        lambda_balance,
        topk_routing: std::env::args().nth(8).and_then(|s| s.parse().ok()),
        seed: seed_arg,
        min_units_per_segment: min_units,
        warmup: (warmup_steps > 0).then(|| WarmupMasks {
            steps: warmup_steps,
            unit_groups: (0..64).map(|j| j % TaskId::ALL.len()).collect(),
        }),
        grad_clip,
        static_map,
        freeze_gate,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let part = train(&base, &train_split).unwrap();
    let part_secs = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let baseline = train_baseline(&base, &train_split).unwrap();
    let base_secs = t1.elapsed().as_secs_f64();

    if flags.contains('t') {
        let mc_t = base.model_config();
        let mut bc_t = mc_t.clone();
        bc_t.segments = 1;
        let pt = metrics::evaluate(
            &mc_t,
            &part.final_params,
            &part.final_map,
            &train_split,
            None,
            None,
        )
        .unwrap();
        let bt = metrics::evaluate(
            &bc_t,
            &baseline.final_params,
            &baseline.final_map,
            &train_split,
            None,
            None,
        )
        .unwrap();
        println!(
            "TRAIN aggregate: part acc {:.4} | base acc {:.4}",
            pt.aggregate.accuracy, bt.aggregate.accuracy
        );
        for (p, b) in pt.per_task.iter().zip(bt.per_task.iter()) {
            println!(
                "  TRAIN {:16} part {:.3} base {:.3} diff {:+.3}",
                p.task,
                p.accuracy,
                b.accuracy,
                p.accuracy - b.accuracy
            );
        }
        let pt1 = metrics::evaluate(
            &mc_t,
            &part.final_params,
            &part.final_map,
            &train_split,
            Some(1),
            None,
        )
        .unwrap();
        println!(
            "TRAIN top1: active_fraction {:.3} accuracy {:.4} (full {:.4})",
            pt1.aggregate.active_param_fraction, pt1.aggregate.accuracy, pt.aggregate.accuracy
        );
    }
    if let Some(snap) = part.snapshots.last() {
        println!(
            "last snapshot step {} churn {:.3} si {:?}",
            snap.step, snap.churn, snap.specialization_index
        );
        for (i, row) in snap.centroids.iter().enumerate() {
            let units = snap.owner.iter().filter(|&&o| o == i).count();
            let profile: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
            println!(
                "  seg {i}: units {units} alpha {:.3} profile [{}]",
                snap.alpha_mean[i],
                profile.join(", ")
            );
        }
    }
    let mc = base.model_config();
    let part_report = metrics::evaluate(
        &mc,
        &part.final_params,
        &part.final_map,
        &val_split,
        None,
        None,
    )
    .unwrap();
    let mut bc = mc.clone();
    bc.segments = 1;
    let base_report = metrics::evaluate(
        &bc,
        &baseline.final_params,
        &baseline.final_map,
        &val_split,
        None,
        None,
    )
    .unwrap();
    println!(
        "seed {seed_arg}: part {:.0}s base {:.0}s  train-loss part {:.3} base {:.3}",
        part_secs,
        base_secs,
        part.steps.last().unwrap().loss.task_loss,
        baseline.steps.last().unwrap().loss.task_loss
    );
    println!(
        "aggregate: part acc {:.4} ppl {:.3} | base acc {:.4} ppl {:.3}",
        part_report.aggregate.accuracy,
        part_report.aggregate.perplexity,
        base_report.aggregate.accuracy,
        base_report.aggregate.perplexity
    );
    for (p, b) in part_report.per_task.iter().zip(&base_report.per_task) {
        println!(
            "  {:16} part {:.3} base {:.3} diff {:+.3}",
            p.task,
            p.accuracy,
            b.accuracy,
            p.accuracy - b.accuracy
        );
    }
    // Top-1 routing resource proxy on the trained partitioned model.
    {
        let min_diff = part_report
            .per_task
            .iter()
            .zip(base_report.per_task.iter())
            .map(|(p, b)| p.accuracy - b.accuracy)
            .fold(f64::INFINITY, f64::min);
        let t1 = metrics::evaluate(
            &mc,
            &part.final_params,
            &part.final_map,
            &val_split,
            Some(1),
            None,
        )
        .unwrap();
        println!(
            "SUMMARY cseed={corpus_seed} seed={seed_arg} aggp={:.4} aggb={:.4} mindiff={:+.4} drop={:+.4} frac={:.3}",
            part_report.aggregate.accuracy,
            base_report.aggregate.accuracy,
            min_diff,
            part_report.aggregate.accuracy - t1.aggregate.accuracy,
            t1.aggregate.active_param_fraction,
        );
    }
    let top1 = metrics::evaluate(
        &mc,
        &part.final_params,
        &part.final_map,
        &val_split,
        Some(1),
        None,
    )
    .unwrap();
    println!(
        "top1: active_fraction {:.3} accuracy {:.4} (full {:.4})",
        top1.aggregate.active_param_fraction,
        top1.aggregate.accuracy,
        part_report.aggregate.accuracy
    );
}

fn copy_overtrain() {
    let all = generate_mixture(&[TaskId::Copy], 9, 400, (2, 8)).unwrap();
    let (train_split, val_split, _) = split(&all, (0.8, 0.1, 0.1), 9).unwrap();
    let config = TrainConfig {
        dim: 32,
        hidden: 32,
        segments: 1,
        steps: 3000,
        recalib_period: 1000,
        batch_size: 8,
        learning_rate: 3e-3,
        seed: 5,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let record = train(&config, &train_split).unwrap();
    let mc = config.model_config();
    let report = metrics::evaluate(
        &mc,
        &record.final_params,
        &record.final_map,
        &val_split,
        None,
        None,
    )
    .unwrap();
    println!(
        "copy: {:.0}s ppl {:.4} acc {:.3}",
        t0.elapsed().as_secs_f64(),
        report.aggregate.perplexity,
        report.aggregate.accuracy
    );
}
