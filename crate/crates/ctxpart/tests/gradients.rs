//! Finite-difference validation of the tape: seeded random graphs over the
//! full primitive set plus whole-model loss fixtures.

use ctxpart::gradcheck::{model_fixture_check, random_graph_check, GRAPH_OP_KINDS};
use std::collections::BTreeSet;

#[test]
fn random_graphs_match_central_differences() {
    let mut used: BTreeSet<&'static str> = BTreeSet::new();
    let mut worst = (0.0f64, 0u64);
    for seed in 0..40 {
        let report = random_graph_check(seed);
        if report.worst_rel_err > worst.0 {
            worst = (report.worst_rel_err, seed);
        }
        used.extend(report.ops_used);
    }
    assert!(
        worst.0 <= 1e-4,
        "worst relative error {} at seed {}",
        worst.0,
        worst.1
    );
    for kind in GRAPH_OP_KINDS {
        assert!(used.contains(kind), "op {kind} never appeared in 40 graphs");
    }
}

#[test]
fn model_loss_gradients_match_central_differences() {
    for seed in 0..6 {
        let worst = model_fixture_check(seed);
        assert!(worst <= 1e-4, "seed {seed}: worst relative error {worst}");
    }
}
