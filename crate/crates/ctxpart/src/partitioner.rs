//! Gradient-driven segmentation of the feed-forward hidden units.
//!
//! During training each hidden unit accumulates, per context class, the
//! gradient magnitude of its in/out weight rows. Periodically the units are
//! re-clustered over their L1-normalized attribution profiles (seeded
//! k-means with deterministic restarts), with a hysteresis margin so the
//! ownership map tracks real shifts in usage instead of thrashing on noise.
//!
//! All clustering arithmetic runs in f64 regardless of the model scalar, and
//! every tie (nearest centroid, farthest unit, restart choice) breaks toward
//! the lowest index, so the same inputs give the same map on any platform.

use crate::model::SegmentMap;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use thiserror::Error;

/// Deterministic k-means restarts; enough to reliably reach the global
/// within-cluster SSE minimum at the unit counts used here.
pub const KMEANS_RESTARTS: u64 = 64;
const KMEANS_MAX_ITERS: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum PartitionError {
    #[error("gradient shape {got:?} does not match expected {expected:?} for {which}")]
    GradShape {
        which: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("context id {id} out of range for {contexts} contexts")]
    BadContext { id: usize, contexts: usize },
    #[error("cannot split {units} units into {segments} segments of at least {min_units}")]
    TooFewUnits {
        units: usize,
        segments: usize,
        min_units: usize,
    },
    #[error("segment map length {got} does not match {expected} units")]
    MapLength { expected: usize, got: usize },
    #[error("invalid recalibration policy: {0}")]
    BadPolicy(String),
    #[error("attribution matrix is empty (no units or contexts)")]
    Empty,
}

/// Accumulated per-unit, per-context gradient magnitudes since the last
/// recalibration. Entries only grow between resets.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMatrix {
    units: usize,
    contexts: usize,
    /// Row-major units x contexts.
    a: Vec<f64>,
    /// Number of accumulate calls seen per context.
    step_counts: Vec<u64>,
}

impl AttributionMatrix {
    pub fn new(units: usize, contexts: usize) -> AttributionMatrix {
        AttributionMatrix {
            units,
            contexts,
            a: vec![0.0; units * contexts],
            step_counts: vec![0; contexts],
        }
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn contexts(&self) -> usize {
        self.contexts
    }

    pub fn value(&self, unit: usize, context: usize) -> f64 {
        self.a[unit * self.contexts + context]
    }

    pub fn step_counts(&self) -> &[u64] {
        &self.step_counts
    }

    pub fn is_all_zero(&self) -> bool {
        self.a.iter().all(|&v| v == 0.0)
    }

    /// Add one observation: `a[j][context] += |dL/dW1 row j| + |dL/dW2 col j|`
    /// (L2 norms). `w1_grad` must be units x dim, `w2_grad` dim x units.
    pub fn accumulate<F: Scalar>(
        &mut self,
        w1_grad: &Tensor<F>,
        w2_grad: &Tensor<F>,
        context: usize,
    ) -> Result<(), PartitionError> {
        if context >= self.contexts {
            return Err(PartitionError::BadContext {
                id: context,
                contexts: self.contexts,
            });
        }
        if w1_grad.rows() != self.units {
            return Err(PartitionError::GradShape {
                which: "ffn_in gradient",
                expected: (self.units, w1_grad.cols()),
                got: w1_grad.shape(),
            });
        }
        if w2_grad.cols() != self.units {
            return Err(PartitionError::GradShape {
                which: "ffn_out gradient",
                expected: (w2_grad.rows(), self.units),
                got: w2_grad.shape(),
            });
        }
        for j in 0..self.units {
            let row_sq: f64 = w1_grad
                .row(j)
                .iter()
                .map(|&g| {
                    let g = g.to_f64();
                    g * g
                })
                .sum();
            let mut col_sq = 0.0;
            for r in 0..w2_grad.rows() {
                let g = w2_grad.at(r, j).to_f64();
                col_sq += g * g;
            }
            self.a[j * self.contexts + context] += row_sq.sqrt() + col_sq.sqrt();
        }
        self.step_counts[context] += 1;
        Ok(())
    }

    /// Per-unit L1-normalized context profiles; a unit with no attribution
    /// yet maps to the uniform profile.
    pub fn normalized_profiles(&self) -> Vec<Vec<f64>> {
        (0..self.units)
            .map(|j| {
                let row = &self.a[j * self.contexts..(j + 1) * self.contexts];
                let mass: f64 = row.iter().sum();
                if mass == 0.0 {
                    vec![1.0 / self.contexts as f64; self.contexts]
                } else {
                    row.iter().map(|&v| v / mass).collect()
                }
            })
            .collect()
    }

    pub fn reset(&mut self) {
        self.a.iter_mut().for_each(|v| *v = 0.0);
        self.step_counts.iter_mut().for_each(|c| *c = 0);
    }
}

/// When and how eagerly segment boundaries are recalibrated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecalibrationPolicy {
    pub period_steps: usize,
    /// Minimum Euclidean improvement toward the candidate centroid before a
    /// unit changes owner. 0 disables hysteresis; +inf freezes the map.
    pub hysteresis_margin: f64,
    pub min_units_per_segment: usize,
}

impl RecalibrationPolicy {
    pub fn validate(&self) -> Result<(), PartitionError> {
        if self.period_steps == 0 {
            return Err(PartitionError::BadPolicy(
                "period_steps must be >= 1".into(),
            ));
        }
        if self.hysteresis_margin.is_nan() || self.hysteresis_margin < 0.0 {
            return Err(PartitionError::BadPolicy(format!(
                "hysteresis margin must be >= 0, got {}",
                self.hysteresis_margin
            )));
        }
        if self.min_units_per_segment == 0 {
            return Err(PartitionError::BadPolicy(
                "min_units_per_segment must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

impl Default for RecalibrationPolicy {
    fn default() -> Self {
        RecalibrationPolicy {
            period_steps: 100,
            hysteresis_margin: 0.05,
            min_units_per_segment: 1,
        }
    }
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

fn centroids_of(profiles: &[Vec<f64>], owner: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dims = profiles[0].len();
    let mut sums = vec![vec![0.0; dims]; k];
    let mut counts = vec![0usize; k];
    for (j, p) in profiles.iter().enumerate() {
        let s = owner[j];
        counts[s] += 1;
        for (acc, &v) in sums[s].iter_mut().zip(p) {
            *acc += v;
        }
    }
    for (s, sum) in sums.iter_mut().enumerate() {
        if counts[s] > 0 {
            let inv = 1.0 / counts[s] as f64;
            sum.iter_mut().for_each(|v| *v *= inv);
        }
    }
    sums
}

fn sse_of(profiles: &[Vec<f64>], owner: &[usize], centroids: &[Vec<f64>]) -> f64 {
    profiles
        .iter()
        .enumerate()
        .map(|(j, p)| dist_sq(p, &centroids[owner[j]]))
        .sum()
}

/// Relabel so segment ids appear in ascending order of each cluster's first
/// member index.
fn canonicalize(owner: &mut [usize], k: usize) {
    let mut relabel = vec![usize::MAX; k];
    let mut next = 0;
    for o in owner.iter_mut() {
        if relabel[*o] == usize::MAX {
            relabel[*o] = next;
            next += 1;
        }
        *o = relabel[*o];
    }
}

/// One Lloyd run from the given initial centroids; returns (owner, sse).
/// Empty clusters are repaired by donating the unit farthest from its own
/// centroid (ties to the lowest unit index).
fn lloyd(profiles: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> (Vec<usize>, f64) {
    let h = profiles.len();
    let k = centroids.len();
    let mut owner = vec![0usize; h];
    let mut prev_sse = f64::INFINITY;

    for _iter in 0..KMEANS_MAX_ITERS {
        // Assignment: nearest centroid, ties to the lowest centroid index.
        let mut changed = false;
        for (j, p) in profiles.iter().enumerate() {
            let mut best = 0;
            let mut best_d = dist_sq(p, &centroids[0]);
            for (s, c) in centroids.iter().enumerate().skip(1) {
                let d = dist_sq(p, c);
                if d < best_d {
                    best_d = d;
                    best = s;
                }
            }
            if owner[j] != best {
                owner[j] = best;
                changed = true;
            }
        }

        // Repair empty clusters before recomputing centroids.
        loop {
            let mut counts = vec![0usize; k];
            for &o in &owner {
                counts[o] += 1;
            }
            let Some(empty) = (0..k).find(|&s| counts[s] == 0) else {
                break;
            };
            let current = centroids_of(profiles, &owner, k);
            let donor = (0..h)
                .filter(|&j| counts[owner[j]] > 1)
                .max_by(|&a, &b| {
                    let da = dist_sq(&profiles[a], &current[owner[a]]);
                    let db = dist_sq(&profiles[b], &current[owner[b]]);
                    da.partial_cmp(&db)
                        .expect("profiles are finite")
                        .then(b.cmp(&a))
                })
                .expect("h >= k guarantees a donor");
            owner[donor] = empty;
            changed = true;
        }

        centroids = centroids_of(profiles, &owner, k);
        let sse = sse_of(profiles, &owner, &centroids);
        debug_assert!(
            sse <= prev_sse + 1e-9,
            "k-means iteration increased SSE: {prev_sse} -> {sse}"
        );
        prev_sse = sse;
        if !changed {
            break;
        }
    }
    (owner, prev_sse)
}

/// Seeded k-means++ initial centroids.
fn kmeanspp_init(
    profiles: &[Vec<f64>],
    k: usize,
    rng: &mut crate::rng::SplitMix64,
) -> Vec<Vec<f64>> {
    let h = profiles.len();
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(profiles[rng.next_index(h)].clone());
    while centroids.len() < k {
        let d2: Vec<f64> = profiles
            .iter()
            .map(|p| {
                centroids
                    .iter()
                    .map(|c| dist_sq(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total == 0.0 {
            rng.next_index(h)
        } else {
            let mut target = rng.next_f64() * total;
            let mut chosen = h - 1;
            for (j, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = j;
                    break;
                }
                target -= w;
            }
            chosen
        };
        centroids.push(profiles[pick].clone());
    }
    centroids
}

/// Move units into any segment below `min_units`, taking the donor farthest
/// from its own centroid among segments that can spare one (ties to the
/// lowest unit index). A map that already satisfies the floor is returned
/// untouched.
fn enforce_min_units(
    profiles: &[Vec<f64>],
    owner: &mut Vec<usize>,
    k: usize,
    min_units: usize,
) {
    loop {
        let mut counts = vec![0usize; k];
        for &o in owner.iter() {
            counts[o] += 1;
        }
        let Some(starved) = (0..k).find(|&s| counts[s] < min_units) else {
            return;
        };
        let centroids = centroids_of(profiles, owner, k);
        let donor = (0..owner.len())
            .filter(|&j| counts[owner[j]] > min_units)
            .max_by(|&a, &b| {
                let da = dist_sq(&profiles[a], &centroids[owner[a]]);
                let db = dist_sq(&profiles[b], &centroids[owner[b]]);
                da.partial_cmp(&db)
                    .expect("profiles are finite")
                    .then(b.cmp(&a))
            })
            .expect("precondition units >= k * min_units guarantees a donor");
        owner[donor] = starved;
    }
}

fn check_cluster_preconditions(
    acc: &AttributionMatrix,
    segments: usize,
    min_units: usize,
) -> Result<(), PartitionError> {
    if acc.units == 0 || acc.contexts == 0 {
        return Err(PartitionError::Empty);
    }
    if segments == 0 || min_units == 0 {
        return Err(PartitionError::BadPolicy(
            "segments and min_units_per_segment must be >= 1".into(),
        ));
    }
    if acc.units < segments * min_units {
        return Err(PartitionError::TooFewUnits {
            units: acc.units,
            segments,
            min_units,
        });
    }
    Ok(())
}

/// k-means over normalized profiles with [`KMEANS_RESTARTS`] seeded
/// restarts; the lowest-SSE run wins (ties: lexicographically smallest
/// canonical map). Labels are canonical (ascending first-member index).
pub fn cluster(
    acc: &AttributionMatrix,
    segments: usize,
    seed: u64,
    min_units: usize,
) -> Result<SegmentMap, PartitionError> {
    check_cluster_preconditions(acc, segments, min_units)?;
    let profiles = acc.normalized_profiles();
    let (mut owner, _) = best_clustering(&profiles, segments, seed, &[]);
    enforce_min_units(&profiles, &mut owner, segments, min_units);
    canonicalize(&mut owner, segments);
    Ok(SegmentMap { owner })
}

/// Run the restart schedule plus any warm-start centroid sets; return the
/// best canonicalized assignment and its SSE.
fn best_clustering(
    profiles: &[Vec<f64>],
    k: usize,
    seed: u64,
    warm_starts: &[Vec<Vec<f64>>],
) -> (Vec<usize>, f64) {
    let mut best: Option<(Vec<usize>, f64)> = None;
    let consider = |owner: Vec<usize>, sse: f64, best: &mut Option<(Vec<usize>, f64)>| {
        let mut owner = owner;
        canonicalize(&mut owner, k);
        let replace = match best {
            None => true,
            Some((cur_owner, cur_sse)) => {
                sse < *cur_sse - 1e-12 || ((sse - *cur_sse).abs() <= 1e-12 && owner < *cur_owner)
            }
        };
        if replace {
            *best = Some((owner, sse));
        }
    };

    for restart in 0..KMEANS_RESTARTS {
        let mut rng = crate::rng::SplitMix64::substream(seed, restart);
        let init = kmeanspp_init(profiles, k, &mut rng);
        let (owner, sse) = lloyd(profiles, init);
        consider(owner, sse, &mut best);
    }
    for warm in warm_starts {
        let (owner, sse) = lloyd(profiles, warm.clone());
        consider(owner, sse, &mut best);
    }
    best.expect("at least one restart ran")
}

/// Mean squared distance between each unit's normalized profile and its
/// segment's centroid: within-cluster SSE divided by the unit count.
pub fn dispersion(acc: &AttributionMatrix, segmap: &SegmentMap) -> Result<f64, PartitionError> {
    if segmap.owner.len() != acc.units {
        return Err(PartitionError::MapLength {
            expected: acc.units,
            got: segmap.owner.len(),
        });
    }
    if acc.units == 0 {
        return Err(PartitionError::Empty);
    }
    let profiles = acc.normalized_profiles();
    let k = segmap.owner.iter().copied().max().unwrap_or(0) + 1;
    let centroids = centroids_of(&profiles, &segmap.owner, k);
    Ok(sse_of(&profiles, &segmap.owner, &centroids) / acc.units as f64)
}

/// Everything a recalibration produces: the adopted map plus telemetry.
#[derive(Debug, Clone, PartialEq)]
pub struct RecalibrationOutcome {
    pub map: SegmentMap,
    /// The unconstrained clustering the hysteresis rule filtered.
    pub candidate: SegmentMap,
    /// Centroids of the adopted map over the pre-reset profiles.
    pub centroids: Vec<Vec<f64>>,
    /// Dispersion of the adopted map over the pre-reset profiles.
    pub dispersion: f64,
    /// Fraction of units whose owner changed from the old map.
    pub churn: f64,
}

/// Re-cluster and adopt changes that clear the hysteresis margin, then
/// reset the accumulator.
///
/// The margin rule compares Euclidean distances: unit j moves to its
/// candidate segment only when `d(p_j, candidate centroid)` beats
/// `d(p_j, current centroid)` by more than the margin. The endpoints are
/// exact by construction: a non-finite margin returns the old map untouched,
/// a zero margin returns the clustering itself. Candidate labels are aligned
/// to the old map by greatest member overlap before the comparison so that
/// "moves" means a real ownership change, not a relabeling.
pub fn recalibrate(
    old: &SegmentMap,
    acc: &mut AttributionMatrix,
    segments: usize,
    seed: u64,
    policy: &RecalibrationPolicy,
) -> Result<RecalibrationOutcome, PartitionError> {
    policy.validate()?;
    check_cluster_preconditions(acc, segments, policy.min_units_per_segment)?;
    if old.owner.len() != acc.units {
        return Err(PartitionError::MapLength {
            expected: acc.units,
            got: old.owner.len(),
        });
    }
    let min_units = policy.min_units_per_segment;
    let tau = policy.hysteresis_margin;
    let profiles = acc.normalized_profiles();

    let finish = |owner: Vec<usize>,
                  candidate: SegmentMap,
                  acc: &mut AttributionMatrix|
     -> RecalibrationOutcome {
        let centroids = centroids_of(&profiles, &owner, segments);
        let sse = sse_of(&profiles, &owner, &centroids);
        let map = SegmentMap { owner };
        let churn = map.churn_from(old);
        let dispersion = sse / acc.units as f64;
        acc.reset();
        RecalibrationOutcome {
            map,
            candidate,
            centroids,
            dispersion,
            churn,
        }
    };

    if !tau.is_finite() {
        let candidate = SegmentMap {
            owner: old.owner.clone(),
        };
        return Ok(finish(old.owner.clone(), candidate, acc));
    }

    // Warm-starting from the old assignment's centroids guarantees the
    // candidate never scores worse than the map it replaces.
    let old_centroids = centroids_of(&profiles, &old.owner, segments);
    let (cand_owner, _) = best_clustering(&profiles, segments, seed, &[old_centroids.clone()]);
    let mut candidate_canonical = cand_owner.clone();
    enforce_min_units(&profiles, &mut candidate_canonical, segments, min_units);
    canonicalize(&mut candidate_canonical, segments);
    let candidate = SegmentMap {
        owner: candidate_canonical,
    };

    if tau == 0.0 {
        return Ok(finish(candidate.owner.clone(), candidate.clone(), acc));
    }

    // Align candidate labels to old labels by greatest overlap.
    let aligned = align_labels(&candidate.owner, &old.owner, segments);
    let cand_centroids = centroids_of(&profiles, &aligned, segments);

    let mut owner = old.owner.clone();
    for j in 0..acc.units {
        if aligned[j] == old.owner[j] {
            continue;
        }
        let d_cur = dist_sq(&profiles[j], &old_centroids[old.owner[j]]).sqrt();
        let d_new = dist_sq(&profiles[j], &cand_centroids[aligned[j]]).sqrt();
        if d_new < d_cur - tau {
            owner[j] = aligned[j];
        }
    }
    enforce_min_units(&profiles, &mut owner, segments, min_units);
    Ok(finish(owner, candidate, acc))
}

/// Permute `candidate` labels to maximize member overlap with `reference`,
/// greedily by largest overlap (ties toward lower label ids).
fn align_labels(candidate: &[usize], reference: &[usize], k: usize) -> Vec<usize> {
    let mut overlap = vec![vec![0usize; k]; k];
    for (&c, &r) in candidate.iter().zip(reference) {
        overlap[c][r] += 1;
    }
    let mut cand_taken = vec![false; k];
    let mut ref_taken = vec![false; k];
    let mut relabel = vec![usize::MAX; k];
    for _ in 0..k {
        let mut best: Option<(usize, usize, usize)> = None;
        for (c, row) in overlap.iter().enumerate() {
            if cand_taken[c] {
                continue;
            }
            for (r, &count) in row.iter().enumerate() {
                if ref_taken[r] {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((_, _, best_count)) => count > best_count,
                };
                if better {
                    best = Some((c, r, count));
                }
            }
        }
        let (c, r, _) = best.expect("k pairs to assign");
        relabel[c] = r;
        cand_taken[c] = true;
        ref_taken[r] = true;
    }
    candidate.iter().map(|&c| relabel[c]).collect()
}
