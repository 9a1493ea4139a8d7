//! k-means market-state clustering of epoch matrices, snapshot sequences
//! with a fixed first epoch, typical states and transition detection.
//!
//! Points are vectorized full K x K matrices scaled by 1/K, so squared
//! point distances equal the squared scaled Euclidean matrix distance and
//! the clustering geometry matches the distance matrices exactly.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{ReducedRankCorr, SymmetricMatrix};

/// k-means configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_k() -> usize {
    2
}
fn default_restarts() -> usize {
    32
}
fn default_max_iters() -> usize {
    300
}
fn default_tol() -> f64 {
    1e-8
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            k: default_k(),
            restarts: default_restarts(),
            max_iters: default_max_iters(),
            seed: 0,
            tol: default_tol(),
        }
    }
}

/// Result of one best-of-restarts k-means run.
#[derive(Debug, Clone)]
pub struct StateAssignment {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after each Lloyd iteration of the winning restart.
    pub inertia_history: Vec<f64>,
    /// Set when the run could not produce k separated clusters (for
    /// example identical points), in which case a single populated
    /// cluster is reported.
    pub degenerate: bool,
}

impl StateAssignment {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Member indices per cluster.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.k()];
        for (i, &l) in self.labels.iter().enumerate() {
            m[l].push(i);
        }
        m
    }
}

/// Vectorize a reduced-rank matrix for clustering: full K x K entries
/// scaled by 1/K.
pub fn vectorize_for_clustering(m: &ReducedRankCorr) -> Vec<f64> {
    let k = m.dim();
    let inv_k = 1.0 / k as f64;
    let mut v = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            v.push(m.matrix.get(i, j) * inv_k);
        }
    }
    v
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    (best, best_d)
}

fn kmeans_pp_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.gen_range(0..points.len());
    centroids.push(points[first].clone());
    while centroids.len() < k {
        let weights: Vec<f64> = points
            .iter()
            .map(|p| nearest(p, &centroids).1)
            .collect();
        let total: f64 = weights.iter().sum();
        let idx = if total > 0.0 {
            WeightedIndex::new(&weights).unwrap().sample(rng)
        } else {
            // All remaining points coincide with a centroid.
            rng.gen_range(0..points.len())
        };
        centroids.push(points[idx].clone());
    }
    centroids
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut labels = Vec::with_capacity(points.len());
    let mut inertia = 0.0;
    for p in points {
        let (l, d) = nearest(p, centroids);
        labels.push(l);
        inertia += d;
    }
    (labels, inertia)
}

fn update_centroids(points: &[Vec<f64>], labels: &[usize], k: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let dim = points[0].len();
    let mut centroids = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (acc, v) in centroids[l].iter_mut().zip(p) {
            *acc += v;
        }
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        if n > 0 {
            let inv = 1.0 / n as f64;
            c.iter_mut().for_each(|v| *v *= inv);
        }
    }
    (centroids, counts)
}

/// Reseed each empty cluster to the point currently farthest from its
/// assigned centroid. Deterministic: farthest distance wins, ties go to the
/// lowest point index.
fn reseed_empty(
    points: &[Vec<f64>],
    labels: &mut [usize],
    centroids: &mut [Vec<f64>],
    counts: &[usize],
) -> bool {
    let mut counts = counts.to_vec();
    let mut changed = false;
    for c in 0..centroids.len() {
        if counts[c] > 0 {
            continue;
        }
        let mut far_idx = None;
        let mut far_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            // Only steal from clusters that keep at least one other member.
            if counts[labels[i]] <= 1 {
                continue;
            }
            let d = sq_dist(p, &centroids[labels[i]]);
            if d > far_d {
                far_d = d;
                far_idx = Some(i);
            }
        }
        if let Some(i) = far_idx {
            if far_d > 0.0 {
                counts[labels[i]] -= 1;
                labels[i] = c;
                counts[c] = 1;
                centroids[c] = points[i].clone();
                changed = true;
            }
        }
    }
    changed
}

fn lloyd_run(points: &[Vec<f64>], cfg: &ClusterConfig, seed: u64) -> StateAssignment {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = cfg.k;
    let mut centroids = kmeans_pp_init(points, k, &mut rng);
    let mut history = Vec::new();
    let mut labels;
    let mut inertia = f64::INFINITY;
    let mut degenerate = false;
    loop {
        let (l, i) = assign(points, &centroids);
        labels = l;
        let (mut new_centroids, counts) = update_centroids(points, &labels, k);
        if counts.iter().any(|&c| c == 0) {
            let moved = reseed_empty(points, &mut labels, &mut new_centroids, &counts);
            if !moved {
                degenerate = true;
            }
            let (rebuilt, _) = update_centroids(points, &labels, k);
            new_centroids = rebuilt;
        }
        centroids = new_centroids;
        history.push(i);
        let improved = inertia - i;
        inertia = i;
        if history.len() >= cfg.max_iters {
            break;
        }
        if improved.is_finite() && improved <= cfg.tol * inertia.max(f64::MIN_POSITIVE) {
            break;
        }
    }
    // Final consistency: labels against final centroids, then centroids as
    // exact member means, then the reported inertia against those means.
    let (final_labels, _) = assign(points, &centroids);
    let (final_centroids, counts) = update_centroids(points, &final_labels, k);
    let centroids = final_centroids;
    let labels = final_labels;
    let mut final_inertia = 0.0;
    for (p, &l) in points.iter().zip(&labels) {
        final_inertia += sq_dist(p, &centroids[l]);
    }
    history.push(final_inertia);
    if counts.iter().filter(|&&c| c > 0).count() < k {
        degenerate = true;
    }
    StateAssignment {
        labels,
        centroids,
        inertia: final_inertia,
        inertia_history: history,
        degenerate,
    }
}

/// Best-of-restarts Lloyd k-means with k-means++ seeding. Restart r uses
/// seed `cfg.seed + r`; the lowest final inertia wins, ties go to the lowest
/// restart index, so the result is independent of scheduling.
pub fn kmeans(points: &[Vec<f64>], cfg: &ClusterConfig) -> Result<StateAssignment> {
    if cfg.k == 0 {
        return Err(Error::config("k must be >= 1".to_string()));
    }
    if points.len() < cfg.k {
        return Err(Error::DegenerateClustering(format!(
            "{} points for k = {}",
            points.len(),
            cfg.k
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::config("points of mixed dimension".to_string()));
    }
    let mut distinct: Vec<&[f64]> = Vec::new();
    for p in points {
        if !distinct.iter().any(|q| *q == p.as_slice()) {
            distinct.push(p);
        }
        if distinct.len() >= cfg.k {
            break;
        }
    }
    if distinct.len() < cfg.k {
        return Err(Error::DegenerateClustering(format!(
            "only {} distinct points for k = {}",
            distinct.len(),
            cfg.k
        )));
    }
    let runs: Vec<StateAssignment> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| lloyd_run(points, cfg, cfg.seed.wrapping_add(r as u64)))
        .collect();
    let best = runs
        .into_iter()
        .enumerate()
        .min_by(|(ia, a), (ib, b)| a.inertia.total_cmp(&b.inertia).then(ia.cmp(ib)))
        .map(|(_, a)| a)
        .expect("restarts >= 1");
    Ok(best)
}

/// One k-means run over a growing epoch prefix, labels aligned to the
/// previous snapshot.
#[derive(Debug, Clone)]
pub struct Snapshot {
    /// Number of epochs clustered: epochs[0..n_epochs].
    pub n_epochs: usize,
    pub assignment: StateAssignment,
    /// Permutation applied to the raw cluster ids: raw label l became
    /// `alignment[l]`.
    pub alignment: Vec<usize>,
}

/// Sequence of snapshots with a fixed first epoch and growing last epoch.
#[derive(Debug, Clone)]
pub struct SnapshotSequence {
    pub snapshots: Vec<Snapshot>,
}

/// All permutations of 0..k in lexicographic order, so ties in the
/// alignment cost resolve to the identity first.
fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(remaining: &mut Vec<usize>, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if remaining.is_empty() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..remaining.len() {
            let v = remaining.remove(i);
            prefix.push(v);
            rec(remaining, prefix, out);
            prefix.pop();
            remaining.insert(i, v);
        }
    }
    let mut out = Vec::new();
    rec(&mut (0..k).collect(), &mut Vec::new(), &mut out);
    out
}

/// Relabeling that best matches `current` centroids onto `previous` ones by
/// minimal total squared centroid distance (exhaustive over permutations;
/// k is small).
fn align_labels(previous: &[Vec<f64>], current: &[Vec<f64>]) -> Vec<usize> {
    let k = current.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(k) {
        // perm[l] is the aligned id for raw label l.
        let cost: f64 = (0..k).map(|l| sq_dist(&current[l], &previous[perm[l]])).sum();
        match &best {
            Some((c, _)) if *c <= cost => {}
            _ => best = Some((cost, perm)),
        }
    }
    best.expect("at least one permutation").1
}

fn apply_alignment(a: &StateAssignment, alignment: &[usize]) -> StateAssignment {
    let k = a.k();
    let mut centroids = vec![Vec::new(); k];
    for l in 0..k {
        centroids[alignment[l]] = a.centroids[l].clone();
    }
    StateAssignment {
        labels: a.labels.iter().map(|&l| alignment[l]).collect(),
        centroids,
        inertia: a.inertia,
        inertia_history: a.inertia_history.clone(),
        degenerate: a.degenerate,
    }
}

/// Cluster growing prefixes of the epoch list: snapshot i covers epochs
/// [0, start_count + i). A degenerate clustering (fewer distinct matrices
/// than k) degrades to a single populated cluster flagged as degenerate.
pub fn snapshot_sequence(
    epoch_points: &[Vec<f64>],
    cfg: &ClusterConfig,
    start_count: usize,
) -> Result<SnapshotSequence> {
    if start_count < cfg.k {
        return Err(Error::config(format!(
            "start_count {start_count} below k = {}",
            cfg.k
        )));
    }
    if start_count > epoch_points.len() {
        return Err(Error::config(format!(
            "start_count {start_count} exceeds {} epochs",
            epoch_points.len()
        )));
    }
    let identity: Vec<usize> = (0..cfg.k).collect();
    let mut snapshots = Vec::new();
    let mut previous_centroids: Option<Vec<Vec<f64>>> = None;
    for n_epochs in start_count..=epoch_points.len() {
        let prefix = &epoch_points[..n_epochs];
        let raw = match kmeans(prefix, cfg) {
            Ok(a) => a,
            Err(Error::DegenerateClustering(_)) => degenerate_assignment(prefix, cfg.k),
            Err(e) => return Err(e),
        };
        let alignment = match &previous_centroids {
            Some(prev) => align_labels(prev, &raw.centroids),
            None => identity.clone(),
        };
        let aligned = apply_alignment(&raw, &alignment);
        previous_centroids = Some(aligned.centroids.clone());
        snapshots.push(Snapshot {
            n_epochs,
            assignment: aligned,
            alignment,
        });
    }
    Ok(SnapshotSequence { snapshots })
}

fn degenerate_assignment(points: &[Vec<f64>], k: usize) -> StateAssignment {
    let (centroid0, _) = update_centroids(points, &vec![0; points.len()], 1);
    let mut centroids = vec![centroid0[0].clone(); k];
    for c in centroids.iter_mut().skip(1) {
        c.clone_from(&centroid0[0]);
    }
    let mut inertia = 0.0;
    for p in points {
        inertia += sq_dist(p, &centroids[0]);
    }
    StateAssignment {
        labels: vec![0; points.len()],
        centroids,
        inertia,
        inertia_history: vec![inertia],
        degenerate: true,
    }
}

/// Element-wise average of the matrices of one market state.
#[derive(Debug, Clone)]
pub struct TypicalState {
    pub state: usize,
    pub matrix: SymmetricMatrix,
    pub member_count: usize,
}

pub fn typical_state(assignment: &StateAssignment, mats: &[ReducedRankCorr]) -> Vec<TypicalState> {
    assert_eq!(assignment.labels.len(), mats.len());
    let mut out = Vec::new();
    for (state, members) in assignment.members().into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let dim = mats[members[0]].dim();
        let inv = 1.0 / members.len() as f64;
        let matrix = SymmetricMatrix::from_upper_fn(dim, |i, j| {
            members.iter().map(|&m| mats[m].matrix.get(i, j)).sum::<f64>() * inv
        });
        out.push(TypicalState {
            state,
            matrix,
            member_count: members.len(),
        });
    }
    out
}

/// First appearance of a previously unpopulated market state.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TransitionReport {
    /// Index into the snapshot sequence where a new state first gained a
    /// member, if any.
    pub snapshot: Option<usize>,
    /// Aligned label of the new state.
    pub label: Option<usize>,
    /// Epoch index of its first member.
    pub epoch: Option<usize>,
    /// Whether the new state keeps members in every later snapshot.
    pub persists: bool,
}

impl TransitionReport {
    pub fn is_empty(&self) -> bool {
        self.snapshot.is_none()
    }
}

/// Scan a snapshot sequence for the emergence of a new market state.
///
/// A state emerges at the first snapshot where an aligned label either
/// becomes populated after being empty in all earlier snapshots, or is
/// populated exclusively by epochs added since the previous snapshot. The
/// second clause is what fires in practice: with empty-cluster reseeding
/// every label carries members even on homogeneous data, so a regime
/// switch shows up as a cluster made only of post-switch epochs (the
/// {n-1, 1} snapshot pattern), not as a literally empty label filling up.
pub fn detect_transition(seq: &SnapshotSequence) -> TransitionReport {
    let mut seen: Vec<bool> = Vec::new();
    for (si, snap) in seq.snapshots.iter().enumerate() {
        let k = snap.assignment.k();
        if seen.len() < k {
            seen.resize(k, false);
        }
        let mut populated = vec![false; k];
        for &l in &snap.assignment.labels {
            populated[l] = true;
        }
        if si == 0 {
            for (s, p) in seen.iter_mut().zip(&populated) {
                *s |= p;
            }
            continue;
        }
        let prev_epochs = seq.snapshots[si - 1].n_epochs;
        for l in 0..k {
            if !populated[l] {
                continue;
            }
            let members: Vec<usize> = snap
                .assignment
                .labels
                .iter()
                .enumerate()
                .filter(|(_, &x)| x == l)
                .map(|(e, _)| e)
                .collect();
            let newly_populated = !seen[l];
            let all_new = members.iter().all(|&e| e >= prev_epochs);
            if newly_populated || all_new {
                let persists = seq.snapshots[si + 1..].iter().all(|later| {
                    later.assignment.labels.iter().any(|&x| x == l)
                });
                return TransitionReport {
                    snapshot: Some(si),
                    label: Some(l),
                    epoch: Some(members[0]),
                    persists,
                };
            }
        }
        for (s, p) in seen.iter_mut().zip(&populated) {
            *s |= p;
        }
    }
    TransitionReport::default()
}
