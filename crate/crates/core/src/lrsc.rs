//! k-means in the metric-projected space.
//!
//! Instances are projected through `W` and clustered with Lloyd iterations
//! under Euclidean distance, which equals `d_A` on the raw features.
//! Seeding is greedy k-means++ over a canonical ordering of the points
//! (lexicographic in projected coordinates, then by a content hash), so the
//! result depends on the bag's contents and the seed but not on the order in
//! which instances are listed.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{add_assign, squared_distance, Matrix};
use crate::metric::MetricMatrix;
use crate::rng::{self, Domain};

pub const DEFAULT_K: usize = 3;
pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_RESTARTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterOptions {
    pub k: usize,
    pub max_iters: usize,
    /// Independent k-means++ restarts; the lowest-inertia run wins.
    pub restarts: usize,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            max_iters: DEFAULT_MAX_ITERS,
            restarts: DEFAULT_RESTARTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspacePartition {
    /// Cluster index per instance, in input order.
    pub assignments: Vec<usize>,
    /// Centroids in projected space (`k` vectors of length `r`).
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared projected distances to the assigned centroid.
    pub inertia: f64,
    pub iterations_used: usize,
    /// Inertia after each Lloyd iteration of the winning restart.
    pub inertia_history: Vec<f64>,
}

impl SubspacePartition {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    /// Instance indices per cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k()];
        for (i, &a) in self.assignments.iter().enumerate() {
            out[a].push(i);
        }
        out
    }
}

/// Clusters `features` (`m × n`) into `k` groups under `metric`.
pub fn cluster(
    features: &Matrix,
    metric: &MetricMatrix,
    k: usize,
    seed: u64,
) -> Result<SubspacePartition> {
    cluster_with(
        features,
        metric,
        &ClusterOptions {
            k,
            ..ClusterOptions::default()
        },
        seed,
    )
}

pub fn cluster_with(
    features: &Matrix,
    metric: &MetricMatrix,
    options: &ClusterOptions,
    seed: u64,
) -> Result<SubspacePartition> {
    if features.cols() != metric.dim() {
        return Err(Error::Dimension(format!(
            "features have {} columns, metric expects {}",
            features.cols(),
            metric.dim()
        )));
    }
    let projected = metric.project_rows(features)?;
    cluster_projected(&projected, Some(features), options, seed)
}

/// Euclidean k-means on already projected points. `raw` (same row count)
/// only feeds the tie-breaking content hash of the canonical order.
pub fn cluster_projected(
    projected: &Matrix,
    raw: Option<&Matrix>,
    options: &ClusterOptions,
    seed: u64,
) -> Result<SubspacePartition> {
    let m = projected.rows();
    let k = options.k;
    if k == 0 {
        return Err(Error::Dimension("k must be at least 1".into()));
    }
    if m < k {
        return Err(Error::DegenerateBag(format!("{m} instances cannot form {k} clusters")));
    }

    let order = canonical_order(projected, raw.unwrap_or(projected));
    let points = projected.select_rows(&order);
    let distinct = 1 + (1..m).filter(|&i| points.row(i) != points.row(i - 1)).count();
    if distinct < k {
        return Err(Error::DegenerateBag(format!(
            "only {distinct} distinct projected instances for {k} clusters"
        )));
    }

    let mut rng = rng::stream(seed, Domain::Clustering, 0);
    let mut best: Option<LloydRun> = None;
    for _ in 0..options.restarts.max(1) {
        let init = kmeans_plus_plus(&points, k, &mut rng);
        let run = lloyd(&points, init, options.max_iters);
        if best.as_ref().map_or(true, |b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let best = best.expect("at least one restart");

    let mut assignments = vec![0; m];
    for (canonical_pos, &original) in order.iter().enumerate() {
        assignments[original] = best.assignments[canonical_pos];
    }
    Ok(SubspacePartition {
        assignments,
        centroids: best.centroids,
        inertia: best.inertia,
        iterations_used: best.iterations,
        inertia_history: best.history,
    })
}

/// Nearest centroid of `point` (raw features) in projected space; ties go to
/// the lowest index.
pub fn assign(point: &[f64], partition: &SubspacePartition, metric: &MetricMatrix) -> Result<usize> {
    let p = metric.project(point)?;
    Ok(nearest(&p, &partition.centroids).0)
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = squared_distance(p, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn content_hash(row: &[f64]) -> u64 {
    // FNV-1a over the IEEE bit patterns.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in row {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

fn canonical_order(projected: &Matrix, raw: &Matrix) -> Vec<usize> {
    let hashes: Vec<u64> = raw.row_iter().map(content_hash).collect();
    let mut order: Vec<usize> = (0..projected.rows()).collect();
    order.sort_by(|&a, &b| {
        let lex = projected
            .row(a)
            .iter()
            .zip(projected.row(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal);
        lex.then(hashes[a].cmp(&hashes[b]))
    });
    order
}

/// Index of the first cumulative weight exceeding `target`.
fn sample_index(weights: &[f64], target: f64) -> usize {
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if acc > target {
            return i;
        }
    }
    // Rounding at the tail: last positive weight.
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Greedy k-means++: each new center is the best of `2 + ⌊ln k⌋`
/// D²-sampled candidates.
fn kmeans_plus_plus<R: Rng + ?Sized>(points: &Matrix, k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let m = points.rows();
    let trials = 2 + (k as f64).ln().floor() as usize;
    let first = ((rng.gen::<f64>() * m as f64) as usize).min(m - 1);
    let mut centers = vec![points.row(first).to_vec()];
    let mut closest: Vec<f64> = points
        .row_iter()
        .map(|p| squared_distance(p, &centers[0]))
        .collect();

    while centers.len() < k {
        let total: f64 = closest.iter().sum();
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let candidate = if total > 0.0 {
                sample_index(&closest, rng.gen::<f64>() * total)
            } else {
                ((rng.gen::<f64>() * m as f64) as usize).min(m - 1)
            };
            let updated: Vec<f64> = points
                .row_iter()
                .zip(&closest)
                .map(|(p, &c)| c.min(squared_distance(p, points.row(candidate))))
                .collect();
            let potential: f64 = updated.iter().sum();
            if best.as_ref().map_or(true, |b| potential < b.0) {
                best = Some((potential, candidate, updated));
            }
        }
        let (_, idx, updated) = best.expect("trials ≥ 1");
        centers.push(points.row(idx).to_vec());
        closest = updated;
    }
    centers
}

struct LloydRun {
    assignments: Vec<usize>,
    centroids: Vec<Vec<f64>>,
    inertia: f64,
    iterations: usize,
    history: Vec<f64>,
}

fn lloyd(points: &Matrix, mut centroids: Vec<Vec<f64>>, max_iters: usize) -> LloydRun {
    let m = points.rows();
    let k = centroids.len();
    let mut assignments: Vec<usize> = vec![usize::MAX; m];
    let mut history = Vec::new();
    let mut iterations = 0;

    loop {
        let mut changed = false;
        for (i, p) in points.row_iter().enumerate() {
            let (c, _) = nearest(p, &centroids);
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
        }
        if !changed || iterations >= max_iters {
            break;
        }
        iterations += 1;
        repair_empty(points, &mut assignments, &centroids, k);
        centroids = means(points, &assignments, k);
        history.push(inertia(points, &assignments, &centroids));
    }

    let inertia = inertia(points, &assignments, &centroids);
    LloydRun {
        assignments,
        centroids,
        inertia,
        iterations,
        history,
    }
}

/// Moves the point farthest from its centroid into each empty cluster.
fn repair_empty(points: &Matrix, assignments: &mut [usize], centroids: &[Vec<f64>], k: usize) {
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assignments.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let mut far = (usize::MAX, -1.0);
        for (i, p) in points.row_iter().enumerate() {
            if sizes[assignments[i]] < 2 {
                continue;
            }
            let d = squared_distance(p, &centroids[assignments[i]]);
            if d > far.1 {
                far = (i, d);
            }
        }
        assignments[far.0] = empty;
    }
}

fn means(points: &Matrix, assignments: &[usize], k: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; points.cols()]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.row_iter().zip(assignments) {
        add_assign(&mut sums[a], p);
        counts[a] += 1;
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        let inv = 1.0 / c as f64;
        s.iter_mut().for_each(|v| *v *= inv);
    }
    sums
}

fn inertia(points: &Matrix, assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .row_iter()
        .zip(assignments)
        .map(|(p, &a)| squared_distance(p, &centroids[a]))
        .sum()
}
