//! Prototype-anchored disentanglement.
//!
//! Each of the three clusters is compared with the prototype set; the
//! closest becomes the tumor subspace (TIs), the farthest the background
//! (BGIs), and the remaining one non-tumor (NTIs). The bag representation is
//! the distance-weighted sum of the pooled subspaces plus the prototype mean:
//!
//! ```text
//! z_wsi = (1 − d̂_min)·Z^TIs + (1 − d̂_med)·Z^NTIs + (1 − d̂_max)·Z^BGIs + Z^PIs
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cfd::{cfd_distance, mmd_distance, FrequencySample};
use crate::error::{Error, Result};
use crate::linalg::{add_assign, axpy, Matrix};
use crate::lrsc::SubspacePartition;

/// Guard in the distance normalization.
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeSource {
    Synthetic,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub features: Matrix,
    pub source: PrototypeSource,
}

impl PrototypeSet {
    pub fn new(features: Matrix, source: PrototypeSource) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::EmptySet("prototype set has no rows".into()));
        }
        if !features.is_finite() {
            return Err(Error::Numerical("prototype features are not finite".into()));
        }
        Ok(Self { features, source })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn mean(&self) -> Vec<f64> {
        self.features.mean_row()
    }
}

/// Semantic role of a cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Semantic {
    #[serde(rename = "TIs")]
    Tumor,
    #[serde(rename = "NTIs")]
    NonTumor,
    #[serde(rename = "BGIs")]
    Background,
}

impl Semantic {
    /// Ordered from most to least tumor-like.
    pub const ALL: [Semantic; 3] = [Semantic::Tumor, Semantic::NonTumor, Semantic::Background];

    pub fn rank(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Semantic::Tumor => "TIs",
            Semantic::NonTumor => "NTIs",
            Semantic::Background => "BGIs",
        }
    }
}

impl fmt::Display for Semantic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How cluster distances are normalized before turning into weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// `d̂ = d / (max d + ε)`
    #[default]
    Max,
    /// `d̂ = d / (Σ d + ε)`
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineOptions {
    pub epsilon: f64,
    pub normalization: Normalization,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            normalization: Normalization::Max,
        }
    }
}

/// Set distance used to compare a cluster with the prototypes.
#[derive(Debug, Clone, Copy)]
pub enum SetDistance<'a> {
    Cfd(&'a FrequencySample),
    Mmd { bandwidth: f64 },
}

impl SetDistance<'_> {
    pub fn between(&self, a: &Matrix, b: &Matrix) -> Result<f64> {
        match *self {
            SetDistance::Cfd(freqs) => cfd_distance(a, b, freqs),
            SetDistance::Mmd { bandwidth } => mmd_distance(a, b, bandwidth),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisentangledBag {
    /// Semantic role of cluster 0, 1, 2.
    pub semantic_of_cluster: [Semantic; 3],
    /// Cluster index holding TIs, NTIs, BGIs (inverse of the above).
    pub cluster_of_semantic: [usize; 3],
    /// Distance of each cluster to the prototype set.
    pub distances: [f64; 3],
    /// Normalized distance of each cluster.
    pub normalized_distances: [f64; 3],
    /// Weights applied to TIs, NTIs, BGIs and the prototype mean.
    pub weights: [f64; 4],
    /// Pooled TIs, NTIs, BGIs subspaces and the prototype mean.
    pub pooled: [Vec<f64>; 4],
    pub z_wsi: Vec<f64>,
    /// Semantic label of every instance.
    pub instance_map: Vec<Semantic>,
    /// Set when an empty cluster was replaced by the bag mean.
    pub degenerate: bool,
}

impl DisentangledBag {
    pub fn distance_of(&self, s: Semantic) -> f64 {
        self.distances[self.cluster_of_semantic[s.rank()]]
    }

    pub fn weight_of(&self, s: Semantic) -> f64 {
        self.weights[s.rank()]
    }
}

/// Mean feature of the instances assigned to `cluster`.
pub fn pool_subspace(features: &Matrix, assignments: &[usize], cluster: usize) -> Result<Vec<f64>> {
    if assignments.len() != features.rows() {
        return Err(Error::Dimension(format!(
            "{} assignments for {} instances",
            assignments.len(),
            features.rows()
        )));
    }
    let mut acc = vec![0.0; features.cols()];
    let mut count = 0usize;
    for (row, &a) in features.row_iter().zip(assignments) {
        if a == cluster {
            add_assign(&mut acc, row);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyCluster(cluster));
    }
    let inv = 1.0 / count as f64;
    acc.iter_mut().for_each(|v| *v *= inv);
    Ok(acc)
}

/// Cluster indices ordered by ascending distance: `[TIs, NTIs, BGIs]`.
/// Equal distances keep the lower cluster index first.
pub fn rank_clusters(distances: &[f64; 3]) -> [usize; 3] {
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    order
}

/// Normalized distances `d̂` per cluster.
pub fn normalize(distances: &[f64; 3], options: &RefineOptions) -> [f64; 3] {
    let denom = match options.normalization {
        Normalization::Max => distances.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Normalization::Sum => distances.iter().sum(),
    } + options.epsilon;
    distances.map(|d| d / denom)
}

/// Weights `(1 − d̂_TIs, 1 − d̂_NTIs, 1 − d̂_BGIs, 1)`.
pub fn refine_weights(distances: &[f64; 3], order: &[usize; 3], options: &RefineOptions) -> [f64; 4] {
    let nd = normalize(distances, options);
    [1.0 - nd[order[0]], 1.0 - nd[order[1]], 1.0 - nd[order[2]], 1.0]
}

/// `Σ weights[i] · pooled[i]`.
pub fn weighted_sum(pooled: &[Vec<f64>; 4], weights: &[f64; 4]) -> Vec<f64> {
    let mut z = vec![0.0; pooled[0].len()];
    for (p, &w) in pooled.iter().zip(weights) {
        axpy(w, p, &mut z);
    }
    z
}

/// Disentangles a clustered bag against the prototypes using the
/// characteristic-function distance and default refinement options.
pub fn disentangle(
    partition: &SubspacePartition,
    features: &Matrix,
    prototypes: &PrototypeSet,
    freqs: &FrequencySample,
) -> Result<DisentangledBag> {
    disentangle_with(
        &partition.assignments,
        features,
        &prototypes.features,
        SetDistance::Cfd(freqs),
        &RefineOptions::default(),
    )
}

pub fn disentangle_with(
    assignments: &[usize],
    features: &Matrix,
    prototype_features: &Matrix,
    distance: SetDistance<'_>,
    options: &RefineOptions,
) -> Result<DisentangledBag> {
    if features.rows() == 0 {
        return Err(Error::EmptySet("bag has no instances".into()));
    }
    if assignments.iter().any(|&a| a >= 3) {
        return Err(Error::Dimension("disentanglement expects exactly 3 clusters".into()));
    }
    let mut members: [Vec<usize>; 3] = Default::default();
    for (i, &a) in assignments.iter().enumerate() {
        members[a].push(i);
    }

    let mut degenerate = false;
    let mut distances = [0.0; 3];
    let mut pooled_by_cluster: [Vec<f64>; 3] = Default::default();
    for c in 0..3 {
        let subset = if members[c].is_empty() {
            log::warn!("cluster {c} is empty; substituting the bag mean");
            degenerate = true;
            Matrix::new(1, features.cols(), features.mean_row())?
        } else {
            features.select_rows(&members[c])
        };
        distances[c] = distance.between(&subset, prototype_features)?;
        pooled_by_cluster[c] = subset.mean_row();
    }

    let order = rank_clusters(&distances);
    let mut semantic_of_cluster = [Semantic::Tumor; 3];
    for (s, &c) in Semantic::ALL.iter().zip(&order) {
        semantic_of_cluster[c] = *s;
    }
    let normalized_distances = normalize(&distances, options);
    let weights = refine_weights(&distances, &order, options);
    let pooled = [
        pooled_by_cluster[order[0]].clone(),
        pooled_by_cluster[order[1]].clone(),
        pooled_by_cluster[order[2]].clone(),
        prototype_features.mean_row(),
    ];
    let z_wsi = weighted_sum(&pooled, &weights);
    let instance_map = assignments.iter().map(|&a| semantic_of_cluster[a]).collect();

    Ok(DisentangledBag {
        semantic_of_cluster,
        cluster_of_semantic: order,
        distances,
        normalized_distances,
        weights,
        pooled,
        z_wsi,
        instance_map,
        degenerate,
    })
}

/// Refined bag representation with max-normalized distances.
pub fn refine(d: &DisentangledBag, epsilon: f64) -> Vec<f64> {
    refine_with(
        d,
        &RefineOptions {
            epsilon,
            normalization: Normalization::Max,
        },
    )
}

pub fn refine_with(d: &DisentangledBag, options: &RefineOptions) -> Vec<f64> {
    let weights = refine_weights(&d.distances, &d.cluster_of_semantic, options);
    weighted_sum(&d.pooled, &weights)
}
