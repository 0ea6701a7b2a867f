//! Bag classifier `S(X) = f(A(F(X)))` and its training loop.
//!
//! * `F`: trainable affine map followed by `tanh`, applied to every instance
//!   and to every prototype.
//! * `A`: k-means in the `W`-projected space, prototype-distance labelling of
//!   the three clusters, and distance-weighted pooling.
//! * `f`: affine head with softmax.
//!
//! The loss is `CE + γ₁·c_min − γ₂·min(c_max, cap) + γ₃·Tr(WᵀW)`.
//! Gradients are derived by hand with cluster assignments and the semantic
//! order held fixed; [`gradient_check`] compares them with central
//! differences of the same frozen-layout loss.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cfd::{cfd_distance_grad, mmd_distance_grad, DistanceGrad, FrequencySample};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, finite_diff, norm, sub, GradReport, Matrix};
use crate::lrsc::{cluster_with, ClusterOptions, SubspacePartition};
use crate::metric::{default_rank, MetricMatrix};
use crate::pid::{
    normalize, rank_clusters, refine_weights, weighted_sum, DisentangledBag, Normalization,
    PrototypeSet, RefineOptions, Semantic, SetDistance,
};
use crate::rng::{self, Domain};
use crate::synth::Bag;

/// Which parts of the aggregation are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Bag mean straight into the head.
    NoCluster,
    /// Euclidean k-means (`W = I`, untrained) with equal pooling weights.
    NaiveCluster,
    /// Learned metric with equal pooling weights.
    LrscOnly,
    /// Learned metric with prototype-distance weights.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::NoCluster,
        Variant::NaiveCluster,
        Variant::LrscOnly,
        Variant::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::NoCluster => "no_cluster",
            Variant::NaiveCluster => "naive_cluster",
            Variant::LrscOnly => "lrsc_only",
            Variant::Full => "full",
        }
    }

    fn clusters(self) -> bool {
        self != Variant::NoCluster
    }

    fn learns_metric(self) -> bool {
        matches!(self, Variant::LrscOnly | Variant::Full)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    Cfd,
    Mmd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    /// Upper bound on the `c_max` term.
    pub c_max_cap: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub classes: usize,
    pub k: usize,
    /// Projection rank; `None` uses `max(2, n_feat / 4)`.
    pub rank: Option<usize>,
    /// Projector output width; `None` keeps the input width.
    pub n_feat: Option<usize>,
    /// Frequencies sampled per epoch.
    pub frequencies: usize,
    pub sigma_t: f64,
    pub epsilon: f64,
    pub normalization: Normalization,
    pub optimizer: OptimizerKind,
    pub metric: DistanceMetric,
    pub variant: Variant,
    pub kmeans_restarts: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma1: 0.1,
            gamma2: 0.1,
            gamma3: 0.01,
            c_max_cap: 10.0,
            learning_rate: 0.02,
            epochs: 30,
            seed: 0,
            classes: 3,
            k: 3,
            rank: None,
            n_feat: None,
            frequencies: 256,
            sigma_t: 1.0,
            epsilon: crate::pid::DEFAULT_EPSILON,
            normalization: Normalization::Max,
            optimizer: OptimizerKind::Sgd,
            metric: DistanceMetric::Cfd,
            variant: Variant::Full,
            kmeans_restarts: crate::lrsc::DEFAULT_RESTARTS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, msg: &str| Err(Error::config(key, msg));
        for (key, v) in [("gamma1", self.gamma1), ("gamma2", self.gamma2), ("gamma3", self.gamma3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(key, "must be ≥ 0");
            }
        }
        if !(self.c_max_cap > 0.0) {
            return fail("c_max_cap", "must be > 0");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate", "must be ≥ 0");
        }
        if self.epochs == 0 {
            return fail("epochs", "must be ≥ 1");
        }
        if self.classes < 2 {
            return fail("classes", "must be ≥ 2");
        }
        if self.k != 3 {
            return fail("k", "prototype disentanglement uses exactly 3 clusters");
        }
        if self.rank == Some(0) {
            return fail("rank", "must be ≥ 1");
        }
        if self.n_feat == Some(0) {
            return fail("n_feat", "must be ≥ 1");
        }
        if self.frequencies == 0 {
            return fail("frequencies", "must be ≥ 1");
        }
        if !(self.sigma_t > 0.0 && self.sigma_t.is_finite()) {
            return fail("sigma_t", "must be > 0");
        }
        if !(self.epsilon > 0.0) {
            return fail("epsilon", "must be > 0");
        }
        if self.kmeans_restarts == 0 {
            return fail("kmeans_restarts", "must be ≥ 1");
        }
        Ok(())
    }

    fn refine_options(&self) -> RefineOptions {
        RefineOptions {
            epsilon: self.epsilon,
            normalization: self.normalization,
        }
    }

    fn cluster_options(&self) -> ClusterOptions {
        ClusterOptions {
            k: self.k,
            restarts: self.kmeans_restarts,
            ..ClusterOptions::default()
        }
    }

    /// Frequencies used in training epoch `epoch`.
    pub fn epoch_frequencies(&self, n_feat: usize, epoch: usize) -> Result<FrequencySample> {
        FrequencySample::draw(
            self.frequencies,
            n_feat,
            self.sigma_t,
            rng::derive_seed(self.seed, Domain::Frequencies, epoch as u64),
        )
    }

    /// Fixed frequencies used for evaluation and explanation.
    pub fn eval_frequencies(&self, n_feat: usize) -> Result<FrequencySample> {
        FrequencySample::draw(
            self.frequencies,
            n_feat,
            self.sigma_t,
            rng::derive_seed(self.seed, Domain::Frequencies, u64::MAX),
        )
    }

    /// Seed of the k-means stream for one bag.
    pub fn cluster_seed(&self, bag_id: u64) -> u64 {
        rng::derive_seed(self.seed, Domain::Clustering, bag_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// `n_feat × n_in`
    pub proj_weight: Matrix,
    pub proj_bias: Vec<f64>,
    pub metric: MetricMatrix,
    /// `C × n_feat`
    pub head_weight: Matrix,
    pub head_bias: Vec<f64>,
}

/// Names of the parameter blocks in flattening order.
pub const PARAM_BLOCKS: [&str; 5] = [
    "projector.weight",
    "projector.bias",
    "metric.W",
    "head.weight",
    "head.bias",
];

impl ModelParams {
    pub fn init(n_in: usize, n_feat: usize, rank: usize, classes: usize, seed: u64) -> Result<Self> {
        if n_in == 0 || n_feat == 0 || classes == 0 {
            return Err(Error::Dimension("model dimensions must be ≥ 1".into()));
        }
        let mut rng = rng::stream(seed, Domain::Init, 0);
        let proj_noise = Normal::new(0.0, 0.1 / (n_in as f64).sqrt()).expect("valid std");
        let mut proj_weight = Matrix::zeros(n_feat, n_in);
        for v in proj_weight.values_mut() {
            *v = proj_noise.sample(&mut rng);
        }
        for i in 0..n_feat.min(n_in) {
            proj_weight.set(i, i, proj_weight.get(i, i) + 1.0);
        }
        let metric = MetricMatrix::init(rank, n_feat, &mut rng)?;
        let head_noise = Normal::new(0.0, 0.01).expect("valid std");
        let mut head_weight = Matrix::zeros(classes, n_feat);
        for v in head_weight.values_mut() {
            *v = head_noise.sample(&mut rng);
        }
        Ok(Self {
            proj_weight,
            proj_bias: vec![0.0; n_feat],
            metric,
            head_weight,
            head_bias: vec![0.0; classes],
        })
    }

    /// Initial parameters for `config` on data with `n_in` input features.
    pub fn for_config(n_in: usize, config: &TrainConfig) -> Result<Self> {
        let n_feat = config.n_feat.unwrap_or(n_in);
        let rank = config.rank.unwrap_or_else(|| default_rank(n_feat));
        Self::init(n_in, n_feat, rank, config.classes, config.seed)
    }

    pub fn n_in(&self) -> usize {
        self.proj_weight.cols()
    }

    pub fn n_feat(&self) -> usize {
        self.proj_weight.rows()
    }

    pub fn rank(&self) -> usize {
        self.metric.rank()
    }

    pub fn classes(&self) -> usize {
        self.head_weight.rows()
    }

    /// Zero-valued parameters of the same shape.
    pub fn zeros_like(&self) -> Self {
        Self {
            proj_weight: Matrix::zeros(self.n_feat(), self.n_in()),
            proj_bias: vec![0.0; self.n_feat()],
            metric: MetricMatrix::new(Matrix::zeros(self.rank(), self.n_feat()))
                .expect("shape already valid"),
            head_weight: Matrix::zeros(self.classes(), self.n_feat()),
            head_bias: vec![0.0; self.classes()],
        }
    }

    fn block_lens(&self) -> [usize; 5] {
        [
            self.proj_weight.values().len(),
            self.proj_bias.len(),
            self.metric.weights().values().len(),
            self.head_weight.values().len(),
            self.head_bias.len(),
        ]
    }

    /// `(block name, flat range)` for every parameter block.
    pub fn blocks(&self) -> Vec<(&'static str, std::ops::Range<usize>)> {
        let mut start = 0;
        PARAM_BLOCKS
            .iter()
            .zip(self.block_lens())
            .map(|(name, len)| {
                let r = start..start + len;
                start += len;
                (*name, r)
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.block_lens().iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(self.proj_weight.values());
        out.extend_from_slice(&self.proj_bias);
        out.extend_from_slice(self.metric.weights().values());
        out.extend_from_slice(self.head_weight.values());
        out.extend_from_slice(&self.head_bias);
        out
    }

    /// Overwrites every entry from a flat vector laid out as [`flatten`](Self::flatten).
    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.len(), "flat parameter length");
        let mut rest = flat;
        let mut take = |dst: &mut [f64]| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        take(self.proj_weight.values_mut());
        take(&mut self.proj_bias);
        take(self.metric.weights_mut().values_mut());
        take(self.head_weight.values_mut());
        take(&mut self.head_bias);
    }

    pub fn with_flat(&self, flat: &[f64]) -> Self {
        let mut p = self.clone();
        p.assign_flat(flat);
        p
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }

    /// `tanh(X·Pᵀ + b)` for every row of `x`.
    pub fn project_instances(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.n_in() {
            return Err(Error::Dimension(format!(
                "instances have {} features, model expects {}",
                x.cols(),
                self.n_in()
            )));
        }
        let mut z = x.matmul_transposed(&self.proj_weight)?;
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(&self.proj_bias) {
                *v = (*v + b).tanh();
            }
        }
        Ok(z)
    }
}

/// Cluster assignments and semantic order held fixed during differentiation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub assignments: Vec<usize>,
    /// Cluster index of TIs, NTIs, BGIs.
    pub order: [usize; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    pub c_min: f64,
    pub c_max: f64,
    pub trace: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// Input of the prediction head.
    pub representation: Vec<f64>,
    /// Absent for [`Variant::NoCluster`].
    pub detail: Option<DisentangledBag>,
    pub partition: Option<SubspacePartition>,
    pub layout: Option<Layout>,
}

impl ForwardOutput {
    pub fn predicted_class(&self) -> usize {
        argmax(&self.probs)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Everything a forward or backward pass needs besides the bag.
#[derive(Debug, Clone, Copy)]
pub struct Context<'a> {
    pub prototypes: &'a PrototypeSet,
    pub freqs: &'a FrequencySample,
    pub config: &'a TrainConfig,
}

enum LayoutSpec<'a> {
    Recluster { seed: u64 },
    Frozen(&'a Layout),
}

/// Rows standing for one cluster: its members, or the whole bag when empty.
enum Pool {
    Rows(Vec<usize>),
    BagMean,
}

struct Evaluation {
    out: ForwardOutput,
    loss: Option<LossBreakdown>,
    grads: Option<ModelParams>,
}

fn distance_with_grad(
    a: &Matrix,
    b: &Matrix,
    ctx: &Context<'_>,
    want_grad: bool,
) -> Result<(f64, Option<DistanceGrad>)> {
    let bandwidth = 1.0 / ctx.config.sigma_t;
    if want_grad {
        let g = match ctx.config.metric {
            DistanceMetric::Cfd => cfd_distance_grad(a, b, ctx.freqs)?,
            DistanceMetric::Mmd => mmd_distance_grad(a, b, bandwidth)?,
        };
        Ok((g.value, Some(g)))
    } else {
        let d = match ctx.config.metric {
            DistanceMetric::Cfd => SetDistance::Cfd(ctx.freqs),
            DistanceMetric::Mmd => SetDistance::Mmd { bandwidth },
        };
        Ok((d.between(a, b)?, None))
    }
}

/// Adds `g` (gradient w.r.t. the pooled vector of `pool`) to the rows it averages.
fn scatter_pool(pool: &Pool, g: &[f64], grad_z: &mut Matrix) {
    match pool {
        Pool::Rows(rows) => {
            let inv = 1.0 / rows.len() as f64;
            for &r in rows {
                axpy(inv, g, grad_z.row_mut(r));
            }
        }
        Pool::BagMean => {
            let inv = 1.0 / grad_z.rows() as f64;
            for r in 0..grad_z.rows() {
                axpy(inv, g, grad_z.row_mut(r));
            }
        }
    }
}

/// Adds a per-row gradient of a cluster subset back onto bag rows.
fn scatter_rows(pool: &Pool, g: &Matrix, grad_z: &mut Matrix) {
    match pool {
        Pool::Rows(rows) => {
            for (i, &r) in rows.iter().enumerate() {
                axpy(1.0, g.row(i), grad_z.row_mut(r));
            }
        }
        Pool::BagMean => scatter_pool(pool, g.row(0), grad_z),
    }
}

/// `(dL/dW, dL/dδ)` of `coef·‖Wδ‖`. Zero at `‖Wδ‖ = 0`.
fn metric_norm_grad(metric: &MetricMatrix, delta: &[f64], coef: f64) -> (f64, Matrix, Vec<f64>) {
    let w = metric.weights();
    let v = w.matvec(delta).expect("dimensions checked");
    let c = norm(&v);
    let mut gw = Matrix::zeros(w.rows(), w.cols());
    let mut gd = vec![0.0; delta.len()];
    if c > 0.0 {
        for (i, vi) in v.iter().enumerate() {
            axpy(coef * vi / c, delta, gw.row_mut(i));
        }
        gd = w.matvec_transposed(&v).expect("dimensions checked");
        gd.iter_mut().for_each(|x| *x *= coef / c);
    }
    (c, gw, gd)
}

/// Back-propagates `grad_z` through `z = tanh(x·Pᵀ + b)`.
fn backprop_projector(x: &Matrix, z: &Matrix, grad_z: &Matrix, grads: &mut ModelParams) {
    for r in 0..x.rows() {
        let xr = x.row(r);
        for (j, (&g, &zj)) in grad_z.row(r).iter().zip(z.row(r)).enumerate() {
            let pre = g * (1.0 - zj * zj);
            if pre == 0.0 {
                continue;
            }
            grads.proj_bias[j] += pre;
            axpy(pre, xr, grads.proj_weight.row_mut(j));
        }
    }
}

fn evaluate(
    params: &ModelParams,
    bag: &Bag,
    ctx: &Context<'_>,
    plan: LayoutSpec<'_>,
    want_loss: bool,
    want_grad: bool,
) -> Result<Evaluation> {
    let cfg = ctx.config;
    cfg.validate()?;
    if bag.label >= params.classes() && want_loss {
        return Err(Error::Dimension(format!(
            "label {} out of range for {} classes",
            bag.label,
            params.classes()
        )));
    }
    let x = &bag.features;
    let xp = &ctx.prototypes.features;
    let z = params.project_instances(x)?;
    let zp = params.project_instances(xp)?;
    let m = z.rows();
    if m == 0 {
        return Err(Error::DegenerateBag("bag has no instances".into()));
    }
    let n_feat = params.n_feat();
    let proto_mean = zp.mean_row();

    let mut grads = want_grad.then(|| params.zeros_like());
    let mut grad_z = Matrix::zeros(m, n_feat);
    let mut grad_zp = Matrix::zeros(zp.rows(), n_feat);

    // Aggregation.
    struct Clustered {
        pools: [Pool; 3],
        subsets: [Matrix; 3],
        distances: [f64; 3],
        dist_grads: [Option<DistanceGrad>; 3],
        order: [usize; 3],
        weights: [f64; 4],
        pooled: [Vec<f64>; 4],
        assignments: Vec<usize>,
        partition: Option<SubspacePartition>,
    }
    let clustered = if cfg.variant.clusters() {
        let (assignments, partition) = match plan {
            LayoutSpec::Recluster { seed } => {
                let metric = if cfg.variant == Variant::NaiveCluster {
                    MetricMatrix::identity(n_feat)
                } else {
                    params.metric.clone()
                };
                let partition = cluster_with(&z, &metric, &cfg.cluster_options(), seed)?;
                (partition.assignments.clone(), Some(partition))
            }
            LayoutSpec::Frozen(layout) => {
                if layout.assignments.len() != m || layout.assignments.iter().any(|&a| a >= 3) {
                    return Err(Error::Dimension("frozen layout does not fit the bag".into()));
                }
                (layout.assignments.clone(), None)
            }
        };
        let mut members: [Vec<usize>; 3] = Default::default();
        for (i, &a) in assignments.iter().enumerate() {
            members[a].push(i);
        }
        let pools = members.map(|rows| if rows.is_empty() { Pool::BagMean } else { Pool::Rows(rows) });
        let subsets: [Matrix; 3] = std::array::from_fn(|c| match &pools[c] {
            Pool::Rows(rows) => z.select_rows(rows),
            Pool::BagMean => Matrix::new(1, n_feat, z.mean_row()).expect("finite"),
        });
        let distance_grads = want_grad && cfg.variant == Variant::Full;
        let mut distances = [0.0; 3];
        let mut dist_grads: [Option<DistanceGrad>; 3] = Default::default();
        for c in 0..3 {
            let (d, g) = distance_with_grad(&subsets[c], &zp, ctx, distance_grads)?;
            distances[c] = d;
            dist_grads[c] = g;
        }
        let order = match plan {
            LayoutSpec::Frozen(layout) => layout.order,
            LayoutSpec::Recluster { .. } => rank_clusters(&distances),
        };
        let weights = if cfg.variant == Variant::Full {
            refine_weights(&distances, &order, &cfg.refine_options())
        } else {
            [1.0; 4]
        };
        let pooled = [
            subsets[order[0]].mean_row(),
            subsets[order[1]].mean_row(),
            subsets[order[2]].mean_row(),
            proto_mean.clone(),
        ];
        Some(Clustered {
            pools,
            subsets,
            distances,
            dist_grads,
            order,
            weights,
            pooled,
            assignments,
            partition,
        })
    } else {
        None
    };

    let representation = match &clustered {
        Some(c) => weighted_sum(&c.pooled, &c.weights),
        None => z.mean_row(),
    };

    // Head.
    let mut logits = params.head_weight.matvec(&representation)?;
    for (l, b) in logits.iter_mut().zip(&params.head_bias) {
        *l += b;
    }
    let probs = softmax(&logits);

    let mut loss = None;
    if want_loss {
        let ce = -probs[bag.label].max(1e-300).ln();
        let mut terms = LossBreakdown {
            cross_entropy: ce,
            ..LossBreakdown::default()
        };
        if let (Some(c), true) = (&clustered, cfg.variant.learns_metric()) {
            let d_min = sub(&c.pooled[0], &proto_mean);
            let d_max = sub(&c.pooled[2], &proto_mean);
            terms.c_min = params.metric.mahalanobis(&c.pooled[0], &proto_mean)?;
            terms.c_max = params.metric.mahalanobis(&c.pooled[2], &proto_mean)?;
            terms.trace = params.metric.trace_reg();
            terms.total = ce + cfg.gamma1 * terms.c_min - cfg.gamma2 * terms.c_max.min(cfg.c_max_cap)
                + cfg.gamma3 * terms.trace;

            if let Some(g) = grads.as_mut() {
                let mut g_pooled_ti = vec![0.0; n_feat];
                let mut g_pooled_bg = vec![0.0; n_feat];
                let mut g_proto_mean = vec![0.0; n_feat];
                let (_, gw, gd) = metric_norm_grad(&params.metric, &d_min, cfg.gamma1);
                axpy(1.0, gw.values(), g.metric.weights_mut().values_mut());
                axpy(1.0, &gd, &mut g_pooled_ti);
                axpy(-1.0, &gd, &mut g_proto_mean);
                if terms.c_max < cfg.c_max_cap {
                    let (_, gw, gd) = metric_norm_grad(&params.metric, &d_max, -cfg.gamma2);
                    axpy(1.0, gw.values(), g.metric.weights_mut().values_mut());
                    axpy(1.0, &gd, &mut g_pooled_bg);
                    axpy(-1.0, &gd, &mut g_proto_mean);
                }
                let tr = params.metric.trace_reg_grad();
                axpy(cfg.gamma3, tr.values(), g.metric.weights_mut().values_mut());

                scatter_pool(&c.pools[c.order[0]], &g_pooled_ti, &mut grad_z);
                scatter_pool(&c.pools[c.order[2]], &g_pooled_bg, &mut grad_z);
                for r in 0..grad_zp.rows() {
                    axpy(1.0 / zp.rows() as f64, &g_proto_mean, grad_zp.row_mut(r));
                }
            }
        } else {
            terms.total = ce;
        }
        loss = Some(terms);
    }

    if let Some(g) = grads.as_mut() {
        // Cross-entropy through the head.
        let mut g_logits = probs.clone();
        g_logits[bag.label] -= 1.0;
        for (c, &gl) in g_logits.iter().enumerate() {
            g.head_bias[c] += gl;
            axpy(gl, &representation, g.head_weight.row_mut(c));
        }
        let g_rep = params.head_weight.matvec_transposed(&g_logits)?;

        match &clustered {
            None => {
                let inv = 1.0 / m as f64;
                for r in 0..m {
                    axpy(inv, &g_rep, grad_z.row_mut(r));
                }
            }
            Some(c) => {
                for s in 0..3 {
                    let pooled_grad: Vec<f64> = g_rep.iter().map(|v| v * c.weights[s]).collect();
                    scatter_pool(&c.pools[c.order[s]], &pooled_grad, &mut grad_z);
                }
                for r in 0..grad_zp.rows() {
                    axpy(1.0 / zp.rows() as f64, &g_rep, grad_zp.row_mut(r));
                }

                if cfg.variant == Variant::Full {
                    // w_s = 1 − d_{order[s]} / (N + ε)
                    let eps = cfg.epsilon;
                    let denom = match cfg.normalization {
                        Normalization::Max => c.distances[c.order[2]],
                        Normalization::Sum => c.distances.iter().sum(),
                    } + eps;
                    let mut g_dist = [0.0; 3];
                    let mut g_denom = 0.0;
                    for s in 0..3 {
                        let g_w = dot(&g_rep, &c.pooled[s]);
                        let cl = c.order[s];
                        g_dist[cl] -= g_w / denom;
                        g_denom += g_w * c.distances[cl] / (denom * denom);
                    }
                    match cfg.normalization {
                        Normalization::Max => g_dist[c.order[2]] += g_denom,
                        Normalization::Sum => g_dist.iter_mut().for_each(|v| *v += g_denom),
                    }
                    for cl in 0..3 {
                        let dg = c.dist_grads[cl].as_ref().expect("distance gradients requested");
                        let mut ga = dg.grad_a.clone();
                        ga.values_mut().iter_mut().for_each(|v| *v *= g_dist[cl]);
                        scatter_rows(&c.pools[cl], &ga, &mut grad_z);
                        axpy(g_dist[cl], dg.grad_b.values(), grad_zp.values_mut());
                    }
                }
            }
        }

        backprop_projector(x, &z, &grad_z, g);
        backprop_projector(xp, &zp, &grad_zp, g);
        if let Some((name, _)) = g
            .blocks()
            .into_iter()
            .find(|(_, r)| g.flatten()[r.clone()].iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Numerical(format!("non-finite gradient in {name}")));
        }
    }

    let (detail, partition, layout) = match clustered {
        Some(c) => {
            let mut semantic_of_cluster = [Semantic::Tumor; 3];
            for (s, &cl) in Semantic::ALL.iter().zip(&c.order) {
                semantic_of_cluster[cl] = *s;
            }
            let instance_map = c.assignments.iter().map(|&a| semantic_of_cluster[a]).collect();
            let degenerate = c.pools.iter().any(|p| matches!(p, Pool::BagMean));
            let _ = &c.subsets;
            let detail = DisentangledBag {
                semantic_of_cluster,
                cluster_of_semantic: c.order,
                distances: c.distances,
                normalized_distances: normalize(&c.distances, &cfg.refine_options()),
                weights: c.weights,
                pooled: c.pooled,
                z_wsi: representation.clone(),
                instance_map,
                degenerate,
            };
            let layout = Layout {
                assignments: c.assignments,
                order: c.order,
            };
            (Some(detail), c.partition, Some(layout))
        }
        None => (None, None, None),
    };

    Ok(Evaluation {
        out: ForwardOutput {
            logits,
            probs,
            representation,
            detail,
            partition,
            layout,
        },
        loss,
        grads,
    })
}

/// Clusters, disentangles, refines and classifies one bag.
pub fn forward(bag: &Bag, params: &ModelParams, ctx: &Context<'_>) -> Result<ForwardOutput> {
    let seed = ctx.config.cluster_seed(bag.bag_id);
    Ok(evaluate(params, bag, ctx, LayoutSpec::Recluster { seed }, false, false)?.out)
}

/// Loss of one bag, reclustering under the current parameters.
pub fn loss(bag: &Bag, params: &ModelParams, ctx: &Context<'_>) -> Result<LossBreakdown> {
    let seed = ctx.config.cluster_seed(bag.bag_id);
    let e = evaluate(params, bag, ctx, LayoutSpec::Recluster { seed }, true, false)?;
    Ok(e.loss.expect("loss requested"))
}

/// Loss with cluster assignments and semantic order fixed to `layout`.
pub fn frozen_loss(
    bag: &Bag,
    params: &ModelParams,
    ctx: &Context<'_>,
    layout: Option<&Layout>,
) -> Result<LossBreakdown> {
    let plan = match layout {
        Some(l) => LayoutSpec::Frozen(l),
        None => LayoutSpec::Recluster {
            seed: ctx.config.cluster_seed(bag.bag_id),
        },
    };
    Ok(evaluate(params, bag, ctx, plan, true, false)?.loss.expect("loss requested"))
}

/// Result of [`backward`].
#[derive(Debug, Clone)]
pub struct Backward {
    pub loss: LossBreakdown,
    pub grads: ModelParams,
    pub output: ForwardOutput,
}

/// Loss and its gradient for one bag. Clusters under the current parameters,
/// then differentiates with that layout frozen.
pub fn backward(bag: &Bag, params: &ModelParams, ctx: &Context<'_>) -> Result<Backward> {
    let seed = ctx.config.cluster_seed(bag.bag_id);
    let e = evaluate(params, bag, ctx, LayoutSpec::Recluster { seed }, true, true)?;
    Ok(Backward {
        loss: e.loss.expect("loss requested"),
        grads: e.grads.expect("gradients requested"),
        output: e.out,
    })
}

/// Gradient with a given frozen layout (or none for [`Variant::NoCluster`]).
pub fn backward_frozen(
    bag: &Bag,
    params: &ModelParams,
    ctx: &Context<'_>,
    layout: Option<&Layout>,
) -> Result<Backward> {
    let plan = match layout {
        Some(l) => LayoutSpec::Frozen(l),
        None => LayoutSpec::Recluster {
            seed: ctx.config.cluster_seed(bag.bag_id),
        },
    };
    let e = evaluate(params, bag, ctx, plan, true, true)?;
    Ok(Backward {
        loss: e.loss.expect("loss requested"),
        grads: e.grads.expect("gradients requested"),
        output: e.out,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub block: String,
    #[serde(flatten)]
    pub report: GradReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub entries: Vec<GradCheckEntry>,
    pub max_relative_error: f64,
    /// Worst coordinate per parameter block.
    pub worst_per_block: Vec<GradCheckEntry>,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Coordinates sampled in total; every block gets at least one.
    pub coordinates: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Test hook: perturbs one analytic coordinate to exercise failure paths.
    pub corrupt: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            coordinates: 60,
            step: 1e-6,
            tolerance: 1e-5,
            seed: 0,
            corrupt: false,
        }
    }
}

/// Compares analytic gradients with central differences of the frozen-layout
/// loss at randomly sampled coordinates of every parameter block.
pub fn gradient_check(
    bag: &Bag,
    params: &ModelParams,
    ctx: &Context<'_>,
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let seed = ctx.config.cluster_seed(bag.bag_id);
    let base = evaluate(params, bag, ctx, LayoutSpec::Recluster { seed }, true, true)?;
    let layout = base.out.layout.clone();
    let mut analytic = base.grads.expect("gradients requested").flatten();
    let x0 = params.flatten();
    let mut rng = rng::stream(options.seed, Domain::Init, 1);

    let blocks = params.blocks();
    if options.corrupt {
        analytic[blocks[0].1.start] += 1.0;
    }
    let mut chosen: Vec<usize> = Vec::new();
    for (_, range) in &blocks {
        if options.corrupt && range.start == 0 {
            chosen.push(0);
        } else {
            chosen.push(rng.gen_range(range.clone()));
        }
    }
    let mut rest: Vec<usize> = (0..x0.len()).filter(|i| !chosen.contains(i)).collect();
    rest.shuffle(&mut rng);
    let extra = options.coordinates.saturating_sub(chosen.len());
    chosen.extend(rest.into_iter().take(extra));
    chosen.sort_unstable();

    let objective = |flat: &[f64]| -> f64 {
        let p = params.with_flat(flat);
        frozen_loss(bag, &p, ctx, layout.as_ref()).map_or(f64::NAN, |l| l.total)
    };
    let mut entries = Vec::with_capacity(chosen.len());
    for i in chosen {
        let name = blocks
            .iter()
            .find(|(_, r)| r.contains(&i))
            .map(|(n, _)| *n)
            .expect("index inside some block");
        let numeric = finite_diff(objective, &x0, i, options.step)?;
        entries.push(GradCheckEntry {
            block: name.to_string(),
            report: GradReport::new(i, analytic[i], numeric),
        });
    }
    let max_relative_error = entries
        .iter()
        .map(|e| e.report.relative_error)
        .fold(0.0, f64::max);
    let worst_per_block = PARAM_BLOCKS
        .iter()
        .filter_map(|b| {
            entries
                .iter()
                .filter(|e| e.block == *b)
                .max_by(|a, c| a.report.relative_error.total_cmp(&c.report.relative_error))
                .cloned()
        })
        .collect();
    Ok(GradCheckReport {
        tolerance: options.tolerance,
        step: options.step,
        passed: max_relative_error <= options.tolerance,
        entries,
        max_relative_error,
        worst_per_block,
    })
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean total loss over the epoch's steps.
    pub loss: f64,
    /// Mean cross-entropy over the epoch's steps.
    pub cross_entropy: f64,
    /// Accuracy of the predictions made during the epoch, before each update.
    pub train_acc: f64,
}

/// First-order optimizer over the flattened parameters.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, lr: f64, len: usize) -> Self {
        Self {
            kind,
            lr,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        match self.kind {
            OptimizerKind::Sgd => axpy(-self.lr, grads, params),
            OptimizerKind::Adam => {
                self.t += 1;
                let bc1 = 1.0 - Self::BETA1.powi(self.t);
                let bc2 = 1.0 - Self::BETA2.powi(self.t);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
                    self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    params[i] -= self.lr * m_hat / (v_hat.sqrt() + Self::EPS);
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochStats>,
}

/// Trains from the configured initialization.
pub fn train(dataset: &[Bag], prototypes: &PrototypeSet, config: &TrainConfig) -> Result<TrainOutcome> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::EmptySet("training set is empty".into()))?;
    let params = ModelParams::for_config(first.features.cols(), config)?;
    train_from(params, dataset, prototypes, config)
}

/// Trains starting from `params`. One optimizer step per bag; bag order is
/// reshuffled every epoch from the configured seed.
pub fn train_from(
    mut params: ModelParams,
    dataset: &[Bag],
    prototypes: &PrototypeSet,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptySet("training set is empty".into()));
    }
    let n_in = params.n_in();
    if let Some(bad) = dataset.iter().find(|b| b.features.cols() != n_in) {
        return Err(Error::Dimension(format!(
            "bag {} has {} features, expected {n_in}",
            bad.bag_id,
            bad.features.cols()
        )));
    }
    if prototypes.features.cols() != n_in {
        return Err(Error::Dimension(format!(
            "prototypes have {} features, expected {n_in}",
            prototypes.features.cols()
        )));
    }

    let mut flat = params.flatten();
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, flat.len());
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 0..config.epochs {
        let freqs = config.epoch_frequencies(params.n_feat(), epoch)?;
        let ctx = Context {
            prototypes,
            freqs: &freqs,
            config,
        };
        order.sort_unstable();
        order.shuffle(&mut rng::stream(config.seed, Domain::Shuffle, epoch as u64));

        let (mut loss_sum, mut ce_sum, mut correct) = (0.0, 0.0, 0usize);
        for &i in &order {
            let bag = &dataset[i];
            let step = backward(bag, &params, &ctx)?;
            if !step.loss.total.is_finite() || !step.grads.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    bag_id: bag.bag_id,
                    loss: step.loss.total,
                    last_good: Box::new(params),
                });
            }
            loss_sum += step.loss.total;
            ce_sum += step.loss.cross_entropy;
            correct += usize::from(step.output.predicted_class() == bag.label);
            optimizer.step(&mut flat, &step.grads.flatten());
            if flat.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    bag_id: bag.bag_id,
                    loss: step.loss.total,
                    last_good: Box::new(params),
                });
            }
            params.assign_flat(&flat);
        }
        let n = dataset.len() as f64;
        let stats = EpochStats {
            epoch,
            loss: loss_sum / n,
            cross_entropy: ce_sum / n,
            train_acc: correct as f64 / n,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} ce {:.5} acc {:.4}",
            stats.loss,
            stats.cross_entropy,
            stats.train_acc
        );
        history.push(stats);
    }
    Ok(TrainOutcome { params, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pid::PrototypeSource;
    use crate::synth::{generate_bag, sample_prototypes, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_synth() -> SynthConfig {
        SynthConfig {
            n_in: 8,
            m_min: 24,
            m_max: 40,
            prototypes: 6,
            seed: 5,
            ..SynthConfig::default()
        }
    }

    fn small_config(variant: Variant, metric: DistanceMetric) -> TrainConfig {
        TrainConfig {
            frequencies: 32,
            variant,
            metric,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    struct Fixture {
        bag: Bag,
        protos: PrototypeSet,
        freqs: FrequencySample,
        params: ModelParams,
    }

    fn fixture(config: &TrainConfig, bag_id: u64) -> Fixture {
        let synth = small_synth();
        let bag = generate_bag(&synth, bag_id).unwrap();
        let protos = sample_prototypes(&synth).unwrap();
        let mut params = ModelParams::for_config(synth.n_in, config).unwrap();
        // Larger head weights so every block receives a sizeable gradient.
        let mut rng = ChaCha8Rng::seed_from_u64(bag_id);
        for v in params.head_weight.values_mut() {
            *v = rand::Rng::gen_range(&mut rng, -1.0..1.0);
        }
        let freqs = config.eval_frequencies(params.n_feat()).unwrap();
        Fixture {
            bag,
            protos,
            freqs,
            params,
        }
    }

    fn ctx<'a>(f: &'a Fixture, config: &'a TrainConfig) -> Context<'a> {
        Context {
            prototypes: &f.protos,
            freqs: &f.freqs,
            config,
        }
    }

    fn permuted(bag: &Bag, perm: &[usize]) -> Bag {
        Bag {
            features: bag.features.select_rows(perm),
            roles: None,
            ..bag.clone()
        }
    }

    #[test]
    fn probabilities_are_normalized() {
        for variant in Variant::ALL {
            let config = small_config(variant, DistanceMetric::Cfd);
            let f = fixture(&config, 1);
            let out = forward(&f.bag, &f.params, &ctx(&f, &config)).unwrap();
            assert!((out.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(out.probs.iter().all(|p| *p >= 0.0));
            assert_eq!(out.detail.is_some(), variant != Variant::NoCluster);
        }
    }

    #[test]
    fn zero_head_gives_uniform_probs() {
        let config = small_config(Variant::Full, DistanceMetric::Cfd);
        let mut f = fixture(&config, 2);
        f.params.head_weight = Matrix::zeros(3, f.params.n_feat());
        f.params.head_bias = vec![0.0; 3];
        let out = forward(&f.bag, &f.params, &ctx(&f, &config)).unwrap();
        for p in out.probs {
            assert!((p - 1.0 / 3.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn forward_is_permutation_invariant() {
        for variant in Variant::ALL {
            for metric in [DistanceMetric::Cfd, DistanceMetric::Mmd] {
                let config = small_config(variant, metric);
                let f = fixture(&config, 3);
                let c = ctx(&f, &config);
                let base = forward(&f.bag, &f.params, &c).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(11);
                let mut perm: Vec<usize> = (0..f.bag.len()).collect();
                for _ in 0..5 {
                    perm.shuffle(&mut rng);
                    let out = forward(&permuted(&f.bag, &perm), &f.params, &c).unwrap();
                    for (a, b) in out.probs.iter().zip(&base.probs) {
                        assert!((a - b).abs() <= 1e-9, "{variant:?} {metric:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn duplicating_instances_keeps_probs() {
        for variant in Variant::ALL {
            let config = small_config(variant, DistanceMetric::Cfd);
            let f = fixture(&config, 4);
            let c = ctx(&f, &config);
            let m = f.bag.len();
            let doubled: Vec<usize> = (0..m).chain(0..m).collect();
            let a = forward(&f.bag, &f.params, &c).unwrap();
            let b = forward(&permuted(&f.bag, &doubled), &f.params, &c).unwrap();
            for (x, y) in a.probs.iter().zip(&b.probs) {
                assert!((x - y).abs() <= 1e-9, "{variant:?}");
            }
        }
    }

    #[test]
    fn switched_off_regularizers_leave_cross_entropy() {
        let config = TrainConfig {
            gamma1: 0.0,
            gamma2: 0.0,
            gamma3: 0.0,
            ..small_config(Variant::Full, DistanceMetric::Cfd)
        };
        let f = fixture(&config, 5);
        let c = ctx(&f, &config);
        let l = loss(&f.bag, &f.params, &c).unwrap();
        let out = forward(&f.bag, &f.params, &c).unwrap();
        assert_eq!(l.total, -out.probs[f.bag.label].ln());
    }

    #[test]
    fn loss_terms_match_independent_computation() {
        let config = small_config(Variant::Full, DistanceMetric::Cfd);
        let f = fixture(&config, 6);
        let c = ctx(&f, &config);
        let l = loss(&f.bag, &f.params, &c).unwrap();
        let out = forward(&f.bag, &f.params, &c).unwrap();
        let detail = out.detail.unwrap();

        let z = f.params.project_instances(&f.bag.features).unwrap();
        let zp = f.params.project_instances(&f.protos.features).unwrap();
        let mean_of = |sem: Semantic| -> Vec<f64> {
            let rows: Vec<usize> = (0..z.rows()).filter(|&i| detail.instance_map[i] == sem).collect();
            z.select_rows(&rows).mean_row()
        };
        let pm = zp.mean_row();
        let w = f.params.metric.weights();
        let dist = |a: &[f64]| -> f64 {
            let mut s = 0.0;
            for i in 0..w.rows() {
                let mut acc = 0.0;
                for j in 0..w.cols() {
                    acc += w.get(i, j) * (a[j] - pm[j]);
                }
                s += acc * acc;
            }
            s.sqrt()
        };
        let ce = -out.probs[f.bag.label].ln();
        let c_min = dist(&mean_of(Semantic::Tumor));
        let c_max = dist(&mean_of(Semantic::Background));
        let trace: f64 = w.values().iter().map(|v| v * v).sum();
        let expected = ce + 0.1 * c_min - 0.1 * c_max.min(10.0) + 0.01 * trace;
        assert!((l.total - expected).abs() <= 1e-12);
        assert!((l.c_min - c_min).abs() <= 1e-12);
        assert!((l.c_max - c_max).abs() <= 1e-12);
    }

    #[test]
    fn prototype_bag_has_zero_c_min() {
        let config = small_config(Variant::Full, DistanceMetric::Cfd);
        let f = fixture(&config, 7);
        // Tumor cluster made of the prototypes themselves.
        let mut rows: Vec<Vec<f64>> = f.protos.features.row_iter().map(<[f64]>::to_vec).collect();
        let far: Vec<Vec<f64>> = f
            .bag
            .features
            .row_iter()
            .zip(f.bag.roles.as_ref().unwrap())
            .filter(|(_, r)| **r != crate::synth::Role::Tumor)
            .map(|(x, _)| x.to_vec())
            .collect();
        rows.extend(far);
        let bag = Bag {
            features: Matrix::from_rows(&rows).unwrap(),
            roles: None,
            ..f.bag.clone()
        };
        let l = loss(&bag, &f.params, &ctx(&f, &config)).unwrap();
        assert!(l.c_min <= 1e-12, "{}", l.c_min);
    }

    fn assert_gradients(config: &TrainConfig, bag_id: u64) {
        let f = fixture(config, bag_id);
        let report = gradient_check(
            &f.bag,
            &f.params,
            &ctx(&f, config),
&GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.entries.len() >= 50);
        assert!(
            report.passed,
            "{:?} {:?} worst {:?}",
            config.variant, config.metric, report.worst_per_block
        );
        assert_eq!(report.worst_per_block.len(), PARAM_BLOCKS.len());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for variant in Variant::ALL {
            assert_gradients(&small_config(variant, DistanceMetric::Cfd), 8);
        }
        assert_gradients(&small_config(Variant::Full, DistanceMetric::Mmd), 9);
        assert_gradients(
            &TrainConfig {
                normalization: Normalization::Sum,
                ..small_config(Variant::Full, DistanceMetric::Cfd)
            },
            10,
        );
    }

    #[test]
    fn corrupted_gradient_fails_check() {
        let config = small_config(Variant::Full, DistanceMetric::Cfd);
        let f = fixture(&config, 8);
        let report = gradient_check(
            &f.bag,
            &f.params,
            &ctx(&f, &config),
            &GradCheckOptions {
                corrupt: true,
                ..GradCheckOptions::default()
            },
        )
        .unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn trace_gradient_is_twice_w() {
        let config = TrainConfig {
            gamma1: 0.0,
            gamma2: 0.0,
            gamma3: 0.37,
            ..small_config(Variant::LrscOnly, DistanceMetric::Cfd)
        };
        let f = fixture(&config, 11);
        let b = backward(&f.bag, &f.params, &ctx(&f, &config)).unwrap();
        for (g, w) in b.grads.metric.weights().values().iter().zip(f.params.metric.weights().values()) {
            assert!((g - 2.0 * 0.37 * w).abs() <= 1e-15);
        }
    }

    #[test]
    fn head_gradient_is_softmax_closed_form() {
        let config = TrainConfig {
            gamma1: 0.0,
            gamma2: 0.0,
            gamma3: 0.0,
            ..small_config(Variant::NaiveCluster, DistanceMetric::Cfd)
        };
        let f = fixture(&config, 12);
        let b = backward(&f.bag, &f.params, &ctx(&f, &config)).unwrap();
        let z = &b.output.representation;
        for c in 0..3 {
            let err = b.output.probs[c] - f64::from(u8::from(c == f.bag.label));
            assert!((b.grads.head_bias[c] - err).abs() <= 1e-15);
            for j in 0..z.len() {
                assert!((b.grads.head_weight.get(c, j) - err * z[j]).abs() <= 1e-15);
            }
        }
    }

    fn tiny_dataset(count: usize) -> (Vec<Bag>, PrototypeSet) {
        let synth = small_synth();
        let bags = crate::synth::generate_dataset(&synth, count).unwrap();
        (bags, sample_prototypes(&synth).unwrap())
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (bags, protos) = tiny_dataset(4);
        for optimizer in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let config = TrainConfig {
                learning_rate: 0.0,
                epochs: 2,
                optimizer,
                ..small_config(Variant::Full, DistanceMetric::Cfd)
            };
            let init = ModelParams::for_config(8, &config).unwrap();
            let out = train(&bags, &protos, &config).unwrap();
            assert_eq!(out.params, init);
            assert_eq!(out.history.len(), 2);
        }
    }

    #[test]
    fn repeated_separable_bag_reduces_cross_entropy() {
        let (bags, protos) = tiny_dataset(1);
        let config = TrainConfig {
            learning_rate: 0.01,
            epochs: 10,
            optimizer: OptimizerKind::Sgd,
            ..small_config(Variant::Full, DistanceMetric::Cfd)
        };
        let data = vec![bags[0].clone(); 4];
        let out = train(&data, &protos, &config).unwrap();
        for pair in out.history.windows(2) {
            assert!(pair[1].cross_entropy <= pair[0].cross_entropy + 1e-9, "{:?}", out.history);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (bags, protos) = tiny_dataset(5);
        let config = TrainConfig {
            epochs: 2,
            ..small_config(Variant::Full, DistanceMetric::Cfd)
        };
        let a = train(&bags, &protos, &config).unwrap();
        let b = train(&bags, &protos, &config).unwrap();
        assert_eq!(a.params.flatten(), b.params.flatten());
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let (bags, protos) = tiny_dataset(3);
        let config = TrainConfig {
            learning_rate: f64::MAX,
            epochs: 3,
            optimizer: OptimizerKind::Sgd,
            ..small_config(Variant::NoCluster, DistanceMetric::Cfd)
        };
        match train(&bags, &protos, &config) {
            Err(Error::Divergence { last_good, .. }) => assert!(last_good.is_finite()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn flatten_round_trips() {
        let p = ModelParams::init(5, 4, 2, 3, 1).unwrap();
        let flat = p.flatten();
        assert_eq!(flat.len(), p.len());
        assert_eq!(p.with_flat(&flat), p);
        let blocks = p.blocks();
        assert_eq!(blocks.last().unwrap().1.end, p.len());
        let _ = PrototypeSource::File;
    }
}
