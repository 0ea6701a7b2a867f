//! Classification metrics, effect size, disentanglement scores and the
//! ablation harness.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, sub, Matrix};
use crate::model::{forward, train, Context, DistanceMetric, ModelParams, TrainConfig, Variant};
use crate::pid::{PrototypeSet, Semantic};
use crate::rng::{self, Domain};
use crate::synth::{Bag, Role};

/// Fraction of positions where `predictions` equals `labels`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::EmptySet("no predictions".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mid-ranks (1-based) with ties sharing their average rank.
fn average_ranks(scores: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Binary ROC AUC by the Mann-Whitney statistic. `None` when either class is absent.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, p)| **p).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// One-vs-rest AUC per class; `None` for classes absent from `labels` or
/// present in every row.
pub fn per_class_auc(probs: &Matrix, labels: &[usize]) -> Result<Vec<Option<f64>>> {
    if probs.rows() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} score rows for {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    Ok((0..probs.cols())
        .map(|c| {
            let scores: Vec<f64> = probs.row_iter().map(|r| r[c]).collect();
            let positive: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            binary_auc(&scores, &positive)
        })
        .collect())
}

/// Mean of the defined one-vs-rest AUCs.
pub fn macro_auc(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    let per_class = per_class_auc(probs, labels)?;
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    for (c, auc) in per_class.iter().enumerate() {
        if auc.is_none() {
            log::warn!("AUC undefined for class {c}; skipped");
        }
    }
    if defined.is_empty() {
        return Err(Error::UndefinedMetric("no class has a defined AUC".into()));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// One-way ANOVA `SS_between / SS_total` of scalar values grouped by label.
pub fn eta_squared_1d(values: &[f64], labels: &[usize]) -> Result<f64> {
    if values.len() != labels.len() {
        return Err(Error::Dimension("values and labels differ in length".into()));
    }
    if values.len() < 2 {
        return Err(Error::EmptySet("η² needs at least 2 samples".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut sums = vec![0.0; classes];
    let mut counts = vec![0usize; classes];
    for (&v, &l) in values.iter().zip(labels) {
        sums[l] += v;
        counts[l] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::EmptySet("η² needs at least 2 classes".into()));
    }
    let grand = values.iter().sum::<f64>() / values.len() as f64;
    let ss_total: f64 = values.iter().map(|v| (v - grand).powi(2)).sum();
    let ss_between: f64 = sums
        .iter()
        .zip(&counts)
        .filter(|(_, &n)| n > 0)
        .map(|(s, &n)| n as f64 * (s / n as f64 - grand).powi(2))
        .sum();
    if ss_total <= 0.0 {
        log::warn!("η²: zero total variance");
        return Ok(0.0);
    }
    Ok((ss_between / ss_total).clamp(0.0, 1.0))
}

/// Projects each row onto the difference of the means of the two most
/// populous classes (ties broken towards the lower class index).
pub fn class_direction_projection(features: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    if features.rows() != labels.len() {
        return Err(Error::Dimension("features and labels differ in length".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    let mut by_size: Vec<usize> = (0..classes).filter(|&c| counts[c] > 0).collect();
    by_size.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    if by_size.len() < 2 {
        return Err(Error::EmptySet("η² needs at least 2 classes".into()));
    }
    let class_mean = |c: usize| -> Vec<f64> {
        let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        features.select_rows(&rows).mean_row()
    };
    let (lo, hi) = (by_size[0].min(by_size[1]), by_size[0].max(by_size[1]));
    let direction = sub(&class_mean(hi), &class_mean(lo));
    Ok(features.row_iter().map(|r| dot(r, &direction)).collect())
}

/// η² of the 1-D class-direction projection of `features`.
pub fn eta_squared(features: &Matrix, labels: &[usize]) -> Result<f64> {
    eta_squared_1d(&class_direction_projection(features, labels)?, labels)
}

fn role_semantic(role: Role) -> Semantic {
    match role {
        Role::Tumor => Semantic::Tumor,
        Role::Nontumor => Semantic::NonTumor,
        Role::Background => Semantic::Background,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisentangleScore {
    /// Semantic label taken at face value.
    pub anchored: f64,
    /// Best agreement over the 6 relabellings of the three semantics.
    pub best_permutation: f64,
    /// Fraction of tumor instances labelled TIs.
    pub tumor_recall: f64,
    pub instances: usize,
}

const PERMUTATIONS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

/// Agreement of predicted semantics with ground-truth roles, pooled over bags.
pub fn disentangle_accuracy(bags: &[(&[Semantic], Option<&[Role]>)]) -> Result<DisentangleScore> {
    // confusion[role][semantic]
    let mut confusion = [[0usize; 3]; 3];
    for (map, roles) in bags {
        let roles = roles.ok_or_else(|| Error::RolesUnavailable("bag has no ground-truth roles".into()))?;
        if roles.len() != map.len() {
            return Err(Error::Dimension("instance map and roles differ in length".into()));
        }
        for (s, r) in map.iter().zip(roles.iter()) {
            confusion[r.index()][s.rank()] += 1;
        }
    }
    let total: usize = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(Error::EmptySet("no instances".into()));
    }
    let agreement = |perm: &[usize; 3]| -> usize { (0..3).map(|r| confusion[r][perm[r]]).sum() };
    let anchored = agreement(&[0, 1, 2]);
    let best = PERMUTATIONS.iter().map(agreement).max().unwrap_or(0);
    let tumors: usize = confusion[Role::Tumor.index()].iter().sum();
    let tumor_hits = confusion[Role::Tumor.index()][role_semantic(Role::Tumor).rank()];
    Ok(DisentangleScore {
        anchored: anchored as f64 / total as f64,
        best_permutation: best as f64 / total as f64,
        tumor_recall: if tumors == 0 { 0.0 } else { tumor_hits as f64 / tumors as f64 },
        instances: total,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub seed: u64,
    pub bags: usize,
    pub accuracy: f64,
    pub macro_auc: f64,
    pub per_class_auc: Vec<Option<f64>>,
    pub eta_squared: f64,
    /// Absent when variant does not disentangle or roles are unknown.
    pub disentangle: Option<DisentangleScore>,
}

/// Per-bag outputs gathered during evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub bag_ids: Vec<u64>,
    pub labels: Vec<usize>,
    pub predicted: Vec<usize>,
    pub probs: Matrix,
    pub representations: Matrix,
    /// 1-D class-direction projections used for η².
    pub projections: Vec<f64>,
}

/// Runs the model over `bags` and scores it.
pub fn evaluate(
    params: &ModelParams,
    bags: &[Bag],
    prototypes: &PrototypeSet,
    config: &TrainConfig,
    variant_tag: &str,
) -> Result<(EvalReport, Predictions)> {
    if bags.is_empty() {
        return Err(Error::EmptySet("no bags to evaluate".into()));
    }
    let freqs = config.eval_frequencies(params.n_feat())?;
    let ctx = Context {
        prototypes,
        freqs: &freqs,
        config,
    };
    let mut probs = Vec::with_capacity(bags.len() * params.classes());
    let mut reps = Vec::with_capacity(bags.len() * params.n_feat());
    let mut predicted = Vec::with_capacity(bags.len());
    let mut maps = Vec::new();
    for bag in bags {
        let out = forward(bag, params, &ctx)?;
        predicted.push(out.predicted_class());
        probs.extend_from_slice(&out.probs);
        reps.extend_from_slice(&out.representation);
        if let Some(d) = out.detail {
            maps.push(d.instance_map);
        }
    }
    let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
    let probs = Matrix::new(bags.len(), params.classes(), probs)?;
    let representations = Matrix::new(bags.len(), params.n_feat(), reps)?;
    let projections = class_direction_projection(&representations, &labels)?;

    let disentangle = if maps.len() == bags.len() && bags.iter().all(|b| b.roles.is_some()) {
        let pairs: Vec<(&[Semantic], Option<&[Role]>)> = maps
            .iter()
            .zip(bags)
            .map(|(m, b)| (m.as_slice(), b.roles.as_deref()))
            .collect();
        Some(disentangle_accuracy(&pairs)?)
    } else {
        None
    };

    let report = EvalReport {
        variant: variant_tag.to_string(),
        seed: config.seed,
        bags: bags.len(),
        accuracy: accuracy(&predicted, &labels)?,
        macro_auc: macro_auc(&probs, &labels)?,
        per_class_auc: per_class_auc(&probs, &labels)?,
        eta_squared: eta_squared_1d(&projections, &labels)?,
        disentangle,
    };
    let predictions = Predictions {
        bag_ids: bags.iter().map(|b| b.bag_id).collect(),
        labels,
        predicted,
        probs,
        representations,
        projections,
    };
    Ok((report, predictions))
}

/// Seeded train/test split; the first `round(fraction·n)` shuffled bags train.
pub fn split(bags: &[Bag], train_fraction: f64, seed: u64) -> Result<(Vec<Bag>, Vec<Bag>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config("train_fraction", "must lie in (0, 1)"));
    }
    let n = bags.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::EmptySet(format!("{n} bags cannot be split {train_fraction}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng::stream(seed, Domain::Split, 0));
    let train = idx[..n_train].iter().map(|&i| bags[i].clone()).collect();
    let test = idx[n_train..].iter().map(|&i| bags[i].clone()).collect();
    Ok((train, test))
}

/// A row of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationArm {
    pub variant: Variant,
    pub metric: DistanceMetric,
}

impl AblationArm {
    /// Four aggregation variants with CFD, then the full model with MMD.
    pub const GRID: [AblationArm; 5] = [
        AblationArm { variant: Variant::NoCluster, metric: DistanceMetric::Cfd },
        AblationArm { variant: Variant::NaiveCluster, metric: DistanceMetric::Cfd },
        AblationArm { variant: Variant::LrscOnly, metric: DistanceMetric::Cfd },
        AblationArm { variant: Variant::Full, metric: DistanceMetric::Cfd },
        AblationArm { variant: Variant::Full, metric: DistanceMetric::Mmd },
    ];

    pub fn tag(&self) -> String {
        match self.metric {
            DistanceMetric::Cfd => self.variant.as_str().to_string(),
            DistanceMetric::Mmd => format!("{}_mmd", self.variant.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationOptions {
    pub seeds: Vec<u64>,
    pub train_fraction: f64,
}

impl Default for AblationOptions {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            train_fraction: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub report: Option<EvalReport>,
    /// Training or evaluation failure, recorded instead of aborting.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianRow {
    pub variant: String,
    pub runs: usize,
    pub failures: usize,
    pub accuracy: Option<f64>,
    pub macro_auc: Option<f64>,
    pub eta_squared: Option<f64>,
    pub tumor_recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub medians: Vec<MedianRow>,
}

impl AblationTable {
    pub fn median(&self, variant: &str) -> Option<&MedianRow> {
        self.medians.iter().find(|m| m.variant == variant)
    }

    /// Aligned plain-text rendering of the medians.
    pub fn render(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut out = format!(
            "{:<16} {:>5} {:>6} {:>8} {:>8} {:>8} {:>8}\n",
            "variant", "runs", "failed", "acc", "auc", "eta2", "tumor"
        );
        for m in &self.medians {
            out.push_str(&format!(
                "{:<16} {:>5} {:>6} {:>8} {:>8} {:>8} {:>8}\n",
                m.variant,
                m.runs,
                m.failures,
                fmt(m.accuracy),
                fmt(m.macro_auc),
                fmt(m.eta_squared),
                fmt(m.tumor_recall)
            ));
        }
        out
    }
}

/// Median with the two middle values averaged; `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 0 { (v[mid - 1] + v[mid]) / 2.0 } else { v[mid] })
}

/// Aggregates rows into per-variant medians, keeping first-seen variant order.
pub fn summarize(rows: &[AblationRow]) -> Vec<MedianRow> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.variant.as_str()) {
            order.push(&r.variant);
        }
    }
    order
        .into_iter()
        .map(|variant| {
            let reports: Vec<&EvalReport> = rows
                .iter()
                .filter(|r| r.variant == variant)
                .filter_map(|r| r.report.as_ref())
                .collect();
            let runs = rows.iter().filter(|r| r.variant == variant).count();
            let pick = |f: &dyn Fn(&EvalReport) -> Option<f64>| {
                median(&reports.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
            };
            MedianRow {
                variant: variant.to_string(),
                runs,
                failures: runs - reports.len(),
                accuracy: pick(&|r| Some(r.accuracy)),
                macro_auc: pick(&|r| Some(r.macro_auc)),
                eta_squared: pick(&|r| Some(r.eta_squared)),
                tumor_recall: pick(&|r| r.disentangle.map(|d| d.tumor_recall)),
            }
        })
        .collect()
}

/// Trains and evaluates one arm on a fixed split.
pub fn run_arm(
    arm: AblationArm,
    train_bags: &[Bag],
    test_bags: &[Bag],
    prototypes: &PrototypeSet,
    base: &TrainConfig,
    seed: u64,
) -> Result<EvalReport> {
    let config = TrainConfig {
        variant: arm.variant,
        metric: arm.metric,
        seed,
        ..base.clone()
    };
    let outcome = train(train_bags, prototypes, &config)?;
    Ok(evaluate(&outcome.params, test_bags, prototypes, &config, &arm.tag())?.0)
}

/// Trains and evaluates every arm of [`AblationArm::GRID`] for every seed.
/// Each seed draws its own split. Failures are recorded per row.
pub fn run_ablation(
    dataset: &[Bag],
    prototypes: &PrototypeSet,
    base: &TrainConfig,
    options: &AblationOptions,
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for &seed in &options.seeds {
        let (train_bags, test_bags) = split(dataset, options.train_fraction, seed)?;
        for arm in AblationArm::GRID {
            let result = run_arm(arm, &train_bags, &test_bags, prototypes, base, seed);
            if let Err(e) = &result {
                log::warn!("{} seed {seed} failed: {e}", arm.tag());
            }
            rows.push(AblationRow {
                variant: arm.tag(),
                seed,
                error: result.as_ref().err().map(ToString::to_string),
                report: result.ok(),
            });
        }
    }
    let medians = summarize(&rows);
    Ok(AblationTable { rows, medians })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn accuracy_counts() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 2, 0], &[0, 1, 2]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 1, 1], &[0, 1, 2, 1]).unwrap(), 0.75);
        assert!(matches!(accuracy(&[0], &[0, 1]), Err(Error::Dimension(_))));
    }

    fn pair_counting_auc(scores: &[f64], positive: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &pi) in positive.iter().enumerate() {
            for (j, &pj) in positive.iter().enumerate() {
                if pi && !pj {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    fn prob_rows(rows: &[[f64; 3]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn auc_edge_cases() {
        let separated = prob_rows(&[[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8], [0.7, 0.2, 0.1]]);
        assert_eq!(macro_auc(&separated, &[0, 1, 2, 0]).unwrap(), 1.0);
        let flat = prob_rows(&[[1.0 / 3.0; 3]; 4]);
        for auc in per_class_auc(&flat, &[0, 1, 2, 0]).unwrap() {
            assert_eq!(auc, Some(0.5));
        }
        let one_class = prob_rows(&[[0.5, 0.3, 0.2]; 3]);
        assert!(matches!(macro_auc(&one_class, &[0, 0, 0]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn auc_matches_pair_counting_on_hand_case() {
        let probs = prob_rows(&[
            [0.5, 0.3, 0.2],
            [0.2, 0.5, 0.3],
            [0.3, 0.3, 0.4],
            [0.5, 0.2, 0.3],
            [0.1, 0.6, 0.3],
            [0.4, 0.4, 0.2],
        ]);
        let labels = [0, 1, 2, 2, 1, 0];
        let per = per_class_auc(&probs, &labels).unwrap();
        let mut sum = 0.0;
        for c in 0..3 {
            let scores: Vec<f64> = probs.row_iter().map(|r| r[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            let oracle = pair_counting_auc(&scores, &pos);
            assert!((per[c].unwrap() - oracle).abs() <= 1e-15);
            sum += oracle;
        }
        assert!((macro_auc(&probs, &labels).unwrap() - sum / 3.0).abs() <= 1e-15);
    }

    #[test]
    fn eta_squared_hand_cases() {
        assert_eq!(eta_squared_1d(&[1.0, 1.0, 3.0, 3.0], &[0, 0, 1, 1]).unwrap(), 1.0);
        // Means 1.5 and 2.5, grand mean 2: SS_between = 1, SS_total = 2.
        let v = eta_squared_1d(&[1.0, 2.0, 2.0, 3.0], &[0, 0, 1, 1]).unwrap();
        assert!((v - 0.5).abs() <= 1e-15);
        assert_eq!(eta_squared_1d(&[1.0, 3.0, 3.0, 1.0], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(eta_squared_1d(&[2.0; 4], &[0, 0, 1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn eta_squared_projects_on_class_direction() {
        let features = Matrix::from_rows(&[
            vec![0.0, 5.0],
            vec![0.0, -5.0],
            vec![2.0, 1.0],
            vec![2.0, -1.0],
        ])
        .unwrap();
        // The direction is (2, 0); the second coordinate is invisible.
        assert_eq!(eta_squared(&features, &[0, 0, 1, 1]).unwrap(), 1.0);
    }

    #[test]
    fn disentangle_scores() {
        use Semantic as S;
        let roles = [Role::Tumor, Role::Nontumor, Role::Background, Role::Nontumor];
        let perfect = [S::Tumor, S::NonTumor, S::Background, S::NonTumor];
        let s = disentangle_accuracy(&[(&perfect, Some(&roles))]).unwrap();
        assert_eq!((s.anchored, s.best_permutation, s.tumor_recall), (1.0, 1.0, 1.0));

        let swapped = [S::Background, S::NonTumor, S::Tumor, S::NonTumor];
        let s = disentangle_accuracy(&[(&swapped, Some(&roles))]).unwrap();
        assert_eq!(s.anchored, 0.5);
        assert_eq!(s.best_permutation, 1.0);
        assert_eq!(s.tumor_recall, 0.0);

        assert!(matches!(
            disentangle_accuracy(&[(&perfect, None)]),
            Err(Error::RolesUnavailable(_))
        ));
    }

    #[test]
    fn random_labels_agree_a_third_of_the_time() {
        let roles: Vec<Role> = (0..300).map(|i| Role::ALL[i % 3]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut total = 0.0;
        for _ in 0..1000 {
            let map: Vec<Semantic> = (0..300).map(|_| Semantic::ALL[rng.gen_range(0..3)]).collect();
            total += disentangle_accuracy(&[(&map, Some(&roles))]).unwrap().anchored;
        }
        assert!((total / 1000.0 - 1.0 / 3.0).abs() <= 0.03);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn grid_has_five_arms() {
        let tags: Vec<String> = AblationArm::GRID.iter().map(AblationArm::tag).collect();
        assert_eq!(tags, ["no_cluster", "naive_cluster", "lrsc_only", "full", "full_mmd"]);
    }

    fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
        let mut l: Vec<usize> = (0..n).map(|i| i % 3).collect();
        rand::seq::SliceRandom::shuffle(l.as_mut_slice(), rng);
        l
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn auc_ignores_monotone_transforms(seed in any::<u64>(), n in 6usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels = random_labels(&mut rng, n);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.01..1.0)).collect();
                    let s: f64 = raw.iter().sum();
                    raw.iter().map(|v| v / s).collect()
                })
                .collect();
            let probs = Matrix::from_rows(&rows).unwrap();
            let transformed = Matrix::from_rows(
                &rows.iter().map(|r| r.iter().map(|v| (3.0 * v).exp() + v.powi(3)).collect()).collect::<Vec<_>>(),
            )
            .unwrap();
            let a = per_class_auc(&probs, &labels).unwrap();
            let b = per_class_auc(&transformed, &labels).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn eta_squared_is_scale_free(seed in any::<u64>(), n in 4usize..40, a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels = random_labels(&mut rng, n);
            let v: Vec<f64> = labels.iter().map(|&l| l as f64 + rng.gen_range(-1.0..1.0)).collect();
            let w: Vec<f64> = v.iter().map(|x| a * x + b).collect();
            let e1 = eta_squared_1d(&v, &labels).unwrap();
            let e2 = eta_squared_1d(&w, &labels).unwrap();
            prop_assert!((e1 - e2).abs() <= 1e-9);
            prop_assert!((0.0..=1.0).contains(&e1));
        }

        #[test]
        fn scores_ignore_sample_order(seed in any::<u64>(), n in 3usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels = random_labels(&mut rng, n);
            let preds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let roles: Vec<Role> = (0..n).map(|_| Role::ALL[rng.gen_range(0..3)]).collect();
            let map: Vec<Semantic> = (0..n).map(|_| Semantic::ALL[rng.gen_range(0..3)]).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let p2: Vec<usize> = perm.iter().map(|&i| preds[i]).collect();
            let l2: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
            let r2: Vec<Role> = perm.iter().map(|&i| roles[i]).collect();
            let m2: Vec<Semantic> = perm.iter().map(|&i| map[i]).collect();
            prop_assert_eq!(accuracy(&preds, &labels).unwrap(), accuracy(&p2, &l2).unwrap());
            let d1 = disentangle_accuracy(&[(&map, Some(&roles))]).unwrap();
            let d2 = disentangle_accuracy(&[(&m2, Some(&r2))]).unwrap();
            prop_assert_eq!(d1, d2);
            prop_assert!(d1.anchored <= d1.best_permutation);
        }
    }
}
