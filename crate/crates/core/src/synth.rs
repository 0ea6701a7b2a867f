//! Synthetic bags built from a three-component Gaussian mixture.
//!
//! Tumor instances are rare (`rho`) and carry the class signal
//! `label·delta` along a fixed direction `u`; non-tumor instances dominate the
//! bag and carry a weaker copy of the same signal (`delta/4`), which makes
//! them confusable with tumor; background instances are class-independent
//! and twice as diffuse.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::pid::{PrototypeSet, PrototypeSource};
use crate::rng::{self, Domain};

/// Ground-truth role of an instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Tumor,
    Nontumor,
    Background,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Tumor, Role::Nontumor, Role::Background];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bag {
    pub bag_id: u64,
    pub features: Matrix,
    pub label: usize,
    /// Per-instance roles; absent for externally supplied features.
    pub roles: Option<Vec<Role>>,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: usize,
    pub n_in: usize,
    pub m_min: usize,
    pub m_max: usize,
    /// Fraction of tumor instances per bag.
    pub rho: f64,
    /// Per-grade shift of the tumor component along `u`.
    pub delta: f64,
    /// Standard deviation of the tumor and non-tumor components.
    pub spread: f64,
    /// Distance between the tumor (and background) anchor and the non-tumor one.
    pub separation: f64,
    pub prototypes: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            n_in: 32,
            m_min: 64,
            m_max: 256,
            rho: 0.05,
            delta: 0.4,
            spread: 0.05,
            separation: 1.5,
            prototypes: 32,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, msg: &str| Err(Error::config(key, msg));
        if self.classes < 2 {
            return fail("classes", "need at least 2 classes");
        }
        if self.n_in == 0 {
            return fail("n_in", "must be ≥ 1");
        }
        if self.m_min < 3 {
            return fail("m_min", "bags need at least 3 instances");
        }
        if self.m_max < self.m_min {
            return fail("m_max", "must be ≥ m_min");
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return fail("rho", "must lie in (0, 1)");
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return fail("delta", "must be ≥ 0");
        }
        if !(self.spread > 0.0 && self.spread.is_finite()) {
            return fail("spread", "must be > 0");
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return fail("separation", "must be ≥ 0");
        }
        if self.prototypes == 0 {
            return fail("prototypes", "must be ≥ 1");
        }
        Ok(())
    }

    /// Instance counts `(tumor, non-tumor, background)` for a bag of size `m`.
    pub fn role_counts(&self, m: usize) -> (usize, usize, usize) {
        let tumor = ((self.rho * m as f64 - 1e-9).ceil() as usize).clamp(1, m);
        let rest = m - tumor;
        let nontumor = ((0.7 * rest as f64).round() as usize).min(rest);
        (tumor, nontumor, rest - nontumor)
    }

    /// Mixture anchors and the class-signal direction.
    pub fn geometry(&self) -> Geometry {
        let n = self.n_in;
        let q = (n / 8).max(1);
        let mut a = vec![0.0; n];
        for v in &mut a[..q] {
            *v = 1.0 / (q as f64).sqrt();
        }
        let u = if n > q {
            let mut u = vec![0.0; n];
            for v in &mut u[q..] {
                *v = 1.0 / ((n - q) as f64).sqrt();
            }
            u
        } else {
            a.clone()
        };
        Geometry {
            tumor: a.iter().map(|v| self.separation * v).collect(),
            nontumor: vec![0.0; n],
            background: a.iter().map(|v| -self.separation * v).collect(),
            direction: u,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub tumor: Vec<f64>,
    pub nontumor: Vec<f64>,
    pub background: Vec<f64>,
    /// Unit direction carrying the class signal.
    pub direction: Vec<f64>,
}

fn push_gaussian<R: Rng + ?Sized>(out: &mut Vec<f64>, mean: &[f64], std: f64, rng: &mut R) {
    let noise = Normal::new(0.0, std).expect("valid std");
    out.extend(mean.iter().map(|m| m + noise.sample(rng)));
}

/// Generates bag `bag_id` of the dataset defined by `cfg`.
pub fn generate_bag(cfg: &SynthConfig, bag_id: u64) -> Result<Bag> {
    cfg.validate()?;
    let geo = cfg.geometry();
    let mut rng = rng::stream(cfg.seed, Domain::Bag, bag_id);
    let label = rng.gen_range(0..cfg.classes);
    let m = rng.gen_range(cfg.m_min..=cfg.m_max);
    let (n_t, n_n, n_b) = cfg.role_counts(m);

    let shifted = |anchor: &[f64], amount: f64| -> Vec<f64> {
        anchor
            .iter()
            .zip(&geo.direction)
            .map(|(a, u)| a + amount * u)
            .collect()
    };
    let y = label as f64;
    let tumor_mean = shifted(&geo.tumor, y * cfg.delta);
    let nontumor_mean = shifted(&geo.nontumor, y * cfg.delta / 4.0);

    let mut roles = Vec::with_capacity(m);
    roles.extend(std::iter::repeat(Role::Tumor).take(n_t));
    roles.extend(std::iter::repeat(Role::Nontumor).take(n_n));
    roles.extend(std::iter::repeat(Role::Background).take(n_b));
    roles.shuffle(&mut rng);

    let mut values = Vec::with_capacity(m * cfg.n_in);
    for role in &roles {
        match role {
            Role::Tumor => push_gaussian(&mut values, &tumor_mean, cfg.spread, &mut rng),
            Role::Nontumor => push_gaussian(&mut values, &nontumor_mean, cfg.spread, &mut rng),
            Role::Background => {
                push_gaussian(&mut values, &geo.background, 2.0 * cfg.spread, &mut rng)
            }
        }
    }
    Ok(Bag {
        bag_id,
        features: Matrix::new(m, cfg.n_in, values)?,
        label,
        roles: Some(roles),
    })
}

/// Bags `0..count`.
pub fn generate_dataset(cfg: &SynthConfig, count: usize) -> Result<Vec<Bag>> {
    if count == 0 {
        return Err(Error::config("count", "must be ≥ 1"));
    }
    (0..count as u64).map(|id| generate_bag(cfg, id)).collect()
}

/// `cfg.prototypes` draws from the grade-neutral tumor component.
pub fn sample_prototypes(cfg: &SynthConfig) -> Result<PrototypeSet> {
    cfg.validate()?;
    let geo = cfg.geometry();
    let mut rng = rng::stream(cfg.seed, Domain::Prototypes, 0);
    let mut values = Vec::with_capacity(cfg.prototypes * cfg.n_in);
    for _ in 0..cfg.prototypes {
        push_gaussian(&mut values, &geo.tumor, cfg.spread, &mut rng);
    }
    PrototypeSet::new(
        Matrix::new(cfg.prototypes, cfg.n_in, values)?,
        PrototypeSource::Synthetic,
    )
}
