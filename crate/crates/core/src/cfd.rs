//! Characteristic-function discrepancy between instance sets, and a Gaussian
//! kernel MMD for comparison.
//!
//! The empirical characteristic function of a set `Z` at frequency `t` is
//! `φ_Z(t) = (1/m) Σⱼ exp(i·tᵀzⱼ)`. The per-frequency discrepancy
//!
//! ```text
//! Chf(t) = (|φa| − |φb|)² + 2|φa||φb|(1 − cos(arg φa − arg φb))
//! ```
//!
//! splits the difference into an amplitude and a phase part; it expands to
//! `|φa(t) − φb(t)|²`. The distance is the Monte-Carlo mean of `√Chf(t)` over
//! frequencies drawn from `N(0, σ_t²·I)`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, squared_distance, sub, Matrix};
use crate::rng::{self, Domain};

/// Smoothing of `√Chf` at zero, used only for derivatives.
pub const SQRT_SMOOTHING: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencySample {
    pub frequencies: Matrix,
    pub sigma_t: f64,
    pub seed: u64,
}

impl FrequencySample {
    /// Draws `count` frequency vectors of dimension `dim` with i.i.d.
    /// `N(0, σ_t²)` coordinates.
    pub fn draw(count: usize, dim: usize, sigma_t: f64, seed: u64) -> Result<Self> {
        if count == 0 {
            return Err(Error::Dimension("need at least one frequency".into()));
        }
        if !(sigma_t > 0.0 && sigma_t.is_finite()) {
            return Err(Error::Numerical(format!("sigma_t must be > 0, got {sigma_t}")));
        }
        let mut rng = rng::stream(seed, Domain::Frequencies, 0);
        Ok(Self {
            frequencies: gaussian_matrix(count, dim, sigma_t, &mut rng),
            sigma_t,
            seed,
        })
    }

    pub fn count(&self) -> usize {
        self.frequencies.rows()
    }

    pub fn dim(&self) -> usize {
        self.frequencies.cols()
    }
}

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix {
    let normal = Normal::new(0.0, std).expect("valid std");
    let mut m = Matrix::zeros(rows, cols);
    for v in m.values_mut() {
        *v = normal.sample(rng);
    }
    m
}

/// Polar form of a characteristic-function value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CfValue {
    pub amplitude: f64,
    /// Argument in `(−π, π]`.
    pub phase: f64,
}

impl CfValue {
    fn from_cartesian(re: f64, im: f64) -> Self {
        let mut phase = im.atan2(re);
        if phase <= -PI {
            phase = PI;
        }
        Self {
            amplitude: re.hypot(im),
            phase,
        }
    }
}

fn check_set(z: &Matrix, what: &str) -> Result<()> {
    if z.rows() == 0 {
        return Err(Error::EmptySet(format!("{what} has no instances")));
    }
    Ok(())
}

/// Mean `(cos, sin)` of `tᵀz` over the rows of `features`.
fn cf_cartesian(features: &Matrix, t: &[f64]) -> (f64, f64) {
    let (mut c, mut s) = (0.0, 0.0);
    for z in features.row_iter() {
        let x = dot(t, z);
        c += x.cos();
        s += x.sin();
    }
    let inv = 1.0 / features.rows() as f64;
    (c * inv, s * inv)
}

pub fn empirical_cf(features: &Matrix, t: &[f64]) -> Result<CfValue> {
    check_set(features, "feature set")?;
    if t.len() != features.cols() {
        return Err(Error::Dimension(format!(
            "frequency of length {} for {}-dimensional features",
            t.len(),
            features.cols()
        )));
    }
    let (c, s) = cf_cartesian(features, t);
    Ok(CfValue::from_cartesian(c, s))
}

/// Amplitude/phase form of the per-frequency discrepancy.
pub fn chf_from_values(a: CfValue, b: CfValue) -> f64 {
    let amp = a.amplitude - b.amplitude;
    amp * amp + 2.0 * a.amplitude * b.amplitude * (1.0 - (a.phase - b.phase).cos())
}

pub fn chf(za: &Matrix, zb: &Matrix, t: &[f64]) -> Result<f64> {
    let a = empirical_cf(za, t)?;
    let b = empirical_cf(zb, t)?;
    Ok(chf_from_values(a, b))
}

/// `|φa(t) − φb(t)|²`, the Cartesian form of [`chf`].
pub fn chf_modulus(za: &Matrix, zb: &Matrix, t: &[f64]) -> Result<f64> {
    check_set(za, "first set")?;
    check_set(zb, "second set")?;
    let (ca, sa) = cf_cartesian(za, t);
    let (cb, sb) = cf_cartesian(zb, t);
    Ok((ca - cb) * (ca - cb) + (sa - sb) * (sa - sb))
}

/// Empirical characteristic function of one set at every sampled frequency.
#[derive(Debug, Clone)]
pub struct CfProfile {
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl CfProfile {
    pub fn new(features: &Matrix, freqs: &FrequencySample) -> Result<Self> {
        check_set(features, "feature set")?;
        check_dims(features, freqs)?;
        let (cos, sin) = freqs
            .frequencies
            .row_iter()
            .map(|t| cf_cartesian(features, t))
            .unzip();
        Ok(Self { cos, sin })
    }

    /// Per-frequency `|φa − φb|²`.
    pub fn chf_against(&self, other: &CfProfile) -> Vec<f64> {
        self.cos
            .iter()
            .zip(&self.sin)
            .zip(other.cos.iter().zip(&other.sin))
            .map(|((ca, sa), (cb, sb))| (ca - cb) * (ca - cb) + (sa - sb) * (sa - sb))
            .collect()
    }

    pub fn distance(&self, other: &CfProfile) -> f64 {
        let chf = self.chf_against(other);
        chf.iter().map(|v| v.sqrt()).sum::<f64>() / chf.len() as f64
    }
}

fn check_dims(z: &Matrix, freqs: &FrequencySample) -> Result<()> {
    if z.cols() != freqs.dim() {
        return Err(Error::Dimension(format!(
            "{}-dimensional features against {}-dimensional frequencies",
            z.cols(),
            freqs.dim()
        )));
    }
    Ok(())
}

/// Mean of `√Chf(t)` over the sampled frequencies. Lies in `[0, 2]`.
pub fn cfd_distance(za: &Matrix, zb: &Matrix, freqs: &FrequencySample) -> Result<f64> {
    check_set(za, "first set")?;
    check_set(zb, "second set")?;
    let a = CfProfile::new(za, freqs)?;
    let b = CfProfile::new(zb, freqs)?;
    Ok(a.distance(&b))
}

/// Distance together with its gradient with respect to every instance of
/// both sets.
#[derive(Debug, Clone)]
pub struct DistanceGrad {
    pub value: f64,
    pub grad_a: Matrix,
    pub grad_b: Matrix,
}

pub fn cfd_distance_grad(za: &Matrix, zb: &Matrix, freqs: &FrequencySample) -> Result<DistanceGrad> {
    let a = CfProfile::new(za, freqs)?;
    let b = CfProfile::new(zb, freqs)?;
    let chf = a.chf_against(&b);
    let t_count = chf.len() as f64;
    let value = chf.iter().map(|v| v.sqrt()).sum::<f64>() / t_count;

    // dD/dChf_t = 1 / (2T√(Chf_t + ε²)); then through the set means.
    let eps2 = SQRT_SMOOTHING * SQRT_SMOOTHING;
    let mut grad_a = Matrix::zeros(za.rows(), za.cols());
    let mut grad_b = Matrix::zeros(zb.rows(), zb.cols());
    for (ti, t) in freqs.frequencies.row_iter().enumerate() {
        let outer = 1.0 / (2.0 * t_count * (chf[ti] + eps2).sqrt());
        let dc = 2.0 * (a.cos[ti] - b.cos[ti]) * outer;
        let ds = 2.0 * (a.sin[ti] - b.sin[ti]) * outer;
        accumulate_cf_grad(za, t, dc, ds, &mut grad_a);
        accumulate_cf_grad(zb, t, -dc, -ds, &mut grad_b);
    }
    Ok(DistanceGrad {
        value,
        grad_a,
        grad_b,
    })
}

/// Adds `dc·∂(mean cos)/∂z + ds·∂(mean sin)/∂z` for every row `z`.
fn accumulate_cf_grad(z: &Matrix, t: &[f64], dc: f64, ds: f64, grad: &mut Matrix) {
    let inv = 1.0 / z.rows() as f64;
    for i in 0..z.rows() {
        let x = dot(t, z.row(i));
        let coef = (-dc * x.sin() + ds * x.cos()) * inv;
        axpy(coef, t, grad.row_mut(i));
    }
}

fn gaussian_kernel(x: &[f64], y: &[f64], bandwidth: f64) -> f64 {
    (-squared_distance(x, y) / (2.0 * bandwidth * bandwidth)).exp()
}

fn mean_kernel(za: &Matrix, zb: &Matrix, bandwidth: f64) -> f64 {
    let mut acc = 0.0;
    for x in za.row_iter() {
        for y in zb.row_iter() {
            acc += gaussian_kernel(x, y, bandwidth);
        }
    }
    acc / (za.rows() * zb.rows()) as f64
}

fn check_bandwidth(bandwidth: f64) -> Result<()> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::Numerical(format!("bandwidth must be > 0, got {bandwidth}")));
    }
    Ok(())
}

/// Biased (V-statistic) squared MMD with kernel `exp(−‖x−y‖²/(2·bw²))`.
pub fn mmd_squared(za: &Matrix, zb: &Matrix, bandwidth: f64) -> Result<f64> {
    check_set(za, "first set")?;
    check_set(zb, "second set")?;
    check_bandwidth(bandwidth)?;
    if za.cols() != zb.cols() {
        return Err(Error::Dimension("sets differ in dimension".into()));
    }
    let kaa = mean_kernel(za, za, bandwidth);
    let kbb = mean_kernel(zb, zb, bandwidth);
    let kab = mean_kernel(za, zb, bandwidth);
    Ok((kaa + kbb - 2.0 * kab).max(0.0))
}

/// Square root of [`mmd_squared`].
pub fn mmd_distance(za: &Matrix, zb: &Matrix, bandwidth: f64) -> Result<f64> {
    Ok(mmd_squared(za, zb, bandwidth)?.sqrt())
}

pub fn mmd_distance_grad(za: &Matrix, zb: &Matrix, bandwidth: f64) -> Result<DistanceGrad> {
    let sq = mmd_squared(za, zb, bandwidth)?;
    let value = sq.sqrt();
    let outer = 1.0 / (2.0 * (sq + SQRT_SMOOTHING * SQRT_SMOOTHING).sqrt());
    let inv_bw2 = 1.0 / (bandwidth * bandwidth);
    let (ma, mb) = (za.rows() as f64, zb.rows() as f64);

    // ∂k(x, y)/∂x = −k(x, y)·(x − y)/bw²
    let self_grad = |z: &Matrix, scale: f64| {
        let mut g = Matrix::zeros(z.rows(), z.cols());
        for i in 0..z.rows() {
            for j in 0..z.rows() {
                if i == j {
                    continue;
                }
                let k = gaussian_kernel(z.row(i), z.row(j), bandwidth);
                let diff = sub(z.row(i), z.row(j));
                axpy(-scale * k * inv_bw2, &diff, g.row_mut(i));
            }
        }
        g
    };
    let mut grad_a = self_grad(za, outer * 2.0 / (ma * ma));
    let mut grad_b = self_grad(zb, outer * 2.0 / (mb * mb));
    let cross = -2.0 * outer / (ma * mb);
    for i in 0..za.rows() {
        for j in 0..zb.rows() {
            let k = gaussian_kernel(za.row(i), zb.row(j), bandwidth);
            let diff = sub(za.row(i), zb.row(j));
            axpy(-cross * k * inv_bw2, &diff, grad_a.row_mut(i));
            axpy(cross * k * inv_bw2, &diff, grad_b.row_mut(j));
        }
    }
    Ok(DistanceGrad {
        value,
        grad_a,
        grad_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{finite_diff, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(m: usize, n: usize, shift: f64, rng: &mut ChaCha8Rng) -> Matrix {
        let v = (0..m * n).map(|_| shift + rng.gen_range(-1.0..1.0)).collect();
        Matrix::new(m, n, v).unwrap()
    }

    /// Complex arithmetic oracle: (re, im) of φ_Z(t).
    fn complex_cf(z: &Matrix, t: &[f64]) -> (f64, f64) {
        let m = z.rows() as f64;
        z.row_iter().fold((0.0, 0.0), |(re, im), row| {
            let x: f64 = row.iter().zip(t).map(|(a, b)| a * b).sum();
            (re + x.cos() / m, im + x.sin() / m)
        })
    }

    #[test]
    fn single_instance_has_unit_amplitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = random_set(1, 4, 0.0, &mut rng);
        for _ in 0..20 {
            let t: Vec<f64> = (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let cf = empirical_cf(&z, &t).unwrap();
            assert!((cf.amplitude - 1.0).abs() <= 1e-12);
            assert!(cf.phase > -PI && cf.phase <= PI);
        }
    }

    #[test]
    fn zero_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = random_set(7, 3, 0.0, &mut rng);
        let cf = empirical_cf(&z, &[0.0; 3]).unwrap();
        assert_eq!(cf.amplitude, 1.0);
        assert_eq!(cf.phase, 0.0);
    }

    #[test]
    fn symmetric_pair() {
        let z = Matrix::from_rows(&[vec![0.4, -1.3], vec![-0.4, 1.3]]).unwrap();
        let t = [0.7, 0.2];
        let cf = empirical_cf(&z, &t).unwrap();
        let (re, im) = complex_cf(&z, &t);
        assert!(im.abs() <= 1e-15);
        let x: f64 = 0.4 * 0.7 + -1.3 * 0.2;
        assert!((cf.amplitude - x.cos().abs()).abs() <= 1e-12);
        assert!((cf.amplitude - re.hypot(im)).abs() <= 1e-12);
        assert_eq!(cf.phase, 0.0);
    }

    #[test]
    fn empty_sets_rejected() {
        let empty = Matrix::zeros(0, 2);
        let one = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(empirical_cf(&empty, &[1.0, 1.0]), Err(Error::EmptySet(_))));
        assert!(matches!(chf(&one, &empty, &[1.0, 1.0]), Err(Error::EmptySet(_))));
        let f = FrequencySample::draw(4, 2, 1.0, 0).unwrap();
        assert!(matches!(cfd_distance(&empty, &one, &f), Err(Error::EmptySet(_))));
        assert!(matches!(mmd_distance(&one, &empty, 1.0), Err(Error::EmptySet(_))));
    }

    #[test]
    fn chf_identical_sets_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random_set(5, 3, 0.0, &mut rng);
        for _ in 0..10 {
            let t: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            assert_eq!(chf(&z, &z, &t).unwrap(), 0.0);
        }
    }

    #[test]
    fn chf_opposite_phase_is_maximal() {
        // Point masses at 0 and π along t = e₁: φa = 1, φb = −1.
        let a = Matrix::from_rows(&[vec![0.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![PI]]).unwrap();
        let two_term = chf(&a, &b, &[1.0]).unwrap();
        let (ra, ia) = complex_cf(&a, &[1.0]);
        let (rb, ib) = complex_cf(&b, &[1.0]);
        let oracle = (ra - rb).powi(2) + (ia - ib).powi(2);
        assert!((two_term - 4.0).abs() <= 1e-12);
        assert!((oracle - 4.0).abs() <= 1e-12);
    }

    #[test]
    fn chf_forms_agree_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let za = random_set(rng.gen_range(1..6), 3, 0.0, &mut rng);
            let zb = random_set(rng.gen_range(1..6), 3, 0.5, &mut rng);
            let t: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let (ra, ia) = complex_cf(&za, &t);
            let (rb, ib) = complex_cf(&zb, &t);
            let oracle = (ra - rb).powi(2) + (ia - ib).powi(2);
            assert!((chf(&za, &zb, &t).unwrap() - oracle).abs() <= 1e-12);
            assert!((chf_modulus(&za, &zb, &t).unwrap() - oracle).abs() <= 1e-12);
        }
    }

    #[test]
    fn cfd_bounds_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = FrequencySample::draw(64, 3, 1.0, 9).unwrap();
        for _ in 0..20 {
            let za = random_set(rng.gen_range(1..8), 3, 0.0, &mut rng);
            let zb = random_set(rng.gen_range(1..8), 3, 2.0, &mut rng);
            let ab = cfd_distance(&za, &zb, &f).unwrap();
            assert!((0.0..=2.0).contains(&ab));
            assert_eq!(ab.to_bits(), cfd_distance(&zb, &za, &f).unwrap().to_bits());
            assert_eq!(cfd_distance(&za, &za, &f).unwrap(), 0.0);
        }
    }

    /// 1-D point masses at 0 and x: √Chf(t) = 2|sin(tx/2)|. Trapezoid
    /// quadrature of that against the N(0, σ²) density is the oracle.
    #[test]
    fn cfd_point_masses_match_quadrature() {
        let sigma = 1.0;
        let quadrature = |x: f64| {
            let (lo, hi, steps) = (-12.0 * sigma, 12.0 * sigma, 200_000);
            let h = (hi - lo) / steps as f64;
            let density = |t: f64| (-t * t / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * PI).sqrt());
            let g = |t: f64| 2.0 * (t * x / 2.0).sin().abs() * density(t);
            let mut s = 0.5 * (g(lo) + g(hi));
            for i in 1..steps {
                s += g(lo + i as f64 * h);
            }
            s * h
        };
        let f = FrequencySample::draw(100_000, 1, sigma, 17).unwrap();
        let origin = Matrix::from_rows(&[vec![0.0]]).unwrap();
        let mut last = 0.0;
        for &x in &[0.0, 0.5, 3.0] {
            let other = Matrix::from_rows(&[vec![x]]).unwrap();
            let mc = cfd_distance(&origin, &other, &f).unwrap();
            let exact = quadrature(x);
            assert!((mc - exact).abs() <= 0.01, "x = {x}: {mc} vs {exact}");
            assert!(x == 0.0 || mc > last);
            last = mc;
        }
    }

    #[test]
    fn mmd_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = random_set(6, 2, 0.0, &mut rng);
        assert_eq!(mmd_distance(&z, &z, 1.3).unwrap(), 0.0);
        let x = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let y = Matrix::from_rows(&[vec![2.0, -1.0]]).unwrap();
        let sigma: f64 = 1.5;
        let closed = 2.0 - 2.0 * (-8.0 / (2.0 * sigma * sigma)).exp();
        assert!((mmd_squared(&x, &y, sigma).unwrap() - closed).abs() <= 1e-12);
        assert!(mmd_distance(&x, &y, 0.0).is_err());
    }

    #[test]
    fn frequency_average_approaches_mmd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let za = random_set(6, 3, 0.0, &mut rng);
        let zb = random_set(5, 3, 0.7, &mut rng);
        let bandwidth = 1.2;
        let f = FrequencySample::draw(200_000, 3, 1.0 / bandwidth, 3).unwrap();
        let a = CfProfile::new(&za, &f).unwrap();
        let b = CfProfile::new(&zb, &f).unwrap();
        let chf = a.chf_against(&b);
        let mc = chf.iter().sum::<f64>() / chf.len() as f64;
        let exact = mmd_squared(&za, &zb, bandwidth).unwrap();
        assert!((mc - exact).abs() / exact <= 0.02, "{mc} vs {exact}");
    }

    fn check_grad<F>(value: F, za: &Matrix, zb: &Matrix, g: &DistanceGrad)
    where
        F: Fn(&Matrix, &Matrix) -> f64,
    {
        let xa = za.values().to_vec();
        let xb = zb.values().to_vec();
        for i in 0..xa.len() {
            let f = |v: &[f64]| value(&Matrix::new(za.rows(), za.cols(), v.to_vec()).unwrap(), zb);
            let num = finite_diff(f, &xa, i, 1e-6).unwrap();
            assert!(relative_error(g.grad_a.values()[i], num) <= 1e-5, "a[{i}]");
        }
        for i in 0..xb.len() {
            let f = |v: &[f64]| value(za, &Matrix::new(zb.rows(), zb.cols(), v.to_vec()).unwrap());
            let num = finite_diff(f, &xb, i, 1e-6).unwrap();
            assert!(relative_error(g.grad_b.values()[i], num) <= 1e-5, "b[{i}]");
        }
    }

    #[test]
    fn cfd_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let za = random_set(4, 3, 0.0, &mut rng);
        let zb = random_set(3, 3, 0.8, &mut rng);
        let f = FrequencySample::draw(32, 3, 1.0, 1).unwrap();
        let g = cfd_distance_grad(&za, &zb, &f).unwrap();
        assert_eq!(g.value, cfd_distance(&za, &zb, &f).unwrap());
        check_grad(|a, b| cfd_distance(a, b, &f).unwrap(), &za, &zb, &g);
    }

    #[test]
    fn mmd_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let za = random_set(4, 3, 0.0, &mut rng);
        let zb = random_set(3, 3, 0.8, &mut rng);
        let g = mmd_distance_grad(&za, &zb, 0.9).unwrap();
        check_grad(|a, b| mmd_distance(a, b, 0.9).unwrap(), &za, &zb, &g);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn chf_decomposition_identity(seed in any::<u64>(), ma in 1usize..6, mb in 1usize..6, n in 1usize..5) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let za = random_set(ma, n, 0.0, &mut rng);
                let zb = random_set(mb, n, rng.gen_range(-1.0..1.0), &mut rng);
                let t: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
                let two_term = chf(&za, &zb, &t).unwrap();
                let modulus = chf_modulus(&za, &zb, &t).unwrap();
                prop_assert!((two_term - modulus).abs() <= 1e-12);
            }
        }
    }
}
