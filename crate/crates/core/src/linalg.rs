//! Dense row-major `f64` matrices, a one-sided Jacobi SVD used as a rank and
//! nuclear-norm oracle, and central finite differences for gradient checks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Convergence tolerance of the Jacobi sweeps (relative off-diagonal mass).
pub const SVD_TOLERANCE: f64 = 1e-12;
/// Maximum number of Jacobi sweeps before giving up.
pub const SVD_MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major values. Rejects length mismatches and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows * cols != values.len() {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite entry {} at ({}, {})",
                values[pos],
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Square matrix with `diag` on the diagonal.
    pub fn diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.values[i * n + i] = d;
        }
        m
    }

    /// Builds a matrix from selected rows of `self`, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            values,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.values[c * self.rows + r] = self.values[r * self.cols + c];
            }
        }
        t
    }

    /// `self · other`. Each output entry is accumulated left to right over the
    /// shared dimension.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.values[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                let b_row = &other.values[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`, without materializing the transpose.
    pub fn matmul_transposed(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.values[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.cols != v.len() {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok(self.row_iter().map(|r| dot(r, v)).collect())
    }

    /// `selfᵀ · v`.
    pub fn matvec_transposed(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.rows != v.len() {
            return Err(Error::Dimension(format!(
                "cannot multiply ({}x{})ᵀ by vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (row, &s) in self.row_iter().zip(v) {
            axpy(s, row, &mut out);
        }
        Ok(out)
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    /// Mean of all rows. Panics on an empty matrix.
    pub fn mean_row(&self) -> Vec<f64> {
        assert!(self.rows > 0, "mean_row of empty matrix");
        let mut acc = vec![0.0; self.cols];
        for row in self.row_iter() {
            add_assign(&mut acc, row);
        }
        let inv = 1.0 / self.rows as f64;
        acc.iter_mut().for_each(|v| *v *= inv);
        acc
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha · x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn add_assign(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

#[inline]
pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Singular values in descending order via one-sided (Hestenes) Jacobi
/// rotations. Returns `min(rows, cols)` values.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    if !m.is_finite() {
        return Err(Error::Numerical("singular_values of non-finite matrix".into()));
    }
    // Rotate columns of a tall matrix; transpose wide inputs.
    let a = if m.rows() >= m.cols() {
        m.clone()
    } else {
        m.transpose()
    };
    let (rows, cols) = (a.rows(), a.cols());
    // Column-major copy so that each column is contiguous.
    let mut columns: Vec<Vec<f64>> = (0..cols)
        .map(|c| (0..rows).map(|r| a.get(r, c)).collect())
        .collect();

    let mut converged = cols < 2;
    for _ in 0..SVD_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..cols - 1 {
            for q in p + 1..cols {
                let alpha = dot(&columns[p], &columns[p]);
                let beta = dot(&columns[q], &columns[q]);
                let gamma = dot(&columns[p], &columns[q]);
                if gamma == 0.0 || gamma.abs() <= SVD_TOLERANCE * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = columns.split_at_mut(q);
                let (cp, cq) = (&mut left[p], &mut right[0]);
                for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "Jacobi SVD did not converge in {SVD_MAX_SWEEPS} sweeps"
        )));
    }
    let mut sv: Vec<f64> = columns.iter().map(|c| norm(c)).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// Central difference `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h`.
pub fn finite_diff<F>(f: F, x: &[f64], i: usize, h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Numerical(format!("finite_diff step must be > 0, got {h}")));
    }
    if i >= x.len() {
        return Err(Error::Dimension(format!(
            "coordinate {i} out of range for vector of length {}",
            x.len()
        )));
    }
    let mut probe = x.to_vec();
    probe[i] = x[i] + h;
    let plus = f(&probe);
    probe[i] = x[i] - h;
    let minus = f(&probe);
    if !plus.is_finite() || !minus.is_finite() {
        return Err(Error::Numerical(format!(
            "objective not finite around coordinate {i}: f(+h) = {plus}, f(-h) = {minus}"
        )));
    }
    Ok((plus - minus) / (2.0 * h))
}

/// Outcome of comparing one analytic partial derivative against a numeric one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

impl GradReport {
    pub fn new(index: usize, analytic: f64, numeric: f64) -> Self {
        Self {
            index,
            analytic,
            numeric,
            relative_error: relative_error(analytic, numeric),
        }
    }
}

/// `|a − b| / max(1, |a|, |b|)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let v = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::new(rows, cols, v).unwrap()
    }

    #[test]
    fn identity_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random(3, 4, &mut rng);
        assert_eq!(Matrix::identity(3).matmul(&m).unwrap(), m);
    }

    #[test]
    fn small_product_by_hand() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let p = a.matmul(&b).unwrap();
        assert_eq!(p.values(), &[2.0, 4.0]);
    }

    #[test]
    fn product_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(5, 4, &mut rng);
        let b = random(4, 3, &mut rng);
        let p = a.matmul(&b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.get(i, k) * b.get(k, j);
                }
                assert!((p.get(i, j) - s).abs() <= 1e-12);
            }
        }
        let pt = a.matmul_transposed(&b.transpose()).unwrap();
        assert!(p.max_abs_diff(&pt) <= 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&a), Err(Error::Dimension(_))));
        assert!(matches!(Matrix::new(2, 2, vec![1.0]), Err(Error::Dimension(_))));
        assert!(matches!(
            Matrix::new(1, 1, vec![f64::NAN]),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn singular_values_of_diagonal_and_zero() {
        let sv = singular_values(&Matrix::diag(&[2.0, 3.0])).unwrap();
        assert_eq!(sv, vec![3.0, 2.0]);
        let sv = singular_values(&Matrix::zeros(3, 5)).unwrap();
        assert_eq!(sv, vec![0.0; 3]);
    }

    #[test]
    fn singular_values_frobenius_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random(6, 4, &mut rng);
        let sv = singular_values(&m).unwrap();
        assert_eq!(sv.len(), 4);
        assert!(sv.windows(2).all(|w| w[0] >= w[1]) && sv[3] >= 0.0);
        let s2: f64 = sv.iter().map(|s| s * s).sum();
        assert!((s2 - m.frobenius_sq()).abs() <= 1e-9);
        // Wide input gives the same spectrum.
        let svt = singular_values(&m.transpose()).unwrap();
        for (a, b) in sv.iter().zip(&svt) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn finite_diff_examples() {
        let sq = |x: &[f64]| x[0] * x[0];
        assert!((finite_diff(sq, &[2.0], 0, 1e-6).unwrap() - 4.0).abs() <= 1e-6);
        assert_eq!(finite_diff(|_| 7.0, &[1.0, 2.0], 1, 1e-6).unwrap(), 0.0);
        let bilinear = |x: &[f64]| x[0] * x[1];
        assert!((finite_diff(bilinear, &[3.0, 5.0], 0, 1e-6).unwrap() - 5.0).abs() <= 1e-6);
        assert!(matches!(
            finite_diff(|x| (x[0] - 1.0).ln(), &[1.0], 0, 1e-3),
            Err(Error::Numerical(_))
        ));
        assert!(finite_diff(sq, &[1.0], 0, 0.0).is_err());
    }

    #[test]
    fn relative_error_definition() {
        assert_eq!(relative_error(0.5, 0.25), 0.25);
        assert_eq!(relative_error(10.0, 8.0), 0.2);
        assert_eq!(GradReport::new(3, 2.0, 2.0).relative_error, 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn matmul_is_associative(seed in any::<u64>(), n in 1usize..6, k in 1usize..6, l in 1usize..6, p in 1usize..6) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random(n, k, &mut rng);
                let b = random(k, l, &mut rng);
                let c = random(l, p, &mut rng);
                let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
                let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
                for (x, y) in left.values().iter().zip(right.values()) {
                    prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
                }
            }

            #[test]
            fn gram_spectrum_is_squared(seed in any::<u64>(), r in 1usize..=8, n in 1usize..=32) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let w = random(r, n, &mut rng);
                let gram = w.transpose().matmul(&w).unwrap();
                let sw = singular_values(&w).unwrap();
                let sg = singular_values(&gram).unwrap();
                for (i, s) in sw.iter().enumerate() {
                    prop_assert!((sg[i] - s * s).abs() <= 1e-9, "{} vs {}", sg[i], s * s);
                }
                for s in &sg[sw.len()..] {
                    prop_assert!(s.abs() <= 1e-9);
                }
            }
        }
    }
}
