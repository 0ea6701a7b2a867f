//! Low-rank Mahalanobis metric `d_A(z1, z2) = ‖W(z1 − z2)‖₂` with `A = WᵀW`.
//!
//! `W` is `r × n`, so `A` is positive semi-definite with rank at most `r`.
//! The trace of `A` (equal to its nuclear norm, and to `‖W‖_F²`) is the soft
//! rank penalty used during training.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricMatrix {
    w: Matrix,
}

/// Default projection rank for feature dimension `n`: `max(2, n / 4)`,
/// clipped to `n`.
pub fn default_rank(n: usize) -> usize {
    (n / 4).max(2).min(n)
}

impl MetricMatrix {
    pub fn new(w: Matrix) -> Result<Self> {
        let (r, n) = (w.rows(), w.cols());
        if r == 0 || n == 0 {
            return Err(Error::Dimension(format!("metric needs r, n ≥ 1, got {r}x{n}")));
        }
        if r > n {
            return Err(Error::Dimension(format!(
                "projection rank {r} exceeds feature dimension {n}"
            )));
        }
        if 2 * r > n && r != n {
            log::warn!("projection rank {r} is more than half of feature dimension {n}");
        }
        Ok(Self { w })
    }

    /// `W = I_n`: the metric reduces to Euclidean distance.
    pub fn identity(n: usize) -> Self {
        Self {
            w: Matrix::identity(n),
        }
    }

    /// Random initialization: i.i.d. `N(0, 1/n)` entries plus `0.5·I` on the
    /// leading `r × r` block.
    pub fn init<R: Rng + ?Sized>(r: usize, n: usize, rng: &mut R) -> Result<Self> {
        if r == 0 || r > n {
            return Err(Error::Dimension(format!("invalid rank {r} for dimension {n}")));
        }
        let normal = Normal::new(0.0, 1.0 / (n as f64).sqrt()).expect("valid std");
        let mut w = Matrix::zeros(r, n);
        for v in w.values_mut() {
            *v = normal.sample(rng);
        }
        for i in 0..r {
            w.set(i, i, w.get(i, i) + 0.5);
        }
        Self::new(w)
    }

    #[inline]
    pub fn weights(&self) -> &Matrix {
        &self.w
    }

    #[inline]
    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.w
    }

    /// Projection rank `r`.
    #[inline]
    pub fn rank(&self) -> usize {
        self.w.rows()
    }

    /// Feature dimension `n`.
    #[inline]
    pub fn dim(&self) -> usize {
        self.w.cols()
    }

    pub fn project(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.w.matvec(z)
    }

    /// Projects every row of `features` (`m × n`) to an `m × r` matrix.
    pub fn project_rows(&self, features: &Matrix) -> Result<Matrix> {
        features.matmul_transposed(&self.w)
    }

    pub fn mahalanobis(&self, z1: &[f64], z2: &[f64]) -> Result<f64> {
        if z1.len() != self.dim() || z2.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "metric over dimension {} applied to vectors of length {} and {}",
                self.dim(),
                z1.len(),
                z2.len()
            )));
        }
        let projected: Vec<f64> = self
            .w
            .row_iter()
            .map(|row| row.iter().zip(z1.iter().zip(z2)).map(|(w, (a, b))| w * (a - b)).sum())
            .collect();
        Ok(norm(&projected))
    }

    /// `A = WᵀW` (n × n). Only for diagnostics; distances never build it.
    pub fn gram(&self) -> Matrix {
        let n = self.dim();
        let mut a = Matrix::zeros(n, n);
        for row in self.w.row_iter() {
            for i in 0..n {
                if row[i] == 0.0 {
                    continue;
                }
                let ai = a.row_mut(i);
                for (j, v) in ai.iter_mut().enumerate() {
                    *v += row[i] * row[j];
                }
            }
        }
        a
    }

    /// `Tr(WᵀW) = ‖W‖_F²`.
    pub fn trace_reg(&self) -> f64 {
        self.w.frobenius_sq()
    }

    /// Gradient of [`trace_reg`](Self::trace_reg) with respect to `W`: `2W`.
    pub fn trace_reg_grad(&self) -> Matrix {
        let mut g = self.w.clone();
        g.values_mut().iter_mut().for_each(|v| *v *= 2.0);
        g
    }

    /// Distance through an explicit `A`, used to cross-check the
    /// factored route.
    pub fn mahalanobis_via_gram(&self, z1: &[f64], z2: &[f64]) -> Result<f64> {
        let delta: Vec<f64> = z1.iter().zip(z2).map(|(a, b)| a - b).collect();
        let a_delta = self.gram().matvec(&delta)?;
        Ok(dot(&delta, &a_delta).max(0.0).sqrt())
    }
}
