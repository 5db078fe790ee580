//! Dense symmetric positive-definite helpers for small dimensions.
//!
//! Worlds are capped at d = 16, so a plain O(d^3) Cholesky with row-major
//! storage beats pulling in a matrix crate.

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Cholesky {
    pub dim: usize,
    /// Row-major d*d storage; entries above the diagonal are zero.
    pub lower: Vec<f64>,
}

impl Cholesky {
    /// Factors a row-major symmetric matrix. Fails on non-PD input.
    pub fn factor(dim: usize, matrix: &[f64]) -> Result<Self> {
        assert_eq!(matrix.len(), dim * dim, "matrix storage size");
        let mut l = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..=i {
                let mut sum = matrix[i * dim + j];
                for k in 0..j {
                    sum -= l[i * dim + k] * l[j * dim + k];
                }
                if i == j {
                    if sum <= 0.0 || !sum.is_finite() {
                        return Err(Error::NotPositiveDefinite { pivot: sum, index: i });
                    }
                    l[i * dim + j] = sum.sqrt();
                } else {
                    l[i * dim + j] = sum / l[j * dim + j];
                }
            }
        }
        Ok(Self { dim, lower: l })
    }

    /// log det of the original matrix: 2 * sum(log diag(L)).
    pub fn log_det(&self) -> f64 {
        (0..self.dim)
            .map(|i| self.lower[i * self.dim + i].ln())
            .sum::<f64>()
            * 2.0
    }

    /// Solves L y = b in place.
    pub fn solve_lower(&self, b: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            let mut v = b[i];
            for k in 0..i {
                v -= self.lower[i * d + k] * b[k];
            }
            b[i] = v / self.lower[i * d + i];
        }
    }

    /// Solves L^T y = b in place.
    pub fn solve_lower_transpose(&self, b: &mut [f64]) {
        let d = self.dim;
        for i in (0..d).rev() {
            let mut v = b[i];
            for k in (i + 1)..d {
                v -= self.lower[k * d + i] * b[k];
            }
            b[i] = v / self.lower[i * d + i];
        }
    }

    /// Solves (L L^T) y = b in place, i.e. applies the inverse of the
    /// original matrix.
    pub fn solve(&self, b: &mut [f64]) {
        self.solve_lower(b);
        self.solve_lower_transpose(b);
    }

    /// Squared Mahalanobis norm x^T (L L^T)^{-1} x.
    pub fn mahalanobis_sq(&self, x: &[f64]) -> f64 {
        let mut y = x.to_vec();
        self.solve_lower(&mut y);
        y.iter().map(|v| v * v).sum()
    }

    /// y = L z (used to draw correlated Gaussians from iid standard normals).
    pub fn mul_lower(&self, z: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            let mut v = 0.0;
            for k in 0..=i {
                v += self.lower[i * d + k] * z[k];
            }
            out[i] = v;
        }
    }
}
