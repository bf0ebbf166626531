//! Dense symmetric positive-definite helpers on top of `nalgebra`.

use alloc::vec::Vec;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::{Error, Result};

/// Relative jitter (times `trace / P`) for the first factorization retry.
pub const JITTER_START: f64 = 1e-12;
/// Multiplier applied to the jitter on every further retry.
pub const JITTER_GROWTH: f64 = 10.0;
/// Retries after the unjittered attempt.
pub const JITTER_RETRIES: usize = 4;

/// Cholesky factorization of a symmetric positive-definite matrix, possibly
/// regularized by a diagonal jitter.
#[derive(Clone, Debug)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl SpdFactor {
    /// Factors `matrix`, retrying with escalating diagonal jitter.
    ///
    /// The jitter starts at `1e-12 * trace / P` and grows tenfold per retry,
    /// for at most four retries.
    pub fn new(matrix: &DMatrix<f64>) -> Result<Self> {
        let p = matrix.nrows();
        if matrix.ncols() != p {
            return Err(Error::Dimension {
                context: "SpdFactor::new (square)",
                expected: p,
                actual: matrix.ncols(),
            });
        }
        if let Some(chol) = Cholesky::new(matrix.clone()) {
            if factor_is_finite(&chol) {
                return Ok(SpdFactor { chol, jitter: 0.0 });
            }
        }
        let scale = if p == 0 {
            0.0
        } else {
            matrix.trace().abs() / p as f64
        };
        let scale = if scale > 0.0 { scale } else { 1.0 };
        let mut jitter = JITTER_START * scale;
        for _ in 0..JITTER_RETRIES {
            let mut m = matrix.clone();
            for i in 0..p {
                m[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(m) {
                if factor_is_finite(&chol) {
                    log::debug!("factorization needed jitter {jitter:e}");
                    return Ok(SpdFactor { chol, jitter });
                }
            }
            jitter *= JITTER_GROWTH;
        }
        Err(Error::NotPositiveDefinite {
            min_eigenvalue: min_eigenvalue(matrix),
            jitter: jitter / JITTER_GROWTH,
        })
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// Diagonal jitter that was added before the factorization succeeded.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// `log det` from the Cholesky pivots.
    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| libm::log(l[(i, i)])).sum::<f64>()
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// `L^{-1} b` for the lower Cholesky factor `L`, so that
    /// `bᵀ A^{-1} b = ‖L^{-1} b‖²`.
    pub fn whiten(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut out = b.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut out);
        out
    }

    /// Reconstructs `L Lᵀ` (the jittered matrix that was factored).
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let l = self.chol.l();
        &l * l.transpose()
    }
}

fn factor_is_finite(chol: &Cholesky<f64, Dyn>) -> bool {
    let l = chol.l_dirty();
    (0..l.nrows()).all(|i| l[(i, i)].is_finite() && l[(i, i)] > 0.0)
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(matrix: &DMatrix<f64>) -> Vec<f64> {
    if matrix.nrows() == 0 {
        return Vec::new();
    }
    let eig = SymmetricEigen::new(symmetrized(matrix));
    let mut values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    values.sort_by(f64::total_cmp);
    values
}

pub fn min_eigenvalue(matrix: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(matrix)
        .first()
        .copied()
        .unwrap_or(f64::NAN)
}

/// `(M + Mᵀ) / 2`.
pub fn symmetrized(matrix: &DMatrix<f64>) -> DMatrix<f64> {
    (matrix + matrix.transpose()) * 0.5
}

/// Largest `|M_ij - M_ji|`; `f64::INFINITY` for non-square input.
pub fn max_asymmetry(matrix: &DMatrix<f64>) -> f64 {
    if !matrix.is_square() {
        return f64::INFINITY;
    }
    let n = matrix.nrows();
    let mut worst = 0.0_f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((matrix[(i, j)] - matrix[(j, i)]).abs());
        }
    }
    worst
}

/// `Σ_ij A_ij B_ij`, i.e. `Tr(Aᵀ B)`.
pub fn frobenius_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}
