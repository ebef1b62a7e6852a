//! Dense symmetric linear algebra shared by the GP, estimator and bandit
//! modules.
//!
//! Everything here operates on small dense matrices (the estimator compresses
//! projection sets down to their distinct points before factorizing), so a
//! full eigendecomposition is affordable and is used for inverse square
//! roots, pseudo-inverses and log-determinants alike.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default eigenvalue floor for inverse square roots and pseudo-inverses.
pub const DEFAULT_EIGEN_FLOOR: f64 = 1e-10;

/// A dense symmetric matrix. Symmetry is enforced on construction by
/// replacing `M` with `(M + Mᵀ) / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    pub fn new(mut m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::InvalidMatrix(format!(
                "expected a square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.nrows() == 0 {
            return Err(Error::InvalidMatrix("dimension must be at least 1".into()));
        }
        let n = m.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = avg;
                m[(j, i)] = avg;
            }
        }
        Ok(SymMatrix(m))
    }

    pub fn from_fn(dim: usize, f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        Self::new(DMatrix::from_fn(dim, dim, f))
    }

    pub fn identity(dim: usize) -> Result<Self> {
        Self::new(DMatrix::identity(dim, dim))
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }
}

impl std::ops::Index<(usize, usize)> for SymMatrix {
    type Output = f64;

    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

/// Eigendecomposition `M = V diag(λ) Vᵀ` with eigenvalues sorted descending.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl SymEigen {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Largest eigenvalue.
    pub fn max_value(&self) -> f64 {
        self.values[0]
    }

    /// `V diag(f(λ)) Vᵀ`.
    pub fn map_spectrum(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let n = self.dim();
        let mut scaled = self.vectors.clone();
        for j in 0..n {
            let s = f(self.values[j]);
            scaled.column_mut(j).scale_mut(s);
        }
        scaled * self.vectors.transpose()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.map_spectrum(|l| l)
    }

    /// `M^p` restricted to eigenvalues above `rel_floor · λ_max`; the rest of
    /// the spectrum is mapped to zero. With `power = -1` this is the
    /// Moore-Penrose pseudo-inverse of a PSD matrix.
    pub fn pseudo_power(&self, power: f64, rel_floor: f64) -> DMatrix<f64> {
        let cutoff = rel_floor * self.max_value().max(0.0);
        self.map_spectrum(|l| if l > cutoff && l > 0.0 { l.powf(power) } else { 0.0 })
    }
}

/// Symmetric eigendecomposition, eigenvalues descending.
pub fn sym_eig(m: &SymMatrix) -> Result<SymEigen> {
    if m.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidMatrix("non-finite entry".into()));
    }
    let eig = m.0.clone().symmetric_eigen();
    let n = m.dim();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(SymEigen { values, vectors })
}

/// `V diag(max(λ, floor)^(-1/2)) Vᵀ` for a PSD matrix.
///
/// Eigenvalues in `[-10·floor, floor)` are clamped to `floor`; anything more
/// negative means the input was not a Gram matrix and is rejected.
pub fn inv_sqrt_psd(m: &SymMatrix, floor: f64) -> Result<SymMatrix> {
    if !(floor > 0.0) {
        return Err(Error::invalid(format!("floor must be positive, got {floor}")));
    }
    let eig = sym_eig(m)?;
    let min = eig.values[eig.dim() - 1];
    if min < -10.0 * floor {
        return Err(Error::NotPsd {
            eigenvalue: min,
            floor,
        });
    }
    SymMatrix::new(eig.map_spectrum(|l| l.max(floor).powf(-0.5)))
}

/// Solves `(M + τI) x = rhs`.
pub fn solve_regularized(m: &SymMatrix, tau: f64, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    if m.dim() != rhs.len() {
        return Err(Error::invalid(format!(
            "dimension mismatch: matrix is {}x{}, rhs has length {}",
            m.dim(),
            m.dim(),
            rhs.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("tau must be positive, got {tau}")));
    }
    let mut a = m.0.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += tau;
    }
    match a.clone().cholesky() {
        Some(chol) => Ok(chol.solve(rhs)),
        None => {
            // M is not PSD enough for Cholesky; fall back to the spectral solve.
            let eig = sym_eig(&SymMatrix::new(a)?)?;
            if eig.values.iter().any(|&l| l == 0.0) {
                return Err(Error::InvalidMatrix("M + tau I is singular".into()));
            }
            Ok(eig.map_spectrum(|l| 1.0 / l) * rhs)
        }
    }
}

/// Largest absolute eigenvalue of a symmetric matrix.
pub fn spectral_norm(m: &SymMatrix) -> Result<f64> {
    let eig = sym_eig(m)?;
    Ok(eig.values.iter().fold(0.0_f64, |acc, l| acc.max(l.abs())))
}
