//! Dense symmetric linear algebra and SPD-manifold geometry.
//!
//! Eigenvalues are always returned in descending order with a deterministic
//! eigenvector sign (largest-magnitude component positive). Distances use the
//! affine-invariant metric `‖log(A^{-1/2} B A^{-1/2})‖_F²`.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Minimum eigenvalue ratio for a matrix to count as SPD.
pub const SPD_RATIO: f64 = 1e-12;
/// Minimum eigenvalue ratio accepted by square roots, logs and distances.
pub const NEAR_SINGULAR_RATIO: f64 = 1e-14;

const SYMMETRY_TOL: f64 = 1e-10;

/// Square symmetric matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(Mat);

impl SymMatrix {
    /// Validates squareness, finiteness and symmetry (relative tolerance
    /// 1e-10), then stores the exactly symmetrized matrix.
    pub fn new(m: Mat) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch {
                expected: m.nrows(),
                got: m.ncols(),
            });
        }
        if m.nrows() == 0 {
            return Err(Error::InvalidInput("empty matrix".into()));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite matrix entry".into()));
        }
        let scale = m.amax().max(1.0);
        let p = m.nrows();
        for i in 0..p {
            for j in (i + 1)..p {
                if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::InvalidInput(format!(
                        "matrix not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self::symmetrize(m))
    }

    /// Symmetrizes `(m + mᵀ)/2` without any checks.
    pub(crate) fn symmetrize(m: Mat) -> Self {
        let t = m.transpose();
        SymMatrix((m + t) * 0.5)
    }

    pub fn identity(p: usize) -> Self {
        SymMatrix(Mat::identity(p, p))
    }

    pub fn zeros(p: usize) -> Self {
        SymMatrix(Mat::zeros(p, p))
    }

    pub fn from_diagonal(d: &[f64]) -> Result<Self> {
        Self::new(Mat::from_diagonal(&Vector::from_row_slice(d)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_mat(&self) -> &Mat {
        &self.0
    }

    pub fn into_mat(self) -> Mat {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }
}

/// Trace or determinant normalization of a shape matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Scale so that `tr(Σ) = p`.
    #[default]
    Trace,
    /// Scale so that `|Σ| = 1`.
    Determinant,
}

/// Symmetric positive definite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix(SymMatrix);

impl SpdMatrix {
    /// Validates symmetry and positive definiteness
    /// (`λ_min > 1e-12·λ_max`).
    pub fn new(m: Mat) -> Result<Self> {
        Self::from_sym(SymMatrix::new(m)?)
    }

    pub fn from_sym(s: SymMatrix) -> Result<Self> {
        let evd = evd(&s)?;
        let max = evd.eigenvalues[0];
        let min = evd.eigenvalues[evd.eigenvalues.len() - 1];
        if max <= 0.0 || min <= SPD_RATIO * max {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(SpdMatrix(s))
    }

    /// Wraps a matrix known to be SPD by construction. Symmetrizes but does
    /// not check definiteness.
    pub(crate) fn new_unchecked(m: Mat) -> Self {
        SpdMatrix(SymMatrix::symmetrize(m))
    }

    pub fn identity(p: usize) -> Self {
        SpdMatrix(SymMatrix::identity(p))
    }

    pub fn from_diagonal(d: &[f64]) -> Result<Self> {
        Self::from_sym(SymMatrix::from_diagonal(d)?)
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn as_mat(&self) -> &Mat {
        self.0.as_mat()
    }

    pub fn as_sym(&self) -> &SymMatrix {
        &self.0
    }

    pub fn into_mat(self) -> Mat {
        self.0.into_mat()
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn cholesky(&self) -> Result<Cholesky<f64, nalgebra::Dyn>> {
        Cholesky::new(self.as_mat().clone()).ok_or(Error::NotPositiveDefinite)
    }

    pub fn inverse(&self) -> Result<SpdMatrix> {
        let inv = self.cholesky()?.inverse();
        Ok(SpdMatrix::new_unchecked(inv))
    }

    pub fn log_det(&self) -> Result<f64> {
        let chol = self.cholesky()?;
        Ok(2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
    }

    /// Multiplies by a positive scalar.
    pub fn scaled(&self, c: f64) -> SpdMatrix {
        debug_assert!(c > 0.0);
        SpdMatrix::new_unchecked(self.as_mat() * c)
    }

    /// Returns the matrix rescaled per `norm`, and the factor that was applied.
    pub fn normalized(&self, norm: Normalization) -> Result<(SpdMatrix, f64)> {
        let p = self.dim() as f64;
        let factor = match norm {
            Normalization::Trace => p / self.trace(),
            Normalization::Determinant => (-self.log_det()? / p).exp(),
        };
        if !factor.is_finite() || factor <= 0.0 {
            return Err(Error::Numerical {
                iteration: 0,
                what: "normalization factor not finite".into(),
            });
        }
        Ok((self.scaled(factor), factor))
    }

    /// Congruence `Mᵀ Σ M`.
    pub fn congruence(&self, m: &Mat) -> Result<SpdMatrix> {
        SpdMatrix::new(m.transpose() * self.as_mat() * m)
    }
}

/// Eigen-decomposition with descending eigenvalues.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns, matching `eigenvalues`.
    pub eigenvectors: Mat,
}

impl EigenDecomposition {
    /// `U diag(f(λ)) Uᵀ`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        let d = Vector::from_iterator(self.eigenvalues.len(), self.eigenvalues.iter().map(|&l| f(l)));
        let scaled = &self.eigenvectors * Mat::from_diagonal(&d);
        scaled * self.eigenvectors.transpose()
    }

    pub fn reconstruct(&self) -> Mat {
        self.map(|l| l)
    }
}

/// Symmetric eigen-decomposition, eigenvalues sorted descending.
pub fn evd(m: &SymMatrix) -> Result<EigenDecomposition> {
    evd_mat(m.as_mat())
}

pub(crate) fn evd_mat(m: &Mat) -> Result<EigenDecomposition> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite matrix entry".into()));
    }
    let p = m.nrows();
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut vectors = Mat::zeros(p, p);
    let mut values = Vec::with_capacity(p);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        // sign: the largest-magnitude component (first on ties) is positive
        let mut best = 0;
        for i in 1..p {
            if col[i].abs() > col[best].abs() + 1e-12 {
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(dst, &col);
        values.push(eig.eigenvalues[src]);
    }
    Ok(EigenDecomposition {
        eigenvalues: values,
        eigenvectors: vectors,
    })
}

fn checked_spd_evd(m: &SpdMatrix) -> Result<EigenDecomposition> {
    let e = evd(m.as_sym())?;
    let max = e.eigenvalues[0];
    let min = *e.eigenvalues.last().unwrap();
    if max <= 0.0 || min < NEAR_SINGULAR_RATIO * max {
        return Err(Error::NearSingular {
            ratio: if max > 0.0 { min / max } else { 0.0 },
        });
    }
    Ok(e)
}

/// Returns `(m^{1/2}, m^{-1/2})`.
pub fn spd_sqrt_inv_sqrt(m: &SpdMatrix) -> Result<(SpdMatrix, SpdMatrix)> {
    let e = checked_spd_evd(m)?;
    Ok((
        SpdMatrix::new_unchecked(e.map(f64::sqrt)),
        SpdMatrix::new_unchecked(e.map(|l| 1.0 / l.sqrt())),
    ))
}

/// Principal matrix logarithm of an SPD matrix.
pub fn matrix_log(m: &SpdMatrix) -> Result<SymMatrix> {
    let e = checked_spd_evd(m)?;
    Ok(SymMatrix::symmetrize(e.map(f64::ln)))
}

/// Matrix exponential of a symmetric matrix.
pub fn matrix_exp(m: &SymMatrix) -> Result<SpdMatrix> {
    let e = evd(m)?;
    let out = e.map(f64::exp);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            iteration: 0,
            what: "matrix exponential overflow".into(),
        });
    }
    Ok(SpdMatrix::new_unchecked(out))
}

/// Eigenvalues of `a^{-1} b` (equivalently of `a^{-1/2} b a^{-1/2}`),
/// computed via the Cholesky whitening `L⁻¹ b L⁻ᵀ`.
fn relative_eigenvalues(a: &SpdMatrix, b: &SpdMatrix) -> Result<Vec<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let chol = a.cholesky().map_err(|_| Error::NearSingular { ratio: 0.0 })?;
    let l = chol.l();
    let x = l
        .solve_lower_triangular(b.as_mat())
        .ok_or(Error::NearSingular { ratio: 0.0 })?;
    let w = l
        .solve_lower_triangular(&x.transpose())
        .ok_or(Error::NearSingular { ratio: 0.0 })?;
    let e = evd_mat(&((&w + w.transpose()) * 0.5))?;
    let max = e.eigenvalues[0];
    let min = *e.eigenvalues.last().unwrap();
    if max <= 0.0 || min < NEAR_SINGULAR_RATIO * max {
        return Err(Error::NearSingular { ratio: min / max });
    }
    Ok(e.eigenvalues)
}

/// Squared affine-invariant geodesic distance between two SPD matrices.
pub fn geodesic_distance_sq(a: &SpdMatrix, b: &SpdMatrix) -> Result<f64> {
    Ok(relative_eigenvalues(a, b)?
        .iter()
        .map(|l| l.ln().powi(2))
        .sum())
}

#[derive(Debug, Clone)]
pub struct KarcherMean {
    pub mean: SpdMatrix,
    pub iterations: usize,
    /// Frobenius norm of the Riemannian gradient at the returned point.
    pub gradient_norm: f64,
    pub converged: bool,
}

/// Riemannian (Karcher) mean by the fixed-point iteration
/// `M ← M^{1/2} exp(mean_k log(M^{-1/2} S_k M^{-1/2})) M^{1/2}`.
pub fn karcher_mean(points: &[SpdMatrix], tol: f64, max_iter: usize) -> Result<KarcherMean> {
    let first = points
        .first()
        .ok_or_else(|| Error::InvalidInput("empty point set".into()))?;
    let p = first.dim();
    if let Some(bad) = points.iter().find(|s| s.dim() != p) {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: bad.dim(),
        });
    }
    if points.len() == 1 {
        return Ok(KarcherMean {
            mean: first.clone(),
            iterations: 0,
            gradient_norm: 0.0,
            converged: true,
        });
    }

    let k = points.len() as f64;
    let arith = points.iter().fold(Mat::zeros(p, p), |acc, s| acc + s.as_mat()) / k;
    let mut mean = SpdMatrix::new_unchecked(arith);
    let mut grad_norm = f64::INFINITY;
    for it in 0..max_iter {
        let (sqrt, inv_sqrt) = spd_sqrt_inv_sqrt(&mean)?;
        let mut tangent = Mat::zeros(p, p);
        for s in points {
            let whitened = inv_sqrt.as_mat() * s.as_mat() * inv_sqrt.as_mat();
            tangent += matrix_log(&SpdMatrix::new_unchecked(whitened))?.into_mat();
        }
        tangent /= k;
        grad_norm = tangent.norm();
        if grad_norm < tol {
            return Ok(KarcherMean {
                mean,
                iterations: it,
                gradient_norm: grad_norm,
                converged: true,
            });
        }
        let step = matrix_exp(&SymMatrix::symmetrize(tangent))?;
        mean = SpdMatrix::new_unchecked(sqrt.as_mat() * step.as_mat() * sqrt.as_mat());
    }
    log::warn!("karcher mean stopped after {max_iter} iterations (gradient {grad_norm:e})");
    Ok(KarcherMean {
        mean,
        iterations: max_iter,
        gradient_norm: grad_norm,
        converged: false,
    })
}

/// Extracts the submatrix `m[rows, cols]`.
pub(crate) fn submatrix(m: &Mat, rows: &[usize], cols: &[usize]) -> Mat {
    Mat::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}
