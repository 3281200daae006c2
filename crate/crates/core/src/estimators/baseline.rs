use crate::error::{Error, Result};
use crate::linalg::{Mat, Normalization, SpdMatrix};

/// Sample covariance `(1/n) Σ_i y_i y_iᵀ` of zero-mean columns.
pub fn scm(y: &Mat) -> Result<SpdMatrix> {
    let (p, n) = y.shape();
    if n == 0 {
        return Err(Error::InvalidInput("no samples".into()));
    }
    let mut acc = Mat::zeros(p, p);
    for col in y.column_iter() {
        acc += &col * col.transpose();
    }
    acc /= n as f64;
    SpdMatrix::new(acc)
}

/// One Tyler update `(p/n) Σ_i y_i y_iᵀ / (y_iᵀ Σ⁻¹ y_i)`, unnormalized.
pub fn tyler_step(y: &Mat, sigma: &SpdMatrix) -> Result<SpdMatrix> {
    let (p, n) = y.shape();
    let chol = sigma.cholesky()?;
    let mut acc = Mat::zeros(p, p);
    for col in y.column_iter() {
        let col = col.into_owned();
        let q = col.dot(&chol.solve(&col));
        if !(q > 0.0 && q.is_finite()) {
            return Err(Error::Numerical {
                iteration: 0,
                what: "zero or non-finite Mahalanobis norm in Tyler update".into(),
            });
        }
        acc += &col * col.transpose() / q;
    }
    acc *= p as f64 / n as f64;
    Ok(SpdMatrix::new_unchecked(acc))
}

#[derive(Debug, Clone)]
pub struct TylerFit {
    /// Trace-normalized (`tr = p`) fixed point.
    pub sigma: SpdMatrix,
    pub iterations: usize,
    /// Last `‖Σ_{k+1} − Σ_k‖_F²`.
    pub residual: f64,
}

/// Tyler's fixed-point scatter estimator, started at the identity and
/// trace-normalized at every step. Requires `n > p`.
pub fn tyler(y: &Mat, tol: f64, max_iter: usize) -> Result<TylerFit> {
    let (p, n) = y.shape();
    if n <= p {
        return Err(Error::InvalidInput(format!(
            "Tyler's estimator needs n > p (n = {n}, p = {p})"
        )));
    }
    let mut sigma = SpdMatrix::identity(p);
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        let (next, _) = tyler_step(y, &sigma)?.normalized(Normalization::Trace)?;
        residual = (next.as_mat() - sigma.as_mat()).norm_squared();
        sigma = next;
        if residual < tol {
            // one last check that the result is a valid SPD matrix
            let sigma = SpdMatrix::new(sigma.into_mat())?;
            return Ok(TylerFit {
                sigma,
                iterations: it,
                residual,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual,
    })
}
