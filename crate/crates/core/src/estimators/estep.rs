use nalgebra::Cholesky;

use crate::error::{Error, Result};
use crate::linalg::{submatrix, Mat, SpdMatrix, SymMatrix, Vector};
use crate::missing::{IncompleteMatrix, PermutationPlan};

/// Conditional second-order statistics of one sample.
#[derive(Debug, Clone)]
pub struct ConditionalMoments {
    /// `E[y^m | y^o]`; empty for fully observed samples.
    pub mu_m_given_o: Vector,
    /// `E[ỹ ỹᵀ | y^o]` in permuted (observed-first) order.
    pub b: SymMatrix,
    /// `Pᵀ B P`, back in original variable order.
    pub c: SymMatrix,
}

/// Computes the conditional moments of every sample given the current
/// shape `sigma` and textures.
///
/// For a partially observed sample, with blocks of `P Σ Pᵀ`:
/// `μ = Σ_mo Σ_oo⁻¹ y^o` and `E[y^m y^mᵀ] = τ (Σ_mm − Σ_mo Σ_oo⁻¹ Σ_om) + μ μᵀ`.
/// Fully observed samples short-circuit to `B = C = y yᵀ`.
pub fn e_step(
    data: &IncompleteMatrix,
    plans: &[PermutationPlan],
    sigma: &SpdMatrix,
    textures: &[f64],
) -> Result<Vec<ConditionalMoments>> {
    let n = data.n();
    if plans.len() != n || textures.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: plans.len().min(textures.len()),
        });
    }
    if sigma.dim() != data.p() {
        return Err(Error::DimensionMismatch {
            expected: data.p(),
            got: sigma.dim(),
        });
    }
    (0..n)
        .map(|i| sample_moments(data, i, &plans[i], sigma.as_mat(), textures[i]))
        .collect()
}

fn sample_moments(
    data: &IncompleteMatrix,
    i: usize,
    plan: &PermutationPlan,
    sigma: &Mat,
    tau: f64,
) -> Result<ConditionalMoments> {
    let p = data.p();
    let obs = &plan.obs_idx;
    let mis = &plan.mis_idx;
    let y_o = Vector::from_iterator(
        obs.len(),
        obs.iter().map(|&r| data.get(r, i).expect("observed by plan")),
    );

    if mis.is_empty() {
        let b = &y_o * y_o.transpose();
        let b = SymMatrix::symmetrize(b);
        return Ok(ConditionalMoments {
            mu_m_given_o: Vector::zeros(0),
            c: b.clone(),
            b,
        });
    }

    let s_oo = submatrix(sigma, obs, obs);
    let s_om = submatrix(sigma, obs, mis);
    let s_mm = submatrix(sigma, mis, mis);
    let chol = Cholesky::new(s_oo).ok_or(Error::Conditioning { sample: i })?;
    // X = Σ_oo⁻¹ Σ_om, so the regression matrix is Xᵀ = Σ_mo Σ_oo⁻¹
    let x = chol.solve(&s_om);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Conditioning { sample: i });
    }
    let mu = x.transpose() * &y_o;
    let schur = s_mm - x.transpose() * &s_om;
    let g = schur * tau + &mu * mu.transpose();

    let (no, nm) = (obs.len(), mis.len());
    let mut b = Mat::zeros(p, p);
    b.view_mut((0, 0), (no, no)).copy_from(&(&y_o * y_o.transpose()));
    let e = &y_o * mu.transpose();
    b.view_mut((0, no), (no, nm)).copy_from(&e);
    b.view_mut((no, 0), (nm, no)).copy_from(&e.transpose());
    b.view_mut((no, no), (nm, nm)).copy_from(&g);
    let b = SymMatrix::symmetrize(b);
    let c = SymMatrix::symmetrize(plan.unpermute_mat(b.as_mat()));
    Ok(ConditionalMoments {
        mu_m_given_o: mu,
        b,
        c,
    })
}
