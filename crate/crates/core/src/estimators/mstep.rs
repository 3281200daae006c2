use crate::error::{Error, Result};
use crate::linalg::{evd, Mat, SpdMatrix, SymMatrix};

use super::estep::ConditionalMoments;
use super::EstimatorConfig;

/// Result of projecting onto the factor model `σ² I + rank-r PSD`.
#[derive(Debug, Clone)]
pub struct LowRankProjection {
    pub sigma: SpdMatrix,
    /// Noise floor `σ̂²`, the mean of the trailing `p − r` eigenvalues.
    pub noise: f64,
    /// Set when some leading eigenvalue does not exceed the noise floor.
    pub degenerate: bool,
}

/// `σ̂² = mean(λ_{r+1..p})`, `λ̂_i = λ_i − σ̂²` (clamped at zero),
/// `Σ̂ = σ̂² I + Σ_{i≤r} λ̂_i u_i u_iᵀ`.
pub fn low_rank_project(sigma: &SymMatrix, rank: usize) -> Result<LowRankProjection> {
    let p = sigma.dim();
    if rank == 0 || rank >= p {
        return Err(Error::Config(format!("rank {rank} must lie in [1, {}]", p - 1)));
    }
    let e = evd(sigma)?;
    let noise = e.eigenvalues[rank..].iter().sum::<f64>() / (p - rank) as f64;
    if noise <= 0.0 || !noise.is_finite() {
        return Err(Error::NotPositiveDefinite);
    }
    let mut degenerate = false;
    let mut out = Mat::identity(p, p) * noise;
    for i in 0..rank {
        let mut lambda = e.eigenvalues[i] - noise;
        if lambda <= 0.0 {
            degenerate = true;
            lambda = 0.0;
        }
        let u = e.eigenvectors.column(i);
        out += &u * u.transpose() * lambda;
    }
    if degenerate {
        log::debug!("low-rank projection: signal eigenvalue at or below noise floor {noise:e}");
    }
    Ok(LowRankProjection {
        sigma: SpdMatrix::new_unchecked(out),
        noise,
        degenerate,
    })
}

/// `(1/n) Σ_i C_i`.
pub fn m_step_gauss(moments: &[ConditionalMoments]) -> Result<SpdMatrix> {
    let first = moments
        .first()
        .ok_or_else(|| Error::InvalidInput("no samples".into()))?;
    let p = first.c.dim();
    let mut acc = Mat::zeros(p, p);
    for m in moments {
        acc += m.c.as_mat();
    }
    acc /= moments.len() as f64;
    if acc.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            iteration: 0,
            what: "non-finite Gaussian M-step".into(),
        });
    }
    Ok(SpdMatrix::new_unchecked(acc))
}

/// `tr(A B)` for symmetric `A`, `B`.
fn trace_prod(a: &Mat, b: &Mat) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// One application of `H(Σ) = (p/n) Σ_i C_i / tr(C_i Σ⁻¹)`.
pub(crate) fn fixed_point_map(moments: &[ConditionalMoments], sigma: &SpdMatrix) -> Result<Mat> {
    let p = sigma.dim();
    let inv = sigma.inverse()?.into_mat();
    let mut acc = Mat::zeros(p, p);
    for m in moments {
        let q = trace_prod(m.c.as_mat(), &inv);
        acc += m.c.as_mat() / q;
    }
    acc *= p as f64 / moments.len() as f64;
    Ok(acc)
}

/// Textures `τ̂_i = tr(C_i Σ⁻¹) / p` (equal to `tr(B_i Σ̄_i⁻¹) / p`).
pub(crate) fn textures_for(moments: &[ConditionalMoments], sigma: &SpdMatrix) -> Result<Vec<f64>> {
    let p = sigma.dim() as f64;
    let inv = sigma.inverse()?.into_mat();
    Ok(moments
        .iter()
        .map(|m| trace_prod(m.c.as_mat(), &inv) / p)
        .collect())
}

/// Robust M-step: fixed-point updates of `H`, each followed by the optional
/// rank projection and the configured normalization, then the texture update.
///
/// Runs `fp_iters_per_em` updates, or iterates to `fp_tol` (capped at
/// `fp_max_iter`) when `fp_inner_loop` is set.
pub fn m_step_tyl(
    moments: &[ConditionalMoments],
    sigma_prev: &SpdMatrix,
    config: &EstimatorConfig,
) -> Result<(SpdMatrix, Vec<f64>)> {
    let iters = if config.fp_inner_loop {
        config.fp_max_iter
    } else {
        config.fp_iters_per_em
    };
    let mut sigma = sigma_prev.clone();
    for it in 0..iters.max(1) {
        let next = fixed_point_map(moments, &sigma)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                iteration: it,
                what: "fixed-point update produced non-finite entries".into(),
            });
        }
        let next = SpdMatrix::new_unchecked(next);
        let next = match config.rank {
            Some(r) => low_rank_project(next.as_sym(), r)?.sigma,
            None => next,
        };
        let (next, _) = next.normalized(config.normalization)?;
        let change = (next.as_mat() - sigma.as_mat()).norm_squared();
        sigma = next;
        if config.fp_inner_loop && change < config.fp_tol {
            break;
        }
    }
    let textures = textures_for(moments, &sigma)?;
    if textures.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(Error::Numerical {
            iteration: 0,
            what: "non-positive texture".into(),
        });
    }
    Ok((sigma, textures))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::baseline::{scm, tyler_step};
    use crate::estimators::estep::e_step;
    use crate::estimators::test_support::{gaussian, random_spd};
    use crate::estimators::EstimatorKind;
    use crate::linalg::Normalization;
    use crate::missing::{build_plans, IncompleteMatrix};

    fn diag(d: &[f64]) -> SymMatrix {
        SymMatrix::from_diagonal(d).unwrap()
    }

    #[test]
    fn projection_of_spiked_spectrum() {
        let out = low_rank_project(&diag(&[5.0, 3.0, 1.0, 1.0]), 2).unwrap();
        assert!((out.noise - 1.0).abs() < 1e-15);
        let e = evd(out.sigma.as_sym()).unwrap();
        for (got, want) in e.eigenvalues.iter().zip([5.0, 3.0, 1.0, 1.0]) {
            assert!((got - want).abs() < 1e-13);
        }
        assert!(!out.degenerate);
    }

    #[test]
    fn projection_full_minus_one_is_identity() {
        let out = low_rank_project(&diag(&[2.0, 1.0]), 1).unwrap();
        assert!((out.sigma.as_mat() - diag(&[2.0, 1.0]).as_mat()).norm() < 1e-14);
    }

    #[test]
    fn projection_is_idempotent() {
        let a = random_spd(6, 8);
        let once = low_rank_project(a.as_sym(), 2).unwrap().sigma;
        let twice = low_rank_project(once.as_sym(), 2).unwrap().sigma;
        assert!((once.as_mat() - twice.as_mat()).norm() < 1e-12 * once.as_mat().norm());
    }

    #[test]
    fn projection_flags_ties() {
        let out = low_rank_project(&diag(&[1.0, 1.0, 1.0]), 1).unwrap();
        assert!(out.degenerate);
        assert!((out.sigma.as_mat() - Mat::identity(3, 3)).norm() < 1e-14);
    }

    #[test]
    fn gaussian_step_on_complete_data_is_scm() {
        let y = gaussian(&random_spd(4, 1), 50, 2);
        let data = IncompleteMatrix::complete(y.clone()).unwrap();
        let plans = build_plans(&data).unwrap();
        let m = e_step(&data, &plans, &SpdMatrix::identity(4), &[1.0; 50]).unwrap();
        let g = m_step_gauss(&m).unwrap();
        assert!((g.as_mat() - scm(&y).unwrap().as_mat()).norm() < 1e-12);
    }

    #[test]
    fn single_sample_gives_outer_product() {
        let y = Mat::from_column_slice(3, 1, &[1.0, 2.0, -1.0]);
        let data = IncompleteMatrix::complete(y.clone()).unwrap();
        let plans = build_plans(&data).unwrap();
        let m = e_step(&data, &plans, &SpdMatrix::identity(3), &[1.0]).unwrap();
        let g = m_step_gauss(&m).unwrap();
        assert_eq!(g.as_mat(), &(&y * y.transpose()));
        assert!(SpdMatrix::new(g.into_mat()).is_err());
    }

    #[test]
    fn texture_is_one_when_moments_match_shape() {
        // B_i = Σ̄_i  ⇒  τ̂_i = tr(I)/p = 1
        let sigma = random_spd(4, 3);
        let mom = ConditionalMoments {
            mu_m_given_o: crate::linalg::Vector::zeros(0),
            b: sigma.as_sym().clone(),
            c: sigma.as_sym().clone(),
        };
        let t = textures_for(&[mom], &sigma).unwrap();
        assert!((t[0] - 1.0).abs() < 1e-13);
    }

    #[test]
    fn single_fixed_point_step_matches_tyler_step() {
        let y = gaussian(&random_spd(5, 4), 80, 5);
        let data = IncompleteMatrix::complete(y.clone()).unwrap();
        let plans = build_plans(&data).unwrap();
        let start = scm(&y).unwrap();
        let m = e_step(&data, &plans, &start, &[1.0; 80]).unwrap();
        let cfg = EstimatorConfig::new(EstimatorKind::EmTyl);
        let (got, _) = m_step_tyl(&m, &start, &cfg).unwrap();
        let want = tyler_step(&y, &start).unwrap();
        let (want, _) = want.normalized(Normalization::Trace).unwrap();
        assert!((got.as_mat() - want.as_mat()).norm() < 1e-12);
    }

    #[test]
    fn inner_loop_reaches_fixed_point() {
        let y = gaussian(&random_spd(4, 6), 200, 7);
        let data = IncompleteMatrix::complete(y)
            .unwrap()
            .with_missing_cells(&[(0, 0), (1, 5), (3, 9), (2, 9)]);
        let plans = build_plans(&data).unwrap();
        let m = e_step(&data, &plans, &SpdMatrix::identity(4), &[1.0; 200]).unwrap();
        let mut cfg = EstimatorConfig::new(EstimatorKind::EmTyl);
        cfg.fp_inner_loop = true;
        cfg.fp_tol = 1e-20;
        cfg.fp_max_iter = 500;
        let (sigma, _) = m_step_tyl(&m, &SpdMatrix::identity(4), &cfg).unwrap();
        let h = fixed_point_map(&m, &sigma).unwrap();
        let (h, _) = SpdMatrix::new_unchecked(h).normalized(Normalization::Trace).unwrap();
        assert!((h.as_mat() - sigma.as_mat()).norm() < 1e-6);
    }
}
