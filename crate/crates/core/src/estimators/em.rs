use nalgebra::Cholesky;

use crate::error::{Error, Result};
use crate::linalg::{submatrix, SpdMatrix, Vector};
use crate::missing::{build_plans, split_sample_sets, IncompleteMatrix, PermutationPlan};

use super::baseline::{scm, tyler};
use super::estep::e_step;
use super::mstep::{low_rank_project, m_step_gauss, m_step_tyl};
use super::{EstimatorConfig, EstimatorKind, ShapeEstimate};

/// Observed-data loglikelihood of the scaled-Gaussian model,
/// `Σ_i log N(y_i^o; 0, τ_i Σ_oo,i)`, with missing blocks marginalized.
pub fn observed_loglik(
    data: &IncompleteMatrix,
    plans: &[PermutationPlan],
    sigma: &SpdMatrix,
    textures: &[f64],
) -> Result<f64> {
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let mut total = 0.0;
    for (i, plan) in plans.iter().enumerate() {
        let obs = &plan.obs_idx;
        let s_oo = submatrix(sigma.as_mat(), obs, obs);
        let chol = Cholesky::new(s_oo).ok_or(Error::Conditioning { sample: i })?;
        let y_o = Vector::from_iterator(obs.len(), obs.iter().map(|&r| data.get(r, i).unwrap()));
        let quad = y_o.dot(&chol.solve(&y_o));
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let k = obs.len() as f64;
        let tau = textures[i];
        total -= 0.5 * (k * ln_2pi + k * tau.ln() + log_det + quad / tau);
    }
    Ok(total)
}

/// Starting shape: Tyler on the fully observed samples when there are more
/// than `p`, else their SCM when there are exactly `p`, else the identity.
fn initial_sigma(data: &IncompleteMatrix, config: &EstimatorConfig) -> (SpdMatrix, Option<String>) {
    let p = data.p();
    let (complete, _) = split_sample_sets(data);
    let sub = data
        .select_columns(&complete)
        .ok()
        .filter(|s| s.n() == complete.len() && !complete.is_empty());
    let values = sub.as_ref().and_then(|s| s.complete_values().cloned());
    if let Some(y) = values.as_ref().filter(|_| complete.len() > p) {
        match tyler(y, config.fp_tol, config.tyler_max_iter) {
            Ok(fit) => return (fit.sigma, None),
            Err(e) => log::debug!("Tyl-obs initialization failed: {e}"),
        }
    }
    if let Some(y) = values.as_ref().filter(|_| complete.len() >= p) {
        if let Ok(s) = scm(y) {
            return (s, Some("initialized with SCM-obs".into()));
        }
    }
    (
        SpdMatrix::identity(p),
        Some(format!(
            "only {} fully observed samples; initialized with identity",
            complete.len()
        )),
    )
}

/// EM estimation of the shape matrix (and textures for `em_tyl`), with the
/// optional factor-model rank constraint applied after each M-step.
///
/// Stops when `‖θ^(t+1) − θ^(t)‖_F² < em_tol`, where θ stacks the normalized
/// shape and the textures, or after `em_max_iter` iterations.
pub fn run_em(data: &IncompleteMatrix, config: &EstimatorConfig) -> Result<ShapeEstimate> {
    let robust = match config.kind {
        EstimatorKind::EmTyl => true,
        EstimatorKind::EmScm => false,
        other => {
            return Err(Error::Config(format!(
                "run_em called with non-EM estimator {}",
                other.base_name()
            )))
        }
    };
    let p = data.p();
    config.validate(p)?;
    data.validate_for_estimation()?;
    let plans = build_plans(data)?;
    let n = data.n();

    let mut warnings = Vec::new();
    let (init, note) = initial_sigma(data, config);
    warnings.extend(note);
    let mut sigma = if robust {
        init.normalized(config.normalization)?.0
    } else {
        init
    };
    let mut textures = vec![1.0; n];
    let mut trace = Vec::new();
    let mut loglik = Vec::new();
    if config.track_loglik {
        loglik.push(observed_loglik(data, &plans, &sigma, &textures)?);
    }

    let mut converged = false;
    let mut iterations = 0;
    for t in 1..=config.em_max_iter {
        iterations = t;
        let moments = e_step(data, &plans, &sigma, &textures)?;
        let (next, next_tau) = if robust {
            m_step_tyl(&moments, &sigma, config)?
        } else {
            let s = m_step_gauss(&moments)?;
            let s = match config.rank {
                Some(r) => low_rank_project(s.as_sym(), r)?.sigma,
                None => s,
            };
            (s, vec![1.0; n])
        };
        if next.as_mat().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                iteration: t,
                what: "EM update produced non-finite entries".into(),
            });
        }
        let a = next.normalized(config.normalization)?.0;
        let b = sigma.normalized(config.normalization)?.0;
        let tau_change: f64 = next_tau
            .iter()
            .zip(&textures)
            .map(|(x, y)| (x - y).powi(2))
            .sum();
        let change = (a.as_mat() - b.as_mat()).norm_squared() + tau_change;
        sigma = next;
        textures = next_tau;
        trace.push(change);
        if config.track_loglik {
            loglik.push(observed_loglik(data, &plans, &sigma, &textures)?);
        }
        if change < config.em_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        warnings.push(format!("EM did not converge in {} iterations", config.em_max_iter));
    }

    let (sigma, factor) = SpdMatrix::new(sigma.into_mat())?.normalized(config.normalization)?;
    if robust && (factor - 1.0).abs() > 1e-12 {
        // keep τ_i Σ invariant under the final rescaling
        for t in textures.iter_mut() {
            *t /= factor;
        }
    }
    Ok(ShapeEstimate {
        sigma,
        textures,
        iterations,
        trace,
        converged,
        loglik,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::test_support::{gaussian, random_spd};
    use crate::linalg::{geodesic_distance_sq, Normalization};

    #[test]
    fn complete_gaussian_em_scm_is_scm() {
        let y = gaussian(&random_spd(5, 1), 100, 2);
        let data = IncompleteMatrix::complete(y.clone()).unwrap();
        let est = run_em(&data, &EstimatorConfig::new(EstimatorKind::EmScm)).unwrap();
        let want = scm(&y).unwrap().normalized(Normalization::Trace).unwrap().0;
        assert!((est.sigma.as_mat() - want.as_mat()).norm() < 1e-12);
        assert!(est.converged);
        assert!(est.textures.iter().all(|&t| t == 1.0));
    }

    #[test]
    fn em_tyl_on_complete_data_is_tyler() {
        let y = gaussian(&random_spd(4, 3), 120, 4);
        let data = IncompleteMatrix::complete(y.clone()).unwrap();
        let mut cfg = EstimatorConfig::new(EstimatorKind::EmTyl);
        cfg.em_tol = 1e-16;
        cfg.em_max_iter = 2000;
        let est = run_em(&data, &cfg).unwrap();
        let want = tyler(&y, 1e-18, 5000).unwrap().sigma;
        assert!((est.sigma.as_mat() - want.as_mat()).norm() < 1e-7);
    }

    #[test]
    fn em_tyl_close_to_em_scm_for_gaussian_data() {
        let cov = random_spd(6, 5);
        let y = gaussian(&cov, 1000, 6);
        let cells: Vec<_> = (0..1000).step_by(3).map(|c| (c % 6, c)).collect();
        let data = IncompleteMatrix::complete(y).unwrap().with_missing_cells(&cells);
        let a = run_em(&data, &EstimatorConfig::new(EstimatorKind::EmTyl)).unwrap();
        let b = run_em(&data, &EstimatorConfig::new(EstimatorKind::EmScm)).unwrap();
        assert!(geodesic_distance_sq(&a.sigma, &b.sigma).unwrap() < 0.1);
    }

    #[test]
    fn falls_back_to_identity_without_complete_samples() {
        let y = gaussian(&random_spd(3, 7), 40, 8);
        let cells: Vec<_> = (0..40).map(|c| (c % 3, c)).collect();
        let data = IncompleteMatrix::complete(y).unwrap().with_missing_cells(&cells);
        let est = run_em(&data, &EstimatorConfig::new(EstimatorKind::EmTyl)).unwrap();
        assert!(est.warnings.iter().any(|w| w.contains("identity")));
        assert!(est.textures.iter().all(|&t| t > 0.0));
    }

    #[test]
    fn non_convergence_is_flagged() {
        let y = gaussian(&random_spd(4, 9), 60, 10);
        let data = IncompleteMatrix::complete(y).unwrap().with_missing_cells(&[(0, 1), (2, 3)]);
        let mut cfg = EstimatorConfig::new(EstimatorKind::EmTyl);
        cfg.em_max_iter = 1;
        cfg.em_tol = 1e-30;
        let est = run_em(&data, &cfg).unwrap();
        assert!(!est.converged);
        assert_eq!(est.iterations, 1);
        assert_eq!(est.trace.len(), 1);
    }

    #[test]
    fn low_rank_em_has_flat_noise_spectrum() {
        let y = gaussian(&random_spd(6, 11), 300, 12);
        let data = IncompleteMatrix::complete(y).unwrap().with_missing_cells(&[(1, 4), (5, 7)]);
        for kind in [EstimatorKind::EmTyl, EstimatorKind::EmScm] {
            let est = run_em(&data, &EstimatorConfig::new(kind).with_rank(Some(2))).unwrap();
            let e = crate::linalg::evd(est.sigma.as_sym()).unwrap();
            let tail = &e.eigenvalues[2..];
            assert!(tail.iter().all(|l| (l - tail[0]).abs() < 1e-10));
        }
    }
}
