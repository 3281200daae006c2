//! Fixtures shared by the integration tests.

#![allow(dead_code)]

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use robustcov::linalg::{Mat, SpdMatrix};
use robustcov::missing::IncompleteMatrix;
use robustcov::rng;

pub fn gaussian_mat(p: usize, n: usize, r: &mut rng::Rng) -> Mat {
    Mat::from_fn(p, n, |_, _| StandardNormal.sample(r))
}

/// `A Aᵀ / p + 0.2 I` for a Gaussian `A`; well conditioned but far from identity.
pub fn random_spd(p: usize, r: &mut rng::Rng) -> SpdMatrix {
    let a = gaussian_mat(p, p, r);
    let m = &a * a.transpose() / p as f64 + Mat::identity(p, p) * 0.2;
    SpdMatrix::new(m).expect("spd by construction")
}

/// Heavy-tailed samples `√τ L z` with exponential textures.
pub fn msg_samples(cov: &SpdMatrix, n: usize, r: &mut rng::Rng) -> Mat {
    let l = cov.cholesky().expect("spd").l();
    let mut y = &l * gaussian_mat(cov.dim(), n, r);
    for mut col in y.column_iter_mut() {
        let tau: f64 = rand_distr::Exp1.sample(r);
        col *= tau.sqrt();
    }
    y
}

/// Entrywise missing cells with probability `ratio`, keeping at least one
/// observed entry per sample and every sample of the first `p + 1` complete.
pub fn random_mask(y: &Mat, ratio: f64, r: &mut rng::Rng) -> IncompleteMatrix {
    let (p, n) = y.shape();
    let mut mask = vec![true; p * n];
    for c in (p + 1).min(n)..n {
        for row in 0..p {
            mask[c * p + row] = r.random::<f64>() >= ratio;
        }
        if (0..p).all(|row| !mask[c * p + row]) {
            mask[c * p + r.random_range(0..p)] = true;
        }
    }
    IncompleteMatrix::new(y.clone(), mask).expect("valid mask")
}

/// Random invertible matrix with singular values bounded away from zero.
pub fn random_invertible(p: usize, r: &mut rng::Rng) -> Mat {
    gaussian_mat(p, p, r) * 0.3 + Mat::identity(p, p)
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    (a - b).amax()
}
