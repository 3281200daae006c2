//! Synthetic data: Toeplitz scatter, gamma textures, low-rank covariances,
//! outlier corruption and the Haystack contamination model.

use nalgebra::QR;
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Exp1, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{evd, Mat, SpdMatrix};

fn d_p() -> usize {
    15
}
fn d_n() -> usize {
    200
}
fn d_rho() -> f64 {
    0.7
}
fn d_alpha() -> f64 {
    1.0
}
fn d_sigma2() -> f64 {
    10.0
}

/// Parameters shared by the simulation experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default = "d_p")]
    pub p: usize,
    #[serde(default = "d_n")]
    pub n: usize,
    #[serde(default = "d_rho")]
    pub rho: f64,
    /// Gamma shape of the textures (scale `1/alpha`, so `E[τ] = 1`).
    /// `inf` pins every texture to 1.
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    /// Signal power of the low-rank model `I + σ² U Uᵀ`.
    #[serde(default = "d_sigma2")]
    pub snr_sigma2: f64,
    /// Signal rank; `None` uses the full-rank Toeplitz scatter.
    #[serde(default)]
    pub rank: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            p: d_p(),
            n: d_n(),
            rho: d_rho(),
            alpha: d_alpha(),
            snr_sigma2: d_sigma2(),
            rank: None,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.n == 0 {
            return Err(Error::Config("p and n must be positive".into()));
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return Err(Error::Config(format!("rho = {} outside (-1, 1)", self.rho)));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha = {} must be positive", self.alpha)));
        }
        if self.snr_sigma2 < 0.0 {
            return Err(Error::Config("snr_sigma2 must be nonnegative".into()));
        }
        if let Some(r) = self.rank {
            if r == 0 || r >= self.p {
                return Err(Error::Config(format!("rank {r} must lie in [1, {}]", self.p - 1)));
            }
        }
        Ok(())
    }

    /// The true covariance: Toeplitz, or its low-rank counterpart when `rank` is set.
    pub fn covariance(&self) -> Result<SpdMatrix> {
        let r = toeplitz_scatter(self.p, self.rho)?;
        match self.rank {
            Some(k) => Ok(lowrank_cov(&r, k, self.snr_sigma2)?.0),
            None => Ok(r),
        }
    }
}

/// `R_ij = ρ^{|i−j|}`.
pub fn toeplitz_scatter(p: usize, rho: f64) -> Result<SpdMatrix> {
    if !(rho > -1.0 && rho < 1.0) {
        return Err(Error::InvalidInput(format!("|rho| must be < 1, got {rho}")));
    }
    SpdMatrix::new(Mat::from_fn(p, p, |i, j| rho.powi(i.abs_diff(j) as i32)))
}

/// `I + σ² U Uᵀ` with `U` the top-`r` eigenvectors of `scatter`; returns `U` too.
pub fn lowrank_cov(scatter: &SpdMatrix, r: usize, sigma2: f64) -> Result<(SpdMatrix, Mat)> {
    let p = scatter.dim();
    if r >= p {
        return Err(Error::InvalidInput(format!("rank {r} must be below p = {p}")));
    }
    if sigma2 < 0.0 {
        return Err(Error::InvalidInput("sigma2 must be nonnegative".into()));
    }
    let e = evd(scatter.as_sym())?;
    let u = e.eigenvectors.columns(0, r).into_owned();
    let cov = Mat::identity(p, p) + &u * u.transpose() * sigma2;
    Ok((SpdMatrix::new(cov)?, u))
}

/// Texture law of the scaled-Gaussian model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TextureLaw {
    /// `τ ≡ 1`: plain Gaussian samples.
    Unit,
    /// `τ ~ Gamma(shape, 1/shape)`.
    Gamma(f64),
}

impl TextureLaw {
    /// `Gamma(alpha)`, or `Unit` for an infinite shape.
    pub fn from_alpha(alpha: f64) -> Self {
        if alpha.is_infinite() {
            TextureLaw::Unit
        } else {
            TextureLaw::Gamma(alpha)
        }
    }

    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> Result<f64> {
        match self {
            TextureLaw::Unit => Ok(1.0),
            TextureLaw::Gamma(a) if a == 1.0 => Ok(Exp1.sample(rng)),
            TextureLaw::Gamma(a) => {
                let g = Gamma::new(a, 1.0 / a)
                    .map_err(|e| Error::InvalidInput(format!("gamma shape {a}: {e}")))?;
                Ok(g.sample(rng))
            }
        }
    }
}

/// Draws from a scaled-Gaussian model, one sample per column.
#[derive(Debug, Clone)]
pub struct MsgSample {
    pub data: Mat,
    pub textures: Vec<f64>,
}

/// Square-root factor `L` with `L Lᵀ = cov`: Cholesky, or `U Λ^{1/2}` when
/// the Cholesky factorization fails.
pub fn sampling_factor(cov: &SpdMatrix) -> Result<Mat> {
    match cov.cholesky() {
        Ok(c) => Ok(c.l()),
        Err(_) => {
            let e = evd(cov.as_sym())?;
            let mut f = e.eigenvectors.clone();
            for (j, l) in e.eigenvalues.iter().enumerate() {
                f.column_mut(j).scale_mut(l.max(0.0).sqrt());
            }
            Ok(f)
        }
    }
}

/// Column `i` is `√τ_i L z_i` with `z_i ~ N(0, I)`.
pub fn sample_msg<R: Rng + ?Sized>(
    cov: &SpdMatrix,
    n: usize,
    law: TextureLaw,
    rng: &mut R,
) -> Result<MsgSample> {
    let p = cov.dim();
    let l = sampling_factor(cov)?;
    let mut textures = Vec::with_capacity(n);
    let mut z = Mat::zeros(p, n);
    for c in 0..n {
        let tau = law.sample(rng)?;
        let s = tau.sqrt();
        for r in 0..p {
            let v: f64 = StandardNormal.sample(rng);
            z[(r, c)] = s * v;
        }
        textures.push(tau);
    }
    Ok(MsgSample {
        data: l * z,
        textures,
    })
}

/// Adds `N(0, σ_wgn² I)` noise to `⌊ratio·n⌋` distinct random columns and
/// returns their indices in ascending order.
pub fn corrupt_wgn<R: Rng + ?Sized>(
    data: &Mat,
    ratio: f64,
    sigma_wgn: f64,
    rng: &mut R,
) -> Result<(Mat, Vec<usize>)> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidInput(format!("outlier ratio {ratio} outside [0, 1)")));
    }
    let n = data.ncols();
    let count = (ratio * n as f64).floor() as usize;
    let mut idx = index::sample(rng, n, count).into_vec();
    idx.sort_unstable();
    let mut out = data.clone();
    for &c in &idx {
        for r in 0..data.nrows() {
            let z: f64 = StandardNormal.sample(rng);
            out[(r, c)] += sigma_wgn * z;
        }
    }
    Ok((out, idx))
}

/// A `p × p` orthogonal matrix drawn from the QR factorization of a Gaussian
/// matrix, signs fixed so that `R` has a positive diagonal.
pub fn random_orthogonal<R: Rng + ?Sized>(p: usize, rng: &mut R) -> Mat {
    let g = Mat::from_fn(p, p, |_, _| StandardNormal.sample(rng));
    let qr = QR::new(g);
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..p {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Haystack draw: inliers `N(0, I + σ_s² U Uᵀ)`, outliers `N(0, I + σ_o² U⊥ U⊥ᵀ)`.
#[derive(Debug, Clone)]
pub struct HaystackSample {
    pub data: Mat,
    pub is_outlier: Vec<bool>,
    /// Orthonormal basis of the `k`-dimensional signal subspace.
    pub subspace: Mat,
    /// Orthonormal basis of its complement.
    pub complement: Mat,
}

pub fn sample_haystack<R: Rng + ?Sized>(
    p: usize,
    n: usize,
    k: usize,
    sigma_s2: f64,
    sigma_o2: f64,
    outlier_ratio: f64,
    rng: &mut R,
) -> Result<HaystackSample> {
    if k == 0 || k >= p {
        return Err(Error::InvalidInput(format!("k = {k} must lie in [1, {}]", p - 1)));
    }
    if !(0.0..1.0).contains(&outlier_ratio) {
        return Err(Error::InvalidInput(format!(
            "outlier ratio {outlier_ratio} outside [0, 1)"
        )));
    }
    if sigma_s2 < 0.0 || sigma_o2 < 0.0 {
        return Err(Error::InvalidInput("variances must be nonnegative".into()));
    }
    let q = random_orthogonal(p, rng);
    let u = q.columns(0, k).into_owned();
    let u_perp = q.columns(k, p - k).into_owned();
    let count = (outlier_ratio * n as f64).round() as usize;
    let mut is_outlier = vec![false; n];
    for c in index::sample(rng, n, count) {
        is_outlier[c] = true;
    }
    let (ss, so) = (sigma_s2.sqrt(), sigma_o2.sqrt());
    let mut data = Mat::zeros(p, n);
    for c in 0..n {
        let mut col = data.column_mut(c);
        for r in 0..p {
            col[r] = StandardNormal.sample(rng);
        }
        let (basis, scale, dim) = if is_outlier[c] {
            (&u_perp, so, p - k)
        } else {
            (&u, ss, k)
        };
        for j in 0..dim {
            let a: f64 = StandardNormal.sample(rng);
            col.axpy(scale * a, &basis.column(j), 1.0);
        }
    }
    Ok(HaystackSample {
        data,
        is_outlier,
        subspace: u,
        complement: u_perp,
    })
}
