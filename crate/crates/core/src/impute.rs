//! EM-EOF gap filling with an optional robust final reconstruction, and
//! cross-validation scoring on held-out observed cells.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{estimate, EstimatorConfig, EstimatorKind};
use crate::linalg::{evd, submatrix, Mat, SymMatrix, Vector};
use crate::missing::IncompleteMatrix;
use crate::rng;

/// Covariance used for the last reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalEstimator {
    /// Keep the SCM of the last EOF iterate.
    Scm,
    /// Re-estimate with EM-Tyl-r (`r = k`) on the incomplete data.
    EmTylR,
    /// Re-estimate with the rank-`k` robust multiple-imputation estimator.
    Rmi,
}

impl FinalEstimator {
    pub fn name(self) -> &'static str {
        match self {
            FinalEstimator::Scm => "EM-EOF-SCM",
            FinalEstimator::EmTylR => "EM-EOF-EM-Tyl-r",
            FinalEstimator::Rmi => "RMI",
        }
    }

    /// Estimator re-fitted on the incomplete data for the last reconstruction.
    fn refit_kind(self) -> Option<EstimatorKind> {
        match self {
            FinalEstimator::Scm => None,
            FinalEstimator::EmTylR => Some(EstimatorKind::EmTyl),
            FinalEstimator::Rmi => Some(EstimatorKind::Rmi),
        }
    }
}

/// How a sample is rebuilt from a covariance estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reconstruction {
    /// Orthogonal projection of the completed sample on the top-`k` EOFs.
    #[default]
    Projection,
    /// `Σ_mo Σ_oo⁻¹ y_o` under the rank-`k` factor model of the covariance.
    ConditionalMean,
}

fn d_k() -> usize {
    5
}
fn d_outer_iter() -> usize {
    100
}
fn d_outer_tol() -> f64 {
    1e-8
}
fn d_cv_fraction() -> f64 {
    0.01
}
fn d_final() -> FinalEstimator {
    FinalEstimator::EmTylR
}
fn d_q() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImputeConfig {
    /// Number of EOFs kept.
    #[serde(default = "d_k")]
    pub k: usize,
    #[serde(default = "d_outer_iter")]
    pub max_outer_iter: usize,
    /// Stop when the mean-square change of the imputed cells drops below this.
    #[serde(default = "d_outer_tol")]
    pub outer_tol: f64,
    #[serde(default = "d_cv_fraction")]
    pub cv_fraction: f64,
    #[serde(default = "d_final")]
    pub final_estimator: FinalEstimator,
    #[serde(default)]
    pub reconstruction: Reconstruction,
    /// Stochastic copies for the RMI baseline.
    #[serde(default = "d_q")]
    pub q_imputations: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ImputeConfig {
    fn default() -> Self {
        Self {
            k: d_k(),
            max_outer_iter: d_outer_iter(),
            outer_tol: d_outer_tol(),
            cv_fraction: d_cv_fraction(),
            final_estimator: d_final(),
            reconstruction: Reconstruction::default(),
            q_imputations: d_q(),
            seed: 0,
        }
    }
}

impl ImputeConfig {
    pub fn validate(&self, p: usize) -> Result<()> {
        if self.k == 0 || self.k >= p {
            return Err(Error::Config(format!("k = {} must lie in [1, {}]", self.k, p - 1)));
        }
        if !(self.cv_fraction > 0.0 && self.cv_fraction <= 0.1) {
            return Err(Error::Config(format!(
                "cv_fraction = {} outside (0, 0.1]",
                self.cv_fraction
            )));
        }
        if !(self.outer_tol > 0.0) || self.max_outer_iter == 0 {
            return Err(Error::Config("outer_tol and max_outer_iter must be positive".into()));
        }
        if self.final_estimator == FinalEstimator::Rmi && self.q_imputations == 0 {
            return Err(Error::Config("q_imputations must be at least 1".into()));
        }
        Ok(())
    }
}

/// A held-out observed cell and its imputed value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvCell {
    pub row: usize,
    pub col: usize,
    pub truth: f64,
    pub imputed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub rmse: f64,
    pub cv_cells: Vec<CvCell>,
}

impl CvReport {
    pub fn from_cells(cv_cells: Vec<CvCell>) -> Self {
        let rmse = rmse(&cv_cells);
        Self { rmse, cv_cells }
    }
}

/// `sqrt(mean((imputed − truth)²))`, zero for an empty set.
pub fn rmse(cells: &[CvCell]) -> f64 {
    if cells.is_empty() {
        return 0.0;
    }
    let ss: f64 = cells.iter().map(|c| (c.imputed - c.truth).powi(2)).sum();
    (ss / cells.len() as f64).sqrt()
}

/// Removes `round(fraction · #observed)` (at least one) observed cells, drawn
/// uniformly, never emptying a sample. Returns the masked data and the removed
/// cells as `(row, col, value)`.
pub fn hold_out_cv_cells<R: Rng + ?Sized>(
    data: &IncompleteMatrix,
    fraction: f64,
    rng: &mut R,
) -> Result<(IncompleteMatrix, Vec<(usize, usize, f64)>)> {
    let observed = data.observed_count();
    if !(fraction > 0.0) {
        return Err(Error::Config(format!("cv fraction {fraction} must be positive")));
    }
    let count = ((fraction * observed as f64).round() as usize).max(1);
    let spare = observed.saturating_sub(data.n());
    if count > spare {
        return Err(Error::InvalidInput(format!(
            "cannot hold out {count} cells: only {spare} observed cells can be removed"
        )));
    }
    let mut cells: Vec<(usize, usize)> = (0..data.n())
        .flat_map(|c| data.observed_rows(c).into_iter().map(move |r| (r, c)))
        .collect();
    cells.shuffle(rng);
    let mut left: Vec<usize> = (0..data.n()).map(|c| data.observed_rows(c).len()).collect();
    let mut chosen = Vec::with_capacity(count);
    for (r, c) in cells {
        if chosen.len() == count {
            break;
        }
        if left[c] > 1 {
            left[c] -= 1;
            chosen.push((r, c, data.get(r, c).expect("observed")));
        }
    }
    let holes: Vec<(usize, usize)> = chosen.iter().map(|&(r, c, _)| (r, c)).collect();
    Ok((data.with_missing_cells(&holes), chosen))
}

/// Result of [`eof_fill`].
#[derive(Debug, Clone)]
pub struct EofFill {
    pub completed: Mat,
    pub iterations: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
}

/// Missing cells in column-major order.
fn missing_cells(data: &IncompleteMatrix) -> Vec<(usize, usize)> {
    (0..data.n())
        .flat_map(|c| (0..data.p()).filter(move |&r| !data.is_observed(r, c)).map(move |r| (r, c)))
        .collect()
}

fn row_means(y: &Mat) -> Vector {
    Vector::from_fn(y.nrows(), |r, _| y.row(r).mean())
}

/// New values for `cells` from the centered completed matrix `x` and a
/// covariance estimate `cov`.
pub fn reconstruct(
    x: &Mat,
    data: &IncompleteMatrix,
    cells: &[(usize, usize)],
    cov: &Mat,
    k: usize,
    mode: Reconstruction,
) -> Result<Vec<f64>> {
    let p = x.nrows();
    let e = evd(&SymMatrix::symmetrize(cov.clone()))?;
    let k = k.min(p);
    let mut out = Vec::with_capacity(cells.len());
    match mode {
        Reconstruction::Projection => {
            let u = e.eigenvectors.columns(0, k).into_owned();
            let mut current = usize::MAX;
            let mut xhat = Vector::zeros(p);
            for &(r, c) in cells {
                if c != current {
                    current = c;
                    xhat = &u * (u.transpose() * x.column(c));
                }
                out.push(xhat[r]);
            }
        }
        Reconstruction::ConditionalMean => {
            let sigma = if k < p {
                let floor = 1e-12 * e.eigenvalues[0].abs().max(f64::MIN_POSITIVE);
                let noise = (e.eigenvalues[k..].iter().sum::<f64>() / (p - k) as f64).max(floor);
                let mut s = Mat::identity(p, p) * noise;
                for i in 0..k {
                    let l = (e.eigenvalues[i] - noise).max(0.0);
                    let v = e.eigenvectors.column(i);
                    s += &v * v.transpose() * l;
                }
                s
            } else {
                e.reconstruct()
            };
            let mut i = 0;
            while i < cells.len() {
                let c = cells[i].1;
                let obs = data.observed_rows(c);
                let mis: Vec<usize> = (0..p).filter(|&r| !data.is_observed(r, c)).collect();
                let s_oo = submatrix(&sigma, &obs, &obs);
                let s_mo = submatrix(&sigma, &mis, &obs);
                let y_o = Vector::from_iterator(obs.len(), obs.iter().map(|&r| x[(r, c)]));
                let solved = s_oo
                    .clone()
                    .cholesky()
                    .map(|ch| ch.solve(&y_o))
                    .or_else(|| s_oo.pseudo_inverse(1e-12).ok().map(|pinv| pinv * &y_o))
                    .ok_or(Error::Conditioning { sample: c })?;
                let y_m = s_mo * solved;
                while i < cells.len() && cells[i].1 == c {
                    let pos = mis.iter().position(|&m| m == cells[i].0).expect("missing row");
                    out.push(y_m[pos]);
                    i += 1;
                }
            }
        }
    }
    Ok(out)
}

/// EM-EOF imputation of every missing cell of `data`. Observed cells are
/// copied through untouched.
pub fn eof_fill(data: &IncompleteMatrix, config: &ImputeConfig) -> Result<EofFill> {
    let (p, n) = (data.p(), data.n());
    config.validate(p)?;
    data.validate_for_estimation()?;
    let cells = missing_cells(data);
    if cells.is_empty() {
        return Ok(EofFill {
            completed: data.filled(0.0),
            iterations: 0,
            converged: true,
            warnings: Vec::new(),
        });
    }
    // missing cells start at their variable's observed mean (zero after centering)
    let mut y = data.filled(f64::NAN);
    for r in 0..p {
        let obs: Vec<f64> = (0..n).filter_map(|c| data.get(r, c)).collect();
        let m = if obs.is_empty() { 0.0 } else { obs.iter().sum::<f64>() / obs.len() as f64 };
        for c in 0..n {
            if !data.is_observed(r, c) {
                y[(r, c)] = m;
            }
        }
    }

    let mut warnings = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for t in 1..=config.max_outer_iter {
        iterations = t;
        let means = row_means(&y);
        let x = center(&y, &means);
        let cov = &x * x.transpose() / n as f64;
        let next = reconstruct(&x, data, &cells, &cov, config.k, config.reconstruction)?;
        let change = write_cells(&mut y, &cells, &next, &means);
        if !change.is_finite() {
            return Err(Error::Numerical {
                iteration: t,
                what: "EOF reconstruction produced non-finite values".into(),
            });
        }
        if change < config.outer_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        warnings.push(format!(
            "EM-EOF did not converge in {} iterations",
            config.max_outer_iter
        ));
    }

    if let Some(kind) = config.final_estimator.refit_kind() {
        let means = row_means(&y);
        let centered = IncompleteMatrix::new(center(&data.filled(0.0), &means), data.mask().to_vec())?;
        let mut est_cfg = EstimatorConfig::new(kind).with_rank(Some(config.k)).with_seed(config.seed);
        est_cfg.q_imputations = config.q_imputations;
        let est = estimate(&centered, None, &est_cfg)?;
        warnings.extend(est.warnings.iter().cloned());
        let x = center(&y, &means);
        let next = reconstruct(&x, data, &cells, est.sigma.as_mat(), config.k, config.reconstruction)?;
        write_cells(&mut y, &cells, &next, &means);
    }
    Ok(EofFill {
        completed: y,
        iterations,
        converged,
        warnings,
    })
}

fn center(y: &Mat, means: &Vector) -> Mat {
    let mut x = y.clone();
    for mut col in x.column_iter_mut() {
        col -= means;
    }
    x
}

/// Writes `values + mean` into `cells`; returns the mean-square change.
fn write_cells(y: &mut Mat, cells: &[(usize, usize)], values: &[f64], means: &Vector) -> f64 {
    let mut ss = 0.0;
    for (&(r, c), v) in cells.iter().zip(values) {
        let new = v + means[r];
        ss += (new - y[(r, c)]).powi(2);
        y[(r, c)] = new;
    }
    ss / cells.len() as f64
}

/// Imputation outcome with its cross-validation score.
#[derive(Debug, Clone)]
pub struct ImputeOutcome {
    /// Completed data; held-out cells carry their original values.
    pub completed: Mat,
    pub cv: CvReport,
    pub iterations: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
}

/// Holds out `cv_fraction` of the observed cells, imputes, and scores the
/// held-out cells.
pub fn em_eof_impute(data: &IncompleteMatrix, config: &ImputeConfig) -> Result<ImputeOutcome> {
    config.validate(data.p())?;
    let mut r = rng::stream(config.seed, rng::label("cv-cells"));
    let (masked, held) = hold_out_cv_cells(data, config.cv_fraction, &mut r)?;
    let fill = eof_fill(&masked, config)?;
    let mut completed = fill.completed;
    let cells = held
        .iter()
        .map(|&(row, col, truth)| {
            let imputed = completed[(row, col)];
            completed[(row, col)] = truth;
            CvCell {
                row,
                col,
                truth,
                imputed,
            }
        })
        .collect();
    Ok(ImputeOutcome {
        completed,
        cv: CvReport::from_cells(cells),
        iterations: fill.iterations,
        converged: fill.converged,
        warnings: fill.warnings,
    })
}

/// CV error for each EOF count in `ks`, all scored on the same held-out cells.
pub fn sweep_k(data: &IncompleteMatrix, ks: &[usize], config: &ImputeConfig) -> Result<Vec<(usize, f64)>> {
    ks.iter()
        .map(|&k| {
            let cfg = ImputeConfig {
                k,
                ..config.clone()
            };
            Ok((k, em_eof_impute(data, &cfg)?.cv.rmse))
        })
        .collect()
}
