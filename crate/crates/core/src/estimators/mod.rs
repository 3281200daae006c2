//! Covariance (shape) estimators for incomplete data.
//!
//! The EM estimators (`em_tyl`, `em_scm`, optionally rank-constrained) work
//! directly on [`IncompleteMatrix`]. Baselines either see the clairvoyant
//! complete data, only the fully observed samples, or an imputed copy.

mod baseline;
mod em;
mod estep;
mod imputation;
mod mstep;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat, Normalization, SpdMatrix};
use crate::missing::{split_sample_sets, IncompleteMatrix};

pub use baseline::{scm, tyler, tyler_step, TylerFit};
pub use em::{observed_loglik, run_em};
pub use estep::{e_step, ConditionalMoments};
pub use imputation::{impute_baselines, stochastic_imputations, ImputationStats};
pub use mstep::{low_rank_project, m_step_gauss, m_step_tyl, LowRankProjection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    EmTyl,
    EmScm,
    #[serde(alias = "scm")]
    ScmClair,
    #[serde(alias = "tyler", alias = "tyl_clair")]
    TylClair,
    ScmObs,
    TylObs,
    Rmi,
    Rsi,
    MeanTyl,
}

impl EstimatorKind {
    pub fn base_name(self) -> &'static str {
        match self {
            EstimatorKind::EmTyl => "EM-Tyl",
            EstimatorKind::EmScm => "EM-SCM",
            EstimatorKind::ScmClair => "SCM-clair",
            EstimatorKind::TylClair => "Tyl-clair",
            EstimatorKind::ScmObs => "SCM-obs",
            EstimatorKind::TylObs => "Tyl-obs",
            EstimatorKind::Rmi => "RMI",
            EstimatorKind::Rsi => "RSI",
            EstimatorKind::MeanTyl => "Mean-Tyl",
        }
    }

    pub fn needs_clairvoyant(self) -> bool {
        matches!(self, EstimatorKind::ScmClair | EstimatorKind::TylClair)
    }

    pub fn is_stochastic(self) -> bool {
        matches!(self, EstimatorKind::Rmi | EstimatorKind::Rsi)
    }
}

fn d_em_tol() -> f64 {
    1e-6
}
fn d_em_max_iter() -> usize {
    200
}
fn d_fp_iters() -> usize {
    1
}
fn d_fp_tol() -> f64 {
    1e-8
}
fn d_fp_max_iter() -> usize {
    100
}
fn d_tyler_max_iter() -> usize {
    1000
}
fn d_q() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    /// Signal rank `r` of the factor model; `None` for full rank.
    #[serde(default)]
    pub rank: Option<usize>,
    #[serde(default = "d_em_tol")]
    pub em_tol: f64,
    #[serde(default = "d_em_max_iter")]
    pub em_max_iter: usize,
    /// Fixed-point updates per M-step when the inner loop is off.
    #[serde(default = "d_fp_iters")]
    pub fp_iters_per_em: usize,
    /// Iterate the inner fixed point until `fp_tol` instead.
    #[serde(default)]
    pub fp_inner_loop: bool,
    #[serde(default = "d_fp_tol")]
    pub fp_tol: f64,
    #[serde(default = "d_fp_max_iter")]
    pub fp_max_iter: usize,
    #[serde(default = "d_tyler_max_iter")]
    pub tyler_max_iter: usize,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default = "d_q")]
    pub q_imputations: usize,
    /// RMI: project each imputed Tyler estimate before averaging instead of after.
    #[serde(default)]
    pub project_before_average: bool,
    /// Record the observed-data loglikelihood after every EM iteration.
    #[serde(default)]
    pub track_loglik: bool,
    #[serde(default)]
    pub seed: u64,
}

impl EstimatorConfig {
    pub fn new(kind: EstimatorKind) -> Self {
        Self {
            kind,
            rank: None,
            em_tol: d_em_tol(),
            em_max_iter: d_em_max_iter(),
            fp_iters_per_em: d_fp_iters(),
            fp_inner_loop: false,
            fp_tol: d_fp_tol(),
            fp_max_iter: d_fp_max_iter(),
            tyler_max_iter: d_tyler_max_iter(),
            normalization: Normalization::Trace,
            q_imputations: d_q(),
            project_before_average: false,
            track_loglik: false,
            seed: 0,
        }
    }

    pub fn with_rank(mut self, rank: Option<usize>) -> Self {
        self.rank = rank;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Display name, e.g. `EM-Tyl-r` for a rank-constrained EM-Tyl.
    pub fn label(&self) -> String {
        match self.rank {
            Some(_) => format!("{}-r", self.kind.base_name()),
            None => self.kind.base_name().to_string(),
        }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if let Some(r) = self.rank {
            if r == 0 || r >= p {
                return Err(Error::Config(format!("rank {r} must lie in [1, {}]", p - 1)));
            }
        }
        if !(self.em_tol > 0.0 && self.fp_tol > 0.0) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        if self.fp_iters_per_em == 0 {
            return Err(Error::Config("fp_iters_per_em must be at least 1".into()));
        }
        if self.kind.is_stochastic() && self.q_imputations == 0 {
            return Err(Error::Config("q_imputations must be at least 1".into()));
        }
        Ok(())
    }
}

/// Output of every estimator.
#[derive(Debug, Clone)]
pub struct ShapeEstimate {
    pub sigma: SpdMatrix,
    /// Per-sample textures; all ones for Gaussian estimators.
    pub textures: Vec<f64>,
    pub iterations: usize,
    /// `‖θ^(t+1) − θ^(t)‖_F²` per EM iteration.
    pub trace: Vec<f64>,
    pub converged: bool,
    /// Observed-data loglikelihood per EM iteration (only when tracked).
    pub loglik: Vec<f64>,
    pub warnings: Vec<String>,
}

impl ShapeEstimate {
    pub(crate) fn direct(sigma: SpdMatrix, n: usize) -> Self {
        Self {
            sigma,
            textures: vec![1.0; n],
            iterations: 0,
            trace: Vec::new(),
            converged: true,
            loglik: Vec::new(),
            warnings: Vec::new(),
        }
    }

    /// Writes the shape matrix as a headerless `p × p` CSV.
    pub fn write_matrix_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write_matrix_csv(self.sigma.as_mat(), &mut w)
    }

    pub fn sidecar(&self, estimator: &str, normalization: Normalization) -> EstimateSidecar {
        EstimateSidecar {
            estimator: estimator.to_string(),
            p: self.sigma.dim(),
            normalization,
            textures: self.textures.clone(),
            iterations: self.iterations,
            trace: self.trace.clone(),
            converged: self.converged,
            warnings: self.warnings.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// JSON metadata written next to an estimate's matrix CSV.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EstimateSidecar {
    pub estimator: String,
    pub p: usize,
    pub normalization: Normalization,
    pub textures: Vec<f64>,
    pub iterations: usize,
    pub trace: Vec<f64>,
    pub converged: bool,
    pub warnings: Vec<String>,
    pub version: String,
}

pub fn write_matrix_csv<W: Write>(m: &Mat, w: &mut W) -> Result<()> {
    for r in 0..m.nrows() {
        let line: Vec<String> = (0..m.ncols()).map(|c| format!("{:?}", m[(r, c)])).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

/// Runs the configured estimator.
///
/// `clairvoyant` is the complete data before masking; clairvoyant baselines
/// fall back to `data` when it is itself complete.
pub fn estimate(
    data: &IncompleteMatrix,
    clairvoyant: Option<&Mat>,
    config: &EstimatorConfig,
) -> Result<ShapeEstimate> {
    let p = data.p();
    config.validate(p)?;
    match config.kind {
        EstimatorKind::EmTyl | EstimatorKind::EmScm => run_em(data, config),
        EstimatorKind::Rmi | EstimatorKind::Rsi | EstimatorKind::MeanTyl => {
            impute_baselines(data, config)
        }
        EstimatorKind::ScmClair | EstimatorKind::TylClair => {
            let full = match clairvoyant {
                Some(m) => m,
                None => data.complete_values().ok_or_else(|| {
                    Error::Config(format!(
                        "{} needs complete (clairvoyant) data",
                        config.kind.base_name()
                    ))
                })?,
            };
            complete_data_estimate(full, config)
        }
        EstimatorKind::ScmObs | EstimatorKind::TylObs => {
            let (complete, _) = split_sample_sets(data);
            let sub = data.select_columns(&complete)?;
            let values = sub.complete_values().expect("selected complete columns");
            let mut est = complete_data_estimate(values, config)?;
            // textures are only defined for the samples that were used
            est.textures = vec![1.0; data.n()];
            Ok(est)
        }
    }
}

fn complete_data_estimate(y: &Mat, config: &EstimatorConfig) -> Result<ShapeEstimate> {
    let n = y.ncols();
    let (sigma, iterations) = match config.kind {
        EstimatorKind::ScmClair | EstimatorKind::ScmObs => (scm(y)?, 0),
        _ => {
            let fit = tyler(y, config.fp_tol, config.tyler_max_iter)?;
            (fit.sigma, fit.iterations)
        }
    };
    let mut est = ShapeEstimate::direct(finish(sigma, config)?, n);
    est.iterations = iterations;
    Ok(est)
}

/// Applies the optional rank constraint, then the configured normalization.
pub(crate) fn finish(sigma: SpdMatrix, config: &EstimatorConfig) -> Result<SpdMatrix> {
    Ok(low_rank_or_same(sigma, config.rank)?
        .normalized(config.normalization)?
        .0)
}

pub(crate) fn low_rank_or_same(sigma: SpdMatrix, rank: Option<usize>) -> Result<SpdMatrix> {
    match rank {
        Some(r) => Ok(low_rank_project(sigma.as_sym(), r)?.sigma),
        None => Ok(sigma),
    }
}
