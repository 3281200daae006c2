use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{Mat, SpdMatrix};
use crate::missing::IncompleteMatrix;
use crate::rng;

use super::baseline::tyler;
use super::{finish, low_rank_or_same, EstimatorConfig, EstimatorKind, ShapeEstimate};

/// Per-sample mean and standard deviation of the observed components.
#[derive(Debug, Clone)]
pub struct ImputationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Samples whose spread came from the global statistics (fewer than
    /// two observed entries).
    pub fallback: Vec<usize>,
}

impl ImputationStats {
    pub fn from_data(data: &IncompleteMatrix) -> Self {
        let (p, n) = (data.p(), data.n());
        let all: Vec<f64> = (0..n)
            .flat_map(|c| (0..p).filter_map(move |r| data.get(r, c)))
            .collect();
        let (g_mean, g_std) = mean_std(&all);
        let mut mean = Vec::with_capacity(n);
        let mut std = Vec::with_capacity(n);
        let mut fallback = Vec::new();
        for c in 0..n {
            let obs: Vec<f64> = (0..p).filter_map(|r| data.get(r, c)).collect();
            match obs.len() {
                0 => {
                    fallback.push(c);
                    mean.push(g_mean);
                    std.push(g_std);
                }
                1 => {
                    fallback.push(c);
                    mean.push(obs[0]);
                    std.push(g_std);
                }
                _ => {
                    let (m, s) = mean_std(&obs);
                    mean.push(m);
                    std.push(s);
                }
            }
        }
        Self {
            mean,
            std,
            fallback,
        }
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 1.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// `q` stochastically imputed copies of `data`.
///
/// Copy `j` uses its own random stream under `seed`; each incomplete sample
/// draws a texture `τ ~ Gamma(1, 1)` and fills its missing cells with
/// `μ_i + √τ · s_i · z`, `z ~ N(0, 1)`.
pub fn stochastic_imputations(data: &IncompleteMatrix, q: usize, seed: u64) -> Vec<Mat> {
    let stats = ImputationStats::from_data(data);
    (0..q)
        .map(|j| {
            let mut r = rng::stream(seed, rng::derive(&[rng::label("imputation"), j as u64]));
            let mut y = data.filled(0.0);
            for c in 0..data.n() {
                if data.column_is_complete(c) {
                    continue;
                }
                let tau: f64 = Exp1.sample(&mut r);
                let spread = tau.sqrt() * stats.std[c];
                for row in 0..data.p() {
                    if !data.is_observed(row, c) {
                        let z: f64 = StandardNormal.sample(&mut r);
                        y[(row, c)] = stats.mean[c] + spread * z;
                    }
                }
            }
            y
        })
        .collect()
}

/// Mean imputation: each missing cell takes its sample's observed mean.
pub(crate) fn mean_imputed(data: &IncompleteMatrix) -> Mat {
    let stats = ImputationStats::from_data(data);
    Mat::from_fn(data.p(), data.n(), |r, c| data.get(r, c).unwrap_or(stats.mean[c]))
}

/// Imputation baselines: RMI (mean of `q` Tyler estimates on stochastic
/// imputations), RSI (`q = 1`) and Mean-Tyl.
pub fn impute_baselines(data: &IncompleteMatrix, config: &EstimatorConfig) -> Result<ShapeEstimate> {
    config.validate(data.p())?;
    data.validate_for_estimation()?;
    let stats = ImputationStats::from_data(data);
    let mut warnings = Vec::new();
    if !stats.fallback.is_empty() {
        warnings.push(format!(
            "{} samples with fewer than 2 observed entries used global statistics",
            stats.fallback.len()
        ));
    }
    let n = data.n();
    let copies = match config.kind {
        EstimatorKind::MeanTyl => vec![mean_imputed(data)],
        EstimatorKind::Rmi => stochastic_imputations(data, config.q_imputations, config.seed),
        EstimatorKind::Rsi => stochastic_imputations(data, 1, config.seed),
        other => {
            return Err(Error::Config(format!(
                "{} is not an imputation baseline",
                other.base_name()
            )))
        }
    };
    let p = data.p();
    let mut acc = Mat::zeros(p, p);
    let mut iterations = 0;
    for y in &copies {
        let fit = tyler(y, config.fp_tol, config.tyler_max_iter)?;
        iterations += fit.iterations;
        let s = if config.project_before_average {
            low_rank_or_same(fit.sigma, config.rank)?
        } else {
            fit.sigma
        };
        acc += s.normalized(config.normalization)?.0.as_mat();
    }
    acc /= copies.len() as f64;
    let mean = SpdMatrix::new(acc)?;
    let mut cfg = config.clone();
    if config.project_before_average {
        cfg.rank = None;
    }
    let mut est = ShapeEstimate::direct(finish(mean, &cfg)?, n);
    est.iterations = iterations;
    est.warnings = warnings;
    Ok(est)
}
