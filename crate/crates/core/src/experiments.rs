//! Benchmark sweeps over simulated data.
//!
//! Every run is a grid of cells times replicates. Each (cell, replicate) task
//! draws from its own random stream derived from the master seed, so output
//! does not depend on thread count or scheduling. Tasks run in parallel and
//! rows are emitted in grid order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimators::{estimate, EstimatorConfig, EstimatorKind};
use crate::impute::{em_eof_impute, FinalEstimator, ImputeConfig, Reconstruction};
use crate::linalg::{geodesic_distance_sq, SpdMatrix};
use crate::missing::{apply_pattern, IncompleteMatrix, PatternSpec};
use crate::par::{map_range, with_threads, ExecMode};
use crate::rng;
use crate::simulate::{corrupt_wgn, sample_haystack, sample_msg, SimConfig, TextureLaw};
use crate::spdml::{
    clustering_accuracy, descriptor_from_window, kmeanspp_spd, mask_bands, mdrm_train, overall_accuracy,
    stripe_mask, successive_bands, synthetic_windows, train_test_split, ClassSpec, SpdDescriptor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentId {
    PatternSweep,
    OutlierMask,
    HaystackImpute,
    Classify,
    Cluster,
}

impl ExperimentId {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentId::PatternSweep => "pattern_sweep",
            ExperimentId::OutlierMask => "outlier_mask",
            ExperimentId::HaystackImpute => "haystack_impute",
            ExperimentId::Classify => "classify",
            ExperimentId::Cluster => "cluster",
        }
    }
}

/// Missingness pattern family; per-`n` parameters come from the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    None,
    Monotone,
    General,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioPoint {
    pub n: usize,
    pub ratio: f64,
}

fn d_ns() -> Vec<usize> {
    vec![63, 109, 190, 331, 575, 1000]
}
fn d_patterns() -> Vec<PatternKind> {
    vec![PatternKind::General]
}
fn d_schedule() -> Vec<RatioPoint> {
    [(63, 0.44), (109, 0.22), (190, 0.11), (331, 0.05), (575, 0.02), (1000, 0.01)]
        .into_iter()
        .map(|(n, ratio)| RatioPoint { n, ratio })
        .collect()
}
fn d_monotone() -> (usize, usize) {
    (7, 20)
}
fn d_block_rows() -> (usize, usize) {
    (2, 7)
}
fn d_block_cols() -> (usize, usize) {
    (3, 20)
}
fn d_ranks() -> Vec<usize> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternSweepGrid {
    #[serde(default = "d_ns")]
    pub n: Vec<usize>,
    #[serde(default = "d_patterns")]
    pub patterns: Vec<PatternKind>,
    /// Missing ratio per sample size for the general and random patterns.
    #[serde(default = "d_schedule")]
    pub ratio_schedule: Vec<RatioPoint>,
    /// Monotone block `(rows, cols)`.
    #[serde(default = "d_monotone")]
    pub monotone: (usize, usize),
    #[serde(default = "d_block_rows")]
    pub block_rows: (usize, usize),
    #[serde(default = "d_block_cols")]
    pub block_cols: (usize, usize),
    /// Model ranks; 0 is the full-rank Toeplitz model, `r > 0` the factor
    /// model `I + σ² U Uᵀ` with every estimator constrained to rank `r`.
    #[serde(default = "d_ranks")]
    pub ranks: Vec<usize>,
}

impl Default for PatternSweepGrid {
    fn default() -> Self {
        Self {
            n: d_ns(),
            patterns: d_patterns(),
            ratio_schedule: d_schedule(),
            monotone: d_monotone(),
            block_rows: d_block_rows(),
            block_cols: d_block_cols(),
            ranks: d_ranks(),
        }
    }
}

impl PatternSweepGrid {
    /// Scheduled ratio at `n`: exact entry, else linear in `ln n` between
    /// neighbours, clamped at the ends.
    pub fn ratio_for(&self, n: usize) -> f64 {
        let mut pts = self.ratio_schedule.clone();
        pts.sort_by_key(|p| p.n);
        let Some(first) = pts.first() else {
            return 0.0;
        };
        if n <= first.n {
            return first.ratio;
        }
        for w in pts.windows(2) {
            if n <= w[1].n {
                let (x0, x1, x) = ((w[0].n as f64).ln(), (w[1].n as f64).ln(), (n as f64).ln());
                return w[0].ratio + (w[1].ratio - w[0].ratio) * (x - x0) / (x1 - x0);
            }
        }
        pts.last().unwrap().ratio
    }

    pub fn spec(&self, kind: PatternKind, n: usize) -> PatternSpec {
        match kind {
            PatternKind::None => PatternSpec::None,
            PatternKind::Monotone => PatternSpec::Monotone {
                rows: self.monotone.0,
                cols: self.monotone.1,
            },
            PatternKind::General => PatternSpec::General {
                ratio: self.ratio_for(n),
                block_rows: self.block_rows,
                block_cols: self.block_cols,
            },
            PatternKind::Random => PatternSpec::Random {
                ratio: self.ratio_for(n),
            },
        }
    }
}

fn d_outlier_ratios() -> Vec<f64> {
    vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]
}
fn d_sigma_wgn() -> Vec<f64> {
    vec![0.1, 0.5, 1.0, 2.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutlierGrid {
    #[serde(default = "d_outlier_ratios")]
    pub ratios: Vec<f64>,
    /// Noise standard deviations, as multiples of the signal's per-coordinate
    /// standard deviation.
    #[serde(default = "d_sigma_wgn")]
    pub sigma_wgn: Vec<f64>,
}

impl Default for OutlierGrid {
    fn default() -> Self {
        Self {
            ratios: d_outlier_ratios(),
            sigma_wgn: d_sigma_wgn(),
        }
    }
}

fn d_sigma_o2() -> Vec<f64> {
    vec![0.0, 7.5, 15.0, 22.5, 30.0]
}
fn d_hay_k() -> usize {
    5
}
fn d_missing() -> f64 {
    0.3
}
fn d_methods() -> Vec<FinalEstimator> {
    vec![FinalEstimator::Scm, FinalEstimator::EmTylR, FinalEstimator::Rmi]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HaystackGrid {
    #[serde(default = "d_outlier_ratios")]
    pub outlier_ratios: Vec<f64>,
    #[serde(default = "d_sigma_o2")]
    pub sigma_o2: Vec<f64>,
    /// Signal subspace dimension of the generator.
    #[serde(default = "d_hay_k")]
    pub subspace_dim: usize,
    /// Missing ratio of the general pattern applied before imputation.
    #[serde(default = "d_missing")]
    pub missing_ratio: f64,
    #[serde(default = "d_methods")]
    pub methods: Vec<FinalEstimator>,
    #[serde(default)]
    pub impute: ImputeConfig,
}

impl Default for HaystackGrid {
    fn default() -> Self {
        Self {
            outlier_ratios: d_outlier_ratios(),
            sigma_o2: d_sigma_o2(),
            subspace_dim: d_hay_k(),
            missing_ratio: d_missing(),
            methods: d_methods(),
            impute: ImputeConfig::default(),
        }
    }
}

/// An estimator used to build descriptors, optionally texture-rescaled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptorSpec {
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub rescale: bool,
}

impl DescriptorSpec {
    pub fn new(kind: EstimatorKind, rank: Option<usize>, rescale: bool) -> Self {
        Self {
            estimator: EstimatorConfig::new(kind).with_rank(rank),
            rescale,
        }
    }

    pub fn label(&self) -> String {
        let base = self.estimator.label();
        if self.rescale {
            format!("{base}-gm")
        } else {
            base
        }
    }
}

fn d_classes() -> Vec<ClassSpec> {
    [0.3, 0.5, 0.7, 0.85]
        .into_iter()
        .map(|rho| ClassSpec { rho, alpha: 1.0 })
        .collect()
}
fn d_bands() -> Vec<usize> {
    vec![0, 1, 2, 3, 4, 5]
}
fn d_class_p() -> usize {
    13
}
fn d_window() -> usize {
    49
}
fn d_per_class() -> usize {
    20
}
fn d_train_fraction() -> f64 {
    0.5
}
fn d_class_descriptors() -> Vec<DescriptorSpec> {
    vec![
        DescriptorSpec::new(EstimatorKind::EmScm, None, false),
        DescriptorSpec::new(EstimatorKind::EmTyl, None, false),
        DescriptorSpec::new(EstimatorKind::EmTyl, None, true),
        DescriptorSpec::new(EstimatorKind::Rsi, None, false),
    ]
}
fn d_stripe() -> f64 {
    0.3
}
fn d_kmeans_iter() -> usize {
    50
}
fn d_cluster_descriptors() -> Vec<DescriptorSpec> {
    vec![
        DescriptorSpec::new(EstimatorKind::EmScm, None, false),
        DescriptorSpec::new(EstimatorKind::EmTyl, None, false),
        DescriptorSpec::new(EstimatorKind::EmScm, Some(3), false),
        DescriptorSpec::new(EstimatorKind::EmTyl, Some(3), false),
        DescriptorSpec::new(EstimatorKind::Rsi, None, false),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyGrid {
    #[serde(default = "d_classes")]
    pub classes: Vec<ClassSpec>,
    /// Numbers of successive bands removed from every test window.
    #[serde(default = "d_bands")]
    pub missing_bands: Vec<usize>,
    #[serde(default = "d_class_p")]
    pub p: usize,
    #[serde(default = "d_window")]
    pub window: usize,
    #[serde(default = "d_per_class")]
    pub per_class: usize,
    #[serde(default = "d_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "d_class_descriptors")]
    pub descriptors: Vec<DescriptorSpec>,
}

impl Default for ClassifyGrid {
    fn default() -> Self {
        Self {
            classes: d_classes(),
            missing_bands: d_bands(),
            p: d_class_p(),
            window: d_window(),
            per_class: d_per_class(),
            train_fraction: d_train_fraction(),
            descriptors: d_class_descriptors(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterGrid {
    #[serde(default = "d_classes")]
    pub classes: Vec<ClassSpec>,
    /// Numbers of bands carrying a missing stripe in every window.
    #[serde(default = "d_bands")]
    pub incomplete_bands: Vec<usize>,
    /// Fraction of each window's samples inside a stripe.
    #[serde(default = "d_stripe")]
    pub stripe_fraction: f64,
    #[serde(default = "d_class_p")]
    pub p: usize,
    #[serde(default = "d_window")]
    pub window: usize,
    #[serde(default = "d_per_class")]
    pub per_class: usize,
    #[serde(default = "d_kmeans_iter")]
    pub max_iter: usize,
    #[serde(default = "d_cluster_descriptors")]
    pub descriptors: Vec<DescriptorSpec>,
}

impl Default for ClusterGrid {
    fn default() -> Self {
        Self {
            classes: d_classes(),
            incomplete_bands: d_bands(),
            stripe_fraction: d_stripe(),
            p: d_class_p(),
            window: d_window(),
            per_class: d_per_class(),
            max_iter: d_kmeans_iter(),
            descriptors: d_cluster_descriptors(),
        }
    }
}

fn d_replicates() -> usize {
    100
}
fn d_true() -> bool {
    true
}

/// A full benchmark description, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    #[serde(default = "d_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; 0 uses all cores.
    #[serde(default)]
    pub threads: usize,
    #[serde(default = "d_true")]
    pub parallel: bool,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub sim: SimConfig,
    /// Estimators of the pattern sweep; empty selects the default set.
    #[serde(default)]
    pub estimators: Vec<EstimatorConfig>,
    #[serde(default)]
    pub pattern_sweep: PatternSweepGrid,
    #[serde(default)]
    pub outlier_mask: OutlierGrid,
    #[serde(default)]
    pub haystack: HaystackGrid,
    #[serde(default)]
    pub classify: ClassifyGrid,
    #[serde(default)]
    pub cluster: ClusterGrid,
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentId) -> Self {
        Self {
            experiment,
            replicates: d_replicates(),
            seed: 0,
            threads: 0,
            parallel: true,
            out: None,
            sim: SimConfig::default(),
            estimators: Vec::new(),
            pattern_sweep: PatternSweepGrid::default(),
            outlier_mask: OutlierGrid::default(),
            haystack: HaystackGrid::default(),
            classify: ClassifyGrid::default(),
            cluster: ClusterGrid::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn exec_mode(&self) -> ExecMode {
        if self.parallel {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }

    /// Pattern-sweep estimators, falling back to the default comparison set.
    pub fn sweep_estimators(&self) -> Vec<EstimatorConfig> {
        if !self.estimators.is_empty() {
            return self.estimators.clone();
        }
        [
            EstimatorKind::EmTyl,
            EstimatorKind::EmScm,
            EstimatorKind::TylClair,
            EstimatorKind::ScmClair,
            EstimatorKind::TylObs,
            EstimatorKind::Rmi,
        ]
        .into_iter()
        .map(EstimatorConfig::new)
        .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        self.sim.validate()?;
        let p = self.sim.p;
        let ratio_ok = |r: &f64| (0.0..1.0).contains(r);
        match self.experiment {
            ExperimentId::PatternSweep => {
                let g = &self.pattern_sweep;
                if g.n.is_empty() || g.patterns.is_empty() || g.ranks.is_empty() {
                    return Err(Error::Config("pattern_sweep grid is empty".into()));
                }
                if g.ratio_schedule.iter().any(|pt| !ratio_ok(&pt.ratio)) {
                    return Err(Error::Config("ratio_schedule entries must lie in [0, 1)".into()));
                }
                for &r in &g.ranks {
                    if r >= p {
                        return Err(Error::Config(format!("rank {r} must be below p = {p}")));
                    }
                }
                for e in self.sweep_estimators() {
                    e.validate(p)?;
                }
            }
            ExperimentId::OutlierMask => {
                let g = &self.outlier_mask;
                if g.ratios.is_empty() || g.sigma_wgn.is_empty() {
                    return Err(Error::Config("outlier_mask grid is empty".into()));
                }
                if !g.ratios.iter().all(ratio_ok) || g.sigma_wgn.iter().any(|s| *s < 0.0) {
                    return Err(Error::Config("outlier ratios must lie in [0, 1), sigma_wgn >= 0".into()));
                }
            }
            ExperimentId::HaystackImpute => {
                let g = &self.haystack;
                if g.outlier_ratios.is_empty() || g.sigma_o2.is_empty() || g.methods.is_empty() {
                    return Err(Error::Config("haystack grid is empty".into()));
                }
                if !g.outlier_ratios.iter().all(ratio_ok) || !ratio_ok(&g.missing_ratio) {
                    return Err(Error::Config("haystack ratios must lie in [0, 1)".into()));
                }
                if g.subspace_dim == 0 || g.subspace_dim >= p {
                    return Err(Error::Config(format!("subspace_dim must lie in [1, {}]", p - 1)));
                }
                g.impute.validate(p)?;
            }
            ExperimentId::Classify => {
                let g = &self.classify;
                check_classes(&g.classes, g.p, g.window, &g.descriptors)?;
                if g.missing_bands.iter().any(|&b| b >= g.p) {
                    return Err(Error::Config("missing_bands must be below p".into()));
                }
                if !(g.train_fraction > 0.0 && g.train_fraction < 1.0) {
                    return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
                }
            }
            ExperimentId::Cluster => {
                let g = &self.cluster;
                check_classes(&g.classes, g.p, g.window, &g.descriptors)?;
                if g.incomplete_bands.iter().any(|&b| b >= g.p) {
                    return Err(Error::Config("incomplete_bands must be below p".into()));
                }
                if !(0.0..1.0).contains(&g.stripe_fraction) {
                    return Err(Error::Config("stripe_fraction must lie in [0, 1)".into()));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn check_classes(classes: &[ClassSpec], p: usize, window: usize, descriptors: &[DescriptorSpec]) -> Result<()> {
    if classes.len() < 2 {
        return Err(Error::Config("need at least two classes".into()));
    }
    if classes.iter().any(|c| !(c.rho.abs() < 1.0 && c.alpha > 0.0)) {
        return Err(Error::Config("class rho must lie in (-1, 1) and alpha > 0".into()));
    }
    if window < 2 || p < 2 {
        return Err(Error::Config("window and p must be at least 2".into()));
    }
    if descriptors.is_empty() {
        return Err(Error::Config("no descriptor estimators".into()));
    }
    for d in descriptors {
        d.estimator.validate(p)?;
    }
    Ok(())
}

/// One measurement. `value` is `None` for failed runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub estimator: String,
    pub n: usize,
    pub pattern: String,
    /// Nominal missing or outlier ratio of the grid cell.
    pub ratio: f64,
    /// Name and value of the secondary grid axis, empty when unused.
    pub param_name: String,
    pub param: f64,
    pub replicate: usize,
    pub metric: String,
    pub value: Option<f64>,
    pub status: String,
    pub note: String,
    pub wall_time_s: f64,
}

impl ResultRow {
    pub fn failed(&self) -> bool {
        self.value.is_none()
    }

    /// Identifies the row within a run.
    pub fn key(&self) -> String {
        format!(
            "{}|{}|{}|{}|{:?}|{}={:?}|{}|{}",
            self.experiment,
            self.estimator,
            self.n,
            self.pattern,
            self.ratio,
            self.param_name,
            self.param,
            self.replicate,
            self.metric
        )
    }
}

/// Shared fields of the rows produced by one task.
#[derive(Clone)]
struct RowBase {
    experiment: ExperimentId,
    n: usize,
    pattern: String,
    ratio: f64,
    param_name: String,
    param: f64,
    replicate: usize,
}

impl RowBase {
    fn row(&self, estimator: &str, metric: &str, outcome: Result<f64>, wall: f64) -> ResultRow {
        let (value, status, note) = match outcome {
            Ok(v) if v.is_finite() => (Some(v), "ok".to_string(), String::new()),
            Ok(v) => (None, "failed".to_string(), format!("non-finite metric {v}")),
            Err(e) => (None, "failed".to_string(), e.to_string()),
        };
        ResultRow {
            experiment: self.experiment.name().to_string(),
            estimator: estimator.to_string(),
            n: self.n,
            pattern: self.pattern.clone(),
            ratio: self.ratio,
            param_name: self.param_name.clone(),
            param: self.param,
            replicate: self.replicate,
            metric: metric.to_string(),
            value,
            status,
            note,
            wall_time_s: wall,
        }
    }

    fn with_param(&self, name: &str, value: f64) -> Self {
        Self {
            param_name: name.to_string(),
            param: value,
            ..self.clone()
        }
    }
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> (Result<T>, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

/// Runs `task(cell, replicate)` over the grid in parallel and concatenates
/// the rows in (cell, replicate) order.
fn run_grid<C, F>(config: &ExperimentConfig, cells: &[C], task: F) -> Vec<ResultRow>
where
    C: Sync,
    F: Fn(usize, &C, usize) -> Vec<ResultRow> + Sync + Send,
{
    let reps = config.replicates;
    let mode = config.exec_mode();
    with_threads(config.threads, || {
        map_range(mode, cells.len() * reps, |t| {
            let (c, r) = (t / reps, t % reps);
            task(c, &cells[c], r)
        })
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Random stream of one task.
fn task_stream(config: &ExperimentConfig, parts: &[u64]) -> rng::Rng {
    let mut all = vec![rng::label(config.experiment.name())];
    all.extend_from_slice(parts);
    rng::stream(config.seed, rng::derive(&all))
}

fn task_seed(config: &ExperimentConfig, parts: &[u64]) -> u64 {
    let mut all = vec![rng::label(config.experiment.name()), rng::label("seed")];
    all.extend_from_slice(parts);
    rng::derive(&all) ^ config.seed
}

pub fn run(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    config.validate()?;
    match config.experiment {
        ExperimentId::PatternSweep => run_pattern_sweep(config),
        ExperimentId::OutlierMask => run_outlier_mask(config),
        ExperimentId::HaystackImpute => run_haystack_impute(config),
        ExperimentId::Classify => run_classify(config),
        ExperimentId::Cluster => run_cluster(config),
    }
}

/// Geodesic error of every estimator against the true shape, over
/// (model rank × pattern × n) cells.
pub fn run_pattern_sweep(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let g = &config.pattern_sweep;
    let estimators = config.sweep_estimators();
    let mut cells = Vec::new();
    for &rank in &g.ranks {
        for &kind in &g.patterns {
            for &n in &g.n {
                cells.push((rank, kind, n));
            }
        }
    }
    let law = TextureLaw::from_alpha(config.sim.alpha);
    let rows = run_grid(config, &cells, |ci, &(rank, kind, n), rep| {
        let spec = g.spec(kind, n);
        let sim = SimConfig {
            n,
            rank: (rank > 0).then_some(rank),
            ..config.sim.clone()
        };
        let base = RowBase {
            experiment: ExperimentId::PatternSweep,
            n,
            pattern: spec.name().to_string(),
            ratio: spec.target_ratio(sim.p, n),
            param_name: "rank".into(),
            param: rank as f64,
            replicate: rep,
        };
        let mut r = task_stream(config, &[ci as u64, rep as u64]);
        let drawn = sim.covariance().and_then(|cov| {
            let sample = sample_msg(&cov, n, law, &mut r)?;
            let data = apply_pattern(&sample.data, &spec, &mut r)?;
            Ok((cov, sample, data))
        });
        estimators
            .iter()
            .enumerate()
            .map(|(ei, est)| {
                let mut cfg = est.clone();
                if rank > 0 {
                    cfg.rank = Some(rank);
                }
                cfg.seed = task_seed(config, &[ci as u64, rep as u64, ei as u64]);
                let label = cfg.label();
                let (err, wall) = timed(|| {
                    let (cov, sample, data) = drawn.as_ref().map_err(clone_err)?;
                    let e = estimate(data, Some(&sample.data), &cfg)?;
                    shape_error(cov, &e.sigma, &cfg)
                });
                base.row(&label, "geodesic_error", err, wall)
            })
            .collect()
    });
    Ok(rows)
}

fn clone_err(e: &Error) -> Error {
    Error::InvalidInput(format!("data generation failed: {e}"))
}

/// Squared geodesic distance between the normalized truth and an estimate.
fn shape_error(truth: &SpdMatrix, est: &SpdMatrix, cfg: &EstimatorConfig) -> Result<f64> {
    let t = truth.normalized(cfg.normalization)?.0;
    let e = est.normalized(cfg.normalization)?.0;
    geodesic_distance_sq(&t, &e)
}

/// Whether outliers should be discarded: Tyler on WGN-corrupted data versus
/// EM-Tyl with the corrupted samples masked, against clean-data baselines.
///
/// Masking removes whole samples, so the masked data reduce to the clean
/// remainder and EM-Tyl coincides with Tyler's estimator on it.
pub fn run_outlier_mask(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let g = &config.outlier_mask;
    let sim = SimConfig {
        rank: None,
        ..config.sim.clone()
    };
    let cov = sim.covariance()?;
    // per-coordinate standard deviation of the signal, E[τ] = 1
    let signal_sd = (cov.trace() / sim.p as f64).sqrt();
    let law = TextureLaw::from_alpha(sim.alpha);
    let rows = run_grid(config, &g.ratios, |ci, &ratio, rep| {
        let base = RowBase {
            experiment: ExperimentId::OutlierMask,
            n: sim.n,
            pattern: "outlier".into(),
            ratio,
            param_name: String::new(),
            param: 0.0,
            replicate: rep,
        };
        // clean data are shared by all ratios of a replicate
        let mut data_rng = task_stream(config, &[rng::label("clean"), rep as u64]);
        let clean = match sample_msg(&cov, sim.n, law, &mut data_rng) {
            Ok(s) => s.data,
            Err(e) => {
                let msg = e.to_string();
                return vec![base.row("EM-Tyl", "geodesic_error", Err(Error::InvalidInput(msg)), 0.0)];
            }
        };
        let corrupt_rng = task_stream(config, &[rng::label("corrupt"), ci as u64, rep as u64]);
        let tyl = EstimatorConfig::new(EstimatorKind::TylClair);
        let scm = EstimatorConfig::new(EstimatorKind::ScmClair);
        let mut em = EstimatorConfig::new(EstimatorKind::EmTyl);
        em.em_tol = 1e-12;
        em.em_max_iter = 5000;
        let mut rows = Vec::new();

        let (err, wall) = timed(|| {
            let mut r = corrupt_rng.clone();
            let (_, idx) = corrupt_wgn(&clean, ratio, 0.0, &mut r)?;
            let keep: Vec<usize> = (0..sim.n).filter(|c| idx.binary_search(c).is_err()).collect();
            let masked = IncompleteMatrix::complete(clean.clone())?.select_columns(&keep)?;
            let e = estimate(&masked, None, &em)?;
            shape_error(&cov, &e.sigma, &em)
        });
        rows.push(base.row("EM-Tyl", "geodesic_error", err, wall));

        for &s in &g.sigma_wgn {
            let (err, wall) = timed(|| {
                // same outlier columns and noise directions for every σ_wgn
                let mut r = corrupt_rng.clone();
                let (corrupted, _) = corrupt_wgn(&clean, ratio, s * signal_sd, &mut r)?;
                let e = estimate(&IncompleteMatrix::complete(corrupted)?, None, &tyl)?;
                shape_error(&cov, &e.sigma, &tyl)
            });
            rows.push(base.with_param("sigma_wgn", s).row("Tyl-corrupted", "geodesic_error", err, wall));
        }

        for cfg in [&tyl, &scm] {
            let (err, wall) = timed(|| {
                let e = estimate(&IncompleteMatrix::complete(clean.clone())?, None, cfg)?;
                shape_error(&cov, &e.sigma, cfg)
            });
            rows.push(base.row(&cfg.label(), "geodesic_error", err, wall));
        }
        rows
    });
    Ok(rows)
}

/// Cross-validation error of EM-EOF imputation (SCM and EM-Tyl-r plug-ins)
/// and RMI on Haystack data.
pub fn run_haystack_impute(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let g = &config.haystack;
    let (p, n) = (config.sim.p, config.sim.n);
    let sigma_s2 = config.sim.snr_sigma2;
    let mut cells = Vec::new();
    for &so in &g.sigma_o2 {
        for &ratio in &g.outlier_ratios {
            cells.push((so, ratio));
        }
    }
    let rows = run_grid(config, &cells, |ci, &(sigma_o2, ratio), rep| {
        let base = RowBase {
            experiment: ExperimentId::HaystackImpute,
            n,
            pattern: "general".into(),
            ratio,
            param_name: "sigma_o2".into(),
            param: sigma_o2,
            replicate: rep,
        };
        let mut r = task_stream(config, &[ci as u64, rep as u64]);
        let data = sample_haystack(p, n, g.subspace_dim, sigma_s2, sigma_o2, ratio, &mut r)
            .and_then(|h| apply_pattern(&h.data, &PatternSpec::general(g.missing_ratio), &mut r));
        let seed = task_seed(config, &[ci as u64, rep as u64]);
        g.methods
            .iter()
            .map(|&method| {
                let cfg = ImputeConfig {
                    final_estimator: method,
                    seed,
                    ..g.impute.clone()
                };
                let (err, wall) = timed(|| {
                    let data = data.as_ref().map_err(clone_err)?;
                    Ok(em_eof_impute(data, &cfg)?.cv.rmse)
                });
                base.row(&impute_label(method, cfg.reconstruction), "cv_rmse", err, wall)
            })
            .collect()
    });
    Ok(rows)
}

fn impute_label(method: FinalEstimator, mode: Reconstruction) -> String {
    match (method, mode) {
        (_, Reconstruction::Projection) => method.name().to_string(),
        (_, Reconstruction::ConditionalMean) => format!("{}-cm", method.name()),
    }
}

fn descriptors_for(
    windows: &[IncompleteMatrix],
    spec: &DescriptorSpec,
    seed: u64,
    tag: &str,
) -> Result<Vec<SpdDescriptor>> {
    windows
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let mut cfg = spec.estimator.clone();
            cfg.seed = rng::derive(&[seed, i as u64]);
            descriptor_from_window(w, &cfg, spec.rescale, format!("{tag}{i}"))
        })
        .collect()
}

/// MDRM overall accuracy when test windows lose successive bands.
pub fn run_classify(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let g = &config.classify;
    let rows = run_grid(config, &g.missing_bands, |ci, &bands, rep| {
        let base = RowBase {
            experiment: ExperimentId::Classify,
            n: g.window,
            pattern: "bands".into(),
            ratio: bands as f64 / g.p as f64,
            param_name: "missing_bands".into(),
            param: bands as f64,
            replicate: rep,
        };
        // the same windows and split for every band count of a replicate
        let mut r = task_stream(config, &[rng::label("windows"), rep as u64]);
        let prepared = (|| {
            let (windows, labels) = synthetic_windows(&g.classes, g.per_class, g.p, g.window, &mut r)?;
            let n_train = ((g.train_fraction * windows.len() as f64).round() as usize).clamp(1, windows.len() - 1);
            let (train, test) = train_test_split(windows.len(), n_train, &mut r);
            let mut mask_rng = task_stream(config, &[rng::label("bands"), ci as u64, rep as u64]);
            let train_w = train
                .iter()
                .map(|&i| IncompleteMatrix::complete(windows[i].clone()))
                .collect::<Result<Vec<_>>>()?;
            let test_w = test
                .iter()
                .map(|&i| {
                    let b = successive_bands(g.p, bands, &mut mask_rng)?;
                    mask_bands(&windows[i], &b)
                })
                .collect::<Result<Vec<_>>>()?;
            let train_y: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
            let test_y: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
            Ok((train_w, train_y, test_w, test_y))
        })();
        g.descriptors
            .iter()
            .enumerate()
            .map(|(di, spec)| {
                let seed = task_seed(config, &[ci as u64, rep as u64, di as u64]);
                let (acc, wall) = timed(|| {
                    let (train_w, train_y, test_w, test_y) = prepared.as_ref().map_err(clone_err)?;
                    let mut train = descriptors_for(train_w, spec, seed, "train")?;
                    for (d, &y) in train.iter_mut().zip(train_y) {
                        d.label = Some(y);
                    }
                    let model = mdrm_train(&train)?;
                    let test = descriptors_for(test_w, spec, seed ^ 1, "test")?;
                    let pred = test.iter().map(|d| model.predict(&d.matrix)).collect::<Result<Vec<_>>>()?;
                    overall_accuracy(&pred, test_y)
                });
                base.row(&spec.label(), "overall_accuracy", acc, wall)
            })
            .collect()
    });
    Ok(rows)
}

/// K-means++ clustering accuracy when windows carry missing stripes.
pub fn run_cluster(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let g = &config.cluster;
    let k = g.classes.len();
    let rows = run_grid(config, &g.incomplete_bands, |ci, &bands, rep| {
        let base = RowBase {
            experiment: ExperimentId::Cluster,
            n: g.window,
            pattern: "stripes".into(),
            ratio: bands as f64 * g.stripe_fraction / g.p as f64,
            param_name: "incomplete_bands".into(),
            param: bands as f64,
            replicate: rep,
        };
        let mut r = task_stream(config, &[rng::label("windows"), rep as u64]);
        let prepared = (|| {
            let (windows, labels) = synthetic_windows(&g.classes, g.per_class, g.p, g.window, &mut r)?;
            let mut mask_rng = task_stream(config, &[rng::label("stripes"), ci as u64, rep as u64]);
            let masked = windows
                .iter()
                .map(|w| {
                    let b = successive_bands(g.p, bands, &mut mask_rng)?;
                    stripe_mask(w, &b, g.stripe_fraction, &mut mask_rng)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((masked, labels))
        })();
        g.descriptors
            .iter()
            .enumerate()
            .map(|(di, spec)| {
                let seed = task_seed(config, &[ci as u64, rep as u64, di as u64]);
                let (acc, wall) = timed(|| {
                    let (masked, labels) = prepared.as_ref().map_err(clone_err)?;
                    let desc = descriptors_for(masked, spec, seed, "w")?;
                    let pts: Vec<SpdMatrix> = desc.into_iter().map(|d| d.matrix).collect();
                    let res = kmeanspp_spd(&pts, k, seed, g.max_iter)?;
                    clustering_accuracy(&res.assignments, labels)
                });
                base.row(&spec.label(), "overall_accuracy", acc, wall)
            })
            .collect()
    });
    Ok(rows)
}

/// Mean of a metric over successful replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub experiment: String,
    pub estimator: String,
    pub n: usize,
    pub pattern: String,
    pub ratio: f64,
    pub param_name: String,
    pub param: f64,
    pub metric: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Successful replicates entering the mean.
    pub count: usize,
    pub failed: usize,
}

/// Groups rows by everything but the replicate, in first-appearance order.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: std::collections::HashMap<String, (ResultRow, Vec<f64>, usize)> = Default::default();
    for r in rows {
        let key = format!(
            "{}|{}|{}|{}|{:?}|{}={:?}|{}",
            r.experiment, r.estimator, r.n, r.pattern, r.ratio, r.param_name, r.param, r.metric
        );
        let entry = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (r.clone(), Vec::new(), 0)
        });
        match r.value {
            Some(v) => entry.1.push(v),
            None => entry.2 += 1,
        }
    }
    order
        .into_iter()
        .map(|key| {
            let (r, vals, failed) = groups.remove(&key).expect("grouped");
            let count = vals.len();
            let mean = (count > 0).then(|| vals.iter().sum::<f64>() / count as f64);
            let std = mean.filter(|_| count > 1).map(|m| {
                (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt()
            });
            SummaryRow {
                experiment: r.experiment,
                estimator: r.estimator,
                n: r.n,
                pattern: r.pattern,
                ratio: r.ratio,
                param_name: r.param_name,
                param: r.param,
                metric: r.metric,
                mean,
                std,
                count,
                failed,
            }
        })
        .collect()
}

/// Mean of `metric` for `estimator` over rows accepted by `filter`.
pub fn mean_of(rows: &[ResultRow], estimator: &str, filter: impl Fn(&ResultRow) -> bool) -> Option<f64> {
    let vals: Vec<f64> = rows
        .iter()
        .filter(|r| r.estimator == estimator && filter(r))
        .filter_map(|r| r.value)
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

const RESULT_HEADER: [&str; 12] = [
    "experiment",
    "estimator",
    "n",
    "pattern",
    "ratio",
    "param_name",
    "param",
    "replicate",
    "metric",
    "value",
    "status",
    "note",
];

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidInput(format!("csv: {e}"))
}

/// Long-format results without timings, so identical runs give identical bytes.
pub fn write_results_csv<W: Write>(rows: &[ResultRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(RESULT_HEADER).map_err(csv_err)?;
    for r in rows {
        wtr.write_record([
            r.experiment.clone(),
            r.estimator.clone(),
            r.n.to_string(),
            r.pattern.clone(),
            format!("{:?}", r.ratio),
            r.param_name.clone(),
            format!("{:?}", r.param),
            r.replicate.to_string(),
            r.metric.clone(),
            r.value.map(|v| format!("{v:?}")).unwrap_or_default(),
            r.status.clone(),
            r.note.clone(),
        ])
        .map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Row keys with their wall times.
pub fn write_timings_csv<W: Write>(rows: &[ResultRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["key", "wall_time_s"]).map_err(csv_err)?;
    for r in rows {
        wtr.write_record([r.key(), format!("{:?}", r.wall_time_s)]).map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_summary_csv<W: Write>(summary: &[SummaryRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for s in summary {
        wtr.serialize(s).map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Companion metadata of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub config_hash: String,
    pub version: String,
    pub seed: u64,
    pub replicates: usize,
    pub rows: usize,
    pub failed_rows: usize,
    pub files: Vec<String>,
    pub config: ExperimentConfig,
}

/// Writes `results.csv`, `summary.csv`, `timings.csv` and `manifest.json`
/// into `dir`, returning the manifest.
pub fn write_outputs(dir: &Path, config: &ExperimentConfig, rows: &[ResultRow]) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    write_results_csv(rows, fs::File::create(dir.join("results.csv"))?)?;
    write_summary_csv(&summarize(rows), fs::File::create(dir.join("summary.csv"))?)?;
    write_timings_csv(rows, fs::File::create(dir.join("timings.csv"))?)?;
    let manifest = Manifest {
        experiment: config.experiment.name().to_string(),
        config_hash: config.hash(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.seed,
        replicates: config.replicates,
        rows: rows.len(),
        failed_rows: rows.iter().filter(|r| r.failed()).count(),
        files: ["results.csv", "summary.csv", "timings.csv"].map(String::from).to_vec(),
        config: config.clone(),
    };
    let mut f = fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    writeln!(f)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(id: ExperimentId) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(id);
        c.replicates = 2;
        c.seed = 7;
        c.sim.p = 5;
        c.sim.n = 60;
        c
    }

    #[test]
    fn schedule_lookup() {
        let g = PatternSweepGrid::default();
        assert_eq!(g.ratio_for(63), 0.44);
        assert_eq!(g.ratio_for(1000), 0.01);
        assert_eq!(g.ratio_for(10), 0.44);
        let mid = g.ratio_for(150);
        assert!(mid < 0.22 && mid > 0.11);
    }

    #[test]
    fn sweep_row_count() {
        let mut c = small(ExperimentId::PatternSweep);
        c.replicates = 1;
        c.pattern_sweep.n = vec![200, 400];
        c.estimators = vec![EstimatorConfig::new(EstimatorKind::ScmClair)];
        let rows = run(&c).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| !r.failed()));
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let mut c = small(ExperimentId::PatternSweep);
        c.pattern_sweep.n = vec![80];
        let a = run(&c).unwrap();
        c.parallel = false;
        let b = run(&c).unwrap();
        let strip = |rows: &[ResultRow]| rows.iter().map(|r| (r.key(), r.value)).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
    }

    #[test]
    fn failures_become_rows() {
        let mut c = small(ExperimentId::PatternSweep);
        c.pattern_sweep.n = vec![8];
        c.pattern_sweep.ratio_schedule = vec![RatioPoint { n: 8, ratio: 0.3 }];
        c.estimators = vec![EstimatorConfig::new(EstimatorKind::TylObs)];
        let rows = run(&c).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.failed() && r.status == "failed" && !r.note.is_empty()));
        let s = summarize(&rows);
        assert_eq!((s[0].count, s[0].failed), (0, 2));
    }

    #[test]
    fn keys_are_unique() {
        for id in [ExperimentId::OutlierMask, ExperimentId::HaystackImpute] {
            let mut c = small(id);
            c.sim.p = 6;
            c.haystack.subspace_dim = 2;
            c.haystack.impute.k = 2;
            c.haystack.sigma_o2 = vec![0.0, 10.0];
            c.outlier_mask.ratios = vec![0.0, 0.3];
            c.haystack.outlier_ratios = vec![0.2];
            let rows = run(&c).unwrap();
            let mut keys: Vec<String> = rows.iter().map(ResultRow::key).collect();
            let total = keys.len();
            keys.sort();
            keys.dedup();
            assert_eq!(keys.len(), total, "{id:?}");
        }
    }

    #[test]
    fn zero_outliers_coincide_with_clean_tyler() {
        let mut c = small(ExperimentId::OutlierMask);
        c.outlier_mask.ratios = vec![0.0];
        let rows = run(&c).unwrap();
        for rep in 0..2 {
            let of = |name: &str| {
                rows.iter()
                    .find(|r| r.estimator == name && r.replicate == rep)
                    .and_then(|r| r.value)
                    .unwrap()
            };
            let clean = of("Tyl-clair");
            // both stop at the default fixed-point tolerance
            assert!((of("EM-Tyl") - clean).abs() < 1e-3, "{} vs {clean}", of("EM-Tyl"));
            assert!((of("Tyl-corrupted") - clean).abs() < 1e-12);
        }
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let text = r#"
            experiment = "pattern_sweep"
            replicates = 3
            seed = 11
            [sim]
            p = 6
            [pattern_sweep]
            n = [100]
            patterns = ["monotone", "random"]
            monotone = [2, 10]
            [[estimators]]
            kind = "em_tyl"
            rank = 2
        "#;
        let c = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(c.replicates, 3);
        assert_eq!(c.estimators[0].rank, Some(2));
        assert_eq!(c.hash(), c.clone().hash());
        assert!(ExperimentConfig::from_toml("experiment = \"nope\"").is_err());
        assert!(ExperimentConfig::from_toml("experiment = \"classify\"\nbogus = 1").is_err());
    }
}
