//! Subcommand implementations. Each reads its TOML config, applies the
//! command-line overrides and writes its artifacts into the output directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use robustcov::estimators::{estimate as run_estimator, write_matrix_csv, EstimatorConfig};
use robustcov::experiments::{self, ExperimentConfig};
use robustcov::impute::{em_eof_impute, sweep_k, CvReport, ImputeConfig};
use robustcov::missing::{apply_pattern, IncompleteMatrix, PatternSpec};
use robustcov::rng;
use robustcov::simulate::{corrupt_wgn, sample_msg, SimConfig, TextureLaw};
use robustcov::Error;

/// Failure classes, mapped to exit codes 1 and 2.
#[derive(Debug)]
pub enum CliError {
    /// Unreadable or invalid configuration or input.
    Config(String),
    /// The run finished but some computations failed.
    Partial(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Parse { .. } | Error::InvalidInput(_) | Error::DimensionMismatch { .. } => {
                CliError::Config(e.to_string())
            }
            other => CliError::Partial(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Partial(format!("writing output: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Partial(format!("writing output: {e}"))
    }
}

type CliResult<T> = Result<T, CliError>;

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

impl Overrides {
    /// `--out` wins; an `out` key in the config is relative to the config file.
    fn out_dir(&self, config: &Path, from_config: Option<&PathBuf>) -> CliResult<PathBuf> {
        let dir = self
            .out
            .clone()
            .or_else(|| from_config.map(|p| resolve(config, p)))
            .ok_or_else(|| CliError::Config("no output directory: pass --out or set `out`".into()))?;
        fs::create_dir_all(&dir).map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
        Ok(dir)
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))
}

fn parse<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    toml::from_str(&read_text(path)?).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Resolves a path from a config file against the file's directory.
fn resolve(config: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    config.parent().unwrap_or(Path::new(".")).join(p)
}

fn read_data(path: &Path) -> CliResult<IncompleteMatrix> {
    let f = fs::File::open(path).map_err(|e| CliError::Config(format!("cannot open {}: {e}", path.display())))?;
    IncompleteMatrix::read_csv(f).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}

fn default_pattern() -> PatternSpec {
    PatternSpec::None
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutlierSpec {
    ratio: f64,
    /// Noise standard deviation in units of the signal's.
    sigma_wgn: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateFile {
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    out: Option<PathBuf>,
    #[serde(default)]
    sim: SimConfig,
    #[serde(default = "default_pattern")]
    pattern: PatternSpec,
    #[serde(default)]
    outliers: Option<OutlierSpec>,
}

#[derive(Serialize)]
struct SimulateManifest<'a> {
    seed: u64,
    p: usize,
    n: usize,
    missing_ratio: f64,
    outliers: Vec<usize>,
    files: Vec<&'static str>,
    config: &'a SimulateFile,
}

/// Draws MSG data, optionally corrupts some samples, applies the pattern.
pub fn simulate(config_path: &Path, ov: &Overrides) -> CliResult<String> {
    let cfg: SimulateFile = parse(config_path)?;
    cfg.sim.validate()?;
    if let Some(o) = &cfg.outliers {
        if !((0.0..1.0).contains(&o.ratio) && o.sigma_wgn >= 0.0) {
            return Err(CliError::Config("outliers.ratio must lie in [0, 1) and sigma_wgn >= 0".into()));
        }
    }
    let seed = ov.seed.or(cfg.seed).unwrap_or(cfg.sim.seed);
    let dir = ov.out_dir(config_path, cfg.out.as_ref())?;

    let cov = cfg.sim.covariance()?;
    let mut r = rng::stream(seed, rng::label("simulate"));
    let sample = sample_msg(&cov, cfg.sim.n, TextureLaw::from_alpha(cfg.sim.alpha), &mut r)?;
    let (full, outliers) = match &cfg.outliers {
        Some(o) => {
            let signal_sd = (cov.trace() / cfg.sim.p as f64).sqrt();
            corrupt_wgn(&sample.data, o.ratio, o.sigma_wgn * signal_sd, &mut r)?
        }
        None => (sample.data.clone(), Vec::new()),
    };
    let data = apply_pattern(&full, &cfg.pattern, &mut r)?;

    data.write_csv(fs::File::create(dir.join("data.csv"))?)?;
    IncompleteMatrix::complete(full)?.write_csv(fs::File::create(dir.join("complete.csv"))?)?;
    write_matrix_csv(cov.as_mat(), &mut fs::File::create(dir.join("truth.csv"))?)?;
    let mut tex = fs::File::create(dir.join("textures.csv"))?;
    for t in &sample.textures {
        writeln!(tex, "{t:?}")?;
    }
    let manifest = SimulateManifest {
        seed,
        p: data.p(),
        n: data.n(),
        missing_ratio: data.missing_ratio(),
        outliers,
        files: vec!["data.csv", "complete.csv", "truth.csv", "textures.csv"],
        config: &cfg,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(format!(
        "simulated {} x {} samples ({:.1}% missing) into {}",
        data.p(),
        data.n(),
        100.0 * data.missing_ratio(),
        dir.display()
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EstimateFile {
    /// Data CSV, relative to the config file.
    input: PathBuf,
    /// Complete data for the clairvoyant baselines.
    #[serde(default)]
    clairvoyant: Option<PathBuf>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    out: Option<PathBuf>,
    estimators: Vec<EstimatorConfig>,
}

fn file_stem(label: &str) -> String {
    label.to_lowercase()
}

/// Runs every configured estimator on one data file.
pub fn estimate(config_path: &Path, ov: &Overrides) -> CliResult<String> {
    let cfg: EstimateFile = parse(config_path)?;
    if cfg.estimators.is_empty() {
        return Err(CliError::Config("no [[estimators]] configured".into()));
    }
    let data = read_data(&resolve(config_path, &cfg.input))?;
    for e in &cfg.estimators {
        e.validate(data.p())?;
    }
    let clair = match &cfg.clairvoyant {
        Some(p) => {
            let m = read_data(&resolve(config_path, p))?;
            let values = m
                .complete_values()
                .cloned()
                .ok_or_else(|| CliError::Config("clairvoyant data contain missing entries".into()))?;
            if values.shape() != (data.p(), data.n()) {
                return Err(CliError::Config("clairvoyant data shape differs from input".into()));
            }
            Some(values)
        }
        None => None,
    };
    let dir = ov.out_dir(config_path, cfg.out.as_ref())?;

    let mut written = Vec::new();
    let mut failed = Vec::new();
    for est in &cfg.estimators {
        let mut est = est.clone();
        if let Some(seed) = ov.seed.or(cfg.seed) {
            est.seed = seed;
        }
        let label = est.label();
        match run_estimator(&data, clair.as_ref(), &est) {
            Ok(shape) => {
                let stem = file_stem(&label);
                shape.write_matrix_csv(fs::File::create(dir.join(format!("{stem}.csv")))?)?;
                write_json(&dir.join(format!("{stem}.json")), &shape.sidecar(&label, est.normalization))?;
                written.push(label);
            }
            Err(e) => {
                log::error!("{label}: {e}");
                failed.push(format!("{label}: {e}"));
            }
        }
    }
    if !failed.is_empty() {
        return Err(CliError::Partial(format!(
            "{} of {} estimators failed: {}",
            failed.len(),
            cfg.estimators.len(),
            failed.join("; ")
        )));
    }
    Ok(format!("wrote {} into {}", written.join(", "), dir.display()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImputeFile {
    input: PathBuf,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    out: Option<PathBuf>,
    #[serde(default)]
    impute: ImputeConfig,
    /// Optional EOF counts to score on the same held-out cells.
    #[serde(default)]
    k_sweep: Vec<usize>,
}

#[derive(Serialize)]
struct ImputeReport<'a> {
    #[serde(flatten)]
    cv: &'a CvReport,
    iterations: usize,
    converged: bool,
    warnings: &'a [String],
    k_sweep: Vec<(usize, f64)>,
}

/// EM-EOF imputation of one data file.
pub fn impute(config_path: &Path, ov: &Overrides) -> CliResult<String> {
    let mut cfg: ImputeFile = parse(config_path)?;
    if let Some(seed) = ov.seed.or(cfg.seed) {
        cfg.impute.seed = seed;
    }
    let data = read_data(&resolve(config_path, &cfg.input))?;
    cfg.impute.validate(data.p())?;
    let dir = ov.out_dir(config_path, cfg.out.as_ref())?;

    let outcome = em_eof_impute(&data, &cfg.impute)?;
    let k_sweep = if cfg.k_sweep.is_empty() {
        Vec::new()
    } else {
        sweep_k(&data, &cfg.k_sweep, &cfg.impute)?
    };
    IncompleteMatrix::complete(outcome.completed.clone())?.write_csv(fs::File::create(dir.join("completed.csv"))?)?;
    let report = ImputeReport {
        cv: &outcome.cv,
        iterations: outcome.iterations,
        converged: outcome.converged,
        warnings: &outcome.warnings,
        k_sweep,
    };
    write_json(&dir.join("cv_report.json"), &report)?;
    for w in &outcome.warnings {
        log::warn!("{w}");
    }
    Ok(format!(
        "imputed {} cells, CV rmse {:.6} over {} held-out cells, into {}",
        data.p() * data.n() - data.observed_count(),
        outcome.cv.rmse,
        outcome.cv.cv_cells.len(),
        dir.display()
    ))
}

/// Reads an experiment config; `expected` fills in or checks the experiment id.
fn experiment_config(path: &Path, expected: Option<&str>) -> CliResult<ExperimentConfig> {
    let text = read_text(path)?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::Config(format!("{}: {e}", path.display())))?;
    if let Some(name) = expected {
        match table.get("experiment").and_then(|v| v.as_str()) {
            None => {
                table.insert("experiment".into(), toml::Value::String(name.into()));
            }
            Some(found) if found != name => {
                return Err(CliError::Config(format!(
                    "{}: experiment = {found:?} cannot run under `{name}`",
                    path.display()
                )));
            }
            Some(_) => {}
        }
    }
    let text = toml::to_string(&table).map_err(|e| CliError::Config(e.to_string()))?;
    ExperimentConfig::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Runs a sweep and writes results, summary, timings and manifest.
pub fn benchmark(config_path: &Path, ov: &Overrides, expected: Option<&str>) -> CliResult<String> {
    let mut cfg = experiment_config(config_path, expected)?;
    if let Some(seed) = ov.seed {
        cfg.seed = seed;
    }
    if let Some(t) = ov.threads {
        cfg.threads = t;
    }
    let dir = ov.out_dir(config_path, cfg.out.as_ref())?;
    let rows = experiments::run(&cfg)?;
    let manifest = experiments::write_outputs(&dir, &cfg, &rows)?;
    if manifest.failed_rows > 0 {
        return Err(CliError::Partial(format!(
            "{} of {} rows failed; see the note column of {}",
            manifest.failed_rows,
            manifest.rows,
            dir.join("results.csv").display()
        )));
    }
    Ok(format!(
        "{}: {} rows into {}",
        cfg.experiment.name(),
        manifest.rows,
        dir.display()
    ))
}
