//! Acceptance suite: every criterion runs in full and prints one
//! `PASS`/`FAIL` line. The process exits non-zero when any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use robustcov::estimators::{
    e_step, estimate, low_rank_project, m_step_tyl, run_em, scm, tyler, ConditionalMoments, EstimatorConfig,
    EstimatorKind,
};
use robustcov::experiments::{
    mean_of, run, write_results_csv, ExperimentConfig, ExperimentId, PatternKind, ResultRow,
};
use robustcov::impute::FinalEstimator;
use robustcov::linalg::{geodesic_distance_sq, Mat, Normalization, SpdMatrix, SymMatrix, Vector};
use robustcov::missing::{build_plans, IncompleteMatrix};
use robustcov::rng;

use common::{gaussian_mat, max_abs_diff, msg_samples, random_invertible, random_mask, random_spd};

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

const SEED: u64 = 20_240_601;

fn main() {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("estimator ordering", estimator_ordering),
        ("low-rank gain", low_rank_gain),
        ("large-n agreement", large_n_agreement),
        ("outlier masking", outlier_masking),
        ("robust imputation", robust_imputation),
        ("EM monotonicity", em_monotonicity),
        ("E-step oracle", e_step_oracle),
        ("exact special cases", exact_special_cases),
        ("invariances", invariances),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Verdict::new(false, format!("panicked: {msg}"))
            });
        let status = if verdict.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!verdict.pass);
        println!(
            "criterion {:>2} {status} {name} ({:.1}s): {}",
            i + 1,
            start.elapsed().as_secs_f64(),
            verdict.detail
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}

fn sweep(ns: &[usize], rank: usize, kinds: &[EstimatorKind], replicates: usize) -> Vec<ResultRow> {
    let mut cfg = ExperimentConfig::new(ExperimentId::PatternSweep);
    cfg.seed = SEED;
    cfg.replicates = replicates;
    cfg.pattern_sweep.n = ns.to_vec();
    cfg.pattern_sweep.patterns = vec![PatternKind::General];
    cfg.pattern_sweep.ranks = vec![rank];
    cfg.estimators = kinds.iter().map(|&k| EstimatorConfig::new(k)).collect();
    run(&cfg).expect("pattern sweep runs")
}

fn mean_at(rows: &[ResultRow], estimator: &str, n: usize) -> f64 {
    mean_of(rows, estimator, |r| r.n == n).unwrap_or(f64::NAN)
}

fn failures(rows: &[ResultRow]) -> usize {
    rows.iter().filter(|r| r.failed()).count()
}

fn estimator_ordering() -> Verdict {
    let rows = sweep(
        &[331, 575, 1000],
        0,
        &[
            EstimatorKind::TylClair,
            EstimatorKind::EmTyl,
            EstimatorKind::TylObs,
            EstimatorKind::EmScm,
            EstimatorKind::ScmClair,
        ],
        100,
    );
    let mut pass = failures(&rows) == 0;
    let mut parts = Vec::new();
    for n in [331, 575, 1000] {
        let m = |e| mean_at(&rows, e, n);
        let (tc, em, to, es, sc) = (m("Tyl-clair"), m("EM-Tyl"), m("Tyl-obs"), m("EM-SCM"), m("SCM-clair"));
        let rel = (es - sc).abs() / sc;
        pass &= tc <= em && em < to && rel <= 0.15;
        parts.push(format!(
            "n={n}: Tyl-clair {tc:.4} EM-Tyl {em:.4} Tyl-obs {to:.4} EM-SCM/SCM-clair {:+.1}%",
            100.0 * (es - sc) / sc
        ));
    }
    Verdict::new(pass, parts.join("; "))
}

fn low_rank_gain() -> Verdict {
    let ns = [190, 331, 575, 1000];
    let rows = sweep(&ns, 5, &[EstimatorKind::EmTyl, EstimatorKind::EmScm], 100);
    let mut pass = failures(&rows) == 0;
    let mut parts = Vec::new();
    for n in ns {
        let (t, s) = (mean_at(&rows, "EM-Tyl-r", n), mean_at(&rows, "EM-SCM-r", n));
        pass &= t < s;
        parts.push(format!("n={n}: EM-Tyl-r {t:.4} < EM-SCM-r {s:.4}"));
    }
    Verdict::new(pass, parts.join("; "))
}

fn large_n_agreement() -> Verdict {
    let rows = sweep(&[1000], 0, &[EstimatorKind::EmTyl, EstimatorKind::TylClair], 100);
    let (em, tc) = (mean_at(&rows, "EM-Tyl", 1000), mean_at(&rows, "Tyl-clair", 1000));
    let rel = (em - tc).abs() / tc;
    Verdict::new(
        failures(&rows) == 0 && rel <= 0.10,
        format!("n=1000: EM-Tyl {em:.5} vs Tyl-clair {tc:.5}, {:.2}% apart", 100.0 * rel),
    )
}

fn outlier_masking() -> Verdict {
    let mut cfg = ExperimentConfig::new(ExperimentId::OutlierMask);
    cfg.seed = SEED;
    cfg.replicates = 200;
    cfg.outlier_mask.ratios = vec![0.2, 0.4, 0.5];
    cfg.outlier_mask.sigma_wgn = vec![1.0];
    let rows = run(&cfg).expect("outlier sweep runs");
    let at = |e: &str, ratio: f64| mean_of(&rows, e, |r| r.ratio == ratio).unwrap_or(f64::NAN);
    let (em20, cor20) = (at("EM-Tyl", 0.2), at("Tyl-corrupted", 0.2));
    let (em40, em50, scm) = (at("EM-Tyl", 0.4), at("EM-Tyl", 0.5), at("SCM-clair", 0.4));
    let pass = failures(&rows) == 0 && em20 < cor20 && em40 < scm && em50 > scm;
    Verdict::new(
        pass,
        format!(
            "20%: EM-Tyl {em20:.4} < Tyl-corrupted {cor20:.4}; SCM-clair {scm:.4} between EM-Tyl at 40% {em40:.4} and 50% {em50:.4}"
        ),
    )
}

fn robust_imputation() -> Verdict {
    let mut cfg = ExperimentConfig::new(ExperimentId::HaystackImpute);
    cfg.seed = SEED;
    cfg.replicates = 50;
    cfg.sim.p = 15;
    cfg.sim.n = 200;
    cfg.sim.snr_sigma2 = 10.0;
    cfg.haystack.missing_ratio = 0.3;
    cfg.haystack.sigma_o2 = vec![15.0, 22.5, 30.0];
    cfg.haystack.outlier_ratios = vec![0.3, 0.4, 0.5];
    cfg.haystack.methods = vec![FinalEstimator::EmTylR, FinalEstimator::Scm, FinalEstimator::Rmi];
    let rows = run(&cfg).expect("haystack sweep runs");
    let mut pass = failures(&rows) == 0;
    let mut parts = Vec::new();
    for &so in &cfg.haystack.sigma_o2 {
        for &ratio in &cfg.haystack.outlier_ratios {
            let at = |e: FinalEstimator| mean_of(&rows, e.name(), |r| r.param == so && r.ratio == ratio).unwrap_or(f64::NAN);
            let (t, s, q) = (at(FinalEstimator::EmTylR), at(FinalEstimator::Scm), at(FinalEstimator::Rmi));
            let ok = t < s && s < q;
            pass &= ok;
            parts.push(format!("σo²={so} {:.0}%: {t:.3}/{s:.3}/{q:.3}{}", 100.0 * ratio, if ok { "" } else { " ✗" }));
        }
    }
    Verdict::new(pass, format!("Tyl-r/SCM/RMI rmse {}", parts.join(", ")))
}

fn em_monotonicity() -> Verdict {
    let mut worst = f64::INFINITY;
    let mut bad = 0;
    let mut errors = 0;
    for inst in 0..1000u64 {
        let mut r = rng::stream(SEED, rng::derive(&[rng::label("monotone"), inst]));
        let p = r.random_range(2..=8);
        let n = r.random_range(2 * p + 2..=6 * p);
        let cov = random_spd(p, &mut r);
        let y = msg_samples(&cov, n, &mut r);
        let data = random_mask(&y, r.random_range(0.05..0.4), &mut r);
        for kind in [EstimatorKind::EmTyl, EstimatorKind::EmScm] {
            let mut cfg = EstimatorConfig::new(kind);
            cfg.track_loglik = true;
            cfg.em_max_iter = 60;
            cfg.em_tol = 1e-14;
            match run_em(&data, &cfg) {
                Ok(est) => {
                    let step = est.loglik.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
                    worst = worst.min(step);
                    bad += usize::from(step < -1e-9);
                }
                Err(_) => errors += 1,
            }
        }
    }
    Verdict::new(
        bad == 0 && errors == 0,
        format!("2000 EM runs, {bad} decreasing, {errors} errors, smallest step {worst:.3e}"),
    )
}

/// Conditional law of the missing block from the precision matrix, an
/// independent route to `E[y^m | y^o]` and `Cov[y^m | y^o]`.
fn precision_conditional(cov: &Mat, obs: &[usize], mis: &[usize], y_o: &Vector) -> (Vector, Mat) {
    let lambda = cov.clone().try_inverse().expect("invertible");
    let lmm = Mat::from_fn(mis.len(), mis.len(), |a, b| lambda[(mis[a], mis[b])]);
    let lmo = Mat::from_fn(mis.len(), obs.len(), |a, b| lambda[(mis[a], obs[b])]);
    let cond_cov = lmm.try_inverse().expect("invertible");
    let mean = -(&cond_cov * lmo * y_o);
    (mean, cond_cov)
}

fn e_step_oracle() -> Verdict {
    const DRAWS: usize = 1_000_000;
    let mut checked = 0;
    let mut misses = Vec::new();
    let mut worst: f64 = 0.0;
    for fx in 0..20u64 {
        let mut r = rng::stream(SEED, rng::derive(&[rng::label("oracle"), fx]));
        let p = r.random_range(2..=4);
        let sigma = random_spd(p, &mut r);
        let tau = r.random_range(0.3..3.0);
        let y: Vector = Vector::from_iterator(p, (0..p).map(|_| StandardNormal.sample(&mut r)));
        let n_mis = r.random_range(1..p);
        let mut order: Vec<usize> = (0..p).collect();
        for i in (1..p).rev() {
            order.swap(i, r.random_range(0..=i));
        }
        let mut mis: Vec<usize> = order[..n_mis].to_vec();
        mis.sort_unstable();
        let obs: Vec<usize> = (0..p).filter(|i| !mis.contains(i)).collect();
        let mask: Vec<bool> = (0..p).map(|i| !mis.contains(&i)).collect();
        let data = IncompleteMatrix::new(Mat::from_column_slice(p, 1, y.as_slice()), mask).unwrap();
        let plans = build_plans(&data).unwrap();
        let c = &e_step(&data, &plans, &sigma, &[tau]).unwrap()[0].c;

        let y_o = Vector::from_iterator(obs.len(), obs.iter().map(|&i| y[i]));
        let (mean, cond_cov) = precision_conditional(&(sigma.as_mat() * tau), &obs, &mis, &y_o);
        let l = cond_cov.cholesky().expect("spd").l();
        let m = mis.len();
        // running sums of y^m and y^m y^mᵀ and their squares
        let (mut s1, mut s1sq) = (vec![0.0; m], vec![0.0; m]);
        let (mut s2, mut s2sq) = (vec![0.0; m * m], vec![0.0; m * m]);
        let mut draw = Vector::zeros(m);
        for _ in 0..DRAWS {
            let z = Vector::from_iterator(m, (0..m).map(|_| StandardNormal.sample(&mut r)));
            draw.copy_from(&mean);
            draw.gemv(1.0, &l, &z, 1.0);
            for a in 0..m {
                s1[a] += draw[a];
                s1sq[a] += draw[a] * draw[a];
                for b in 0..m {
                    let v = draw[a] * draw[b];
                    s2[a * m + b] += v;
                    s2sq[a * m + b] += v * v;
                }
            }
        }
        let nd = DRAWS as f64;
        let stat = |s: f64, sq: f64| {
            let mu = s / nd;
            (mu, ((sq / nd - mu * mu) / nd).sqrt())
        };
        let mut check = |what: String, analytic: f64, mc: f64, se: f64| {
            checked += 1;
            let z = (analytic - mc).abs() / se;
            worst = worst.max(z);
            if z > 3.0 {
                misses.push(format!("fixture {fx} {what}: z={z:.2}"));
            }
        };
        for a in 0..m {
            let (mc, se) = stat(s1[a], s1sq[a]);
            // C[o, m] = y_o E[y_m]; compare the conditional mean through the first observed row
            let analytic = c.as_mat()[(obs[0], mis[a])] / y[obs[0]];
            check(format!("E[y_{}]", mis[a]), analytic, mc, se);
            for b in 0..m {
                let (mc, se) = stat(s2[a * m + b], s2sq[a * m + b]);
                check(format!("E[y_{} y_{}]", mis[a], mis[b]), c.as_mat()[(mis[a], mis[b])], mc, se);
            }
        }
        for &i in &obs {
            for &j in &obs {
                let exact = (c.as_mat()[(i, j)] - y[i] * y[j]).abs() <= 1e-12 * (1.0 + (y[i] * y[j]).abs());
                if !exact {
                    misses.push(format!("fixture {fx} observed block ({i},{j}) differs"));
                }
            }
        }
    }
    Verdict::new(
        misses.is_empty(),
        format!(
            "{checked} moments over 20 fixtures, max |z| = {worst:.2}{}",
            if misses.is_empty() { String::new() } else { format!("; outside 3 SE: {}", misses.join(", ")) }
        ),
    )
}

fn normalized(m: &SpdMatrix) -> Mat {
    m.normalized(Normalization::Trace).unwrap().0.into_mat()
}

fn exact_special_cases() -> Verdict {
    let mut r = rng::stream(SEED, rng::label("special"));
    let mut scm_gap: f64 = 0.0;
    let mut idem_gap: f64 = 0.0;
    let mut tau_gap: f64 = 0.0;
    for _ in 0..20 {
        let p = r.random_range(2..=10);
        let n = r.random_range(p + 2..=8 * p);
        let cov = random_spd(p, &mut r);
        let y = msg_samples(&cov, n, &mut r);
        let data = IncompleteMatrix::complete(y.clone()).unwrap();
        let em = run_em(&data, &EstimatorConfig::new(EstimatorKind::EmScm)).unwrap();
        scm_gap = scm_gap.max(max_abs_diff(&normalized(&em.sigma), &normalized(&scm(&y).unwrap())));

        let a = gaussian_mat(p, p, &mut r);
        let s = SymMatrix::new(&a * a.transpose()).unwrap();
        let rank = r.random_range(1..p);
        let once = low_rank_project(&s, rank).unwrap().sigma;
        let twice = low_rank_project(once.as_sym(), rank).unwrap().sigma;
        let scale = once.as_mat().amax();
        idem_gap = idem_gap.max(max_abs_diff(once.as_mat(), twice.as_mat()) / scale);

        // every conditional second moment equal to the current shape
        let sigma = SpdMatrix::new(normalized(&cov)).unwrap();
        let moments: Vec<ConditionalMoments> = (0..n)
            .map(|_| ConditionalMoments {
                mu_m_given_o: Vector::zeros(0),
                b: sigma.as_sym().clone(),
                c: sigma.as_sym().clone(),
            })
            .collect();
        let (_, tau) = m_step_tyl(&moments, &sigma, &EstimatorConfig::new(EstimatorKind::EmTyl)).unwrap();
        tau_gap = tau.iter().map(|t| (t - 1.0).abs()).fold(tau_gap, f64::max);
    }
    let pass = scm_gap <= 1e-12 && idem_gap <= 1e-12 && tau_gap <= 1e-12;
    Verdict::new(
        pass,
        format!("em_scm vs SCM {scm_gap:.1e}, projection idempotence {idem_gap:.1e}, |τ̂ − 1| {tau_gap:.1e}"),
    )
}

fn permute(m: &Mat, perm: &[usize]) -> Mat {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(perm[i], perm[j])])
}

fn invariances() -> Verdict {
    let mut r = rng::stream(SEED, rng::label("invariance"));
    let mut scale_gap: f64 = 0.0;
    let mut perm_gap: f64 = 0.0;
    let mut geo_gap: f64 = 0.0;
    let deterministic = [
        EstimatorKind::EmTyl,
        EstimatorKind::EmScm,
        EstimatorKind::ScmClair,
        EstimatorKind::TylClair,
        EstimatorKind::ScmObs,
        EstimatorKind::TylObs,
        EstimatorKind::MeanTyl,
    ];
    for _ in 0..10 {
        let p = r.random_range(3..=8);
        let n = r.random_range(4 * p..=10 * p);
        let cov = random_spd(p, &mut r);
        let y = msg_samples(&cov, n, &mut r);
        let data = random_mask(&y, 0.2, &mut r);

        let mut em = EstimatorConfig::new(EstimatorKind::EmTyl);
        em.em_tol = 1e-26;
        em.em_max_iter = 20_000;
        em.fp_tol = 1e-26;
        let base_em = normalized(&run_em(&data, &em).unwrap().sigma);
        let base_tyl = normalized(&tyler(&y, 1e-26, 20_000).unwrap().sigma);
        for c in [1e-3, 0.5, 7.0, 1e4] {
            let scaled = normalized(&run_em(&data.scaled(c), &em).unwrap().sigma);
            scale_gap = scale_gap.max(max_abs_diff(&scaled, &base_em));
            let t = normalized(&tyler(&(&y * c), 1e-26, 20_000).unwrap().sigma);
            scale_gap = scale_gap.max(max_abs_diff(&t, &base_tyl));
        }

        let mut perm: Vec<usize> = (0..p).collect();
        for i in (1..p).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let permuted = data.permute_rows(&perm).unwrap();
        let y_perm = Mat::from_fn(p, n, |i, j| y[(perm[i], j)]);
        for kind in deterministic {
            let mut cfg = EstimatorConfig::new(kind);
            cfg.em_tol = 1e-26;
            cfg.em_max_iter = 20_000;
            cfg.fp_tol = 1e-26;
            let a = estimate(&data, Some(&y), &cfg).unwrap();
            let b = estimate(&permuted, Some(&y_perm), &cfg).unwrap();
            perm_gap = perm_gap.max(max_abs_diff(&permute(a.sigma.as_mat(), &perm), b.sigma.as_mat()));
        }

        let (a, b) = (random_spd(p, &mut r), random_spd(p, &mut r));
        let m = random_invertible(p, &mut r);
        let d = geodesic_distance_sq(&a, &b).unwrap();
        let dm = geodesic_distance_sq(&a.congruence(&m).unwrap(), &b.congruence(&m).unwrap()).unwrap();
        geo_gap = geo_gap.max((d - dm).abs() / d.max(1.0));
    }
    let pass = scale_gap <= 1e-8 && perm_gap <= 1e-8 && geo_gap <= 1e-8;
    Verdict::new(
        pass,
        format!("scale {scale_gap:.1e}, permutation {perm_gap:.1e} (7 deterministic estimators), congruence {geo_gap:.1e}"),
    )
}

fn csv_bytes(cfg: &ExperimentConfig) -> Vec<u8> {
    let rows = run(cfg).expect("experiment runs");
    let mut out = Vec::new();
    write_results_csv(&rows, &mut out).unwrap();
    out
}

fn determinism() -> Verdict {
    let mut configs = Vec::new();
    for id in [
        ExperimentId::PatternSweep,
        ExperimentId::OutlierMask,
        ExperimentId::HaystackImpute,
        ExperimentId::Classify,
        ExperimentId::Cluster,
    ] {
        let mut cfg = ExperimentConfig::new(id);
        cfg.seed = SEED;
        cfg.replicates = 2;
        cfg.pattern_sweep.n = vec![63, 190];
        cfg.pattern_sweep.patterns = vec![PatternKind::Monotone, PatternKind::General, PatternKind::Random];
        cfg.outlier_mask.ratios = vec![0.0, 0.3];
        cfg.haystack.sigma_o2 = vec![15.0];
        cfg.haystack.outlier_ratios = vec![0.3];
        cfg.classify.missing_bands = vec![0, 3];
        cfg.cluster.incomplete_bands = vec![0, 3];
        configs.push(cfg);
    }
    let mut identical = 0;
    let mut bytes = 0;
    for cfg in &configs {
        let first = csv_bytes(cfg);
        let again = csv_bytes(cfg);
        let mut seq = cfg.clone();
        seq.parallel = false;
        let sequential = csv_bytes(&seq);
        let mut two = cfg.clone();
        two.threads = 2;
        let two_threads = csv_bytes(&two);
        bytes += first.len();
        identical += usize::from(first == again && first == sequential && first == two_threads);
    }
    Verdict::new(
        identical == configs.len(),
        format!(
            "{identical}/{} experiments byte-identical across repeat, sequential and 2-thread runs ({bytes} bytes)",
            configs.len()
        ),
    )
}
