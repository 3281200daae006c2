//! Covariance descriptors on the SPD manifold: minimum-distance-to-Riemannian-
//! mean classification, K-means++ clustering and a synthetic labeled data
//! generator.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{estimate, EstimatorConfig};
use crate::linalg::{geodesic_distance_sq, karcher_mean, Mat, SpdMatrix};
use crate::missing::IncompleteMatrix;
use crate::rng;
use crate::simulate::{sample_msg, toeplitz_scatter, TextureLaw};

/// Karcher-mean settings used by training and clustering.
pub const KARCHER_TOL: f64 = 1e-10;
pub const KARCHER_MAX_ITER: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct SpdDescriptor {
    pub matrix: SpdMatrix,
    pub label: Option<usize>,
    /// Source window or sample identifier.
    pub meta: String,
}

/// Estimates a descriptor from one `p × n_w` window.
///
/// With `rescale`, the normalized shape is multiplied by the geometric mean
/// of the estimated textures, `(∏ τ̂_i)^{1/n_w}`.
pub fn descriptor_from_window(
    window: &IncompleteMatrix,
    config: &EstimatorConfig,
    rescale: bool,
    meta: impl Into<String>,
) -> Result<SpdDescriptor> {
    let meta = meta.into();
    let wrap = |e: Error| Error::Window {
        window: meta.clone(),
        source: Box::new(e),
    };
    if window.n() < 2 {
        return Err(wrap(Error::InvalidInput("window needs at least 2 samples".into())));
    }
    let est = estimate(window, None, config).map_err(wrap)?;
    let matrix = if rescale {
        est.sigma.scaled(geometric_mean(&est.textures))
    } else {
        est.sigma
    };
    Ok(SpdDescriptor {
        matrix,
        label: None,
        meta,
    })
}

/// `exp(mean(ln τ))`.
pub fn geometric_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 1.0;
    }
    (values.iter().map(|v| v.ln()).sum::<f64>() / values.len() as f64).exp()
}

/// Minimum distance to Riemannian mean classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct MdrmModel {
    pub class_means: BTreeMap<usize, SpdMatrix>,
}

/// One Karcher mean per class present in `descriptors`.
pub fn mdrm_train(descriptors: &[SpdDescriptor]) -> Result<MdrmModel> {
    if descriptors.is_empty() {
        return Err(Error::InvalidInput("no training descriptors".into()));
    }
    let mut groups: BTreeMap<usize, Vec<SpdMatrix>> = BTreeMap::new();
    for d in descriptors {
        let label = d.label.ok_or_else(|| {
            Error::InvalidInput(format!("training descriptor {} has no label", d.meta))
        })?;
        groups.entry(label).or_default().push(d.matrix.clone());
    }
    let class_means = groups
        .into_iter()
        .map(|(label, pts)| Ok((label, karcher_mean(&pts, KARCHER_TOL, KARCHER_MAX_ITER)?.mean)))
        .collect::<Result<_>>()?;
    Ok(MdrmModel { class_means })
}

impl MdrmModel {
    /// Class with the nearest mean; ties go to the smallest class id.
    pub fn predict(&self, matrix: &SpdMatrix) -> Result<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (&label, mean) in &self.class_means {
            let d = geodesic_distance_sq(mean, matrix)?;
            if best.is_none_or(|(_, b)| d < b) {
                best = Some((label, d));
            }
        }
        best.map(|(l, _)| l)
            .ok_or_else(|| Error::InvalidInput("model has no classes".into()))
    }
}

pub fn mdrm_predict(model: &MdrmModel, descriptor: &SpdDescriptor) -> Result<usize> {
    model.predict(&descriptor.matrix)
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<SpdMatrix>,
    /// Sum of squared geodesic distances after each Lloyd iteration.
    pub objective: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn nearest(point: &SpdMatrix, centroids: &[SpdMatrix]) -> Result<(usize, f64)> {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = geodesic_distance_sq(c, point)?;
        if d < best.1 {
            best = (j, d);
        }
    }
    Ok(best)
}

/// K-means++ seeding followed by Lloyd iterations with Karcher-mean centroids.
///
/// Stops when assignments no longer change or after `max_iter` iterations.
/// An empty cluster is re-seeded at the point farthest from its centroid.
pub fn kmeanspp_spd(points: &[SpdMatrix], k: usize, seed: u64, max_iter: usize) -> Result<KMeansResult> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!("K = {k} must lie in [1, {n}]")));
    }
    let mut r = rng::stream(seed, rng::label("kmeans++"));

    // seeding: D² weighting, uniform among unchosen points when all D² vanish
    let mut chosen = vec![r.random_range(0..n)];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|x| geodesic_distance_sq(&points[chosen[0]], x))
        .collect::<Result<_>>()?;
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = r.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            while d2[pick] == 0.0 {
                pick -= 1;
            }
            pick
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[r.random_range(0..free.len())]
        };
        chosen.push(next);
        for (i, x) in points.iter().enumerate() {
            d2[i] = d2[i].min(geodesic_distance_sq(&points[next], x)?);
        }
    }
    let mut centroids: Vec<SpdMatrix> = chosen.iter().map(|&i| points[i].clone()).collect();

    let mut assignments = vec![usize::MAX; n];
    let mut objective = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=max_iter.max(1) {
        iterations = it;
        let mut next = Vec::with_capacity(n);
        let mut dist = Vec::with_capacity(n);
        for x in points {
            let (j, d) = nearest(x, &centroids)?;
            next.push(j);
            dist.push(d);
        }
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;
        for j in 0..k {
            if assignments.contains(&j) {
                continue;
            }
            let far = (0..n)
                .filter(|&i| assignments.iter().filter(|&&a| a == assignments[i]).count() > 1)
                .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                .ok_or_else(|| Error::InvalidInput("cannot re-seed empty cluster".into()))?;
            assignments[far] = j;
            dist[far] = 0.0;
            centroids[j] = points[far].clone();
        }
        let mut total = 0.0;
        for (j, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<SpdMatrix> = (0..n)
                .filter(|&i| assignments[i] == j)
                .map(|i| points[i].clone())
                .collect();
            *centroid = karcher_mean(&members, KARCHER_TOL, KARCHER_MAX_ITER)?.mean;
            for m in &members {
                total += geodesic_distance_sq(centroid, m)?;
            }
        }
        objective.push(total);
    }
    Ok(KMeansResult {
        assignments,
        centroids,
        objective,
        iterations,
        converged,
    })
}

/// Fraction of positions where `predicted` equals `truth`.
pub fn overall_accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: predicted.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::InvalidInput("no samples to score".into()));
    }
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Overall accuracy of a clustering under the best one-to-one matching of
/// cluster ids to class ids (exact, by dynamic programming over subsets).
pub fn clustering_accuracy(clusters: &[usize], truth: &[usize]) -> Result<f64> {
    if clusters.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: clusters.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::InvalidInput("no samples to score".into()));
    }
    let ids = |v: &[usize]| {
        let mut u = v.to_vec();
        u.sort_unstable();
        u.dedup();
        u
    };
    let (cs, ts) = (ids(clusters), ids(truth));
    let m = cs.len().max(ts.len());
    if m > 20 {
        return Err(Error::InvalidInput(format!("{m} labels is too many to match exactly")));
    }
    let mut counts = vec![vec![0usize; m]; m];
    for (c, t) in clusters.iter().zip(truth) {
        let i = cs.binary_search(c).unwrap();
        let j = ts.binary_search(t).unwrap();
        counts[i][j] += 1;
    }
    // best[mask] = max matches using the first popcount(mask) clusters
    let mut best = vec![0usize; 1 << m];
    for mask in 0usize..(1 << m) {
        let i = mask.count_ones() as usize;
        if i >= m {
            continue;
        }
        for (j, &cnt) in counts[i].iter().enumerate() {
            if mask & (1 << j) == 0 {
                let next = mask | (1 << j);
                best[next] = best[next].max(best[mask] + cnt);
            }
        }
    }
    Ok(best[(1 << m) - 1] as f64 / truth.len() as f64)
}

/// One synthetic class: Toeplitz shape with correlation `rho`, gamma textures
/// of shape `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub rho: f64,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
}

fn d_alpha() -> f64 {
    1.0
}

/// `per_class` windows of `n_w` samples for every class, in class order.
/// Returns the windows and their labels (class index).
pub fn synthetic_windows<R: Rng + ?Sized>(
    classes: &[ClassSpec],
    per_class: usize,
    p: usize,
    n_w: usize,
    rng: &mut R,
) -> Result<(Vec<Mat>, Vec<usize>)> {
    let mut windows = Vec::with_capacity(classes.len() * per_class);
    let mut labels = Vec::with_capacity(classes.len() * per_class);
    for (label, spec) in classes.iter().enumerate() {
        let cov = toeplitz_scatter(p, spec.rho)?;
        for _ in 0..per_class {
            windows.push(sample_msg(&cov, n_w, TextureLaw::from_alpha(spec.alpha), rng)?.data);
            labels.push(label);
        }
    }
    Ok((windows, labels))
}

/// `count` successive variables starting at a random offset.
pub fn successive_bands<R: Rng + ?Sized>(p: usize, count: usize, rng: &mut R) -> Result<Vec<usize>> {
    if count >= p {
        return Err(Error::Config(format!("cannot remove {count} of {p} bands")));
    }
    let start = rng.random_range(0..=p - count);
    Ok((start..start + count).collect())
}

/// Marks the listed variables missing in every sample of the window.
pub fn mask_bands(window: &Mat, bands: &[usize]) -> Result<IncompleteMatrix> {
    let (p, n) = window.shape();
    if bands.iter().any(|&b| b >= p) {
        return Err(Error::InvalidInput("band index out of range".into()));
    }
    let cells: Vec<(usize, usize)> = (0..n).flat_map(|c| bands.iter().map(move |&b| (b, c))).collect();
    Ok(IncompleteMatrix::complete(window.clone())?.with_missing_cells(&cells))
}

/// Column-stripe missingness: on each listed variable, a random contiguous
/// run of `⌈fraction · n⌉` samples is missing.
pub fn stripe_mask<R: Rng + ?Sized>(
    window: &Mat,
    bands: &[usize],
    fraction: f64,
    rng: &mut R,
) -> Result<IncompleteMatrix> {
    let (p, n) = window.shape();
    if bands.iter().any(|&b| b >= p) || bands.len() >= p {
        return Err(Error::InvalidInput("invalid band list".into()));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidInput(format!("stripe fraction {fraction} outside [0, 1]")));
    }
    let len = ((fraction * n as f64).ceil() as usize).min(n);
    let mut cells = Vec::new();
    for &b in bands {
        let start = rng.random_range(0..=n - len);
        cells.extend((start..start + len).map(|c| (b, c)));
    }
    Ok(IncompleteMatrix::complete(window.clone())?.with_missing_cells(&cells))
}

/// Splits `0..n` into a random training set of `n_train` indices and the rest,
/// both ascending.
pub fn train_test_split<R: Rng + ?Sized>(n: usize, n_train: usize, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let mut train = index::sample(rng, n, n_train.min(n)).into_vec();
    train.sort_unstable();
    let test = (0..n).filter(|i| train.binary_search(i).is_err()).collect();
    (train, test)
}
