mod common;

use proptest::prelude::*;

use robustcov::linalg::SpdMatrix;
use robustcov::rng;
use robustcov::spdml::{
    clustering_accuracy, geometric_mean, kmeanspp_spd, mask_bands, mdrm_train, overall_accuracy, stripe_mask,
    successive_bands, train_test_split, SpdDescriptor,
};

use common::{gaussian_mat, random_invertible, random_spd};

fn stream(seed: u64) -> rng::Rng {
    rng::stream(seed, rng::label("spdml"))
}

/// Points scattered around `k` well separated centers.
fn blobs(p: usize, k: usize, per: usize, r: &mut rng::Rng) -> (Vec<SpdMatrix>, Vec<usize>) {
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    for class in 0..k {
        let center = random_spd(p, r).scaled(4f64.powi(class as i32));
        for _ in 0..per {
            let jitter = random_spd(p, r).scaled(0.05);
            let m = center.as_mat() + jitter.as_mat();
            pts.push(SpdMatrix::new(m).unwrap());
            labels.push(class);
        }
    }
    (pts, labels)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn kmeans_objective_never_increases(p in 2usize..5, k in 1usize..4, per in 2usize..6, seed in any::<u64>()) {
        let (pts, _) = blobs(p, k, per, &mut stream(seed));
        let res = kmeanspp_spd(&pts, k, seed, 50).unwrap();
        for w in res.objective.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-12, "{} then {}", w[0], w[1]);
        }
        prop_assert_eq!(res.assignments.len(), pts.len());
        prop_assert!(res.assignments.iter().all(|&a| a < k));
        prop_assert_eq!(res.centroids.len(), k);
    }

    #[test]
    fn kmeans_is_seed_deterministic(k in 1usize..4, seed in any::<u64>()) {
        let (pts, _) = blobs(3, k, 4, &mut stream(seed));
        let a = kmeanspp_spd(&pts, k, seed, 50).unwrap();
        let b = kmeanspp_spd(&pts, k, seed, 50).unwrap();
        prop_assert_eq!(a.assignments, b.assignments);
        prop_assert_eq!(a.objective, b.objective);
    }

    #[test]
    fn mdrm_predictions_survive_congruence(p in 2usize..5, k in 2usize..4, seed in any::<u64>()) {
        let mut r = stream(seed);
        let (pts, labels) = blobs(p, k, 4, &mut r);
        let m = random_invertible(p, &mut r);
        let train: Vec<SpdDescriptor> = pts
            .iter()
            .zip(&labels)
            .map(|(a, &l)| SpdDescriptor { matrix: a.clone(), label: Some(l), meta: String::new() })
            .collect();
        let moved: Vec<SpdDescriptor> = train
            .iter()
            .map(|d| SpdDescriptor { matrix: d.matrix.congruence(&m).unwrap(), ..d.clone() })
            .collect();
        let model = mdrm_train(&train).unwrap();
        let model_moved = mdrm_train(&moved).unwrap();
        let probes: Vec<SpdMatrix> = (0..6).map(|_| random_spd(p, &mut r)).collect();
        for q in &probes {
            prop_assert_eq!(model.predict(q).unwrap(), model_moved.predict(&q.congruence(&m).unwrap()).unwrap());
        }
    }

    #[test]
    fn clustering_accuracy_ignores_cluster_names(
        truth in prop::collection::vec(0usize..3, 1..30),
        noise in prop::collection::vec(0usize..3, 30),
        shift in 1usize..3,
    ) {
        let clusters: Vec<usize> = truth.iter().zip(&noise).map(|(t, n)| if n % 2 == 0 { *t } else { *n }).collect();
        let renamed: Vec<usize> = clusters.iter().map(|c| (c + shift) % 3).collect();
        let a = clustering_accuracy(&clusters, &truth).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert_eq!(a, clustering_accuracy(&renamed, &truth).unwrap());
        prop_assert!(a >= overall_accuracy(&clusters, &truth).unwrap());
        prop_assert_eq!(clustering_accuracy(&truth, &truth).unwrap(), 1.0);
    }

    #[test]
    fn band_masks_remove_whole_variables(p in 3usize..12, n in 2usize..30, seed in any::<u64>()) {
        let mut r = stream(seed);
        let count = 1 + (seed as usize) % (p - 1);
        let bands = successive_bands(p, count, &mut r).unwrap();
        prop_assert_eq!(bands.len(), count);
        prop_assert!(bands.windows(2).all(|w| w[1] == w[0] + 1));
        let w = gaussian_mat(p, n, &mut r);
        let masked = mask_bands(&w, &bands).unwrap();
        prop_assert_eq!(masked.observed_count(), (p - count) * n);
        for c in 0..n {
            for row in 0..p {
                prop_assert_eq!(masked.is_observed(row, c), !bands.contains(&row));
            }
        }
    }

    #[test]
    fn stripes_are_contiguous_runs(p in 3usize..10, n in 2usize..40, fraction in 0.0f64..=1.0, seed in any::<u64>()) {
        let mut r = stream(seed);
        let bands = successive_bands(p, 2, &mut r).unwrap();
        let w = gaussian_mat(p, n, &mut r);
        let masked = stripe_mask(&w, &bands, fraction, &mut r).unwrap();
        let len = ((fraction * n as f64).ceil() as usize).min(n);
        for row in 0..p {
            let missing: Vec<usize> = (0..n).filter(|&c| !masked.is_observed(row, c)).collect();
            if bands.contains(&row) {
                prop_assert_eq!(missing.len(), len);
                prop_assert!(missing.windows(2).all(|w| w[1] == w[0] + 1));
            } else {
                prop_assert!(missing.is_empty());
            }
        }
    }

    #[test]
    fn split_partitions_the_indices(n in 0usize..60, n_train in 0usize..80, seed in any::<u64>()) {
        let (train, test) = train_test_split(n, n_train, &mut stream(seed));
        prop_assert_eq!(train.len(), n_train.min(n));
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn geometric_mean_sits_between_extremes(values in prop::collection::vec(1e-3f64..1e3, 1..20)) {
        let g = geometric_mean(&values);
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(0.0, f64::max);
        prop_assert!(g >= lo * (1.0 - 1e-12) && g <= hi * (1.0 + 1e-12));
    }
}
