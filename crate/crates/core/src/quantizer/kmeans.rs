use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{nearest, sq_dist, validate_features, CodebookStack, ItemFeatures};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Within-cluster squared error after each assignment step.
    pub errors: Vec<f64>,
}

/// Farthest-point seeding: a seeded first pick, then repeatedly the point
/// farthest from its nearest chosen centroid (ties to the lowest index).
fn seed_centroids(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.random_range(0..points.len());
    let mut centroids = vec![points[first].clone()];
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let mut far = 0;
        for (i, &d) in dist.iter().enumerate() {
            if d > dist[far] {
                far = i;
            }
        }
        let c = points[far].clone();
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd iterations with deterministic seeding and empty-cluster repair.
pub fn kmeans(points: &[Vec<f64>], k: usize, iters: usize, seed: u64) -> Result<KMeansFit> {
    if points.is_empty() {
        return Err(Error::NoItems);
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if iters < 1 {
        return Err(Error::InvalidArgument("iters must be at least 1".into()));
    }
    let dim = points[0].len();
    let mut centroids = seed_centroids(points, k, seed);
    let mut assignments = vec![0; points.len()];
    let mut errors = Vec::with_capacity(iters);

    for it in 0..iters {
        let mut err = 0.0;
        let mut changed = false;
        for (a, p) in assignments.iter_mut().zip(points) {
            let (j, d) = nearest(p, &centroids);
            changed |= *a != j;
            *a = j;
            err += d;
        }
        errors.push(err);
        if it > 0 && !changed {
            break;
        }

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignments.iter().zip(points) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                let mut far = 0;
                let mut far_d = f64::NEG_INFINITY;
                for (i, p) in points.iter().enumerate() {
                    let (_, d) = nearest(p, &centroids);
                    if d > far_d {
                        far = i;
                        far_d = d;
                    }
                }
                centroids[j] = points[far].clone();
            }
        }
    }
    // Final assignment against the returned centroids.
    for (a, p) in assignments.iter_mut().zip(points) {
        *a = nearest(p, &centroids).0;
    }
    Ok(KMeansFit { centroids, assignments, errors })
}

/// Fits one KMeans codebook per layer over the running residuals.
pub fn fit_rq_kmeans(features: &[ItemFeatures], levels: usize, codebook_size: usize, iters: usize, seed: u64) -> Result<CodebookStack> {
    validate_features(features)?;
    if levels == 0 {
        return Err(Error::InvalidArgument("levels must be at least 1".into()));
    }
    let mut residuals: Vec<Vec<f64>> = features.iter().map(|f| f.vector.clone()).collect();
    let mut layers = Vec::with_capacity(levels);
    for l in 0..levels {
        let fit = kmeans(&residuals, codebook_size, iters, seed.wrapping_add(l as u64))?;
        for (r, &a) in residuals.iter_mut().zip(&fit.assignments) {
            for (x, c) in r.iter_mut().zip(&fit.centroids[a]) {
                *x -= c;
            }
        }
        layers.push(fit.centroids);
    }
    CodebookStack::new(layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::{assign_residual, quantize_catalog, Sid};
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    #[test]
    fn two_point_fixpoint() {
        let feats = vec![ItemFeatures::new("a", vec![0.0, 0.0]), ItemFeatures::new("b", vec![10.0, 10.0])];
        let books = fit_rq_kmeans(&feats, 1, 2, 10, 3).unwrap();
        let mut cs = books.layers[0].clone();
        cs.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert_eq!(cs, vec![vec![0.0, 0.0], vec![10.0, 10.0]]);
        for f in &feats {
            let a = assign_residual(&f.vector, &books).unwrap();
            assert!(a.residuals[0].iter().all(|&r| r == 0.0));
        }
    }

    #[test]
    fn single_item_single_code() {
        let feats = vec![ItemFeatures::new("a", vec![2.0, -3.0, 1.0])];
        let books = fit_rq_kmeans(&feats, 3, 1, 5, 0).unwrap();
        assert_eq!(books.layers[0], vec![vec![2.0, -3.0, 1.0]]);
        assert_eq!(books.layers[1], vec![vec![0.0; 3]]);
        assert_eq!(books.layers[2], vec![vec![0.0; 3]]);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let feats: Vec<_> = (0..40)
            .map(|i| {
                let x = i as f64;
                ItemFeatures::new(format!("i{i}"), vec![(x * 0.37).sin() * 5.0, (x * 1.3).cos() * 3.0, x % 7.0])
            })
            .collect();
        let a = fit_rq_kmeans(&feats, 3, 4, 20, 11).unwrap();
        let b = fit_rq_kmeans(&feats, 3, 4, 20, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn more_clusters_than_points_is_fine() {
        let feats = vec![ItemFeatures::new("a", vec![1.0]), ItemFeatures::new("b", vec![1.0])];
        let books = fit_rq_kmeans(&feats, 2, 4, 5, 1).unwrap();
        assert_eq!(books.size(0), 4);
        assert!(books.layers.iter().flatten().flatten().all(|x| x.is_finite()));
    }

    #[test]
    fn argument_errors() {
        assert!(matches!(fit_rq_kmeans(&[], 1, 1, 1, 0), Err(Error::NoItems)));
        let feats = vec![ItemFeatures::new("a", vec![1.0])];
        assert!(fit_rq_kmeans(&feats, 1, 1, 0, 0).is_err());
    }

    #[test]
    fn clustered_catalog_collisions_match_brute_force_grouping() {
        // 8 points in 4 tight pairs, C=2, L=3.
        let centers = [[0.0, 0.0], [0.0, 8.0], [8.0, 0.0], [8.0, 8.0]];
        let mut feats = Vec::new();
        for (i, c) in centers.iter().enumerate() {
            feats.push(ItemFeatures::new(format!("p{i}a"), vec![c[0], c[1]]));
            feats.push(ItemFeatures::new(format!("p{i}b"), vec![c[0] + 0.01 * i as f64, c[1]]));
        }
        let books = fit_rq_kmeans(&feats, 3, 2, 25, 5).unwrap();
        let q = quantize_catalog(&feats, &books).unwrap();

        let mut brute: BTreeMap<Sid, Vec<String>> = BTreeMap::new();
        for f in &feats {
            brute.entry(assign_residual(&f.vector, &books).unwrap().sid).or_default().push(f.item_id.clone());
        }
        let expected: Vec<(Sid, Vec<String>)> = brute
            .into_iter()
            .filter(|(_, v)| v.len() > 1)
            .map(|(s, mut v)| {
                v.sort();
                (s, v)
            })
            .collect();
        assert_eq!(q.collisions, expected);
    }

    proptest! {
        #[test]
        fn lloyd_error_never_increases(
            pts in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 2), 1..40),
            k in 1usize..6,
            seed in 0u64..1000,
        ) {
            let fit = kmeans(&pts, k, 30, seed).unwrap();
            for w in fit.errors.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-9, "{:?}", fit.errors);
            }
        }
    }
}
