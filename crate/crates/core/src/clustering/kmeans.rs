use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Output of [`ss_kmeans`].
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after each iteration, in order.
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by squared distance; ties go to the lowest index.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centroids.iter().enumerate() {
        let d = sq_dist(p, mu);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn means(points: &[Vec<f64>], assignments: &[usize], k: usize, dim: usize) -> Vec<Option<Vec<f64>>> {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        counts[a] += 1;
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
        .collect()
}

/// Lloyd's algorithm with some points pinned to clusters.
///
/// `forced[i] = Some(c)` keeps point `i` in cluster `c` throughout. Clusters
/// with forced members start at their members' mean; the rest are seeded by
/// greedy farthest-point selection over the free points, the first pick
/// being drawn from `seed` when nothing has been placed yet. Iterates until
/// no centroid moves by `tol` or more (Euclidean) or `max_iter` is reached.
/// A cluster left empty is re-seeded at the free point farthest from its
/// current centroid; it stays empty when all points coincide with theirs.
pub fn ss_kmeans(
    points: &[Vec<f64>],
    k: usize,
    forced: &[Option<usize>],
    max_iter: usize,
    tol: f64,
    seed: u64,
) -> Result<ClusterResult> {
    let n = points.len();
    if n == 0 {
        return Err(Error::invalid("k-means on an empty point set"));
    }
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k = {k} must lie in [1, {n}]")));
    }
    if forced.len() != n {
        return Err(Error::shape("ss_kmeans forced", &[n], &[forced.len()]));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::invalid("points have unequal dimensions"));
    }
    if let Some(c) = forced.iter().flatten().find(|&&c| c >= k) {
        return Err(Error::invalid(format!("forced cluster {c} >= k = {k}")));
    }

    let free: Vec<usize> = (0..n).filter(|&i| forced[i].is_none()).collect();
    let mut centroids: Vec<Option<Vec<f64>>> = {
        let (members, pinned): (Vec<Vec<f64>>, Vec<usize>) = points
            .iter()
            .zip(forced)
            .filter_map(|(p, f)| f.map(|c| (p.clone(), c)))
            .unzip();
        means(&members, &pinned, k, dim)
    };
    let candidates: &[usize] = if free.is_empty() { &[] } else { &free };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for c in 0..k {
        if centroids[c].is_some() {
            continue;
        }
        let placed: Vec<&Vec<f64>> = centroids.iter().flatten().collect();
        let pick = if placed.is_empty() {
            let pool = if candidates.is_empty() { (0..n).collect::<Vec<_>>() } else { candidates.to_vec() };
            pool[rng.gen_range(0..pool.len())]
        } else {
            let pool: Vec<usize> = if candidates.is_empty() { (0..n).collect() } else { candidates.to_vec() };
            let mut best = (pool[0], f64::NEG_INFINITY);
            for &i in &pool {
                let d = placed.iter().map(|mu| sq_dist(&points[i], mu)).fold(f64::INFINITY, f64::min);
                if d > best.1 {
                    best = (i, d);
                }
            }
            best.0
        };
        centroids[c] = Some(points[pick].clone());
    }
    let mut centroids: Vec<Vec<f64>> = centroids.into_iter().map(|c| c.expect("all placed")).collect();

    let mut assignments: Vec<usize> = forced.iter().map(|f| f.unwrap_or(0)).collect();
    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        for &i in &free {
            assignments[i] = nearest(&points[i], &centroids).0;
        }
        let updated = means(points, &assignments, k, dim);
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let new = match &updated[c] {
                Some(mu) => mu.clone(),
                None => {
                    // empty: take over the free point farthest from its centroid,
                    // unless every point already sits on its centroid
                    let far = free
                        .iter()
                        .copied()
                        .map(|i| (i, sq_dist(&points[i], &centroids[assignments[i]])))
                        .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                            Some((_, bd)) if bd >= d => best,
                            _ => Some((i, d)),
                        });
                    match far {
                        Some((i, d)) if d > 0.0 => {
                            assignments[i] = c;
                            points[i].clone()
                        }
                        _ => centroids[c].clone(),
                    }
                }
            };
            shift = shift.max(sq_dist(&new, &centroids[c]).sqrt());
            centroids[c] = new;
        }
        let inertia = points
            .iter()
            .zip(&assignments)
            .map(|(p, &a)| sq_dist(p, &centroids[a]))
            .sum();
        history.push(inertia);
        if shift < tol {
            break;
        }
    }
    let inertia = *history.last().unwrap_or(&0.0);
    Ok(ClusterResult {
        assignments,
        centroids,
        inertia,
        iterations,
        inertia_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn forced_clusters_start_at_their_members() {
        // Free points far away must not drag the pinned cluster's start.
        let mut points = vec![vec![0.0, 0.0], vec![0.0, 0.1], vec![0.1, 0.0], vec![0.1, 0.1]];
        points.extend((0..10).map(|i| vec![10.0 + 0.1 * i as f64, 0.0]));
        points.push(vec![12.0, 0.0]);
        let mut forced = vec![None; points.len()];
        forced[0] = Some(0);
        forced[1] = Some(0);
        let r = ss_kmeans(&points, 2, &forced, 50, 1e-12, 0).unwrap();
        assert_eq!(&r.assignments[..4], &[0, 0, 0, 0]);
        assert!(r.assignments[4..].iter().all(|&a| a == 1));
    }

    /// Plain Lloyd with the same seeding rule, iterated until assignments settle.
    fn reference_lloyd(points: &[Vec<f64>], k: usize, seed: u64) -> (Vec<usize>, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
        while centroids.len() < k {
            let mut best = (0, -1.0);
            for (i, p) in points.iter().enumerate() {
                let d = centroids.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min);
                if d > best.1 {
                    best = (i, d);
                }
            }
            centroids.push(points[best.0].clone());
        }
        let mut assign = vec![usize::MAX; points.len()];
        loop {
            let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
            for (c, centroid) in centroids.iter_mut().enumerate() {
                let members: Vec<&Vec<f64>> = points.iter().zip(&next).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
                if !members.is_empty() {
                    let mut sum = vec![0.0; points[0].len()];
                    for m in &members {
                        sum.iter_mut().zip(m.iter()).for_each(|(s, v)| *s += v);
                    }
                    *centroid = sum.into_iter().map(|v| v / members.len() as f64).collect();
                }
            }
            if next == assign {
                return (assign, centroids);
            }
            assign = next;
        }
    }

    fn random_points(seed: u64, n: usize, dim: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect()
    }

    fn blobs(seed: u64, per: usize, sigma: f64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut pts = Vec::new();
        let mut ids = Vec::new();
        for (b, center) in [-10.0, 10.0].iter().enumerate() {
            for _ in 0..per {
                pts.push(vec![center + noise.sample(&mut rng), center + noise.sample(&mut rng)]);
                ids.push(b);
            }
        }
        (pts, ids)
    }

    #[test]
    fn all_forced_gives_class_means_in_one_iteration() {
        let pts = vec![vec![0.0], vec![2.0], vec![10.0], vec![14.0]];
        let forced = vec![Some(0), Some(0), Some(1), Some(1)];
        let r = ss_kmeans(&pts, 2, &forced, 50, 1e-9, 0).unwrap();
        assert_eq!(r.centroids, vec![vec![1.0], vec![12.0]]);
        assert_eq!(r.iterations, 1);
        assert_eq!(r.assignments, vec![0, 0, 1, 1]);
    }

    #[test]
    fn separated_blobs_are_recovered() {
        let sigma = 0.1;
        let (pts, ids) = blobs(3, 50, sigma);
        let r = ss_kmeans(&pts, 2, &vec![None; pts.len()], 100, 1e-9, 5).unwrap();
        let same = r.assignments.iter().zip(&ids).filter(|(a, b)| a == b).count();
        assert!(same == pts.len() || same == 0);
        let expected = pts.len() as f64 * 2.0 * sigma * sigma;
        assert!((r.inertia - expected).abs() < 0.3 * expected, "{} vs {}", r.inertia, expected);
    }

    #[test]
    fn forced_point_in_wrong_blob_stays() {
        let (pts, _) = blobs(4, 20, 0.1);
        let mut forced = vec![None; pts.len()];
        forced[0] = Some(1); // sits at -10, forced with the other blob's cluster
        forced[25] = Some(1);
        let r = ss_kmeans(&pts, 2, &forced, 100, 1e-9, 1).unwrap();
        assert_eq!(r.assignments[0], 1);
    }

    #[test]
    fn argument_errors() {
        let pts = vec![vec![0.0], vec![1.0]];
        assert!(ss_kmeans(&pts, 3, &[None, None], 10, 1e-6, 0).is_err());
        assert!(ss_kmeans(&[], 1, &[], 10, 1e-6, 0).is_err());
        assert!(ss_kmeans(&pts, 2, &[Some(2), None], 10, 1e-6, 0).is_err());
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        // three identical points and k = 2: one cluster goes empty on first update
        let pts = vec![vec![0.0], vec![0.0], vec![0.0], vec![5.0]];
        let forced = vec![Some(0), None, None, None];
        let r = ss_kmeans(&pts, 2, &forced, 20, 1e-12, 0).unwrap();
        assert_eq!(r.assignments[3], 1);
        assert_eq!(r.inertia, 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn forced_points_stay_and_inertia_never_rises(
            seed in 0u64..10_000,
            n in 6usize..40,
            k in 2usize..5,
            forced_mask in prop::collection::vec(prop::option::weighted(0.3, 0usize..5), 40),
        ) {
            let pts = random_points(seed, n, 3);
            let forced: Vec<Option<usize>> = forced_mask[..n].iter().map(|f| f.map(|c| c % k)).collect();
            let r = ss_kmeans(&pts, k, &forced, 100, 0.0, seed).unwrap();
            for (i, f) in forced.iter().enumerate() {
                if let Some(c) = f {
                    prop_assert_eq!(r.assignments[i], *c);
                }
            }
            for w in r.inertia_history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9 * w[0].abs());
            }
        }

        #[test]
        fn unconstrained_run_matches_reference_lloyd(seed in 0u64..10_000, n in 5usize..40, k in 1usize..5) {
            let pts = random_points(seed, n, 2);
            let r = ss_kmeans(&pts, k, &vec![None; n], 1000, 0.0, seed).unwrap();
            let (assign, centroids) = reference_lloyd(&pts, k, seed);
            prop_assert_eq!(r.assignments, assign);
            prop_assert_eq!(r.centroids, centroids);
        }
    }
}
