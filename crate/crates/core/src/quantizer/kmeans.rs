//! Lloyd's k-means with k-means++ seeding.

use rand::Rng;

use crate::linalg::{nearest_row, squared_distance};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Row-major `k x dim`.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    /// Objective after every assignment step, starting with the seeding.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

/// k-means++ seeding. When every remaining point coincides with a chosen
/// centroid the next one is drawn uniformly, so `k` may exceed the number of
/// distinct points.
pub fn kmeans_plus_plus<R: Rng + ?Sized>(points: &[&[f64]], k: usize, rng: &mut R) -> Vec<f64> {
    assert!(!points.is_empty(), "k-means++ needs at least one point");
    let dim = points[0].len();
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(points[rng.random_range(0..points.len())]);
    let mut nearest: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centroids[..dim]))
        .collect();
    for _ in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = points.len() - 1;
            for (i, d) in nearest.iter().enumerate() {
                acc += d;
                if acc > target && *d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick];
        centroids.extend_from_slice(c);
        for (n, p) in nearest.iter_mut().zip(points) {
            *n = n.min(squared_distance(p, c));
        }
    }
    centroids
}

fn assign(points: &[&[f64]], centroids: &[f64], dim: usize, out: &mut [usize]) -> f64 {
    let mut objective = 0.0;
    for (a, p) in out.iter_mut().zip(points) {
        let (c, d) = nearest_row(p, centroids, dim);
        *a = c;
        objective += d;
    }
    objective
}

/// Lloyd iterations from the given centroids until the assignment stops
/// changing or `max_iters` updates have run. Empty clusters keep their
/// previous centroid.
pub fn lloyd(points: &[&[f64]], mut centroids: Vec<f64>, max_iters: usize) -> KMeansResult {
    let dim = points.first().map_or(0, |p| p.len());
    let k = centroids.len().checked_div(dim).unwrap_or(0);
    let mut assignments = vec![0; points.len()];
    let mut trace = vec![assign(points, &centroids, dim, &mut assignments)];
    let mut iterations = 0;
    let mut next = vec![0; points.len()];
    while iterations < max_iters {
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, s) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
        iterations += 1;
        trace.push(assign(points, &centroids, dim, &mut next));
        if next == assignments {
            break;
        }
        std::mem::swap(&mut assignments, &mut next);
    }
    KMeansResult {
        centroids,
        assignments,
        objective_trace: trace,
        iterations,
    }
}

pub fn kmeans<R: Rng + ?Sized>(points: &[&[f64]], k: usize, max_iters: usize, rng: &mut R) -> KMeansResult {
    let init = kmeans_plus_plus(points, k, rng);
    lloyd(points, init, max_iters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_centroid_is_mean() {
        let data = [[1.0, 2.0], [3.0, 4.0], [5.0, 0.0]];
        let pts: Vec<&[f64]> = data.iter().map(|p| p.as_slice()).collect();
        let r = kmeans(&pts, 1, 10, &mut ChaCha8Rng::seed_from_u64(0));
        assert!((r.centroids[0] - 3.0).abs() < 1e-12);
        assert!((r.centroids[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn more_clusters_than_points() {
        let data = [[1.0], [1.0]];
        let pts: Vec<&[f64]> = data.iter().map(|p| p.as_slice()).collect();
        let r = kmeans(&pts, 4, 10, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(r.centroids.len(), 4);
        assert!(r.centroids.iter().all(|c| *c == 1.0));
    }

    #[test]
    fn objective_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<Vec<f64>> = (0..300).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
        let pts: Vec<&[f64]> = data.iter().map(|p| p.as_slice()).collect();
        let r = kmeans(&pts, 7, 100, &mut rng);
        for w in r.objective_trace.windows(2) {
            assert!(w[1] <= w[0], "{:?}", r.objective_trace);
        }
    }
}
