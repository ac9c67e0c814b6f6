//! Lloyd's k-means with k-means++ seeding and a single-point (Hartigan)
//! refinement of the converged partition.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 100;
pub const TOLERANCE: f64 = 1e-6;
/// Independent seedings; the lowest-SSE result is kept.
pub const RESTARTS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub iterations: usize,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(j, c)| (j, dist2(p, c)))
        .fold(
            (0, f64::INFINITY),
            |best, cur| if cur.1 < best.1 { cur } else { best },
        )
}

/// Within-cluster sum of squared distances.
pub fn sse(points: &[Vec<f64>], assignments: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| dist2(p, &centroids[a]))
        .sum()
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[next].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Clusters `points` into `k` groups, best of [`RESTARTS`] runs. Every
/// cluster is non-empty on return: an empty cluster takes the point farthest
/// from its current centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Clustering> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Clustering)> = None;
    for _ in 0..RESTARTS {
        let c = lloyd(points, k, &mut rng)?;
        let cost = sse(points, &c.assignments, &c.centroids);
        if best.as_ref().is_none_or(|(b, _)| cost < *b) {
            best = Some((cost, c));
        }
    }
    Ok(best.expect("at least one restart").1)
}

/// One k-means++ seeding followed by Lloyd iterations.
pub fn lloyd(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Result<Clustering> {
    if k == 0 || k > points.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must be in 1..={}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::InvalidArgument(
            "points have mixed dimensions".into(),
        ));
    }
    let mut centroids = plus_plus_init(points, k, rng);
    let mut assignments = vec![0; points.len()];
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut dists = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            (assignments[i], dists[i]) = nearest(p, &centroids);
        }
        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..points.len())
                    .filter(|&i| counts[assignments[i]] > 1)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("k <= n leaves a cluster with two or more points");
                counts[assignments[far]] -= 1;
                assignments[far] = j;
                counts[j] = 1;
                dists[far] = 0.0;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &a) in points.iter().zip(&assignments) {
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for (j, s) in sums.into_iter().enumerate() {
            let c: Vec<f64> = s.into_iter().map(|v| v / counts[j] as f64).collect();
            shift = shift.max(dist2(&c, &centroids[j]).sqrt());
            centroids[j] = c;
        }
        if shift < TOLERANCE {
            break;
        }
    }
    hartigan_refine(points, &mut assignments, &mut centroids);
    Ok(Clustering {
        assignments,
        centroids,
        iterations,
    })
}

/// Moves single points between clusters while a move strictly lowers the
/// SSE, updating the two affected centroids exactly.
fn hartigan_refine(points: &[Vec<f64>], assignments: &mut [usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    let mut counts = vec![0usize; k];
    for &a in assignments.iter() {
        counts[a] += 1;
    }
    for _ in 0..MAX_ITERATIONS {
        let mut moved = false;
        for (i, p) in points.iter().enumerate() {
            let a = assignments[i];
            if counts[a] < 2 {
                continue;
            }
            let na = counts[a] as f64;
            let removal_gain = na / (na - 1.0) * dist2(p, &centroids[a]);
            let (b, cost) = (0..k)
                .filter(|&b| b != a)
                .map(|b| {
                    let nb = counts[b] as f64;
                    (b, nb / (nb + 1.0) * dist2(p, &centroids[b]))
                })
                .fold(
                    (a, f64::INFINITY),
                    |best, cur| if cur.1 < best.1 { cur } else { best },
                );
            if cost < removal_gain * (1.0 - 1e-12) {
                let nb = counts[b] as f64;
                for d in 0..p.len() {
                    centroids[a][d] = (centroids[a][d] * na - p[d]) / (na - 1.0);
                    centroids[b][d] = (centroids[b][d] * nb + p[d]) / (nb + 1.0);
                }
                counts[a] -= 1;
                counts[b] += 1;
                assignments[i] = b;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
}
